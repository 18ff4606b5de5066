"""Denoising of non-negative monotone signals regularized by ``f(x) = x(N)``.

The subdifferential of ``f`` at ``x`` is ``{G^T w : w(i) = 1 on change points,
w(i) <= 1 elsewhere}`` with ``G`` the first-difference matrix (``(Gx)(1) = x(1)``).
This module solves the distance-to-subdifferential quadratic program with a
KKT certificate, gives the closed-form optimal scale, estimates the minimax
risk, and provides the prox (the denoiser itself).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .cones import (CHAIN, NONNEG, BlockLayout, ConeSpec, McEstimate, project, project_with_norms,
                    resolve_seed, shard_rng, sharded_mean)
from .signals import ChangePointSet, Signal, Variant


class QpFailure(RuntimeError):
    """The active-set solver hit its iteration cap."""


# --- the difference operator ------------------------------------------------------

@dataclass(frozen=True)
class DifferenceOperator:
    """First differences ``(Gx)(1) = x(1)``, ``(Gx)(i) = x(i) - x(i-1)``, applied implicitly."""

    n: int

    def apply(self, x):
        return np.diff(np.asarray(x, dtype=float), prepend=0.0)

    def apply_transpose(self, w):
        w = np.asarray(w, dtype=float)
        return w - np.append(w[1:], 0.0)

    def inverse_transpose(self, u):
        """``w`` with ``G^T w = u``: the reversed cumulative sums ``w(j) = sum_{i>=j} u(i)``."""
        return np.cumsum(np.asarray(u, dtype=float)[::-1])[::-1]

    def dense(self) -> np.ndarray:
        return np.eye(self.n) - np.eye(self.n, k=-1)

    def dense_e(self) -> np.ndarray:
        """``(G G^T)^{-1} G``, upper-triangular ones."""
        return np.triu(np.ones((self.n, self.n)))

    def dense_f(self) -> np.ndarray:
        """``(G G^T)^{-1}``, entries ``N - max(i, j) + 1``."""
        i = np.arange(1, self.n + 1)
        return (self.n - np.maximum.outer(i, i) + 1).astype(float)


def operator_identities_check(n: int) -> dict:
    """Check the explicit forms of ``E`` and ``F`` against dense linear algebra."""
    if not 1 <= n <= 50:
        raise ValueError(f"n: dense identity check supports 1 <= n <= 50, got {n}")
    op = DifferenceOperator(n)
    G, E, F = op.dense(), op.dense_e(), op.dense_f()
    ggt = G @ G.T
    report = {
        "n": n,
        "ggt_times_f": float(np.abs(ggt @ F - np.eye(n)).max()),
        "e_equals_f_g": float(np.abs(E - F @ G).max()),
        "e_vs_inverse": float(np.abs(E - np.linalg.solve(ggt, G)).max()),
        "f_vs_inverse": float(np.abs(F - np.linalg.inv(ggt)).max()),
    }
    report["ok"] = max(v for k, v in report.items() if k != "n") <= 1e-10
    return report


# --- the distance QP ----------------------------------------------------------------

@dataclass
class QpSolution:
    w: np.ndarray
    tau: float
    value: float
    lam: np.ndarray
    lam_tau: Optional[float]
    kkt: dict
    iterations: int
    tau_fixed: bool

    @property
    def max_kkt(self) -> float:
        return max(self.kkt.values())


def _require_nonneg(cps: ChangePointSet):
    if cps.variant is not Variant.NONNEG:
        raise ValueError("variant: the denoising machinery needs a nonneg change-point set")
    if cps.k == 0:
        raise ValueError("indices: at least one change point is required (no last change point i_k)")


def dist_qp(g, cps: ChangePointSet, tau: Optional[float] = None, tol: float = 1e-12,
            max_iter: Optional[int] = None) -> QpSolution:
    """Squared distance from ``g`` to ``tau * subdifferential`` (``tau`` free if ``None``).

    Solves ``min ||g - G^T w||^2`` subject to ``w(j) = tau`` on the change points,
    ``w(j) <= tau`` elsewhere and ``tau >= 0`` by a primal active-set method.
    With ``w = v + tau 1`` the objective is ``||g - tau e_N - G^T v||^2`` and the
    equality-constrained subproblems have tridiagonal normal equations.
    """
    _require_nonneg(cps)
    g = np.asarray(g, dtype=float)
    n = cps.n
    if g.shape != (n,):
        raise ValueError(f"g: expected shape ({n},), got {g.shape}")
    free_tau = tau is None
    if not free_tau and tau < 0:
        raise ValueError(f"tau: must be non-negative, got {tau}")
    op = DifferenceOperator(n)
    on_omega = np.zeros(n, dtype=bool)
    on_omega[np.asarray(cps.indices) - 1] = True
    scale = max(1.0, float(np.abs(g).max()))

    v = np.zeros(n)
    t = 0.0 if free_tau else float(tau)
    active = ~on_omega  # working set: v(j) = 0 off the change points
    tau_active = free_tau
    max_iter = max_iter or 20 * n + 100

    for it in range(1, max_iter + 1):
        free = np.flatnonzero(~on_omega & ~active)
        solve_tau = free_tau and not tau_active
        v_new, t_new = _eqp(g, free, solve_tau, t, n)
        step_v = v_new - v
        step_t = t_new - t
        if max(np.abs(step_v).max(initial=0.0), abs(step_t)) <= 1e-14 * scale:
            r = g - t * _e_last(n) - op.apply_transpose(v)
            gr = op.apply(r)
            mult = np.where(active, gr, np.inf)
            j = int(np.argmin(mult))
            worst = mult[j]
            mu_tau = -r[-1] if tau_active else np.inf
            if min(worst, mu_tau) >= -tol * scale:
                break
            if mu_tau < worst:
                tau_active = False
            else:
                active[j] = False
            continue
        alpha, block = 1.0, None
        rising = free[step_v[free] > 0]
        if rising.size:
            ratios = -v[rising] / step_v[rising]
            b = int(np.argmin(ratios))
            if ratios[b] < alpha:
                alpha, block = float(ratios[b]), int(rising[b])
        if solve_tau and step_t < 0 and -t / step_t < alpha:
            alpha, block = -t / step_t, -1
        v = v + alpha * step_v
        t = t + alpha * step_t
        if block == -1:
            t, tau_active = 0.0, True
        elif block is not None:
            v[block], active[block] = 0.0, True
    else:
        raise QpFailure(f"dist_qp: no convergence within {max_iter} iterations")

    v[active | on_omega] = 0.0
    v = np.minimum(v, 0.0)
    w = v + t
    r = g - op.apply_transpose(w)
    lam = op.apply(r)
    lam[~on_omega & ~active] = 0.0
    lam_tau = (-r[-1] if tau_active else 0.0) if free_tau else None
    kkt = kkt_residuals(g, cps, w, t, lam, lam_tau)
    return QpSolution(w, t, float(r @ r), lam, lam_tau, kkt, it, not free_tau)


def _e_last(n):
    e = np.zeros(n)
    e[-1] = 1.0
    return e


def _eqp(g, free, solve_tau, t, n):
    """Minimize ``||g - t e_N - G^T v||^2`` over ``v[free]`` (and ``t`` if ``solve_tau``)."""
    m = free.size + int(solve_tau)
    v = np.zeros(n)
    if m == 0:
        return v, t
    # normal matrix: principal submatrix of tridiag(-1, [1, 2, ..., 2], -1), plus the tau row
    ab = np.zeros((3, m))
    rhs = np.empty(m)
    h = g if solve_tau else g - t * _e_last(n)
    gh = np.diff(h, prepend=0.0)
    if free.size:
        ab[1, : free.size] = np.where(free == 0, 1.0, 2.0)
        adjacent = np.diff(free) == 1
        ab[0, 1: free.size] = np.where(adjacent, -1.0, 0.0)
        ab[2, : free.size - 1] = ab[0, 1: free.size]
        rhs[: free.size] = gh[free]
    if solve_tau:
        ab[1, -1] = 1.0
        if free.size and free[-1] == n - 1:
            ab[0, -1] = 1.0
            ab[2, -2] = 1.0
        rhs[-1] = h[-1]
    z = solve_banded((1, 1), ab, rhs)
    v[free] = z[: free.size]
    return v, (float(z[-1]) if solve_tau else t)


def kkt_residuals(g, cps: ChangePointSet, w, tau, lam, lam_tau=None) -> dict:
    """Residuals of the optimality system of the distance QP.

    ``G G^T w - G g + lam = 0``; ``1^T lam + lam_tau = 0``; ``lam >= 0``, ``w <= tau``
    and ``lam (w - tau) = 0`` off the change points; ``w = tau`` on them;
    ``lam_tau >= 0`` and ``lam_tau tau = 0``.  The ``tau`` rows are skipped when
    ``lam_tau`` is ``None`` (``tau`` held fixed).
    """
    op = DifferenceOperator(cps.n)
    on = np.zeros(cps.n, dtype=bool)
    on[np.asarray(cps.indices) - 1] = True
    off = ~on
    res = {
        "stationarity": float(np.abs(op.apply(op.apply_transpose(w)) - op.apply(g) + lam).max()),
        "equality": float(np.abs(w[on] - tau).max()),
        "primal_feasibility": float(max(0.0, (w[off] - tau).max(initial=-np.inf))),
        "dual_feasibility": float(max(0.0, -lam[off].min(initial=np.inf))),
        "complementarity": float(np.abs(lam[off] * (w[off] - tau)).max(initial=0.0)),
        "tau_feasibility": float(max(0.0, -tau)),
    }
    if lam_tau is not None:
        res["multiplier_sum"] = float(abs(lam.sum() + lam_tau))
        res["tau_dual_feasibility"] = float(max(0.0, -lam_tau))
        res["tau_complementarity"] = float(abs(lam_tau * tau))
    return res


def tau_star(g, i_k: int) -> float:
    """Optimal subdifferential scale: ``max(0, max_{j >= i_k} sum_{n >= j} g(n))``."""
    g = np.asarray(g, dtype=float)
    if not 1 <= i_k <= g.size:
        raise ValueError(f"i_k: must be in [1, {g.size}], got {i_k}")
    tails = np.cumsum(g[i_k - 1:][::-1])
    return max(0.0, float(tails.max()))


# --- fast distances for fixed tau -------------------------------------------------------

def subdifferential_polar_layout(cps: ChangePointSet) -> BlockLayout:
    """Cone ``{y : y(i) >= y(i-1) off the change points, y(0) = 0}``.

    It is the polar of ``{G^T v : v = 0 on change points, v <= 0 elsewhere}``, so
    ``dist(g, tau * subdifferential)^2 = ||proj(g - tau e_N)||^2`` onto it.
    """
    _require_nonneg(cps)
    n, idx = cps.n, [i - 1 for i in cps.indices]
    blocks = [(list(range(0, idx[0])), NONNEG)]
    blocks += [(list(range(a, b)), CHAIN) for a, b in zip(idx, idx[1:] + [n])]
    return BlockLayout.from_blocks(n, blocks)


def dist_sq_fixed_tau(g, cps: ChangePointSet, tau: float, layout: Optional[BlockLayout] = None) -> np.ndarray:
    """Squared distances of each row of ``g`` to ``tau * subdifferential``."""
    layout = layout or subdifferential_polar_layout(cps)
    g = np.atleast_2d(np.asarray(g, dtype=float)).copy()
    g[:, -1] -= tau
    return project_with_norms(g, layout)[1]


# --- random walk maxima -----------------------------------------------------------------

def levy_bound(n: int) -> float:
    """Upper bound ``sqrt(2n/pi)`` on the expected truncated maximum of an ``n``-step walk."""
    if n < 1:
        raise ValueError(f"n: must be >= 1, got {n}")
    return math.sqrt(2.0 * n / math.pi)


def walk_max_expectation(n: int, samples: int = 1_000_000, seed=None, threads=None) -> McEstimate:
    """Monte Carlo estimate of ``E max(0, S_1, ..., S_n)`` for a standard Gaussian walk."""
    if n < 1:
        raise ValueError(f"n: must be >= 1, got {n}")

    def shard(rng, size):
        out = np.empty(size)
        step = max(1, 2_000_000 // n)
        for s in range(0, size, step):
            rows = min(step, size - s)
            walk = rng.standard_normal((rows, n)).cumsum(axis=1)
            out[s: s + rows] = np.maximum(walk.max(axis=1), 0.0)
        return out

    return sharded_mean(shard, samples, seed, threads, shard_size=100_000)


def tau_avg(cps: ChangePointSet, samples: int = 1_000_000, seed=None) -> float:
    """Average optimal scale ``M(N - i_k + 1)``."""
    _require_nonneg(cps)
    return walk_max_expectation(cps.n - cps.last + 1, samples, seed).mean


# --- the denoiser -----------------------------------------------------------------------------

def prox_denoise(y, lam: float, variant=Variant.NONNEG) -> np.ndarray:
    """Minimizer of ``0.5 ||y - x||^2 + lam f(x)``.

    ``f`` is linear on its domain, so the prox is a projection of a shifted
    observation: onto the non-negative chain for ``f = x(N)``, onto the chain
    for ``f = x(N) - x(1)``.  Accepts a batch with one observation per row.
    """
    variant = Variant.coerce(variant)
    if lam < 0:
        raise ValueError(f"lambda: must be non-negative, got {lam}")
    y = np.array(y, dtype=float)
    n = y.shape[-1]
    shifted = y.copy()
    shifted[..., -1] -= lam
    if variant is Variant.NONNEG:
        return project(shifted, ConeSpec.nonneg_chain(n))
    shifted[..., 0] += lam
    return project(shifted, ConeSpec.chain(n))


def prox_certificate(y, x, lam: float, variant=Variant.NONNEG, jump_tol: float = 1e-9) -> dict:
    """Check that ``(y - x) / lam`` is a subgradient of ``f`` at ``x``.

    Writes ``(y - x) / lam = G^T w`` and checks ``w(i) = 1`` where ``x`` jumps and
    ``w(i) <= 1`` where it is flat; for the plain variant additionally
    ``w(1) = 0`` (the first coordinate is unpenalized).  Returns the violations.
    """
    variant = Variant.coerce(variant)
    if lam <= 0:
        raise ValueError(f"lambda: certificate needs lambda > 0, got {lam}")
    y, x = np.asarray(y, dtype=float), np.asarray(x, dtype=float)
    op = DifferenceOperator(x.size)
    w = op.inverse_transpose((y - x) / lam)
    jumps = op.apply(x)
    scale = max(1.0, float(np.abs(x).max()))
    start = 1 if variant is Variant.PLAIN else 0
    jump, flat = jumps[start:] > jump_tol * scale, jumps[start:] <= jump_tol * scale
    ws = w[start:]
    out = {
        "feasibility": float(max(0.0, -jumps[start:].min(initial=np.inf))),
        "jump_equality": float(np.abs(ws[jump] - 1.0).max(initial=0.0)),
        "flat_bound": float(max(0.0, (ws[flat] - 1.0).max(initial=-np.inf))),
    }
    if variant is Variant.PLAIN:
        out["first_free"] = float(abs(w[0]))
    return out


# --- minimax risk -------------------------------------------------------------------------

@dataclass
class RiskEstimate:
    eta_hat: float
    eta_se: float
    tau_opt: float
    tau_avg: float
    tau_grid: np.ndarray
    means: np.ndarray
    std_errors: np.ndarray
    samples: int
    seed: int
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "eta_hat": self.eta_hat,
            "eta_se": self.eta_se,
            "tau_opt": self.tau_opt,
            "tau_avg": self.tau_avg,
            "samples": self.samples,
            "seed": self.seed,
            "grid": [{"tau": float(t), "mean": float(m), "se": float(s)}
                     for t, m, s in zip(self.tau_grid, self.means, self.std_errors)],
            **self.extras,
        }


def default_tau_grid(cps: ChangePointSet, tau_average: float, points: int = 64) -> np.ndarray:
    top = 2.0 * levy_bound(cps.n - cps.last + 1)
    grid = np.geomspace(1e-3 * top, top, points)
    return np.unique(np.concatenate([[0.0, tau_average], grid]))


class _SharedNoise:
    """Regenerates the same Gaussian samples shard by shard (common random numbers)."""

    def __init__(self, n, samples, seed, shard_size=20_000):
        self.n, self.samples, self.seed = n, samples, seed
        self.sizes = [min(shard_size, samples - s) for s in range(0, samples, shard_size)]

    def __iter__(self):
        for j, size in enumerate(self.sizes):
            yield shard_rng(self.seed, j).standard_normal((size, self.n))


def _moments(noise, fn):
    total, sq = 0.0, 0.0
    for g in noise:
        d = fn(g)
        total += d.sum()
        sq += (d * d).sum()
    m = noise.samples
    mean = total / m
    var = max(0.0, (sq - m * mean * mean) / (m - 1)) if m > 1 else float("nan")
    return mean, math.sqrt(var / m)


def minimax_risk(cps: ChangePointSet, tau_grid=None, samples: int = 10_000, seed=None,
                 refine: bool = True, walk_samples: int = 200_000) -> RiskEstimate:
    """Monte Carlo estimate of ``min_tau E dist(g, tau * subdifferential)^2``.

    All grid points share the same Gaussian samples.  With ``refine`` the grid
    minimum is polished by a golden-section search between its neighbours (the
    sample mean is convex in ``tau``) and the refined point joins the grid.
    """
    _require_nonneg(cps)
    seed = resolve_seed(seed)
    t_avg = tau_avg(cps, walk_samples, seed)
    grid = default_tau_grid(cps, t_avg) if tau_grid is None else np.unique(np.asarray(tau_grid, dtype=float))
    if grid.size == 0 or grid.min() < 0:
        raise ValueError("tau_grid: needs at least one non-negative value")
    layout = subdifferential_polar_layout(cps)
    noise = _SharedNoise(cps.n, samples, seed)

    def at(t):
        return _moments(noise, lambda g: dist_sq_fixed_tau(g, cps, t, layout))

    stats = [at(t) for t in grid]
    means = np.array([m for m, _ in stats])
    ses = np.array([s for _, s in stats])
    i = int(np.argmin(means))
    if refine and grid.size >= 3:
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        t_best, m_best = _golden(lambda t: at(t)[0], lo, hi)
        if m_best < means[i]:
            m, s = at(t_best)
            grid = np.append(grid, t_best)
            means, ses = np.append(means, m), np.append(ses, s)
            order = np.argsort(grid)
            grid, means, ses = grid[order], means[order], ses[order]
            i = int(np.argmin(means))
    return RiskEstimate(float(means[i]), float(ses[i]), float(grid[i]), t_avg, grid, means, ses, samples, seed)


def _golden(fn, lo, hi, iters=40):
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = fn(d)
    return (c, fc) if fc <= fd else (d, fd)


def optimal_lambda(cps: ChangePointSet, sigma: float, samples: int = 1_000_000, seed=None,
                   with_minimax: bool = False, risk_samples: int = 10_000) -> dict:
    """Regularizer weight ``lambda = tau_avg * sigma``.

    With ``with_minimax`` also reports ``tau_opt * sigma`` from :func:`minimax_risk`.
    """
    _require_nonneg(cps)
    if sigma < 0:
        raise ValueError(f"sigma: must be non-negative, got {sigma}")
    t_avg = tau_avg(cps, samples, seed)
    out = {"lambda": t_avg * sigma, "tau_avg": t_avg, "sigma": sigma}
    if with_minimax:
        risk = minimax_risk(cps, samples=risk_samples, seed=seed)
        out["lambda_minimax"] = risk.tau_opt * sigma
        out["tau_opt"] = risk.tau_opt
    return out


def empirical_risk(x0, lam_over_sigma: float, sigma: float, draws: int = 10_000, seed=None,
                   variant=Variant.NONNEG) -> McEstimate:
    """Monte Carlo ``E ||prox(x0 + sigma g, lam) - x0||^2 / sigma^2`` with ``lam = lam_over_sigma * sigma``."""
    if sigma <= 0:
        raise ValueError(f"sigma: must be positive, got {sigma}")
    x0 = x0.values if isinstance(x0, Signal) else np.asarray(x0, dtype=float)
    lam = lam_over_sigma * sigma

    def shard(rng, size):
        y = x0 + sigma * rng.standard_normal((size, x0.size))
        err = prox_denoise(y, lam, variant) - x0
        return (err * err).sum(axis=1) / sigma**2

    return sharded_mean(shard, draws, seed)
