"""Compressed-sensing recovery of monotone signals and phase-transition sweeps.

The recovery program ``min f(x) s.t. A x = A x0`` is written in the increments
``z = G x`` (``x = cumsum(z)``), which turns the monotone constraint into
``z >= 0`` and the regularizer into a coordinate sum:

* plain: ``f(x) = x(N) - x(1) = sum_{i >= 2} z_i`` with ``z_1`` free,
* nonneg: ``f(x) = x(N) = sum_i z_i`` with all ``z_i >= 0``.

The LP is handed to HiGHS; the returned point is certified independently
(constraint residual, monotonicity, and the LP optimality conditions).
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .signals import ChangePointSet, Signal, Variant, place_change_points, signal_from_change_points
from .statdim import sd

SUCCESS_TOL = 1e-4
RESIDUAL_TOL = 1e-8
MONOTONE_TOL = 1e-10
STATIONARITY_TOL = 1e-7
MAX_ITER = 100_000


def gaussian_matrix(m: int, n: int, seed=None) -> np.ndarray:
    """``m x n`` matrix of i.i.d. standard normal entries."""
    if m < 1:
        raise ValueError(f"m: need at least one measurement, got {m}")
    if n < 1:
        raise ValueError(f"n: must be positive, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal((m, n))


@dataclass(frozen=True)
class SensingInstance:
    A: np.ndarray
    x0: Signal
    b: np.ndarray

    @classmethod
    def measure(cls, A, x0) -> "SensingInstance":
        x0 = x0 if isinstance(x0, Signal) else Signal(x0)
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[1] != x0.n:
            raise ValueError(f"A: expected {x0.n} columns, got shape {A.shape}")
        return cls(A, x0, A @ x0.values)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]


@dataclass
class RecoveryResult:
    x_hat: Optional[np.ndarray]
    relative_error: float
    success: bool
    converged: bool
    iterations: int
    primal_residual: float
    dual_residual: float
    monotonicity_violation: float
    message: str = ""


def _lp_certificate(c, Aeq, b, z, y, s, free):
    """Relative dual residual of ``c - Aeq^T y - s = 0`` with sign and slackness checks."""
    scale = max(1.0, float(np.abs(c).max()), float(np.abs(Aeq).max()) * max(1.0, float(np.abs(y).max())))
    stat = np.abs(c - Aeq.T @ y - s).max() / scale
    bounded = ~free
    sign = max(0.0, -s[bounded].min(initial=np.inf)) / scale
    slack = np.abs(s[bounded] * z[bounded]).max(initial=0.0) / (scale * max(1.0, float(np.abs(z).max())))
    return float(max(stat, sign, slack, np.abs(s[free]).max(initial=0.0) / scale))


# HiGHS occasionally stalls at the tight tolerances; later attempts trade
# speed for robustness and the certificate still applies to whatever comes back
_ATTEMPTS = (
    ("highs-ds", {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}),
    ("highs-ipm", {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}),
    ("highs", {}),
)


def _linprog(c, Aeq, b, bounds, max_iter):
    res = None
    for method, opts in _ATTEMPTS:
        res = linprog(c, A_eq=Aeq, b_eq=b, bounds=bounds, method=method, options={"maxiter": max_iter, **opts})
        if res.status == 0 and res.x is not None:
            return res
    return res


def solve_monotone_lp(A, b, variant=Variant.PLAIN, max_iter: int = MAX_ITER):
    """Solve ``min f(x) s.t. A x = b`` over monotone ``x``; returns ``(x, result_info)``."""
    variant = Variant.coerce(variant)
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    # A x = A cumsum(z) = (reverse cumulative column sums of A) z
    Az = np.cumsum(A[:, ::-1], axis=1)[:, ::-1]
    c = np.ones(n)
    free = np.zeros(n, dtype=bool)
    if variant is Variant.PLAIN:
        c[0] = 0.0
        free[0] = True
    bounds = [(None, None) if f else (0.0, None) for f in free]
    res = _linprog(c, Az, b, bounds, max_iter)
    if res.status != 0 or res.x is None:
        return None, {"converged": False, "iterations": int(res.nit or 0), "message": res.message,
                      "dual_residual": float("nan")}
    z = res.x.copy()
    z[~free] = np.maximum(z[~free], 0.0)
    s = res.lower.marginals + res.upper.marginals
    dual = _lp_certificate(c, Az, b, z, res.eqlin.marginals, s, free)
    return np.cumsum(z), {"converged": True, "iterations": int(res.nit), "message": res.message,
                          "dual_residual": dual}


def solve_cs(inst: SensingInstance, variant=Variant.PLAIN) -> RecoveryResult:
    """Recover ``x0`` from ``A x0`` by minimizing the restricted total variation."""
    variant = Variant.coerce(variant)
    if inst.m > inst.n:
        raise ValueError(f"m: at most n={inst.n} measurements are supported, got {inst.m}")
    x, info = solve_monotone_lp(inst.A, inst.b, variant)
    return _judge(inst, x, info, lambda v: _monotone_violation(v, variant))


def solve_l1_nonneg(inst: SensingInstance) -> RecoveryResult:
    """Recover a sparse non-negative ``x0`` by ``min 1^T x s.t. A x = b, x >= 0``."""
    n = inst.n
    c = np.ones(n)
    res = _linprog(c, inst.A, inst.b, [(0.0, None)] * n, MAX_ITER)
    if res.status != 0 or res.x is None:
        info = {"converged": False, "iterations": int(res.nit or 0), "message": res.message,
                "dual_residual": float("nan")}
        return _judge(inst, None, info, None)
    x = np.maximum(res.x, 0.0)
    dual = _lp_certificate(c, inst.A, inst.b, x, res.eqlin.marginals, res.lower.marginals, np.zeros(n, bool))
    info = {"converged": True, "iterations": int(res.nit), "message": res.message, "dual_residual": dual}
    return _judge(inst, x, info, lambda v: float(max(0.0, -v.min())))


def _monotone_violation(x, variant):
    d = np.diff(x, prepend=0.0) if variant is Variant.NONNEG else np.diff(x)
    return float(max(0.0, -d.min(initial=np.inf)))


def _judge(inst, x, info, violation) -> RecoveryResult:
    if x is None:
        return RecoveryResult(None, float("nan"), False, False, info["iterations"], float("nan"),
                              float("nan"), float("nan"), str(info["message"]))
    bnorm = max(float(np.linalg.norm(inst.b)), np.finfo(float).tiny)
    primal = float(np.linalg.norm(inst.A @ x - inst.b)) / bnorm
    mono = violation(x)
    certified = primal <= RESIDUAL_TOL and mono <= MONOTONE_TOL and info["dual_residual"] <= STATIONARITY_TOL
    x0 = inst.x0.values
    rel = float(np.linalg.norm(x - x0) / max(float(np.linalg.norm(x0)), np.finfo(float).tiny))
    msg = str(info["message"]) if certified else f"certificate failed: {info['message']}"
    return RecoveryResult(x, rel, certified and rel <= SUCCESS_TOL, certified, info["iterations"], primal,
                          info["dual_residual"], mono, msg)


# --- phase-transition sweeps ---------------------------------------------------------------

@dataclass
class GridRow:
    k: int
    m: int
    trials: int
    successes: int
    nonconverged: int
    sd_mean: float

    @property
    def prob(self) -> float:
        return self.successes / self.trials


@dataclass
class ExperimentGrid:
    n: int
    variant: Variant
    placement: str
    master_seed: int
    rows: list = field(default_factory=list)

    @property
    def m_values(self) -> np.ndarray:
        return np.array([r.m for r in self.rows])

    @property
    def probs(self) -> np.ndarray:
        return np.array([r.prob for r in self.rows])

    @property
    def sd_mean(self) -> float:
        """Closed-form SD averaged over every drawn change-point set."""
        total = sum(r.sd_mean * r.trials for r in self.rows)
        return total / sum(r.trials for r in self.rows)

    def m50(self) -> float:
        """Smallest ``m`` with empirical success probability >= 0.5, linearly interpolated."""
        return crossing(self.m_values, self.probs, 0.5)

    def merge(self, other: "ExperimentGrid") -> "ExperimentGrid":
        """Combine per-shard counts for the same ``(k, m)`` cells."""
        cells = {(r.k, r.m): r for r in self.rows}
        for r in other.rows:
            if (r.k, r.m) in cells:
                a = cells[(r.k, r.m)]
                t = a.trials + r.trials
                cells[(r.k, r.m)] = GridRow(r.k, r.m, t, a.successes + r.successes,
                                            a.nonconverged + r.nonconverged,
                                            (a.sd_mean * a.trials + r.sd_mean * r.trials) / t)
            else:
                cells[(r.k, r.m)] = r
        return ExperimentGrid(self.n, self.variant, self.placement, self.master_seed,
                              [cells[key] for key in sorted(cells)])

    def to_csv(self, emit_ptc: bool = False, meta: Optional[dict] = None) -> str:
        buf = io.StringIO()
        for key, value in (meta or {}).items():
            buf.write(f"# {key}: {value}\n")
        cols = ["k", "m", "trials", "successes", "prob", "nonconverged"] + (["sd"] if emit_ptc else [])
        buf.write(",".join(cols) + "\n")
        for r in self.rows:
            vals = [r.k, r.m, r.trials, r.successes, repr(r.prob), r.nonconverged]
            if emit_ptc:
                vals.append(repr(r.sd_mean))
            buf.write(",".join(str(v) for v in vals) + "\n")
        return buf.getvalue()


def crossing(ms, probs, level: float = 0.5) -> float:
    """First ``m`` at which ``probs`` reaches ``level``, interpolating from the previous point."""
    ms, probs = np.asarray(ms, dtype=float), np.asarray(probs, dtype=float)
    hits = np.flatnonzero(probs >= level)
    if hits.size == 0:
        return float("nan")
    i = int(hits[0])
    if i == 0:
        return float(ms[0])
    p0, p1 = probs[i - 1], probs[i]
    return float(ms[i - 1] + (level - p0) / (p1 - p0) * (ms[i] - ms[i - 1]))


def trial_rng(master_seed: int, m: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, m, trial])


def run_trial(n: int, m: int, k: int, placement, variant, master_seed: int, trial: int,
              solver: str = "monotone") -> tuple[RecoveryResult, float]:
    """One draw of ``(Omega, x0, A)`` and its recovery; also returns the closed-form SD of ``Omega``."""
    variant = Variant.coerce(variant)
    rng = trial_rng(master_seed, m, trial)
    if solver == "l1":
        support = np.sort(rng.choice(n, size=k, replace=False))
        x0 = np.zeros(n)
        x0[support] = 1.0
        inst = SensingInstance.measure(gaussian_matrix(m, n, rng), x0)
        return solve_l1_nonneg(inst), float("nan")
    cps = place_change_points(n, k, placement, variant, rng)
    x0 = signal_from_change_points(cps)
    inst = SensingInstance.measure(gaussian_matrix(m, n, rng), x0)
    return solve_cs(inst, variant), float(sd(cps))


def phase_sweep(n: int, k: int, m_values: Sequence[int], trials: int, master_seed: int = 0,
                placement="uniform", variant=Variant.PLAIN, threads: int = 1,
                solver: str = "monotone") -> ExperimentGrid:
    """Empirical recovery probability for each number of measurements in ``m_values``.

    ``placement`` is a named placement or an explicit index list (fixed across
    trials).  Trial ``t`` at ``m`` is seeded by ``(master_seed, m, t)``, so grids are
    reproducible regardless of ``threads``.  ``solver="l1"`` runs the sparse
    non-negative l1 benchmark with ``k`` non-zeros instead.
    """
    variant = Variant.coerce(variant)
    if trials < 1:
        raise ValueError(f"trials: must be >= 1, got {trials}")
    m_values = [int(m) for m in m_values]
    if not m_values or min(m_values) < 1 or max(m_values) > n:
        raise ValueError(f"m range: must lie within [1, {n}]")
    if not isinstance(placement, str):
        k = len(placement)
    label = placement if isinstance(placement, str) else "explicit"
    grid = ExperimentGrid(n, variant, label if solver == "monotone" else "l1-sparse", master_seed)
    for m in m_values:
        def one(t, m=m):
            return run_trial(n, m, k, placement, variant, master_seed, t, solver)

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(one, range(trials)))
        else:
            results = [one(t) for t in range(trials)]
        succ = sum(r.success for r, _ in results)
        bad = sum(not r.converged for r, _ in results)
        sds = [s for _, s in results]
        grid.rows.append(GridRow(k, m, trials, succ, bad, float(np.mean(sds))))
    return grid


def transition_width(grid: ExperimentGrid, low: float = 0.1, high: float = 0.9) -> float:
    """Distance between the last ``m`` with probability <= ``low`` and the first with >= ``high``."""
    ms, p = grid.m_values, grid.probs
    hi = np.flatnonzero(p >= high)
    lo = np.flatnonzero(p <= low)
    if hi.size == 0 or lo.size == 0:
        return float("inf")
    first_hi = int(hi[0])
    below = lo[lo < first_hi]
    if below.size == 0:
        return float("inf")
    return float(ms[first_hi] - ms[int(below[-1])])


def binomial_se(p: float, trials: int) -> float:
    """Standard error of an empirical proportion, with ``p`` kept off 0 and 1."""
    p = min(max(p, 0.5 / trials), 1 - 0.5 / trials)
    return math.sqrt(p * (1 - p) / trials)
