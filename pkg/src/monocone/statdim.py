"""Closed-form statistical dimensions of monotone descent cones.

Also provides the best/worst/average-case curves and the phase-transition
curve of non-negative l1 recovery that the average case is compared against.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import erfc

from .signals import ChangePointSet, Variant, max_change_points, place_change_points, segment_partition

EULER_GAMMA = 0.5772156649015329

_TABLE_MAX = 1 << 20
_DIRECT_MAX = 10**8


class SdValue(float):
    """A statistical dimension, remembering the ambient dimension ``n``."""

    def __new__(cls, value: float, n: int):
        obj = super().__new__(cls, value)
        obj.n = int(n)
        return obj

    @property
    def value(self) -> float:
        return float(self)

    @property
    def normalized(self) -> float:
        return float(self) / self.n

    def __repr__(self) -> str:
        return f"SdValue({float(self)!r}, n={self.n})"


@lru_cache(maxsize=4)
def _harmonic_table(size: int) -> np.ndarray:
    # extended precision keeps the running sum accurate to ~1e-16 relative
    terms = 1.0 / np.arange(1, size + 1, dtype=np.longdouble)
    table = np.empty(size + 1)
    table[0] = 0.0
    table[1:] = np.cumsum(terms).astype(float)
    table.setflags(write=False)
    return table


def harmonic_table(nmax: int) -> np.ndarray:
    """Array ``t`` with ``t[n] = H_n`` for ``0 <= n <= nmax``."""
    if nmax < 0:
        raise ValueError(f"nmax: must be non-negative, got {nmax}")
    size = 1024
    while size < nmax:
        size *= 2
    if size > _TABLE_MAX:
        return np.array([harmonic(i) for i in range(nmax + 1)])
    return _harmonic_table(size)[: nmax + 1]


@lru_cache(maxsize=256)
def _harmonic_direct(n: int) -> float:
    parts = []
    for start in range(1, n + 1, 1 << 20):
        stop = min(n, start + (1 << 20) - 1)
        parts.append(math.fsum(1.0 / np.arange(start, stop + 1, dtype=float)))
    return math.fsum(parts)


def harmonic(n: int) -> float:
    """The harmonic number ``H_n = 1 + 1/2 + ... + 1/n``, with ``H_0 = 0``."""
    n = int(n)
    if n < 0:
        raise ValueError(f"n: must be non-negative, got {n}")
    if n <= _TABLE_MAX:
        return float(_harmonic_table(_TABLE_MAX if n > 1024 else 1024)[n])
    if n <= _DIRECT_MAX:
        return _harmonic_direct(n)
    return math.log(n) + EULER_GAMMA + 1.0 / (2 * n) - 1.0 / (12.0 * n * n)


def _harmonic_sum(lengths) -> float:
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0:
        return 0.0
    if lengths.max() <= _TABLE_MAX:
        return math.fsum(harmonic_table(int(lengths.max()))[lengths])
    return math.fsum(harmonic(int(l)) for l in lengths)


def sd_monotone(cps: ChangePointSet) -> SdValue:
    """Statistical dimension of the descent cone of ``x(N) - x(1)`` (plain variant).

    Equals the sum of ``H_l`` over the cyclic segment lengths.  With no change
    points the descent cone is the line of constant vectors, so the value is 1.
    """
    if cps.variant is not Variant.PLAIN:
        raise ValueError("variant: sd_monotone needs a plain change-point set")
    if cps.k == 0:
        return SdValue(1.0, cps.n)
    return SdValue(_harmonic_sum(segment_partition(cps).lengths), cps.n)


def sd_nonneg(cps: ChangePointSet) -> SdValue:
    """Statistical dimension of the descent cone of ``x(N)`` on non-negative monotone signals.

    ``H_{i_1-1}/2 + H_{N+1-i_k}/2 + sum_j H_{i_j - i_{j-1}}``.  The all-zero
    signal (no change points) has the trivial cone ``{0}``.
    """
    if cps.variant is not Variant.NONNEG:
        raise ValueError("variant: sd_nonneg needs a nonneg change-point set")
    if cps.k == 0:
        return SdValue(0.0, cps.n)
    part = segment_partition(cps)
    value = 0.5 * harmonic(part.head) + 0.5 * harmonic(part.tail) + _harmonic_sum(part.lengths)
    return SdValue(value, cps.n)


def sd(cps: ChangePointSet) -> SdValue:
    """Dispatch to the closed form matching ``cps.variant``."""
    return sd_monotone(cps) if cps.variant is Variant.PLAIN else sd_nonneg(cps)


def sd_extremes(n: int, k: int) -> tuple[SdValue, SdValue]:
    """Best (consecutive) and worst (equispaced) SD over placements of ``k`` change points."""
    if not 1 <= k <= n:
        raise ValueError(f"k: must be in [1, {n}], got {k}")
    best = (k - 1) + harmonic(n + 1 - k)
    q, r = divmod(n, k)
    worst = (k - r) * harmonic(q) + r * harmonic(q + 1)
    return SdValue(best, n), SdValue(worst, n)


def sd_average_asymptotic(eps: float) -> float:
    """Normalized SD averaged over uniformly random change points, as N grows with k/N = eps."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps: must lie in (0, 1), got {eps}")
    return eps * math.log(1.0 / eps) / (1.0 - eps)


def sd_uniform_average(n: int, k: int, samples: int, seed=None, variant=Variant.PLAIN,
                       chunk: int = 1000) -> tuple[float, float]:
    """Monte Carlo mean (and standard error) of the closed-form SD over uniform placements."""
    variant = Variant.coerce(variant)
    kmax = max_change_points(n, variant)
    if not 1 <= k <= kmax:
        raise ValueError(f"k: must be in [1, {kmax}], got {k}")
    rng = np.random.default_rng(seed)
    lo = 2 if variant is Variant.PLAIN else 1
    table = harmonic_table(n + 1)
    vals = []
    for start in range(0, samples, chunk):
        rows = min(chunk, samples - start)
        keys = rng.random((rows, n - lo + 1))
        idx = np.sort(np.argpartition(keys, k - 1, axis=1)[:, :k], axis=1) + lo
        inner = table[np.diff(idx, axis=1)].sum(axis=1)
        if variant is Variant.PLAIN:
            vals.append(inner + table[n + idx[:, 0] - idx[:, -1]])
        else:
            vals.append(inner + 0.5 * table[idx[:, 0] - 1] + 0.5 * table[n + 1 - idx[:, -1]])
    v = np.concatenate(vals)
    se = v.std(ddof=1) / math.sqrt(v.size) if v.size > 1 else float("nan")
    return float(v.mean()), float(se)


def sd_for_placement(n: int, k: int, placement: str, variant=Variant.PLAIN, samples: int = 1000, seed=None) -> float:
    """SD of a named placement; ``uniform`` returns the Monte Carlo average."""
    if placement == "uniform":
        return sd_uniform_average(n, k, samples, seed, variant)[0]
    return float(sd(place_change_points(n, k, placement, variant)))


# --- non-negative l1 comparison curve --------------------------------------------

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gauss_tail(t: float) -> float:
    return 0.5 * erfc(t / _SQRT2)


def _gauss_pdf(t: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * t * t)


def _l1_plus_objective(tau: float, eps: float) -> float:
    # E[(g - tau)_+^2] = (1 + tau^2) Q(tau) - tau phi(tau)
    tail = (1.0 + tau * tau) * _gauss_tail(tau) - tau * _gauss_pdf(tau)
    return eps * (1.0 + tau * tau) + (1.0 - eps) * tail


def nonneg_l1_tau(eps: float) -> float:
    """Minimizing threshold of the non-negative l1 subdifferential distance."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps: must lie in (0, 1), got {eps}")

    # half-derivative of the objective; strictly increasing in tau
    def slope(t):
        return eps * t - (1.0 - eps) * (_gauss_pdf(t) - t * _gauss_tail(t))

    return brentq(slope, 0.0, 10.0, xtol=1e-14, rtol=1e-12, maxiter=500)


def nonneg_l1_ptc(eps: float) -> float:
    """Normalized phase-transition location for sparse non-negative recovery by l1."""
    return _l1_plus_objective(nonneg_l1_tau(eps), eps)


def curves(resolution: int = 2000) -> dict[str, np.ndarray]:
    """Average-case monotone curve, non-negative l1 curve and their difference on a grid."""
    if resolution < 2:
        raise ValueError(f"resolution: need at least 2 points, got {resolution}")
    eps = np.arange(1, resolution + 1) / (resolution + 1)
    delta_u = np.array([sd_average_asymptotic(e) for e in eps])
    l1_plus = np.array([nonneg_l1_ptc(e) for e in eps])
    return {"eps": eps, "delta_u": delta_u, "l1_plus": l1_plus, "diff": l1_plus - delta_u}


def curve_difference_max(resolution: int = 1000) -> tuple[float, float]:
    """Location and size of the largest gap between the l1 curve and the average monotone curve.

    The grid maximum is polished with a bounded scalar search over the two
    neighbouring grid cells.
    """
    if resolution < 1000:
        raise ValueError(f"resolution: need at least 1000 grid points, got {resolution}")
    c = curves(resolution)
    i = int(np.argmax(c["diff"]))
    eps = c["eps"]
    lo = eps[i - 1] if i > 0 else eps[i] / 2
    hi = eps[i + 1] if i + 1 < eps.size else (eps[i] + 1) / 2
    res = minimize_scalar(lambda e: -(nonneg_l1_ptc(e) - sd_average_asymptotic(e)),
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    if -res.fun >= c["diff"][i]:
        return float(res.x), float(-res.fun)
    return float(eps[i]), float(c["diff"][i])
