"""Euclidean projections onto monotone cones and descent cones.

Every cone handled here is a product of chains: after permuting coordinates,
the cone splits into contiguous blocks, each of which is one of

* a chain ``y_1 <= ... <= y_m`` (isotonic regression, solved by PAVA),
* a non-negative chain ``0 <= y_1 <= ... <= y_m``,
* a non-positive chain ``y_1 <= ... <= y_m <= 0``,
* the line of constant vectors, or the zero cone.

The block layout of a cone is computed once and reused for batches of
vectors, which is what the Monte Carlo statistical-dimension estimates need.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from scipy.optimize import nnls

from .signals import ChangePointSet, Variant

CHAIN, NONNEG, NONPOS, CONST, ZERO = 0, 1, 2, 3, 4


# --- kernels ---------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _pava_segment(src, dst, lo, hi, sums, counts):
    # pool adjacent violators on src[lo:hi]; equal neighbouring means stay separate
    top = -1
    for i in range(lo, hi):
        top += 1
        sums[top] = src[i]
        counts[top] = 1
        while top > 0 and sums[top - 1] * counts[top] > sums[top] * counts[top - 1]:
            sums[top - 1] += sums[top]
            counts[top - 1] += counts[top]
            top -= 1
    pos = lo
    for b in range(top + 1):
        mean = sums[b] / counts[b]
        for _ in range(counts[b]):
            dst[pos] = mean
            pos += 1


@numba.njit(cache=True, nogil=True)
def _project_rows(g, order, bounds, kinds, out, sqnorm):
    rows, n = g.shape
    buf = np.empty(n)
    res = np.empty(n)
    sums = np.empty(n)
    counts = np.empty(n, dtype=np.int64)
    for r in range(rows):
        for p in range(n):
            buf[p] = g[r, order[p]]
        for b in range(kinds.size):
            lo = bounds[b]
            hi = bounds[b + 1]
            kind = kinds[b]
            if kind == 4:
                for p in range(lo, hi):
                    res[p] = 0.0
            elif kind == 3:
                m = 0.0
                for p in range(lo, hi):
                    m += buf[p]
                m /= hi - lo
                for p in range(lo, hi):
                    res[p] = m
            else:
                _pava_segment(buf, res, lo, hi, sums, counts)
                if kind == 1:
                    for p in range(lo, hi):
                        if res[p] < 0.0:
                            res[p] = 0.0
                elif kind == 2:
                    # negate-reverse image of the non-negative chain
                    for p in range(lo, hi):
                        if res[p] > 0.0:
                            res[p] = 0.0
        s = 0.0
        for p in range(n):
            out[r, order[p]] = res[p]
            s += res[p] * res[p]
        sqnorm[r] = s


def pava(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto the non-decreasing chain (isotonic regression)."""
    v = np.ascontiguousarray(v, dtype=float)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("v: expected a non-empty 1-D vector")
    out = np.empty_like(v)
    _pava_segment(v, out, 0, v.size, np.empty(v.size), np.empty(v.size, dtype=np.int64))
    return out


# --- cone descriptions -------------------------------------------------------------

@dataclass(frozen=True)
class BlockLayout:
    """A product of chain-type cones in permuted coordinates.

    ``order[p]`` is the original (0-based) coordinate placed at position ``p``;
    block ``b`` covers positions ``bounds[b]:bounds[b+1]`` and has kind ``kinds[b]``.
    """

    order: np.ndarray
    bounds: np.ndarray
    kinds: np.ndarray

    @property
    def n(self) -> int:
        return self.order.size

    @classmethod
    def from_blocks(cls, n: int, blocks: list[tuple[list[int], int]]) -> "BlockLayout":
        order, bounds, kinds = [], [0], []
        for idx, kind in blocks:
            if not idx:
                continue
            order.extend(idx)
            bounds.append(len(order))
            kinds.append(kind)
        order = np.asarray(order, dtype=np.int64)
        if order.size != n or not np.array_equal(np.sort(order), np.arange(n)):
            raise ValueError("blocks: must partition the coordinates exactly once")
        return cls(order, np.asarray(bounds, dtype=np.int64), np.asarray(kinds, dtype=np.int64))


@dataclass(frozen=True)
class ConeSpec:
    """One of the closed convex cones whose projections this module computes."""

    kind: str
    n: int
    cps: Optional[ChangePointSet] = None

    def __post_init__(self):
        if self.kind not in ("chain", "nonneg_chain", "nonpos_chain", "descent"):
            raise ValueError(f"kind: unknown cone kind {self.kind!r}")
        if self.n < 1:
            raise ValueError(f"n: must be positive, got {self.n}")
        if self.kind == "descent":
            if self.cps is None:
                raise ValueError("cps: a descent cone needs a change-point set")
            if self.cps.n != self.n:
                raise ValueError(f"n: cone dimension {self.n} != change-point set dimension {self.cps.n}")

    @classmethod
    def chain(cls, n: int) -> "ConeSpec":
        return cls("chain", n)

    @classmethod
    def nonneg_chain(cls, n: int) -> "ConeSpec":
        return cls("nonneg_chain", n)

    @classmethod
    def nonpos_chain(cls, n: int) -> "ConeSpec":
        """``y_1 <= ... <= y_n <= 0``: the tail block of the non-negative descent cone."""
        return cls("nonpos_chain", n)

    @classmethod
    def descent(cls, cps: ChangePointSet) -> "ConeSpec":
        return cls("descent", cps.n, cps)

    def layout(self) -> BlockLayout:
        n = self.n
        full = list(range(n))
        if self.kind == "chain":
            return BlockLayout.from_blocks(n, [(full, CHAIN)])
        if self.kind == "nonneg_chain":
            return BlockLayout.from_blocks(n, [(full, NONNEG)])
        if self.kind == "nonpos_chain":
            return BlockLayout.from_blocks(n, [(full, NONPOS)])
        return descent_layout(self.cps)

    def inequalities(self) -> np.ndarray:
        """Rows ``c`` of the explicit description ``{y : C y <= 0}``."""
        n = self.n
        rows = []

        def le(a, b):  # y[a] <= y[b], 0-based, None means the constant 0
            r = np.zeros(n)
            if a is not None:
                r[a] += 1.0
            if b is not None:
                r[b] -= 1.0
            rows.append(r)

        if self.kind in ("chain", "nonneg_chain", "nonpos_chain"):
            for i in range(1, n):
                le(i - 1, i)
            if self.kind == "nonneg_chain":
                le(None, 0)
            elif self.kind == "nonpos_chain":
                le(n - 1, None)
        else:
            cps = self.cps
            omega = set(cps.indices)
            if cps.variant is Variant.PLAIN:
                for i in range(2, n + 1):
                    if i not in omega:
                        le(i - 2, i - 1)
                if n > 1:
                    le(n - 1, 0)
            else:
                for i in range(1, n + 1):
                    if i not in omega:
                        le(i - 2 if i > 1 else None, i - 1)
                le(n - 1, None)
        return np.array(rows).reshape(len(rows), n)


def descent_layout(cps: ChangePointSet) -> BlockLayout:
    """Block layout of the descent cone at a signal with change points ``cps``.

    Plain variant: the wrap block ``y(i_k) <= ... <= y(N) <= y(1) <= ... <= y(i_1 - 1)``
    comes first, i.e. the vector is rotated left by ``i_k - 1`` positions, followed
    by the chains ``[i_j, i_{j+1})``.  Non-negative variant: a non-negative head
    chain ``[1, i_1)``, the interior chains and a non-positive tail chain ``[i_k, N]``.
    """
    n, idx = cps.n, [i - 1 for i in cps.indices]
    if cps.variant is Variant.PLAIN:
        if not idx:
            return BlockLayout.from_blocks(n, [(list(range(n)), CONST)])
        wrap = list(range(idx[-1], n)) + list(range(0, idx[0]))
        blocks = [(wrap, CHAIN)] + [(list(range(a, b)), CHAIN) for a, b in zip(idx, idx[1:])]
        return BlockLayout.from_blocks(n, blocks)
    if not idx:
        return BlockLayout.from_blocks(n, [(list(range(n)), ZERO)])
    blocks = [(list(range(0, idx[0])), NONNEG)]
    blocks += [(list(range(a, b)), CHAIN) for a, b in zip(idx, idx[1:])]
    blocks.append((list(range(idx[-1], n)), NONPOS))
    return BlockLayout.from_blocks(n, blocks)


def _as_layout(cone) -> BlockLayout:
    return cone if isinstance(cone, BlockLayout) else cone.layout()


def project_with_norms(g, cone) -> tuple[np.ndarray, np.ndarray]:
    """Project each row of ``g`` and return ``(projections, squared norms)``."""
    layout = _as_layout(cone)
    g = np.asarray(g, dtype=float)
    single = g.ndim == 1
    g2 = np.ascontiguousarray(np.atleast_2d(g))
    if g2.ndim != 2 or g2.shape[1] != layout.n:
        raise ValueError(f"g: dimension {g2.shape[-1]} does not match cone dimension {layout.n}")
    out = np.empty_like(g2)
    sq = np.empty(g2.shape[0])
    _project_rows(g2, layout.order, layout.bounds, layout.kinds, out, sq)
    return (out[0], sq[0]) if single else (out, sq)


def project(g, cone) -> np.ndarray:
    """Euclidean projection onto ``cone`` (a ``ConeSpec`` or ``BlockLayout``).

    Accepts a single vector or a 2-D batch with one vector per row.
    """
    return project_with_norms(g, cone)[0]


def project_polar(g, cone) -> np.ndarray:
    """Projection onto the polar cone, ``g - project(g, cone)`` by Moreau's decomposition."""
    return np.asarray(g, dtype=float) - project(g, cone)


# --- Monte Carlo statistical dimension -----------------------------------------------

@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    samples: int
    seed: Optional[int]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "samples": self.samples, "seed": self.seed}

    def contains(self, value: float, k: float = 3.0) -> bool:
        return abs(self.mean - value) <= k * self.std_error


SHARD_SIZE = 20_000


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MONOCONE_THREADS", "1")))
    except ValueError:
        raise ValueError("MONOCONE_THREADS: expected a positive integer") from None


def resolve_seed(seed) -> int:
    if seed is None:
        return int(np.random.SeedSequence().entropy % (1 << 63))
    return int(seed)


def shard_rng(seed: int, shard: int) -> np.random.Generator:
    return np.random.default_rng([seed, shard])


def sharded_mean(sample_shard, samples: int, seed, threads: Optional[int] = None,
                 shard_size: int = SHARD_SIZE) -> McEstimate:
    """Mean and standard error of i.i.d. draws produced shard by shard.

    ``sample_shard(rng, size)`` returns an array of ``size`` draws.  The shard
    split depends only on ``samples`` and ``shard_size``, so results do not
    depend on the thread count.
    """
    if samples < 1:
        raise ValueError(f"samples: must be >= 1, got {samples}")
    seed = resolve_seed(seed)
    sizes = [min(shard_size, samples - s) for s in range(0, samples, shard_size)]

    def run(j):
        x = np.asarray(sample_shard(shard_rng(seed, j), sizes[j]), dtype=float)
        return x.size, float(x.mean()), float(((x - x.mean()) ** 2).sum())

    threads = default_threads() if threads is None else threads
    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(j) for j in range(len(sizes))]
    # Chan et al. pairwise merge of (count, mean, M2)
    count, mean, m2 = 0, 0.0, 0.0
    for c, m, s in parts:
        delta = m - mean
        total = count + c
        mean += delta * c / total
        m2 += s + delta * delta * count * c / total
        count = total
    se = math.sqrt(m2 / (count - 1) / count) if count > 1 else float("nan")
    return McEstimate(mean, se, count, seed)


def mc_statdim(cone, samples: int = 100_000, seed=None, threads: Optional[int] = None) -> McEstimate:
    """Monte Carlo estimate of ``E ||proj_C(g)||^2`` for standard normal ``g``."""
    if samples < 100:
        raise ValueError(f"samples: need at least 100, got {samples}")
    layout = _as_layout(cone)

    def shard(rng, size):
        return project_with_norms(rng.standard_normal((size, layout.n)), layout)[1]

    return sharded_mean(shard, samples, seed, threads)


# --- brute-force oracle ------------------------------------------------------------------

class InfeasibleError(ValueError):
    pass


def brute_force_project(g, inequalities, tol: float = 1e-10) -> np.ndarray:
    """Projection onto ``{y : C y <= 0}`` from the explicit inequality matrix ``C``.

    Solves the dual non-negative least-squares problem
    ``min_{mu >= 0} ||g - C^T mu||`` (Lawson-Hanson) and returns ``g - C^T mu``.
    The KKT conditions are checked to ``tol`` relative to ``||g||``.
    Intended as a test oracle for small ``n``.
    """
    g = np.asarray(g, dtype=float)
    C = np.asarray(inequalities, dtype=float).reshape(-1, g.size)
    if g.size > 20:
        raise ValueError(f"g: brute-force oracle is limited to n <= 20, got {g.size}")
    if C.shape[0] == 0:
        return g.copy()
    mu, _ = nnls(C.T, g, maxiter=50 * C.shape[0] + 100)
    y = g - C.T @ mu
    scale = max(1.0, float(np.linalg.norm(g)))
    slack = C @ y
    if slack.max() > tol * scale or abs(mu @ slack) > tol * scale * scale:
        raise InfeasibleError(f"brute-force projection failed its KKT check (violation {slack.max():.3g})")
    return y
