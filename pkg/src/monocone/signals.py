"""Monotone sparsely-varying signals, their change points and segment layout.

Indices exposed by this module are 1-based: a change point ``i`` means
``x(i) > x(i-1)``.  The non-negative variant uses the convention ``x(0) = 0``
so that index 1 can be a change point.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence, Union

import numpy as np


class Variant(str, Enum):
    """Which regularizer the signal class is paired with."""

    PLAIN = "plain"  # f(x) = x(N) - x(1) on monotone x
    NONNEG = "nonneg"  # f(x) = x(N) on monotone x >= 0

    @classmethod
    def coerce(cls, value: Union[str, "Variant"]) -> "Variant":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"variant: expected 'plain' or 'nonneg', got {value!r}") from None


class NotMonotoneError(ValueError):
    """Raised when a signal decreases by more than the allowed tolerance."""

    def __init__(self, index: int, drop: float):
        self.index = index
        self.drop = drop
        super().__init__(f"signal is not monotone: x({index}) < x({index - 1}) by {drop:.3g}")


@dataclass(frozen=True)
class Signal:
    """A real vector of length N >= 1, stored read-only."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float).ravel()
        if arr.size < 1:
            raise ValueError("values: signal must have length >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("values: signal contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def is_monotone(self, tol: float = 0.0, variant: Variant = Variant.PLAIN) -> bool:
        d = _increments(self.values, Variant.coerce(variant))
        return bool(np.all(d >= -tol))

    def to_json(self) -> str:
        return json.dumps(self.values.tolist())

    @classmethod
    def from_json(cls, text: str) -> "Signal":
        data = json.loads(text)
        if not isinstance(data, list):
            raise ValueError("values: expected a JSON array of numbers")
        return cls(np.asarray(data, dtype=float))

    def to_csv(self) -> str:
        return vector_to_csv(self.values)

    @classmethod
    def from_csv(cls, text: str) -> "Signal":
        return cls(vector_from_csv(text))


@dataclass(frozen=True)
class ChangePointSet:
    """Ordered change-point indices ``i_1 < ... < i_k`` of a length-``n`` signal."""

    n: int
    indices: tuple = ()
    variant: Variant = Variant.PLAIN

    def __post_init__(self):
        variant = Variant.coerce(self.variant)
        object.__setattr__(self, "variant", variant)
        n = int(self.n)
        if n < 1:
            raise ValueError(f"n: must be a positive integer, got {self.n}")
        object.__setattr__(self, "n", n)
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices: must be strictly increasing, got {list(idx)}")
        lo = 2 if variant is Variant.PLAIN else 1
        if idx and (idx[0] < lo or idx[-1] > n):
            raise ValueError(f"indices: must lie in [{lo}, {n}] for the {variant.value} variant, got {list(idx)}")
        object.__setattr__(self, "indices", idx)

    @property
    def k(self) -> int:
        return len(self.indices)

    @property
    def last(self) -> int:
        """The last change point ``i_k``."""
        if not self.indices:
            raise ValueError("indices: the change-point set is empty")
        return self.indices[-1]

    def to_dict(self) -> dict:
        return {"n": self.n, "variant": self.variant.value, "indices": list(self.indices)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ChangePointSet":
        for key in ("n", "indices"):
            if key not in data:
                raise ValueError(f"{key}: missing from change-point object")
        return cls(data["n"], tuple(data["indices"]), data.get("variant", "plain"))

    @classmethod
    def from_json(cls, text: str) -> "ChangePointSet":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SegmentPartition:
    """Lengths of the monotone blocks of the descent cone.

    For the plain variant ``lengths`` runs ``l_1..l_k`` with the cyclic wrap
    block last.  For the non-negative variant ``lengths`` holds only the
    interior blocks ``i_j - i_{j-1}`` (j = 2..k), and ``head``/``tail`` hold the
    boundary lengths ``i_1 - 1`` and ``N + 1 - i_k``.  A set with no change
    points gives a partition with ``degenerate=True`` and no lengths.
    """

    n: int
    variant: Variant
    lengths: tuple = ()
    head: int = 0
    tail: int = 0
    degenerate: bool = False

    def total(self) -> int:
        return sum(self.lengths) + self.head + self.tail


def _increments(values: np.ndarray, variant: Variant) -> np.ndarray:
    if variant is Variant.NONNEG:
        return np.diff(values, prepend=0.0)
    return np.diff(values)


def detect_change_points(x, variant: Union[str, Variant] = Variant.PLAIN, tol: float = 0.0) -> ChangePointSet:
    """Return the set of indices where ``x`` jumps up by more than ``tol``.

    Raises
    ------
    NotMonotoneError
        If some increment is below ``-tol``; the first such index is reported.
    """
    variant = Variant.coerce(variant)
    if tol < 0:
        raise ValueError(f"tol: must be non-negative, got {tol}")
    values = x.values if isinstance(x, Signal) else Signal(x).values
    d = _increments(values, variant)
    # d[j] is x(j+2) - x(j+1) for plain, x(j+1) - x(j) for nonneg (1-based)
    offset = 2 if variant is Variant.PLAIN else 1
    bad = np.flatnonzero(d < -tol)
    if bad.size:
        raise NotMonotoneError(int(bad[0]) + offset, float(-d[bad[0]]))
    idx = np.flatnonzero(d > tol) + offset
    return ChangePointSet(values.size, tuple(idx.tolist()), variant)


def segment_partition(cps: ChangePointSet) -> SegmentPartition:
    n, idx = cps.n, cps.indices
    if not idx:
        return SegmentPartition(n, cps.variant, degenerate=True)
    inner = tuple(b - a for a, b in zip(idx, idx[1:]))
    if cps.variant is Variant.PLAIN:
        return SegmentPartition(n, cps.variant, inner + (n + idx[0] - idx[-1],))
    return SegmentPartition(n, cps.variant, inner, head=idx[0] - 1, tail=n + 1 - idx[-1])


# --- random instances ---------------------------------------------------------

Placement = Union[str, Sequence[int]]
JumpLaw = Union[str, Callable[[np.random.Generator, int], np.ndarray]]


def max_change_points(n: int, variant: Union[str, Variant]) -> int:
    return n - 1 if Variant.coerce(variant) is Variant.PLAIN else n


def place_change_points(n: int, k: int, placement: Placement, variant: Union[str, Variant] = Variant.PLAIN,
                        rng: np.random.Generator | None = None) -> ChangePointSet:
    """Choose ``k`` change points of a length-``n`` signal.

    ``placement`` is one of ``"uniform"`` (uniformly random subset),
    ``"equispaced"`` (the worst-case periodic layout), ``"consecutive"`` (the
    best-case layout) or an explicit sequence of indices.
    """
    variant = Variant.coerce(variant)
    if not isinstance(placement, str):
        cps = ChangePointSet(n, tuple(placement), variant)
        if k is not None and cps.k != k:
            raise ValueError(f"k: explicit placement has {cps.k} indices, expected {k}")
        return cps
    kmax = max_change_points(n, variant)
    if not 1 <= k <= kmax:
        raise ValueError(f"k: must be in [1, {kmax}] for n={n} ({variant.value}), got {k}")
    lo = 2 if variant is Variant.PLAIN else 1
    if placement == "uniform":
        if rng is None:
            raise ValueError("seed: uniform placement needs a random generator")
        idx = np.sort(rng.choice(np.arange(lo, n + 1), size=k, replace=False))
        return ChangePointSet(n, tuple(idx.tolist()), variant)
    if placement == "consecutive":
        return ChangePointSet(n, tuple(range(lo, lo + k)), variant)
    if placement == "equispaced":
        return ChangePointSet(n, tuple(_equispaced(n, k, lo)), variant)
    raise ValueError(f"placement: unknown placement {placement!r}")


def _equispaced(n: int, k: int, lo: int) -> list[int]:
    q, r = divmod(n, k)
    # the longest block goes last so the wrap segment can absorb the offset
    lengths = [q] * (k - r) + [q + 1] * r
    start = max(lo, 1 + q // 2)
    if start > lengths[-1]:
        raise ValueError(f"k: no equispaced layout of {k} change points fits n={n}")
    idx = [start]
    for length in lengths[:-1]:
        idx.append(idx[-1] + length)
    return idx


def _jumps(rng: np.random.Generator, k: int, law: JumpLaw) -> np.ndarray:
    if callable(law):
        out = np.asarray(law(rng, k), dtype=float)
    elif law == "unit":
        out = np.ones(k)
    elif law == "uniform":
        out = rng.uniform(0.5, 1.5, size=k)
    elif law == "exponential":
        out = rng.exponential(1.0, size=k) + 1e-3
    else:
        raise ValueError(f"jump_law: unknown law {law!r}")
    if out.shape != (k,) or np.any(out <= 0):
        raise ValueError("jump_law: must produce k strictly positive jump sizes")
    return out


def signal_from_change_points(cps: ChangePointSet, jumps: Iterable[float] | None = None) -> Signal:
    """Piecewise-constant signal that steps up by ``jumps`` at each change point."""
    steps = np.zeros(cps.n)
    j = np.ones(cps.k) if jumps is None else np.asarray(list(jumps), dtype=float)
    steps[np.asarray(cps.indices, dtype=int) - 1] = j
    if cps.variant is Variant.PLAIN:
        steps[0] = 0.0
    return Signal(np.cumsum(steps))


def random_instance(n: int, k: int, placement: Placement = "uniform", jump_law: JumpLaw = "unit",
                    seed=None, variant: Union[str, Variant] = Variant.PLAIN) -> tuple[Signal, ChangePointSet]:
    """Draw a monotone signal with ``k`` change points.

    Deterministic given ``seed`` (an int, a ``SeedSequence`` or a ``Generator``).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cps = place_change_points(n, k, placement, variant, rng)
    return signal_from_change_points(cps, _jumps(rng, cps.k, jump_law)), cps


# --- CSV helpers ----------------------------------------------------------------

def vector_to_csv(values, header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(header + "\n")
    for v in np.asarray(values, dtype=float):
        buf.write(f"{float(v)!r}\n")
    return buf.getvalue()


def vector_from_csv(text: str) -> np.ndarray:
    """Parse a one-column CSV; ``#`` lines and a non-numeric header are skipped."""
    out = []
    rows = [r for r in csv.reader(line for line in text.splitlines() if not line.lstrip().startswith("#")) if r]
    for lineno, row in enumerate(rows, 1):
        if len(row) != 1:
            raise ValueError(f"csv row {lineno}: expected one column, got {len(row)}")
        try:
            out.append(float(row[0]))
        except ValueError:
            if lineno == 1 and not out:
                continue
            raise ValueError(f"csv row {lineno}: not a number: {row[0]!r}") from None
    if not out:
        raise ValueError("csv: no numeric rows")
    return np.asarray(out)
