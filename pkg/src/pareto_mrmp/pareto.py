"""Vector-order toolkit: Kruzhkov transform, Pareto frontiers, epigraphical
profiles and Hausdorff distances.

Time vectors live in ``[0, 1]^N`` after the Kruzhkov transform, with ``1.0``
standing for an infinite (infeasible) arrival time.  Frontiers are stored as
``(k, N)`` float arrays sorted lexicographically.  All entries are quantized to
multiples of ``2**-40`` so that fixed points can be detected by exact equality.
"""
from __future__ import annotations

import logging
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

QUANTUM = 2.0 ** -40
#: frontier cardinality above which a warning is logged (no hard cap)
WARN_CARDINALITY = 256


def quantize(x):
    """Round to the nearest multiple of ``2**-40`` (exactly representable)."""
    return np.round(np.asarray(x, dtype=float) / QUANTUM) * QUANTUM


def kruzhkov(t):
    """Map nonnegative times (``inf`` allowed) onto ``[0, 1]`` via ``1 - exp(-t)``."""
    t = np.asarray(t, dtype=float)
    if np.any(np.isnan(t)) or np.any(t < 0):
        raise ValueError("kruzhkov transform needs nonnegative times")
    out = -np.expm1(-t)
    return out if out.ndim else float(out)


def kruzhkov_inv(tau):
    """Inverse transform ``-log(1 - tau)``; ``tau == 1`` maps to ``inf``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(np.isnan(tau)) or np.any(tau < 0) or np.any(tau > 1):
        raise ValueError("transformed times must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        out = -np.log1p(-tau)
    return out if out.ndim else float(out)


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """Product order: ``a <= b`` componentwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a <= b))


def _as_points(vectors) -> np.ndarray:
    pts = np.asarray(vectors, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1) if pts.size else pts.reshape(0, 1)
    return pts


def frontier_array(points: np.ndarray) -> np.ndarray:
    """Non-dominated, deduplicated rows of ``points`` in lexicographic order.

    Two-objective inputs use a sorted staircase sweep; higher dimensions fall
    back to a pairwise dominance filter.
    """
    pts = _as_points(points)
    k, n = pts.shape
    if k == 0:
        raise ValueError("Pareto frontier of an empty set")
    if k == 1:
        return pts.copy()
    order = np.lexsort(pts.T[::-1])
    pts = pts[order]
    if n == 1:
        return pts[:1].copy()
    if n == 2:
        col = pts[:, 1]
        prev_min = np.minimum.accumulate(np.concatenate(([np.inf], col[:-1])))
        return pts[col < prev_min]
    keep = np.ones(k, dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    pts = pts[keep]
    le = np.all(pts[:, None, :] <= pts[None, :, :], axis=2)
    np.fill_diagonal(le, False)
    # rows are unique, so weak dominance by another row is strict dominance
    dominated = le.any(axis=0)
    return pts[~dominated]


class ParetoSet:
    """Immutable finite set of mutually non-dominated time vectors."""

    __slots__ = ("_points",)

    def __init__(self, points: np.ndarray, *, trusted: bool = False):
        pts = _as_points(points)
        if not trusted:
            pts = frontier_array(pts)
        pts = np.ascontiguousarray(pts, dtype=float)
        pts.setflags(write=False)
        self._points = pts
        if len(pts) > WARN_CARDINALITY:
            log.warning("Pareto set with %d elements", len(pts))

    @classmethod
    def from_vectors(cls, vectors: Iterable[Sequence[float]]) -> "ParetoSet":
        return cls(quantize(_as_points(list(vectors))))

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def dim(self) -> int:
        return self._points.shape[1]

    def __len__(self) -> int:
        return len(self._points)

    def __iter__(self) -> Iterator[tuple]:
        return (tuple(float(v) for v in row) for row in self._points)

    def __contains__(self, t) -> bool:
        t = np.asarray(t, dtype=float)
        return bool(np.any(np.all(self._points == t, axis=1)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParetoSet):
            return NotImplemented
        return np.array_equal(self._points, other._points)

    def __hash__(self) -> int:
        return hash((self._points.shape, self._points.tobytes()))

    def __repr__(self) -> str:
        return f"ParetoSet({[list(p) for p in self]})"

    def to_json(self) -> list:
        return [[float(v) for v in row] for row in self._points]

    @classmethod
    def from_json(cls, data: list) -> "ParetoSet":
        return cls(np.asarray(data, dtype=float))


def pareto_frontier(vectors) -> ParetoSet:
    """Frontier of a finite multiset of time vectors (quantized first)."""
    pts = _as_points(vectors if not isinstance(vectors, ParetoSet) else vectors.points)
    if len(pts) == 0:
        raise ValueError("Pareto frontier of an empty set")
    return ParetoSet(quantize(pts))


def _frontier_points(f) -> np.ndarray:
    return f.points if isinstance(f, ParetoSet) else _as_points(f)


def epi_contains(frontier, t) -> bool:
    """True iff some element of ``frontier`` is componentwise <= ``t``."""
    pts = _frontier_points(frontier)
    t = np.asarray(t, dtype=float)
    return bool(np.any(np.all(pts <= t, axis=1)))


def hausdorff(a, b) -> float:
    """Hausdorff distance between two finite point sets (2-norm)."""
    a = _as_points(a if not isinstance(a, ParetoSet) else a.points)
    b = _as_points(b if not isinstance(b, ParetoSet) else b.points)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Hausdorff distance of an empty set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    d = cdist(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def _directed_profile_gap(a: np.ndarray, b: np.ndarray) -> float:
    # d(p, b + R^N_+) for p = a is ||max(b - p, 0)||; the sup over a's profile
    # is attained on a's minimal elements because the distance to an upper set
    # is non-increasing along the product order.
    gap = np.maximum(b[None, :, :] - a[:, None, :], 0.0)
    return float(np.sqrt((gap ** 2).sum(axis=2)).min(axis=1).max())


def _sampled_profile_gap(a: np.ndarray, b: np.ndarray, samples: int) -> float:
    axis = np.linspace(0.0, 1.0, samples)
    grid = np.stack([m.ravel() for m in np.meshgrid(*([axis] * a.shape[1]), indexing="ij")], axis=1)
    inside = np.all(grid[:, None, :] >= a[None, :, :], axis=2).any(axis=1)
    pts = np.vstack([a, grid[inside]])
    gap = np.maximum(b[None, :, :] - pts[:, None, :], 0.0)
    return float(np.sqrt((gap ** 2).sum(axis=2)).min(axis=1).max())


def frontier_distance(u, v, samples: int | None = None) -> float:
    """Hausdorff distance between the epigraphical profiles of two frontiers.

    The profile of ``u`` is ``(u + R^N_+) ∩ [0, 1]^N``.  By default the
    distance is evaluated in closed form from the frontier points; with
    ``samples`` the profiles are rasterized on a ``samples``-per-axis lattice
    (plus the frontier points themselves), which is slower and only a lower
    bound.
    """
    a = _frontier_points(u)
    b = _frontier_points(v)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("profile distance of an empty frontier")
    if samples is not None:
        if samples < 2:
            raise ValueError("need at least two samples per axis")
        return max(_sampled_profile_gap(a, b, samples), _sampled_profile_gap(b, a, samples))
    return max(_directed_profile_gap(a, b), _directed_profile_gap(b, a))
