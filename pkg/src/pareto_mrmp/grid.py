"""Multi-resolution lattices over per-robot and joint state spaces."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .model import TOL, Scenario


class ScheduleError(ValueError):
    """Resolution parameters violate a schedule requirement."""


@dataclass(frozen=True)
class RobotLattice:
    """Axis-aligned lattice ``lo + k h`` covering one robot's state box."""

    lo: tuple
    shape: tuple
    h: float

    @classmethod
    def over_box(cls, box, h: float) -> "RobotLattice":
        shape = []
        for lo, hi in zip(box.lo, box.hi):
            steps = (hi - lo) / h
            k = round(steps)
            if abs(steps - k) > 1e-6:
                raise ScheduleError(f"box extent {hi - lo} is not a multiple of h={h}")
            shape.append(int(k) + 1)
        return cls(tuple(box.lo), tuple(shape), float(h))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @cached_property
    def coords(self) -> np.ndarray:
        axes = [lo + self.h * np.arange(n) for lo, n in zip(self.lo, self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        out = np.stack([m.ravel() for m in mesh], axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.coords)

    def index_of(self, points) -> np.ndarray:
        """Flat indices of points that sit on the lattice (``-1`` otherwise)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        k = (pts - np.asarray(self.lo)) / self.h
        ki = np.round(k).astype(np.int64)
        ok = np.all(np.abs(k - ki) < 1e-6, axis=1) & np.all((ki >= 0) & (ki < np.asarray(self.shape)), axis=1)
        out = np.full(len(pts), -1, dtype=np.int64)
        if ok.any():
            out[ok] = np.ravel_multi_index(tuple(ki[ok].T), self.shape)
        return out

    def within(self, center, radius: float) -> np.ndarray:
        """Sorted flat indices within 2-norm ``radius`` of ``center``."""
        return np.array(sorted(self.tree.query_ball_point(np.asarray(center, dtype=float), radius + 1e-12)),
                        dtype=np.int64)


@dataclass(frozen=True)
class GridStage:
    """One resolution level: per-robot lattices, safety nodes and goal proximity.

    Joint node ids are row-major over the per-robot flat indices, robot 0 most
    significant.
    """

    scenario: Scenario
    index: int
    h: float
    eps: float
    lattices: tuple
    expand: bool = False
    pair_margin: float = 0.0
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    # -- sizes --------------------------------------------------------------
    @property
    def n_robots(self) -> int:
        return len(self.lattices)

    @property
    def sizes(self) -> tuple:
        return tuple(lat.size for lat in self.lattices)

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.sizes))

    @cached_property
    def strides(self) -> np.ndarray:
        sizes = self.sizes
        st = np.ones(len(sizes), dtype=np.int64)
        for i in range(len(sizes) - 2, -1, -1):
            st[i] = st[i + 1] * sizes[i + 1]
        return st

    # -- encoding -----------------------------------------------------------
    def encode(self, per_robot: Sequence) -> np.ndarray | int:
        """Joint id(s) from per-robot flat indices (last axis = robot)."""
        idx = np.asarray(per_robot, dtype=np.int64)
        out = idx @ self.strides
        return int(out) if out.ndim == 0 else out

    def decode(self, node) -> np.ndarray:
        """Per-robot flat indices of joint id(s); shape ``(..., N)``."""
        node = np.asarray(node, dtype=np.int64)
        return np.stack(np.unravel_index(node, self.sizes), axis=-1)

    def node_state(self, node: int) -> list[np.ndarray]:
        """Team state at a joint node as a list of per-robot vectors."""
        parts = self.decode(node)
        return [self.lattices[i].coords[parts[i]].copy() for i in range(self.n_robots)]

    def joint_coords(self, nodes) -> np.ndarray:
        """Concatenated team coordinates for joint ids, shape ``(k, sum d_i)``."""
        parts = self.decode(np.atleast_1d(nodes))
        return np.hstack([self.lattices[i].coords[parts[:, i]] for i in range(self.n_robots)])

    def node_of_state(self, state: Sequence) -> int:
        """Joint id of a team state lying exactly on the lattice (``-1`` if off)."""
        idx = [int(self.lattices[i].index_of(s)[0]) for i, s in enumerate(state)]
        return -1 if min(idx) < 0 else self.encode(idx)

    # -- per-robot tables ---------------------------------------------------
    @cached_property
    def robot_free(self) -> tuple:
        return tuple(np.asarray(self.scenario.in_free(i, lat.coords), dtype=bool)
                     for i, lat in enumerate(self.lattices))

    @cached_property
    def goal_distance(self) -> tuple:
        return tuple(np.asarray(self.scenario.goal_distance(i, lat.coords), dtype=float)
                     for i, lat in enumerate(self.lattices))

    @cached_property
    def proximity_radius(self) -> np.ndarray:
        return np.array([r.speed_bound * self.eps + self.h for r in self.scenario.robots])

    @cached_property
    def robot_proximate(self) -> tuple:
        """Per robot: lattice nodes with ``d(x_i, G_i) <= M_i eps + h``."""
        return tuple(gd <= self.proximity_radius[i] + TOL for i, gd in enumerate(self.goal_distance))

    # -- joint tables -------------------------------------------------------
    def _pairwise_ok(self) -> np.ndarray:
        sizes = self.sizes
        ok = np.ones(sizes, dtype=bool)
        n = self.n_robots
        for i in range(n):
            for j in range(i + 1, n):
                d = np.sqrt(((self.lattices[i].coords[:, None, :] - self.lattices[j].coords[None, :, :]) ** 2).sum(-1))
                shape = [1] * n
                shape[i], shape[j] = sizes[i], sizes[j]
                ok &= (d >= self.scenario.sigma + self.pair_margin - TOL).reshape(shape)
        return ok

    @cached_property
    def safety_mask(self) -> np.ndarray:
        """Flat boolean mask of safety nodes S^p."""
        if self.expand:
            mask = _expanded_safety(self)
        else:
            n = self.n_robots
            mask = self._pairwise_ok()
            for i, free in enumerate(self.robot_free):
                shape = [1] * n
                shape[i] = self.sizes[i]
                mask = mask & free.reshape(shape)
            mask = mask.ravel()
        mask.setflags(write=False)
        return mask

    @cached_property
    def safety_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.safety_mask)

    @cached_property
    def all_proximate_mask(self) -> np.ndarray:
        """Flat mask of nodes where every robot is goal-proximate."""
        mask = np.ones(self.sizes, dtype=bool)
        for i, prox in enumerate(self.robot_proximate):
            shape = [1] * self.n_robots
            shape[i] = self.sizes[i]
            mask = mask & prox.reshape(shape)
        return mask.ravel()

    @cached_property
    def joint_goal_distance(self) -> np.ndarray:
        """Flat array of ``d(x, X^G)`` in the joint 2-norm."""
        sq = np.zeros(self.sizes)
        for i, gd in enumerate(self.goal_distance):
            shape = [1] * self.n_robots
            shape[i] = self.sizes[i]
            sq = sq + (gd ** 2).reshape(shape)
        return np.sqrt(sq).ravel()

    @cached_property
    def safety_tree(self) -> cKDTree:
        return cKDTree(self.joint_coords(self.safety_nodes))

    # -- set queries --------------------------------------------------------
    def goal_proximity_set(self, node: int) -> frozenset:
        parts = self.decode(node)
        return frozenset(i for i in range(self.n_robots) if self.robot_proximate[i][parts[i]])

    def equivalent_nodes(self, node: int) -> np.ndarray:
        """Sorted joint ids differing from ``node`` only in goal-proximate robots."""
        parts = self.decode(node)
        choices = []
        for i in range(self.n_robots):
            if self.robot_proximate[i][parts[i]]:
                choices.append(np.flatnonzero(self.robot_proximate[i]))
            else:
                choices.append(np.array([parts[i]]))
        grid = np.stack([m.ravel() for m in np.meshgrid(*choices, indexing="ij")], axis=1)
        return np.sort(self.encode(grid))

    def nodes_within(self, center, radius: float) -> np.ndarray:
        """Sorted joint ids within joint 2-norm ``radius`` of a team state."""
        if radius < 0:
            raise ValueError("radius must be nonnegative")
        center = [np.asarray(c, dtype=float) for c in center]
        cand, sq = [], []
        for lat, c in zip(self.lattices, center):
            idx = lat.within(c, radius)
            cand.append(idx)
            sq.append(((lat.coords[idx] - c) ** 2).sum(axis=1))
        if any(len(c) == 0 for c in cand):
            return np.zeros(0, dtype=np.int64)
        mesh_idx = np.stack([m.ravel() for m in np.meshgrid(*cand, indexing="ij")], axis=1)
        total = sum(np.meshgrid(*sq, indexing="ij")).ravel()
        keep = total <= radius * radius + 1e-12
        return np.sort(self.encode(mesh_idx[keep]))

    def nearest_node(self, point, restrict=None) -> int:
        """Nearest joint node (2-norm) among ``restrict``; ties go to the lowest id."""
        pt = np.concatenate([np.ravel(np.asarray(p, dtype=float)) for p in point])
        if restrict is None:
            restrict = self.safety_nodes
            tree = self.safety_tree
            d, _ = tree.query(pt)
            hits = tree.query_ball_point(pt, d + 1e-12)
            return int(np.min(restrict[hits]))
        restrict = np.asarray(list(restrict) if not isinstance(restrict, np.ndarray) else restrict, dtype=np.int64)
        if restrict.size == 0:
            raise LookupError("nearest_node over an empty node set")
        d = np.sqrt(((self.joint_coords(restrict) - pt) ** 2).sum(axis=1))
        best = d.min()
        return int(restrict[d <= best + 1e-12].min())


def build_stage(scenario: Scenario, h: float, eps: float, index: int = 0, expand: bool = False,
                pair_margin: float = 0.0) -> GridStage:
    """Lattices with spacing ``h`` over every state box; requires ``eps > 2h``.

    ``pair_margin`` tightens the inter-robot clause of the safety nodes to
    ``sigma + pair_margin``.
    """
    if pair_margin < 0:
        raise ScheduleError("pair margin must be nonnegative")
    if not h > 0:
        raise ScheduleError("h must be positive")
    if not eps > 2 * h:
        raise ScheduleError(f"temporal resolution must exceed 2h (eps={eps}, h={h})")
    lattices = tuple(RobotLattice.over_box(b, h) for b in scenario.state_boxes)
    return GridStage(scenario, index, float(h), float(eps), lattices, expand, float(pair_margin))


def embed(coarse: GridStage, fine: GridStage) -> list[np.ndarray]:
    """Per robot: fine flat index of every coarse lattice node.

    Raises ``ScheduleError`` when the lattices are not nested.
    """
    out = []
    for c, f in zip(coarse.lattices, fine.lattices):
        idx = f.index_of(c.coords)
        if np.any(idx < 0):
            raise ScheduleError("grids are not nested")
        out.append(idx)
    return out


def embed_joint(coarse: GridStage, fine: GridStage) -> np.ndarray:
    """Fine joint id of every coarse joint id."""
    per_robot = embed(coarse, fine)
    mesh = np.meshgrid(*per_robot, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1) @ fine.strides


def _expanded_safety(stage: GridStage) -> np.ndarray:
    """Nodes within joint distance ``h`` of the safety region.

    Probes a finite set of joint offsets of norm <= h, so the result is an
    inner approximation of the exact expansion that always contains S.
    """
    scen = stage.scenario
    dims = [lat.dim for lat in stage.lattices]
    total = sum(dims)
    ticks = np.array([-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0]) * stage.h
    if total <= 4:
        offsets = np.array(list(itertools.product(ticks, repeat=total)))
    else:
        rng = np.random.default_rng(0)
        offsets = rng.uniform(-stage.h, stage.h, size=(4000, total))
        offsets = np.vstack([np.zeros(total), offsets])
    offsets = offsets[np.sqrt((offsets ** 2).sum(1)) <= stage.h + 1e-12]
    mask = np.zeros(stage.n_joint, dtype=bool)
    cut = np.cumsum([0] + dims)
    for off in offsets:
        sizes = stage.sizes
        ok = np.ones(sizes, dtype=bool)
        shifted = [lat.coords + off[cut[i]:cut[i + 1]] for i, lat in enumerate(stage.lattices)]
        for i, pts in enumerate(shifted):
            shape = [1] * len(sizes)
            shape[i] = sizes[i]
            ok &= np.asarray(scen.in_free(i, pts), dtype=bool).reshape(shape)
        for i in range(len(sizes)):
            for j in range(i + 1, len(sizes)):
                d = np.sqrt(((shifted[i][:, None, :] - shifted[j][None, :, :]) ** 2).sum(-1))
                shape = [1] * len(sizes)
                shape[i], shape[j] = sizes[i], sizes[j]
                ok &= (d >= scen.sigma + stage.pair_margin - TOL).reshape(shape)
        mask |= ok.ravel()
    return mask


def coverage_radius(stage: GridStage) -> float:
    """Worst-case distance from a point of the joint box to the lattice."""
    return stage.h * math.sqrt(sum(lat.dim for lat in stage.lattices)) / 2

