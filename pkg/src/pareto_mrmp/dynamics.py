"""Set-valued one-step dynamics on a grid stage: successor tables and time increments."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import GridStage, ScheduleError
from .model import control_grid, team_bounds
from .pareto import quantize

DEFAULT_CONTROL_DENSITY = 9
CACHE_VERSION = 1


def alpha(h: float, eps: float, l_plus: float, m_plus: float) -> float:
    """Ball radius that fattens sampled endpoints onto the lattice."""
    return 2 * h + eps * h * l_plus + eps ** 2 * l_plus * m_plus


def kappa(h: float, eps: float) -> float:
    """Minimum positive lattice time increment ``(ceil(eps/h) - 2) h``."""
    if not eps > 2 * h:
        raise ScheduleError(f"temporal resolution must exceed 2h (eps={eps}, h={h})")
    return (math.ceil(eps / h - 1e-9) - 2) * h


def stage_alpha(stage: GridStage) -> float:
    m_plus, l_plus = team_bounds(stage.scenario)
    return alpha(stage.h, stage.eps, l_plus, m_plus)


def step_increment(stage: GridStage) -> float:
    """Transformed per-step increment ``1 - exp(-kappa)``, quantized."""
    return float(quantize(-math.expm1(-kappa(stage.h, stage.eps))))


def robot_increments(stage: GridStage) -> tuple:
    """Per robot: transformed time increment of every lattice node."""
    d = step_increment(stage)
    return tuple(np.where(prox, 0.0, d) for prox in stage.robot_proximate)


def time_increment(stage: GridStage, node: int) -> np.ndarray:
    """Per-robot increment at a joint node: 0 if goal-proximate, else ``1 - exp(-kappa)``."""
    parts = stage.decode(node)
    inc = robot_increments(stage)
    return np.array([inc[i][parts[i]] for i in range(stage.n_robots)])


@dataclass(frozen=True)
class RobotReach:
    """Successor lists of one robot's lattice nodes in CSR form.

    ``succ[ptr[a]:ptr[a+1]]`` are the lattice nodes reachable from node ``a``;
    entry ``e`` of that range is reached by the control samples
    ``ctrl_idx[ctrl_ptr[e]:ctrl_ptr[e+1]]``.  Frozen (goal-proximate) nodes
    list only themselves with no controls.
    """

    ptr: np.ndarray
    succ: np.ndarray
    ctrl_ptr: np.ndarray
    ctrl_idx: np.ndarray
    controls: np.ndarray
    frozen: np.ndarray

    def successors(self, a: int) -> np.ndarray:
        return self.succ[self.ptr[a]:self.ptr[a + 1]]

    def controls_to(self, a: int, b: int) -> np.ndarray:
        """Control sample indices taking node ``a`` into the ball around ``b``."""
        lo, hi = self.ptr[a], self.ptr[a + 1]
        k = lo + np.searchsorted(self.succ[lo:hi], b)
        if k >= hi or self.succ[k] != b:
            return np.zeros(0, dtype=np.int64)
        return self.ctrl_idx[self.ctrl_ptr[k]:self.ctrl_ptr[k + 1]]


def _density_for(robot, density):
    if isinstance(density, dict):
        density = density.get(robot.id, density.get(str(robot.id), DEFAULT_CONTROL_DENSITY))
    return density


def build_reach(stage: GridStage, i: int, density=DEFAULT_CONTROL_DENSITY, allowed=None) -> RobotReach:
    """Per-robot successor table: lattice nodes within ``alpha`` of ``x + eps f(x, u)``."""
    robot = stage.scenario.robots[i]
    lat = stage.lattices[i]
    controls = control_grid(robot, _density_for(robot, density))
    rad = stage_alpha(stage)
    frozen = stage.robot_proximate[i]
    if allowed is None:
        allowed = np.ones(lat.size, dtype=bool)
    moving = np.flatnonzero(~frozen)
    k = len(controls)
    pair_a, pair_b, pair_u = [], [], []
    if len(moving):
        x = lat.coords[moving]
        ends = (x[:, None, :] + stage.eps * robot.velocity(x[:, None, :], controls[None, :, :])).reshape(-1, lat.dim)
        hits = lat.tree.query_ball_point(ends, rad + 1e-12)
        lens = np.fromiter((len(h) for h in hits), dtype=np.int64, count=len(hits))
        b = np.fromiter(itertools.chain.from_iterable(hits), dtype=np.int64, count=int(lens.sum()))
        q = np.repeat(np.arange(len(ends)), lens)
        pair_a.append(moving[q // k])
        pair_u.append(q % k)
        pair_b.append(b)
    fz = np.flatnonzero(frozen)
    pair_a.append(fz)
    pair_b.append(fz)
    pair_u.append(np.full(len(fz), -1, dtype=np.int64))
    a = np.concatenate(pair_a)
    b = np.concatenate(pair_b)
    u = np.concatenate(pair_u)
    keep = allowed[b]
    a, b, u = a[keep], b[keep], u[keep]
    order = np.lexsort((u, b, a))
    a, b, u = a[order], b[order], u[order]
    new_pair = np.ones(len(a), dtype=bool)
    new_pair[1:] = (a[1:] != a[:-1]) | (b[1:] != b[:-1])
    pair_start = np.flatnonzero(new_pair)
    succ_a = a[pair_start]
    succ = b[pair_start]
    ptr = np.zeros(lat.size + 1, dtype=np.int64)
    np.add.at(ptr, succ_a + 1, 1)
    ptr = np.cumsum(ptr)
    real = u >= 0
    ctrl_counts = np.add.reduceat(real.astype(np.int64), pair_start) if len(pair_start) else np.zeros(0, np.int64)
    ctrl_ptr = np.concatenate([[0], np.cumsum(ctrl_counts)]).astype(np.int64)
    ctrl_idx = u[real]
    return RobotReach(ptr, succ, ctrl_ptr, ctrl_idx, controls, frozen.copy())


@dataclass(frozen=True)
class SuccessorSet:
    """Successors of one joint node.

    ``origin`` holds the node's per-robot lattice indices and ``parts`` the
    per-robot indices of every successor in ``nodes``.
    """

    node: int
    nodes: np.ndarray
    frozen: frozenset
    dtau: np.ndarray
    origin: tuple
    parts: np.ndarray
    reaches: tuple

    @property
    def dead_end(self) -> bool:
        return len(self.nodes) == 0

    def control_records(self):
        """Yield ``(team control, successor ids)`` per team control sample.

        Frozen robots contribute no control coordinates.  This enumerates the
        full product of per-robot samples, so it is meant for small queries.
        """
        moving = [i for i in range(len(self.reaches)) if i not in self.frozen]
        if not moving:
            return
        # per moving robot: control index -> set of reachable lattice nodes
        hit = []
        for i in moving:
            r, a = self.reaches[i], self.origin[i]
            table = [set() for _ in range(len(r.controls))]
            for b in r.successors(a):
                for k in r.controls_to(a, int(b)):
                    table[k].add(int(b))
            hit.append(table)
        for combo in itertools.product(*(range(len(self.reaches[i].controls)) for i in moving)):
            ok = np.ones(len(self.nodes), dtype=bool)
            for col, (i, k) in enumerate(zip(moving, combo)):
                ok &= np.isin(self.parts[:, i], list(hit[col][k]))
            u = np.concatenate([self.reaches[i].controls[k] for i, k in zip(moving, combo)])
            yield u, self.nodes[ok].tolist()


class SuccessorCache:
    """Per-robot successor tables for one stage; joint sets assembled on demand."""

    def __init__(self, stage: GridStage, density=DEFAULT_CONTROL_DENSITY):
        self.stage = stage
        self.density = density
        sizes = stage.sizes
        mask = stage.safety_mask.reshape(sizes)
        allowed = []
        for i in range(stage.n_robots):
            other = tuple(ax for ax in range(stage.n_robots) if ax != i)
            allowed.append(mask.any(axis=other) if other else mask.copy())
        self.reaches = tuple(build_reach(stage, i, density, allowed[i]) for i in range(stage.n_robots))
        self.increments = robot_increments(stage)

    @cached_property
    def packed(self):
        """Concatenated per-robot tables in the layout the sweep kernels expect."""
        node_off = np.zeros(self.stage.n_robots + 1, dtype=np.int64)
        ptrs, succs, dts = [], [], []
        base = 0
        for i, r in enumerate(self.reaches):
            node_off[i + 1] = node_off[i] + len(r.ptr) - 1
            ptrs.append(r.ptr[:-1] + base)
            succs.append(r.succ)
            dts.append(self.increments[i])
            base += len(r.succ)
        ptr = np.concatenate(ptrs + [np.array([base], dtype=np.int64)]).astype(np.int64)
        return node_off, ptr, np.concatenate(succs).astype(np.int64), np.concatenate(dts).astype(float)

    def successors(self, node: int) -> SuccessorSet:
        stage = self.stage
        parts = stage.decode(node)
        lists = [self.reaches[i].successors(parts[i]) for i in range(stage.n_robots)]
        frozen = frozenset(i for i in range(stage.n_robots) if self.reaches[i].frozen[parts[i]])
        dtau = np.array([self.increments[i][parts[i]] for i in range(stage.n_robots)])
        if any(len(l) == 0 for l in lists):
            ids = np.zeros(0, dtype=np.int64)
        else:
            mesh = np.stack([m.ravel() for m in np.meshgrid(*lists, indexing="ij")], axis=1)
            ids = stage.encode(mesh)
            ids = np.sort(ids[stage.safety_mask[ids]])
        succ_parts = stage.decode(ids).reshape(len(ids), stage.n_robots)
        return SuccessorSet(int(node), ids, frozen, dtau, tuple(int(p) for p in parts), succ_parts, self.reaches)

    # -- persistence --------------------------------------------------------
    def save(self, path, scenario_hash: str) -> None:
        """Binary cache with a versioned JSON header."""
        header = {"version": CACHE_VERSION, "h": self.stage.h, "eps": self.stage.eps,
                  "density": self.density, "expand": self.stage.expand, "scenario": scenario_hash}
        arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
        for i, r in enumerate(self.reaches):
            for name in ("ptr", "succ", "ctrl_ptr", "ctrl_idx", "controls", "frozen"):
                arrays[f"r{i}_{name}"] = getattr(r, name)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, stage: GridStage, scenario_hash: str, density=DEFAULT_CONTROL_DENSITY) -> "SuccessorCache":
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            expected = {"version": CACHE_VERSION, "h": stage.h, "eps": stage.eps, "density": density,
                        "expand": stage.expand, "scenario": scenario_hash}
            if header != json.loads(json.dumps(expected, sort_keys=True)):
                raise ValueError(f"successor cache header mismatch: {header}")
            reaches = tuple(
                RobotReach(*(data[f"r{i}_{n}"] for n in ("ptr", "succ", "ctrl_ptr", "ctrl_idx", "controls", "frozen")))
                for i in range(stage.n_robots))
        obj = cls.__new__(cls)
        obj.stage, obj.density, obj.reaches = stage, density, reaches
        obj.increments = robot_increments(stage)
        return obj


def successors(stage: GridStage, node: int, density=DEFAULT_CONTROL_DENSITY) -> SuccessorSet:
    """One-off successor query (builds the stage tables)."""
    return SuccessorCache(stage, density).successors(node)
