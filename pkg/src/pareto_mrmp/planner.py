"""Multi-stage Pareto value iteration with policy extraction."""
from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .dynamics import DEFAULT_CONTROL_DENSITY, SuccessorCache, SuccessorSet, alpha, kappa
from .grid import GridStage, ScheduleError, build_stage, embed, embed_joint
from .model import Scenario, team_bounds
from .pareto import ParetoSet, quantize

log = logging.getLogger(__name__)

DEFAULT_MAX_SWEEPS = 200


# ---------------------------------------------------------------- values --

class ValueFunction:
    """Map from joint node to a Pareto set, stored in CSR form."""

    def __init__(self, stage: GridStage, off: np.ndarray, pts: np.ndarray, sweeps: int = 0):
        self.stage = stage
        self.off = np.ascontiguousarray(off, dtype=np.int64)
        self.pts = np.ascontiguousarray(pts, dtype=float).reshape(-1, stage.n_robots)
        self.sweeps = sweeps

    @classmethod
    def from_points(cls, stage: GridStage, points: np.ndarray) -> "ValueFunction":
        """One point per node from an ``(n_joint, N)`` array."""
        n = stage.n_joint
        return cls(stage, np.arange(n + 1, dtype=np.int64), np.asarray(points, dtype=float).reshape(n, -1))

    @classmethod
    def from_sets(cls, stage: GridStage, sets: Sequence) -> "ValueFunction":
        arrays = [ParetoSet(np.asarray(s.points if isinstance(s, ParetoSet) else s, dtype=float)).points
                  for s in sets]
        off = np.concatenate([[0], np.cumsum([len(a) for a in arrays])])
        return cls(stage, off, np.vstack(arrays))

    def frontier(self, node: int) -> np.ndarray:
        return self.pts[self.off[node]:self.off[node + 1]]

    def __getitem__(self, node: int) -> ParetoSet:
        return ParetoSet(self.frontier(int(node)), trusted=True)

    def __len__(self) -> int:
        return len(self.off) - 1

    def same_as(self, other: "ValueFunction") -> bool:
        return np.array_equal(self.off, other.off) and np.array_equal(self.pts, other.pts)

    def copy(self) -> "ValueFunction":
        return ValueFunction(self.stage, self.off.copy(), self.pts.copy(), self.sweeps)

    def sizes(self) -> np.ndarray:
        return np.diff(self.off)


def _assemble(n_joint: int, node_ids: np.ndarray, pts: np.ndarray, n_rob: int) -> tuple:
    """CSR from (node id, point) rows; rows of a node keep their input order."""
    order = np.argsort(node_ids, kind="stable")
    counts = np.bincount(node_ids, minlength=n_joint)
    off = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return off, pts[order].reshape(-1, n_rob)


def set_distance_rms(a: ValueFunction, b: ValueFunction, nodes: np.ndarray) -> float:
    """``sqrt(sum_x d_H(a(x), b(x))^2)`` over ``nodes`` (point-set distance)."""
    if len(nodes) == 0:
        return 0.0
    d = K.node_hausdorff(np.asarray(nodes, dtype=np.int64), a.off, a.pts, b.off, b.pts)
    return float(np.sqrt((d ** 2).sum()))


def sup_frontier_distance(a: ValueFunction, b: ValueFunction, nodes: np.ndarray) -> float:
    """Largest profile distance over ``nodes``."""
    if len(nodes) == 0:
        return 0.0
    return float(K.node_profile_distance(np.asarray(nodes, dtype=np.int64), a.off, a.pts, b.off, b.pts).max())


# -------------------------------------------------------------- schedule --

@dataclass(frozen=True)
class StageSpec:
    h: float
    eps: float
    n: int | None = None


@dataclass(frozen=True)
class Schedule:
    """Resolution sequence with optional per-stage sweep budgets."""

    stages: tuple
    gamma: float = 0.5
    window: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    @classmethod
    def dyadic(cls, h0: float, count: int, eps_rule: str = "sqrt_h", scenario: Scenario | None = None,
               gamma: float = 0.5, window: int = 1) -> "Schedule":
        hs = [h0 / 2 ** k for k in range(count)]
        return cls.from_h(hs, eps_rule, scenario, gamma=gamma, window=window)

    @classmethod
    def from_h(cls, hs: Sequence[float], eps_rule="sqrt_h", scenario: Scenario | None = None,
               n: Sequence[int] | None = None, gamma: float = 0.5, window: int = 1) -> "Schedule":
        eps = eps_values(hs, eps_rule, scenario)
        n = list(n) if n is not None else [None] * len(hs)
        return cls(tuple(StageSpec(float(h), float(e), k) for h, e, k in zip(hs, eps, n)), gamma, window)

    def validate(self, scenario: Scenario | None = None) -> None:
        if not self.stages:
            raise ScheduleError("schedule has no stages")
        for s in self.stages:
            if not s.eps > 2 * s.h:
                raise ScheduleError(f"temporal resolution must exceed 2h at h={s.h}")
        for a, b in zip(self.stages, self.stages[1:]):
            if not (b.h < a.h and b.eps <= a.eps and b.h / b.eps <= a.h / a.eps + 1e-12):
                raise ScheduleError("eps and h/eps must decrease monotonically along the schedule")
        if scenario is not None:
            m_plus, l_plus = team_bounds(scenario)
            for a, b in zip(self.stages, self.stages[1:]):
                if alpha(b.h, b.eps, l_plus, m_plus) < a.h - 1e-12:
                    raise ScheduleError(f"fattening radius at h={b.h} is below the previous spacing {a.h}")
        if not 0 < self.gamma < 1:
            raise ScheduleError("gamma must lie in (0, 1)")

    def budgets(self) -> list[int]:
        """Per-stage sweep budgets, filling gaps from the window rule."""
        auto = schedule_iterations([kappa(s.h, s.eps) for s in self.stages], self.gamma, self.window)
        return [s.n if s.n is not None else a for s, a in zip(self.stages, auto)]

    def to_json(self) -> dict:
        return {"h": [s.h for s in self.stages], "eps": [s.eps for s in self.stages],
                "n": [s.n for s in self.stages], "gamma": self.gamma, "window": self.window}


def eps_values(hs: Sequence[float], rule, scenario: Scenario | None = None) -> list[float]:
    """Temporal resolutions from a rule name or an explicit list."""
    if not isinstance(rule, str):
        vals = [float(e) for e in rule]
        if len(vals) != len(hs):
            raise ScheduleError("need one eps per stage")
        return vals
    if rule == "sqrt_h":
        return [math.sqrt(h) for h in hs]
    if rule == "sqrt_h_over_m":
        if scenario is None:
            raise ScheduleError("eps rule sqrt_h_over_m needs the scenario")
        m_plus, _ = team_bounds(scenario)
        return [math.sqrt(h / m_plus) for h in hs]
    raise ScheduleError(f"unknown eps rule {rule!r}")


def schedule_iterations(kappas: Sequence[float], gamma: float, window: int = 1) -> list[int]:
    """Smallest uniform sweep count per window with ``exp(-sum n kappa) <= gamma``."""
    if not 0 < gamma < 1:
        raise ScheduleError("gamma must lie in (0, 1)")
    if window < 1:
        raise ScheduleError("window must contain at least one stage")
    out = []
    for start in range(0, len(kappas), window):
        chunk = kappas[start:start + window]
        total = sum(chunk)
        n = max(1, math.ceil(math.log(1 / gamma) / total - 1e-12))
        out.extend([n] * len(chunk))
    return out


# --------------------------------------------------------------- options --

@dataclass(frozen=True)
class PlanOptions:
    """Planner knobs.

    Attributes:
        control_density: control samples per control dimension.
        expand_safety: fatten the safety node set by ``h``.
        stop: ``"reldiff"``, ``"budget"`` or ``"fixed"``.
        threshold: relative-difference threshold for ``"reldiff"``.
        max_sweeps: hard cap on sweeps per stage.
        init_mode: ``"union"`` or ``"representative"`` for new-node initialization.
        initial: ``"interpolate"`` (default) or ``"zero"`` (every safety node starts at 0).
        goal_exclusion: ``"all_proximate"`` or ``"joint_ball"``.
        node_budget: refuse stages with more joint nodes than this.
        pair_margin: extra inter-robot clearance demanded of safety nodes.
        threads: sweep workers (defaults to ``PARETO_MRMP_THREADS`` or 1).
        keep_history: retain every sweep's value function.
    """

    control_density: object = DEFAULT_CONTROL_DENSITY
    expand_safety: bool = False
    stop: str = "reldiff"
    threshold: float = 0.1
    max_sweeps: int = DEFAULT_MAX_SWEEPS
    init_mode: str = "union"
    initial: str = "interpolate"
    goal_exclusion: str = "all_proximate"
    node_budget: int = 2_000_000
    pair_margin: float = 0.0
    threads: int | None = None
    keep_history: bool = False

    def __post_init__(self):
        if self.stop not in ("reldiff", "budget", "fixed"):
            raise ScheduleError(f"unknown stopping rule {self.stop!r}")
        if self.init_mode not in ("union", "representative"):
            raise ScheduleError(f"unknown init mode {self.init_mode!r}")
        if self.initial not in ("interpolate", "zero"):
            raise ScheduleError(f"unknown initial value rule {self.initial!r}")
        if self.goal_exclusion not in ("all_proximate", "joint_ball"):
            raise ScheduleError(f"unknown goal exclusion {self.goal_exclusion!r}")

    def worker_count(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        return max(1, int(os.environ.get("PARETO_MRMP_THREADS", "1")))


# ---------------------------------------------------------------- policy --

@dataclass(frozen=True)
class PolicyEntry:
    """One solution of the last Bellman update at a node.

    ``controls[i]`` lists robot ``i``'s control samples that reach the
    successor's ``i``-th coordinate, or is ``None`` for a frozen robot.
    """

    successor: int
    tau: tuple
    controls: tuple

    @property
    def n_team_controls(self) -> int:
        return int(np.prod([len(c) for c in self.controls if c is not None] or [1]))


class PolicyTable:
    """Solutions of the final sweep, per node, in CSR form."""

    def __init__(self, stage: GridStage, cache: SuccessorCache, value: ValueFunction,
                 off: np.ndarray, succ: np.ndarray, val: np.ndarray):
        self.stage = stage
        self.cache = cache
        self.value = value
        self.off, self.succ, self.val = off, succ, val

    def __len__(self) -> int:
        return int(self.off[-1])

    def has_entries(self, node: int) -> bool:
        return self.off[node + 1] > self.off[node]

    def entries(self, node: int) -> list[PolicyEntry]:
        node = int(node)
        parts = self.stage.decode(node)
        frontier = self.value.frontier(node)
        out = []
        for k in range(self.off[node], self.off[node + 1]):
            s = int(self.succ[k])
            sp = self.stage.decode(s)
            ctrl = []
            for i, r in enumerate(self.cache.reaches):
                if r.frozen[parts[i]]:
                    ctrl.append(None)
                else:
                    ctrl.append(r.controls[r.controls_to(int(parts[i]), int(sp[i]))])
            out.append(PolicyEntry(s, tuple(float(v) for v in frontier[self.val[k]]), tuple(ctrl)))
        return out

    def team_controls(self, node: int) -> list[tuple]:
        """Every ``(team control, successor, tau)`` triple; frozen robots get ``None``."""
        out = []
        for e in self.entries(node):
            options = [c if c is not None else [None] for c in e.controls]
            grids = np.meshgrid(*[np.arange(len(o)) for o in options], indexing="ij")
            for combo in zip(*(g.ravel() for g in grids)):
                out.append((tuple(o[k] for o, k in zip(options, combo)), e.successor, e.tau))
        return out

    def choose(self, node: int, rng: np.random.Generator, by_entry: bool = False) -> tuple[list, PolicyEntry] | None:
        """Uniform draw over ``(team control, successor, tau)`` triples, or over
        ``(successor, tau)`` entries when ``by_entry`` is set."""
        entries = self.entries(node)
        if not entries:
            return None
        weights = np.array([1 if by_entry else e.n_team_controls for e in entries], dtype=np.int64)
        pick = int(rng.integers(int(weights.sum())))
        k = int(np.searchsorted(np.cumsum(weights), pick, side="right"))
        pick -= int(weights[:k].sum())
        e = entries[k]
        controls = []
        for c in reversed(e.controls):
            if c is None:
                controls.append(None)
            else:
                controls.append(c[pick % len(c)])
                pick //= len(c)
        return controls[::-1], e


# ----------------------------------------------------------------- stage --

@dataclass
class StageResult:
    stage: GridStage
    value: ValueFunction
    policy: PolicyTable
    sweeps: int
    cache: SuccessorCache
    tilde: ValueFunction
    v0: ValueFunction
    update_mask: np.ndarray
    dead_ends: np.ndarray
    stop_reason: str
    timings: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    reldiff: list = field(default_factory=list)


def goal_exclusion_mask(stage: GridStage, mode: str = "all_proximate") -> np.ndarray:
    """Nodes left out of the sweeps (restored from the interpolated values)."""
    if mode == "all_proximate":
        return stage.all_proximate_mask
    m_plus, _ = team_bounds(stage.scenario)
    return stage.joint_goal_distance <= m_plus * stage.eps + stage.h + 1e-9


def indicator_points(stage: GridStage) -> np.ndarray:
    """Per node: 0 for goal-proximate robots and 1 otherwise; all-ones off S^p."""
    pts = np.ones((stage.n_joint, stage.n_robots))
    grids = np.meshgrid(*[np.arange(s) for s in stage.sizes], indexing="ij")
    for i, prox in enumerate(stage.robot_proximate):
        pts[:, i] = np.where(prox[grids[i].ravel()], 0.0, 1.0)
    pts[~stage.safety_mask] = 1.0
    return pts


def interpolate_value(prev: StageResult | None, stage: GridStage) -> ValueFunction:
    """Old nodes copy the previous stage's values; new ones get the 0/1 indicator."""
    ind = indicator_points(stage)
    if prev is None:
        return ValueFunction.from_points(stage, ind)
    old = embed_joint(prev.stage, stage)
    is_old = np.zeros(stage.n_joint, dtype=bool)
    is_old[old] = True
    new_ids = np.flatnonzero(~is_old)
    counts = prev.value.sizes()
    ids = np.concatenate([new_ids, np.repeat(old, counts)])
    pts = np.vstack([ind[new_ids], prev.value.pts])
    off, p = _assemble(stage.n_joint, ids, pts, stage.n_robots)
    return ValueFunction(stage, off, p)


def _equivalence_tables(stage: GridStage):
    node_off = np.zeros(stage.n_robots + 1, dtype=np.int64)
    ptrs, succs = [], []
    base = 0
    for i, prox in enumerate(stage.robot_proximate):
        members = np.flatnonzero(prox)
        counts = np.where(prox, len(members), 1)
        ptr = np.concatenate([[0], np.cumsum(counts)])[:-1] + base
        lists = [members if prox[a] else np.array([a]) for a in range(len(prox))]
        ptrs.append(ptr)
        succs.append(np.concatenate(lists))
        base += int(counts.sum())
        node_off[i + 1] = node_off[i] + len(prox)
    ptr = np.concatenate(ptrs + [np.array([base])]).astype(np.int64)
    return node_off, ptr, np.concatenate(succs).astype(np.int64)


def initialize_value(tilde: ValueFunction, stage: GridStage, is_old: np.ndarray | None = None,
                     mode: str = "union", coarse: GridStage | None = None) -> ValueFunction:
    """Old nodes keep ``tilde``; a new node takes the frontier of ``tilde`` over
    its equivalent nodes.

    ``mode="representative"`` reads a single old equivalent node instead and
    falls back to the union when none exists.
    """
    if is_old is None:
        is_old = np.zeros(stage.n_joint, dtype=bool)
    any_prox = ~_none_proximate(stage)
    update = ~is_old & any_prox
    if mode == "representative" and coarse is not None:
        v = _representative_init(tilde, stage, is_old, update, coarse)
        if v is not None:
            return v
    node_off, ptr, succ = _equivalence_tables(stage)
    dt = np.zeros(node_off[-1])
    mask = np.ones(stage.n_joint, dtype=bool)
    off, pts, _ = K.sweep(update, stage.n_robots, np.array(stage.sizes, dtype=np.int64), stage.strides,
                          node_off, ptr, succ, dt, mask, tilde.off, tilde.pts)
    return ValueFunction(stage, off, pts)


def _none_proximate(stage: GridStage) -> np.ndarray:
    mask = np.ones(stage.sizes, dtype=bool)
    for i, prox in enumerate(stage.robot_proximate):
        shape = [1] * stage.n_robots
        shape[i] = stage.sizes[i]
        mask = mask & ~prox.reshape(shape)
    return mask.ravel()


def _representative_init(tilde, stage, is_old, update, coarse):
    per_old = embed(coarse, stage)
    reps = []
    for i, prox in enumerate(stage.robot_proximate):
        old_i = np.zeros(len(prox), dtype=bool)
        old_i[per_old[i]] = True
        cand = np.flatnonzero(prox & old_i)
        rep = np.arange(len(prox))
        if len(cand):
            rep = np.where(prox, cand[0], rep)
        reps.append(rep)
    parts = stage.decode(np.arange(stage.n_joint))
    rep_parts = np.stack([reps[i][parts[:, i]] for i in range(stage.n_robots)], axis=1)
    rep = stage.encode(rep_parts)
    targets = update & is_old[rep]
    sources = np.where(targets, rep, np.arange(stage.n_joint))
    counts = tilde.sizes()[sources]
    off = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    take = np.concatenate([np.arange(tilde.off[s], tilde.off[s + 1]) for s in sources])
    v = ValueFunction(stage, off, tilde.pts[take])
    rest = update & ~targets
    if rest.any():
        node_off, ptr, succ = _equivalence_tables(stage)
        off2, pts2, _ = K.sweep(rest, stage.n_robots, np.array(stage.sizes, dtype=np.int64), stage.strides,
                                node_off, ptr, succ, np.zeros(node_off[-1]), np.ones(stage.n_joint, dtype=bool),
                                tilde.off, tilde.pts)
        # nodes outside ``rest`` were copied from tilde; overwrite the representative ones
        merged_ids, merged_pts = [], []
        for j_set, src in ((rest | ~update, (off2, pts2)), (targets, (v.off, v.pts))):
            ids = np.flatnonzero(j_set)
            o, p = src
            cnt = o[ids + 1] - o[ids]
            idx = np.concatenate([np.arange(o[j], o[j + 1]) for j in ids]) if len(ids) else np.zeros(0, np.int64)
            merged_ids.append(np.repeat(ids, cnt))
            merged_pts.append(p[idx])
        off3, p3 = _assemble(stage.n_joint, np.concatenate(merged_ids), np.vstack(merged_pts), stage.n_robots)
        return ValueFunction(stage, off3, p3)
    return v


def bellman_update(succ: SuccessorSet, v_prev: ValueFunction) -> ParetoSet:
    """Frontier of ``dtau + tau - dtau * tau`` over successors and their values.

    A dead end (no successor) returns the previous value.
    """
    if succ.dead_end:
        return v_prev[succ.node]
    pts = np.vstack([v_prev.frontier(int(s)) for s in succ.nodes])
    d = succ.dtau
    return ParetoSet(quantize(d + pts - d * pts))


def extract_controls(succ: SuccessorSet, v_prev: ValueFunction, v_new: ParetoSet) -> list[tuple]:
    """``(successor, tau)`` pairs whose combined value lies on ``v_new``."""
    out = []
    d = succ.dtau
    for s in succ.nodes:
        for t in v_prev.frontier(int(s)):
            c = quantize(d + t - d * t)
            if c.tolist() in v_new.points.tolist():
                out.append((int(s), tuple(float(x) for x in c)))
    return out


def relative_difference_stop(v_n: ValueFunction, v_prev: ValueFunction, v_0: ValueFunction,
                             threshold: float, nodes: np.ndarray | None = None) -> bool:
    """Stop when ``D(v_{n-1}, v_n) / D(v_0, v_n) <= threshold``."""
    if nodes is None:
        nodes = v_n.stage.safety_nodes
    num = set_distance_rms(v_prev, v_n, nodes)
    den = set_distance_rms(v_0, v_n, nodes)
    if num == 0:
        return True
    if den == 0:
        return False
    return num / den <= threshold


class _Sweeper:
    def __init__(self, stage: GridStage, cache: SuccessorCache, update: np.ndarray, workers: int = 1):
        self.stage = stage
        self.update = update
        self.sizes = np.array(stage.sizes, dtype=np.int64)
        self.node_off, self.ptr, self.succ, self.dt = cache.packed
        self.mask = np.ascontiguousarray(stage.safety_mask)
        self.workers = workers

    def __call__(self, v: ValueFunction):
        args = (self.update, self.stage.n_robots, self.sizes, self.stage.strides, self.node_off, self.ptr,
                self.succ, self.dt, self.mask, v.off, v.pts)
        if self.workers > 1:
            import numba
            numba.set_num_threads(min(self.workers, numba.config.NUMBA_NUM_THREADS))
            off, pts, dead = K.sweep_parallel(*args, self.workers * 4)
        else:
            off, pts, dead = K.sweep(*args)
        return ValueFunction(self.stage, off, pts, v.sweeps + 1), dead

    def replay(self, v_prev: ValueFunction, v_new: ValueFunction):
        return K.replay(self.update, self.stage.n_robots, self.sizes, self.stage.strides, self.node_off,
                        self.ptr, self.succ, self.dt, self.mask, v_prev.off, v_prev.pts, v_new.off, v_new.pts)


def sweep_once(stage: GridStage, cache: SuccessorCache, v: ValueFunction,
               exclusion: str = "all_proximate") -> ValueFunction:
    """A single Jacobi sweep over the safety nodes outside the goal exclusion."""
    update = stage.safety_mask & ~goal_exclusion_mask(stage, exclusion)
    return _Sweeper(stage, cache, update)(v)[0]


def run_stage(stage: GridStage, v0: ValueFunction, cache: SuccessorCache, n_p: int | None = None,
              options: PlanOptions = PlanOptions(), tilde: ValueFunction | None = None,
              on_sweep: Callable | None = None, restrict: np.ndarray | None = None) -> StageResult:
    """Jacobi sweeps from ``v0`` until a fixed point or the stopping rule fires.

    Excluded and non-safety nodes are restored from ``tilde`` at the end.
    ``restrict`` further limits the swept nodes.
    """
    tilde = v0 if tilde is None else tilde
    t0 = time.perf_counter()
    update = stage.safety_mask & ~goal_exclusion_mask(stage, options.goal_exclusion)
    if restrict is not None:
        update = update & restrict
    sweeper = _Sweeper(stage, cache, update, options.worker_count())
    budget = options.max_sweeps
    if options.stop == "budget":
        if n_p is None:
            raise ScheduleError("budget stopping needs a sweep count")
        budget = n_p
    history = [v0] if options.keep_history else []
    rel = []
    v_prev, v = v0, v0
    dead = np.zeros(stage.n_joint, dtype=bool)
    reason = "budget"
    n = 0
    if budget <= 0:
        log.warning("sweep budget is zero at h=%g; returning the initial value with an empty policy", stage.h)
        reason = "empty-budget"
    nodes = stage.safety_nodes
    while n < budget:
        v_prev = v
        v, dead = sweeper(v_prev)
        n += 1
        if options.keep_history:
            history.append(v)
        if on_sweep is not None:
            on_sweep(n, v)
        if v.same_as(v_prev):
            reason = "fixed-point"
            break
        if options.stop == "reldiff":
            num = set_distance_rms(v_prev, v, nodes)
            den = set_distance_rms(v0, v, nodes)
            rel.append(num / den if den > 0 else math.inf)
            if den > 0 and num / den <= options.threshold:
                reason = "reldiff"
                break
    t_sweeps = time.perf_counter() - t0
    t1 = time.perf_counter()
    if n > 0:
        pol_off, pol_succ, pol_val = sweeper.replay(v_prev, v)
    else:
        pol_off = np.zeros(stage.n_joint + 1, dtype=np.int64)
        pol_succ = pol_val = np.zeros(0, dtype=np.int64)
    final = _restore(v, tilde, update)
    final.sweeps = n
    # the restored nodes were never updated, so the policy offsets still apply
    policy = PolicyTable(stage, cache, final, pol_off, pol_succ, pol_val)
    timings = {"sweeps": t_sweeps, "policy": time.perf_counter() - t1}
    return StageResult(stage, final, policy, n, cache, tilde, v0, update, dead & update, reason,
                       timings, history, rel)


def _restore(v: ValueFunction, tilde: ValueFunction, update: np.ndarray) -> ValueFunction:
    keep_ids = np.flatnonzero(update)
    back_ids = np.flatnonzero(~update)
    parts_ids, parts_pts = [], []
    for ids, src in ((keep_ids, v), (back_ids, tilde)):
        cnt = src.off[ids + 1] - src.off[ids]
        starts = np.repeat(src.off[ids] - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
        idx = starts + np.arange(int(cnt.sum()))
        parts_ids.append(np.repeat(ids, cnt))
        parts_pts.append(src.pts[idx])
    off, pts = _assemble(v.stage.n_joint, np.concatenate(parts_ids), np.vstack(parts_pts), v.stage.n_robots)
    return ValueFunction(v.stage, off, pts, v.sweeps)


# ------------------------------------------------------------------ plan --

@dataclass
class PlanResult:
    scenario: Scenario
    schedule: Schedule
    options: PlanOptions
    stages: list
    refined: StageResult | None = None

    @property
    def final(self) -> StageResult:
        return self.stages[-1]

    def timings(self) -> list[dict]:
        return [dict(h=s.stage.h, **s.timings) for s in self.stages]


def zero_value(stage: GridStage) -> ValueFunction:
    """``{0}`` on safety nodes and ``{1}`` elsewhere."""
    pts = np.where(stage.safety_mask[:, None], 0.0, 1.0) * np.ones((1, stage.n_robots))
    return ValueFunction.from_points(stage, pts)


def prepare_stage(scenario: Scenario, spec: StageSpec, index: int, options: PlanOptions) -> GridStage:
    stage = build_stage(scenario, spec.h, spec.eps, index, options.expand_safety, options.pair_margin)
    if stage.n_joint > options.node_budget:
        raise ScheduleError(f"stage h={spec.h} has {stage.n_joint} joint nodes, above the budget "
                            f"{options.node_budget}")
    return stage


def plan_stage(scenario: Scenario, spec: StageSpec, index: int, prev: StageResult | None,
               options: PlanOptions, n_p: int | None = None, on_sweep: Callable | None = None) -> StageResult:
    """Build, initialize and solve one stage."""
    stage = prepare_stage(scenario, spec, index, options)
    t0 = time.perf_counter()
    cache = SuccessorCache(stage, options.control_density)
    t_succ = time.perf_counter() - t0
    t0 = time.perf_counter()
    if options.initial == "zero":
        tilde = v0 = zero_value(stage)
    else:
        tilde = interpolate_value(prev, stage)
        is_old = np.zeros(stage.n_joint, dtype=bool)
        if prev is not None:
            is_old[embed_joint(prev.stage, stage)] = True
        v0 = initialize_value(tilde, stage, is_old, options.init_mode, prev.stage if prev is not None else None)
    t_init = time.perf_counter() - t0
    res = run_stage(stage, v0, cache, n_p, options, tilde, on_sweep)
    res.timings = {"successors": t_succ, "init": t_init, **res.timings}
    log.info("stage h=%g: %d joint nodes, %d safety, %d sweeps (%s)", stage.h, stage.n_joint,
             len(stage.safety_nodes), res.sweeps, res.stop_reason)
    return res


def plan(scenario: Scenario, schedule: Schedule, options: PlanOptions = PlanOptions(),
         on_stage: Callable | None = None, goal_refine: bool = False) -> PlanResult:
    """Solve every stage in order; each stage's policy is usable as soon as it finishes."""
    schedule.validate(scenario)
    budgets = schedule.budgets() if options.stop == "budget" else [None] * len(schedule.stages)
    # surface lattice and budget errors before any stage runs
    for k, spec in enumerate(schedule.stages):
        prepare_stage(scenario, spec, k, options)
    results: list[StageResult] = []
    prev = None
    for k, spec in enumerate(schedule.stages):
        prev = plan_stage(scenario, spec, k, prev, options, budgets[k])
        results.append(prev)
        if on_stage is not None:
            on_stage(prev)
    out = PlanResult(scenario, schedule, options, results)
    if goal_refine:
        out.refined = refine_goal(out)
    return out


def refine_goal(result: PlanResult) -> StageResult:
    """Extra stage at half the finest spacing, swept only where some robot is
    goal-proximate.  Values elsewhere are lifted from the coarse stage by
    nearest node."""
    coarse = result.final
    spec = result.schedule.stages[-1]
    h = spec.h / 2
    eps_rule = spec.eps * math.sqrt(0.5)
    fine_spec = StageSpec(h, max(eps_rule, 2 * h * 1.0001))
    opts = replace(result.options, stop="fixed" if result.options.stop == "budget" else result.options.stop)
    stage = prepare_stage(result.scenario, fine_spec, len(result.stages), opts)
    cache = SuccessorCache(stage, opts.control_density)
    region = ~_none_proximate(stage) & stage.safety_mask
    tilde = interpolate_value(coarse, stage)
    is_old = np.zeros(stage.n_joint, dtype=bool)
    is_old[embed_joint(coarse.stage, stage)] = True
    inside = initialize_value(tilde, stage, is_old, opts.init_mode)
    # outside the refinement region every node reads the coarse values
    v0 = _mix(stage, region, inside, lift_nearest(coarse.value, stage))
    t0 = time.perf_counter()
    res = run_stage(stage, v0, cache, None, opts, v0, restrict=region)
    res.timings = {"refine": time.perf_counter() - t0}
    return res


def _mix(stage: GridStage, mask: np.ndarray, a: ValueFunction, b: ValueFunction) -> ValueFunction:
    ids_a, ids_b = np.flatnonzero(mask), np.flatnonzero(~mask)
    pid, ppts = [], []
    for ids, src in ((ids_a, a), (ids_b, b)):
        cnt = src.off[ids + 1] - src.off[ids]
        starts = np.repeat(src.off[ids] - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
        pid.append(np.repeat(ids, cnt))
        ppts.append(src.pts[starts + np.arange(int(cnt.sum()))])
    off, pts = _assemble(stage.n_joint, np.concatenate(pid), np.vstack(ppts), stage.n_robots)
    return ValueFunction(stage, off, pts)


def lift_nearest(value: ValueFunction, target: GridStage) -> ValueFunction:
    """Values on ``target`` read from the nearest safety node of ``value``'s stage.

    Non-safety target nodes get ``{1}``.
    """
    src = value.stage
    coords = target.joint_coords(np.arange(target.n_joint))
    d, _ = src.safety_tree.query(coords)
    # ties go to the lowest id: re-scan the candidates at the minimal distance
    hits = src.safety_tree.query_ball_point(coords, d + 1e-12)
    nearest = np.array([src.safety_nodes[min(h)] if h else -1 for h in hits], dtype=np.int64)
    safe = target.safety_mask
    ids, pts = [], []
    cnt = np.where(safe, value.off[nearest + 1] - value.off[nearest], 1)
    for j in range(target.n_joint):
        if safe[j]:
            pts.append(value.frontier(int(nearest[j])))
        else:
            pts.append(np.ones((1, target.n_robots)))
    off = np.concatenate([[0], np.cumsum(cnt)]).astype(np.int64)
    return ValueFunction(target, off, np.vstack(pts))


def approximation_error(value: ValueFunction, benchmark: ValueFunction) -> float:
    """``sqrt(sum d_H^2)`` between the nearest-node lift of ``value`` and ``benchmark``."""
    lifted = lift_nearest(value, benchmark.stage)
    return set_distance_rms(lifted, benchmark, benchmark.stage.safety_nodes)



# ------------------------------------------------------------ invariants --

def zero_value_violations(value: ValueFunction) -> list[tuple]:
    """``(node, robot)`` pairs where a goal-proximate robot has a nonzero entry."""
    stage = value.stage
    out = []
    for j in stage.safety_nodes:
        f = value.frontier(int(j))
        parts = stage.decode(int(j))
        for i in range(stage.n_robots):
            if stage.robot_proximate[i][parts[i]] and np.any(f[:, i] != 0):
                out.append((int(j), i))
    return out


def equivalence_violations(value: ValueFunction) -> list[tuple]:
    """Pairs of equivalent safety nodes whose frontiers differ."""
    stage = value.stage
    out = []
    for j in stage.safety_nodes:
        f = value.frontier(int(j))
        for k in stage.equivalent_nodes(int(j)):
            if k > j and stage.safety_mask[k] and not np.array_equal(value.frontier(int(k)), f):
                out.append((int(j), int(k)))
    return out


def monotonicity_violations(v_prev: ValueFunction, v_next: ValueFunction) -> list[int]:
    """Nodes where some entry of ``v_next`` dominates no entry of ``v_prev`` from above."""
    out = []
    for j in range(v_prev.stage.n_joint):
        a, b = v_prev.frontier(j), v_next.frontier(j)
        covered = np.all(b[:, None, :] >= a[None, :, :], axis=2).any(axis=1)
        if not covered.all():
            out.append(j)
    return out
