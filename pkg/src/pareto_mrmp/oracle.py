"""Independent verification oracle: untransformed value recursion, the
space-time successor map, the viability recursion, and the epigraph check.

Times are kept as integer multiples of ``h`` so that every comparison is
exact.  Everything here is brute force and meant for small instances only.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar, nnls

from .dynamics import DEFAULT_CONTROL_DENSITY, SuccessorCache, _density_for, stage_alpha
from .grid import GridStage, ScheduleError
from .model import control_grid
from .pareto import QUANTUM, frontier_array, quantize

#: sentinel for an infinite arrival time, in units of h
INF = 1 << 40
#: space-time points an oracle instance may hold
DEFAULT_CAP = 10_000
HULL_TOL = 1e-7


def _ratio(stage: GridStage) -> float:
    return stage.eps / stage.h


def kappa_units(stage: GridStage) -> int:
    """Minimum positive lattice time increment in units of ``h``."""
    if not stage.eps > 2 * stage.h:
        raise ScheduleError(f"temporal resolution must exceed 2h (eps={stage.eps}, h={stage.h})")
    return math.ceil(_ratio(stage) - 1e-9) - 2


def time_units(stage: GridStage, t_max: float) -> int:
    k = t_max / stage.h
    if abs(k - round(k)) > 1e-9 or k < 0:
        raise ValueError(f"T_max={t_max} is not a nonnegative multiple of h={stage.h}")
    return int(round(k))


@dataclass(frozen=True)
class SpaceTimeNode:
    """Joint lattice node plus per-robot times in units of ``h``."""

    node: int
    t: tuple

    def times(self, h: float) -> np.ndarray:
        return np.asarray(self.t, dtype=float) * h


# ------------------------------------------------------------------ theta --

@dataclass
class ThetaTable:
    """Untransformed arrival-time frontiers; entries are integer units of ``h``.

    ``values[j]`` is a ``(k, N)`` int array; rows equal to ``INF`` stand for an
    infinite arrival time.
    """

    stage: GridStage
    values: list
    sweeps: int = 0

    def times(self, node: int) -> np.ndarray:
        v = self.values[node].astype(float) * self.stage.h
        v[self.values[node] >= INF] = np.inf
        return v

    def transformed(self, node: int) -> np.ndarray:
        """Kruzhkov image of the frontier at ``node``."""
        return quantize(-np.expm1(-self.times(node)))

    def epi_mask(self, node: int, k: int) -> np.ndarray:
        """Boolean ``(k+1,)*N`` grid: which time vectors dominate some frontier point."""
        n = self.stage.n_robots
        out = np.zeros((k + 1,) * n, dtype=bool)
        axes = np.arange(k + 1)
        for tau in self.values[node]:
            if np.any(tau >= INF):
                continue
            m = np.ones((k + 1,) * n, dtype=bool)
            for i in range(n):
                shape = [1] * n
                shape[i] = k + 1
                m &= (axes >= tau[i]).reshape(shape)
            out |= m
        return out


def theta_init(stage: GridStage) -> ThetaTable:
    """``{0}`` on safety nodes, ``{+inf}`` elsewhere."""
    n = stage.n_robots
    zero = np.zeros((1, n), dtype=np.int64)
    inf = np.full((1, n), INF, dtype=np.int64)
    mask = stage.safety_mask
    return ThetaTable(stage, [zero if mask[j] else inf for j in range(stage.n_joint)])


def _frontier_units(pts: np.ndarray) -> np.ndarray:
    pts = np.minimum(pts, INF)
    return frontier_array(pts.astype(float)).astype(np.int64)


def theta_step(table: ThetaTable, stage: GridStage, cache: SuccessorCache,
               restrict_to_safety: bool = True) -> ThetaTable:
    """One untransformed Bellman step over every node.

    Moving robots add ``kappa`` (in units of h), frozen robots add nothing.  A
    node without safe successors gets ``{+inf}``.  With
    ``restrict_to_safety`` the non-safety nodes stay pinned at ``{+inf}``;
    otherwise they are updated like any other node.
    """
    if table.stage is not stage:
        raise ValueError("theta table belongs to a different stage")
    k = kappa_units(stage)
    n = stage.n_robots
    inf = np.full((1, n), INF, dtype=np.int64)
    out = []
    for j in range(stage.n_joint):
        if restrict_to_safety and not stage.safety_mask[j]:
            out.append(inf)
            continue
        succ = cache.successors(j)
        if succ.dead_end:
            out.append(inf)
            continue
        inc = np.array([0 if i in succ.frozen else k for i in range(n)], dtype=np.int64)
        pts = np.vstack([table.values[int(s)] for s in succ.nodes])
        out.append(_frontier_units(pts + inc))
    return ThetaTable(stage, out, table.sweeps + 1)


def theta_fixed_point(stage: GridStage, cache: SuccessorCache, max_steps: int = 10_000) -> ThetaTable:
    theta = theta_init(stage)
    for _ in range(max_steps):
        nxt = theta_step(theta, stage, cache)
        if all(np.array_equal(a, b) for a, b in zip(theta.values, nxt.values)):
            return nxt
        theta = nxt
    raise RuntimeError("untransformed recursion did not settle")


def commutation_violations(theta: ThetaTable, cache: SuccessorCache, tol: float = 4 * QUANTUM) -> list[int]:
    """Safety nodes where one transformed Bellman step disagrees with the
    transform of one untransformed step.

    Dead ends are skipped: the transformed sweep keeps the previous value there.
    """
    from .planner import ValueFunction, bellman_update

    stage = theta.stage
    v = ValueFunction.from_sets(stage, [theta.transformed(j) for j in range(stage.n_joint)])
    stepped = theta_step(theta, stage, cache)
    bad = []
    for j in stage.safety_nodes:
        succ = cache.successors(int(j))
        if succ.dead_end:
            continue
        got = bellman_update(succ, v).points
        want = stepped.transformed(int(j))
        want = want[np.lexsort(want.T[::-1])]
        if got.shape != want.shape or np.max(np.abs(got - want)) > tol:
            bad.append(int(j))
    return bad


# ------------------------------------------------------------------ gamma --

class _RobotGamma:
    """Per-robot space-time successor lists on a truncated time window."""

    def __init__(self, stage: GridStage, i: int, k_max: int, density=DEFAULT_CONTROL_DENSITY):
        self.stage = stage
        self.i = i
        self.k_max = k_max
        robot = stage.scenario.robots[i]
        self.lat = stage.lattices[i]
        self.controls = control_grid(robot, _density_for(robot, density))
        self.alpha = stage_alpha(stage)
        self.e = _ratio(stage)
        self.proximate = stage.robot_proximate[i]
        self._robot = robot

    def _steps(self, a: int) -> np.ndarray:
        """``eps f(x_a, u)`` for every control sample."""
        x = self.lat.coords[a]
        return self.stage.eps * self._robot.velocity(np.broadcast_to(x, (len(self.controls), len(x))), self.controls)

    def moving_nodes(self, a: int) -> np.ndarray:
        x = self.lat.coords[a]
        ends = x + self._steps(a)
        d = np.sqrt(((self.lat.coords[:, None, :] - ends[None, :, :]) ** 2).sum(-1)).min(axis=1)
        return np.flatnonzero(d <= self.alpha + 1e-9)

    def in_goal_hull(self, a: int, b: int, t: int, s: int) -> bool:
        """Membership of ``(x_b, s)`` in the closed hull of the moving and stay-put branches."""
        h, e = self.stage.h, self.e
        lo = max(0.0, (t - s - 2) / e)
        hi = min(1.0, (t - s + 2) / e)
        if lo > hi + 1e-12:
            return False
        x = self.lat.coords[a]
        z = self.lat.coords[b] - x
        q = self._steps(a)
        w = 1e4

        def gap(lam: float) -> float:
            radius = lam * self.alpha + (1 - lam) * 2 * h
            if lam <= 0:
                dist = float(np.linalg.norm(z))
            else:
                A = np.vstack([lam * q.T, w * np.ones(len(q))])
                rhs = np.concatenate([z, [w]])
                coef, _ = nnls(A, rhs)
                dist = float(np.linalg.norm(lam * q.T @ coef - z))
            return dist - radius

        best = min(gap(lo), gap(hi))
        if best <= HULL_TOL:
            return True
        if hi - lo > 1e-12:
            res = minimize_scalar(gap, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
            best = min(best, float(res.fun))
        return best <= HULL_TOL

    def successors(self, a: int, t: int) -> tuple[list, bool]:
        """``(b, s)`` pairs reachable from ``(a, t)`` plus a clipping flag."""
        e = self.e
        out, clipped = [], False
        if not self.proximate[a]:
            s_lo = math.ceil(t - e - 2 - 1e-9)
            s_hi = math.floor(t - e + 2 + 1e-9)
            for b in self.moving_nodes(a):
                for s in range(max(s_lo, 0), s_hi + 1):
                    if s > self.k_max:
                        clipped = True
                        continue
                    out.append((int(b), s))
            return out, clipped
        x = self.lat.coords[a]
        reach = float(np.max(np.linalg.norm(self._steps(a), axis=1))) + max(self.alpha, 2 * self.stage.h)
        near = np.flatnonzero(np.linalg.norm(self.lat.coords - x, axis=1) <= reach + 1e-9)
        s_lo = math.ceil(t - e - 2 - 1e-9)
        for b in near:
            for s in range(max(s_lo, 0), t + 3):
                if self.in_goal_hull(a, int(b), t, s):
                    if s > self.k_max:
                        clipped = True
                        continue
                    out.append((int(b), s))
        return out, clipped


def _robot_gammas(stage: GridStage, k_max: int, density) -> list[_RobotGamma]:
    return [_RobotGamma(stage, i, k_max, density) for i in range(stage.n_robots)]


def gamma_step(node: SpaceTimeNode, stage: GridStage, t_max: float,
               density=DEFAULT_CONTROL_DENSITY) -> tuple[set, bool]:
    """Space-time successors of ``node`` on the window ``[0, T_max]``.

    Returns the successor set and whether any candidate was clipped for
    exceeding ``T_max``.  The safety region is not applied here.
    """
    k = time_units(stage, t_max)
    if any(t < 0 or t > k for t in node.t):
        raise ValueError("node lies outside the time window")
    parts = stage.decode(node.node)
    lists, clipped = [], False
    for g in _robot_gammas(stage, k, density):
        pairs, c = g.successors(int(parts[g.i]), int(node.t[g.i]))
        lists.append(pairs)
        clipped |= c
    out = set()
    for combo in itertools.product(*lists):
        j = int(stage.encode([b for b, _ in combo]))
        out.add(SpaceTimeNode(j, tuple(s for _, s in combo)))
    return out, clipped


# -------------------------------------------------------------- viability --

@dataclass
class ViabilitySet:
    """Space-time subset at recursion step ``n``.

    ``mask`` has one axis per robot, indexed by ``a_i * (k + 1) + t_i``.
    """

    stage: GridStage
    n: int
    k: int
    mask: np.ndarray

    def contains(self, node: int, t) -> bool:
        parts = self.stage.decode(node)
        idx = tuple(int(a) * (self.k + 1) + int(ti) for a, ti in zip(parts, t))
        return bool(self.mask[idx])

    def block(self, node: int) -> np.ndarray:
        """The ``(k+1,)*N`` time grid of ``node``."""
        parts = self.stage.decode(node)
        sl = tuple(slice(int(a) * (self.k + 1), (int(a) + 1) * (self.k + 1)) for a in parts)
        return self.mask[sl]

    def __len__(self) -> int:
        return int(self.mask.sum())


def _initial_set(stage: GridStage, k: int) -> np.ndarray:
    safe = stage.safety_mask.reshape(stage.sizes)
    for ax in range(stage.n_robots):
        safe = np.repeat(safe, k + 1, axis=ax)
    return safe.copy()


def _gamma_tables(stage: GridStage, k: int, density) -> list[list[np.ndarray]]:
    """Per robot and per ``a * (k + 1) + t``: flat indices of the successors."""
    tables = []
    for g in _robot_gammas(stage, k, density):
        tables.append([np.array([b * (k + 1) + s for b, s in g.successors(a, t)[0]], dtype=np.int64)
                       for a in range(g.lat.size) for t in range(k + 1)])
    return tables


def _step(cur: np.ndarray, s0: np.ndarray, tables, points, per, restrict_to_safety: bool) -> np.ndarray:
    nxt = np.zeros_like(cur)
    for flat in points:
        idx = np.unravel_index(int(flat), per)
        if restrict_to_safety and not s0[idx]:
            continue
        lists = [tab[int(q)] for tab, q in zip(tables, idx)]
        if all(len(l) for l in lists):
            nxt[idx] = bool(cur[np.ix_(*lists)].any())
    return nxt


def _window(stage: GridStage, t_max: float, cap: int):
    k = time_units(stage, t_max)
    per = tuple(lat.size * (k + 1) for lat in stage.lattices)
    total = int(np.prod(per))
    if total > cap:
        raise ValueError(f"oracle instance has {total} space-time points, cap is {cap}")
    return k, per, total


def viability_recursion(stage: GridStage, n_steps: int, t_max: float, density=DEFAULT_CONTROL_DENSITY,
                        restrict_to_safety: bool = True, order=None, cap: int = DEFAULT_CAP) -> list[ViabilitySet]:
    """``S_0`` = safety nodes times the window; ``S_{n+1}`` = points with a successor in ``S_n``.

    With ``restrict_to_safety`` each ``S_{n+1}`` is also intersected with
    ``S_0``.  ``order`` optionally permutes the visiting order of space-time
    points; the result must not depend on it.
    """
    k, per, total = _window(stage, t_max, cap)
    points = np.arange(total) if order is None else np.asarray(order, dtype=np.int64)
    if sorted(points.tolist()) != list(range(total)):
        raise ValueError("order must be a permutation of the space-time points")
    tables = _gamma_tables(stage, k, density)
    s0 = _initial_set(stage, k)
    out = [ViabilitySet(stage, 0, k, s0)]
    for step in range(n_steps):
        out.append(ViabilitySet(stage, step + 1, k, _step(out[-1].mask, s0, tables, points, per,
                                                          restrict_to_safety)))
    return out


def viability_kernel(stage: GridStage, t_max: float, density=DEFAULT_CONTROL_DENSITY,
                     max_steps: int = 1000, cap: int = DEFAULT_CAP) -> ViabilitySet:
    """Points of the window from which the safety-restricted recursion never exits.

    On a finite window the sets stop changing after finitely many steps.
    """
    k, per, total = _window(stage, t_max, cap)
    tables = _gamma_tables(stage, k, density)
    cur = _initial_set(stage, k)
    s0 = cur
    for n in range(max_steps):
        nxt = _step(cur, s0, tables, np.arange(total), per, True)
        if np.array_equal(nxt, cur):
            return ViabilitySet(stage, n, k, cur)
        cur = nxt
    raise RuntimeError("viability recursion did not settle")


# ------------------------------------------------------------ equivalence --

@dataclass(frozen=True)
class Counterexample:
    node: int
    coords: list
    t: tuple
    sweep: int
    in_viability: bool
    in_epigraph: bool

    def to_json(self) -> str:
        return json.dumps({"node": self.node, "coords": self.coords, "t_units": list(self.t), "sweep": self.sweep,
                           "in_viability": self.in_viability, "in_epigraph": self.in_epigraph}, sort_keys=True)


def shadow_limit(stage: GridStage, k: int) -> int:
    """Largest time (units of h) checked; points above it may feel the truncation."""
    return math.floor(k - _ratio(stage) - 2 + 1e-9)


def epi_equivalence_check(theta: ThetaTable, s_n: ViabilitySet) -> tuple[bool, Counterexample | None]:
    """Compare the epigraph of ``theta`` with ``s_n`` on the checked window.

    Every lattice ``(x, t)`` with all ``t_i`` at or below the shadow limit is
    compared.  Returns ``(True, None)`` or ``(False, first counterexample)``
    in node-major, lexicographic time order.
    """
    if theta.stage is not s_n.stage:
        raise ValueError("theta and viability set come from different stages")
    if theta.sweeps != s_n.n:
        raise ValueError(f"sweep mismatch: theta at {theta.sweeps}, viability set at {s_n.n}")
    stage, k = s_n.stage, s_n.k
    lim = shadow_limit(stage, k)
    if lim < 0:
        return True, None
    win = (slice(0, lim + 1),) * stage.n_robots
    for j in range(stage.n_joint):
        a = s_n.block(j)[win]
        b = theta.epi_mask(j, k)[win]
        if not np.array_equal(a, b):
            t = tuple(int(v) for v in np.argwhere(a != b)[0])
            pos = tuple(slice(v, v + 1) for v in t)
            return False, Counterexample(j, [c.tolist() for c in stage.node_state(j)], t, s_n.n,
                                         bool(a[pos].item()), bool(b[pos].item()))
    return True, None


def verify_stage(stage: GridStage, n_steps: int = 10, t_max: float | None = None,
                 density=DEFAULT_CONTROL_DENSITY, cap: int = DEFAULT_CAP) -> dict:
    """Run the oracle suite on one stage and return a JSON-ready report.

    Checks, for every ``n`` up to ``n_steps``: epigraph equivalence,
    commutation of the transformed and untransformed steps, and shrinkage of
    the viability sets.
    """
    if t_max is None:
        t_max = 12 * stage.h
    cache = SuccessorCache(stage, density)
    seq = viability_recursion(stage, n_steps, t_max, density, cap=cap)
    theta = theta_init(stage)
    rows, first = [], None
    for n, s_n in enumerate(seq):
        if n:
            theta = theta_step(theta, stage, cache)
        ok, cex = epi_equivalence_check(theta, s_n)
        comm = commutation_violations(theta, cache)
        shrink = n == 0 or not np.any(s_n.mask & ~seq[n - 1].mask)
        rows.append({"n": n, "equivalent": ok, "commutation_violations": len(comm), "shrinking": bool(shrink),
                     "viability_points": len(s_n)})
        if cex is not None and first is None:
            first = json.loads(cex.to_json())
    passed = all(r["equivalent"] and r["commutation_violations"] == 0 and r["shrinking"] for r in rows)
    return {"passed": passed, "t_max": t_max, "shadow_limit_units": shadow_limit(stage, seq[0].k),
            "steps": rows, "counterexample": first}
