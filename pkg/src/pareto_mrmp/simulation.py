"""Closed-loop execution of grid policies on the continuous dynamics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DEFAULT_CONTROL_DENSITY
from .model import TOL, Scenario, control_grid, union_distance
from .planner import StageResult

SUBSTEPS = 20


@dataclass
class Trajectory:
    """Integrator-resolution record of one closed-loop run.

    ``controls[k]`` is the control held on ``[times[k], times[k+1])``; the last
    row repeats the final control.  Frozen robots carry a zero control.
    """

    times: list
    states: list
    controls: list
    pairwise: list
    clearance: list
    arrival: np.ndarray
    control_dims: tuple
    sigma: float
    dead_end_epochs: int = 0
    fallback_epochs: int = 0
    box_excursion: bool = False
    epochs: int = 0
    nodes: list = field(default_factory=list)

    @property
    def min_pairwise_distance(self) -> float:
        return float(min(self.pairwise)) if self.pairwise else math.inf

    @property
    def min_clearance(self) -> float:
        return float(min(self.clearance)) if self.clearance else math.inf

    @property
    def all_arrived(self) -> bool:
        return bool(np.all(np.isfinite(self.arrival)))

    @property
    def feasible(self) -> bool:
        return (self.all_arrived and self.min_pairwise_distance >= self.sigma - TOL
                and self.min_clearance >= 0 and self.dead_end_epochs == 0)


def _rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _min_pairwise(xs) -> float:
    n = len(xs)
    if n < 2:
        return math.inf
    return min(float(np.linalg.norm(xs[i] - xs[j])) for i in range(n) for j in range(i + 1, n))


def _clearance(scenario: Scenario, xs) -> float:
    best = math.inf
    for i, x in enumerate(xs):
        for o in scenario.obstacles[i]:
            best = min(best, float(o.signed_distance(x)))
    return best


class Controller:
    """Nearest-node policy lookup with uniform selection among stored solutions.

    Args:
        result: solved stage whose policy drives the team.
        goal_mode: ``"approach"`` steers goal-proximate robots with the sampled
            control whose one-step endpoint is closest to the goal; ``"hold"``
            keeps them still.
        refined: optional goal-neighbourhood stage whose policy takes over
            where it has entries.
        control_pick: ``"uniform"`` draws uniformly over (team control,
            successor, value) triples; ``"track"`` draws a (successor, value)
            pair uniformly and steers each robot with the sample whose
            endpoint from the actual state lands closest to the successor.
    """

    def __init__(self, result: StageResult, goal_mode: str = "approach", refined: StageResult | None = None,
                 control_density=DEFAULT_CONTROL_DENSITY, control_pick: str = "uniform"):
        if goal_mode not in ("approach", "hold"):
            raise ValueError(f"unknown goal mode {goal_mode!r}")
        if control_pick not in ("uniform", "track"):
            raise ValueError(f"unknown control pick {control_pick!r}")
        self.control_pick = control_pick
        self.result = result
        self.refined = refined
        self.goal_mode = goal_mode
        scen = result.stage.scenario
        self.samples = [control_grid(r, control_density if not isinstance(control_density, dict)
                                     else control_density.get(r.id, DEFAULT_CONTROL_DENSITY))
                        for r in scen.robots]

    def _approach(self, i: int, x: np.ndarray, eps: float) -> np.ndarray:
        scen = self.result.stage.scenario
        if self.goal_mode == "hold":
            return None
        u = self.samples[i]
        ends = x + eps * scen.robots[i].velocity(np.broadcast_to(x, (len(u), len(x))), u)
        d = np.asarray(union_distance(scen.goals[i], ends))
        return u[int(np.argmin(d))]

    def _track(self, i: int, x: np.ndarray, target: np.ndarray, eps: float) -> np.ndarray:
        scen = self.result.stage.scenario
        u = self.samples[i]
        ends = x + eps * scen.robots[i].velocity(np.broadcast_to(x, (len(u), len(x))), u)
        return u[int(np.argmin(((ends - target) ** 2).sum(axis=1)))]

    def decide(self, xs, rng: np.random.Generator):
        """Return ``(controls, node, eps, dead_end)``; ``None`` controls mean stay put."""
        res = self.result
        if self.refined is not None:
            node = self.refined.stage.nearest_node(xs)
            if self.refined.update_mask[node] and self.refined.policy.has_entries(node):
                res = self.refined
        stage = res.stage
        node = stage.nearest_node(xs)
        eps = stage.eps
        pick = res.policy.choose(node, rng, by_entry=self.control_pick == "track")
        n = stage.n_robots
        if pick is None:
            parts = stage.decode(node)
            prox = [bool(stage.robot_proximate[i][parts[i]]) for i in range(n)]
            if all(prox):
                return [self._approach(i, xs[i], eps) for i in range(n)], node, eps, False
            return None, node, eps, True
        controls, entry = pick
        target = stage.node_state(entry.successor)
        out = []
        for i in range(n):
            if controls[i] is None:
                out.append(self._approach(i, xs[i], eps))
            elif self.control_pick == "track":
                out.append(self._track(i, xs[i], target[i], eps))
            else:
                out.append(np.asarray(controls[i], dtype=float))
        return out, node, eps, False


def simulate(scenario: Scenario, result: StageResult, x0, seed: int = 0, horizon: float = 60.0,
             goal_mode: str = "approach", refined: StageResult | None = None,
             control_density=DEFAULT_CONTROL_DENSITY, control_pick: str = "uniform") -> Trajectory:
    """Run the closed loop from ``x0`` until every robot arrives or ``horizon`` elapses.

    ``result`` is the solved stage whose policy drives the team.  Controls
    are held for one epoch of length ``eps`` and integrated with RK4 at
    ``eps / 20``.
    """
    xs = [np.asarray(x, dtype=float).copy() for x in x0]
    if not scenario.in_safety(xs):
        raise ValueError("initial team state is outside the safety region")
    ctl = Controller(result, goal_mode, refined, control_density, control_pick)
    rng = np.random.default_rng(seed)
    n = scenario.n_robots
    robots = scenario.robots
    cdims = tuple(r.control_dim for r in robots)
    zero = [np.zeros(d) for d in cdims]
    arrival = np.full(n, np.inf)
    for i in range(n):
        if scenario.in_goal(i, xs[i]):
            arrival[i] = 0.0
    t = 0.0
    times, states, controls, pair, clear = [0.0], [[x.copy() for x in xs]], [], [_min_pairwise(xs)], [
        _clearance(scenario, xs)]
    traj = Trajectory(times, states, controls, pair, clear, arrival, cdims, scenario.sigma)
    prev = None
    fallback_left = 0
    while t < horizon - 1e-12 and not np.all(np.isfinite(arrival)):
        u, node, eps, dead = ctl.decide(xs, rng)
        traj.nodes.append(int(node))
        traj.epochs += 1
        if dead:
            traj.dead_end_epochs += 1
            if prev is not None and fallback_left == 0:
                u, fallback_left = prev, 1
                traj.fallback_epochs += 1
            else:
                u, fallback_left = [None] * n, 0
        else:
            fallback_left = 0
        applied = [zero[i] if (u[i] is None or np.isfinite(arrival[i])) else u[i] for i in range(n)]
        moving = [u[i] is not None and not np.isfinite(arrival[i]) for i in range(n)]
        dt = eps / SUBSTEPS
        for _ in range(SUBSTEPS):
            active = [moving[i] and not np.isfinite(arrival[i]) for i in range(n)]
            for i in range(n):
                if active[i]:
                    r, ui = robots[i], applied[i]
                    xs[i] = _rk4(lambda x, r=r, ui=ui: r.velocity(x, ui), xs[i], dt)
            t += dt
            for i in range(n):
                if not np.isfinite(arrival[i]) and scenario.in_goal(i, xs[i]):
                    arrival[i] = t
                if not scenario.state_boxes[i].contains(xs[i], 1e-9):
                    traj.box_excursion = True
            controls.append([applied[i] if active[i] else zero[i] for i in range(n)])
            times.append(t)
            states.append([x.copy() for x in xs])
            pair.append(_min_pairwise(xs))
            clear.append(_clearance(scenario, xs))
        prev = [applied[i] if moving[i] else None for i in range(n)]
    controls.append([zero[i] for i in range(n)] if not controls else controls[-1])
    return traj


def policy_lookup(result: StageResult, state, seed: int = 0, goal_mode: str = "approach"):
    """Team control for ``state``: nearest safety node, then a uniform draw."""
    u, _, _, dead = Controller(result, goal_mode).decide([np.asarray(s, float) for s in state],
                                                        np.random.default_rng(seed))
    return None if dead else u


def trajectory_metrics(traj: Trajectory, scenario: Scenario | None = None) -> dict:
    """Arrival times, distance and speed series, and the feasibility verdict."""
    if not traj.times:
        raise ValueError("empty trajectory")
    states = traj.states
    n = len(states[0])
    speeds = []
    for i in range(n):
        s = [0.0]
        for k in range(1, len(states)):
            dt = traj.times[k] - traj.times[k - 1]
            s.append(float(np.linalg.norm(states[k][i] - states[k - 1][i]) / dt) if dt > 0 else 0.0)
        speeds.append(s)
    return {
        "arrival_times": [None if not np.isfinite(a) else float(a) for a in traj.arrival],
        "all_arrived": traj.all_arrived,
        "min_pairwise_distance": None if not np.isfinite(traj.min_pairwise_distance) else traj.min_pairwise_distance,
        "min_obstacle_clearance": None if not np.isfinite(traj.min_clearance) else traj.min_clearance,
        "pairwise_distance_series": [None if not np.isfinite(d) else float(d) for d in traj.pairwise],
        "speed_series": speeds,
        "dead_end_epochs": traj.dead_end_epochs,
        "fallback_epochs": traj.fallback_epochs,
        "box_excursion": traj.box_excursion,
        "epochs": traj.epochs,
        "feasible": traj.feasible,
    }
