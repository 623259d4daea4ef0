"""Robot dynamics, team configuration and region predicates."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

#: slack for boundary-inclusive comparisons on floating coordinates
TOL = 1e-9


class ScenarioError(ValueError):
    """A scenario violates one of its invariants."""


class DynamicsKind(str, enum.Enum):
    SINGLE_INTEGRATOR = "single_integrator"
    SINGLE_INTEGRATOR_2D = "single_integrator_2d"
    UNICYCLE = "unicycle"
    CUSTOM_AFFINE = "custom_affine"


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``[lo, hi]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not lo:
            raise ScenarioError("box bounds must be nonempty and of equal length")
        if any(a > b for a, b in zip(lo, hi)):
            raise ScenarioError(f"box with lo > hi: {lo} {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, x, tol: float = 0.0) -> np.ndarray | bool:
        x = np.asarray(x, dtype=float)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        inside = np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def distance(self, x) -> np.ndarray | float:
        """Euclidean distance from point(s) ``x`` to the box (0 inside)."""
        x = np.asarray(x, dtype=float)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        gap = np.maximum(np.maximum(lo - x, x - hi), 0.0)
        d = np.sqrt((gap ** 2).sum(axis=-1))
        return float(d) if d.ndim == 0 else d

    def signed_distance(self, x) -> np.ndarray | float:
        """Positive outside, minus the depth to the nearest face inside."""
        x = np.asarray(x, dtype=float)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        outside = self.distance(x)
        depth = np.minimum(x - lo, hi - x).min(axis=-1)
        d = np.where(np.asarray(outside) > 0, outside, -np.maximum(depth, 0.0))
        return float(d) if np.ndim(d) == 0 else d

    def gap_to(self, other: "Box") -> float:
        lo1, hi1 = np.asarray(self.lo), np.asarray(self.hi)
        lo2, hi2 = np.asarray(other.lo), np.asarray(other.hi)
        gap = np.maximum(np.maximum(lo2 - hi1, lo1 - hi2), 0.0)
        return float(np.sqrt((gap ** 2).sum()))

    def intersects(self, other: "Box") -> bool:
        return all(a <= d and c <= b for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def to_json(self) -> dict:
        return {"min": list(self.lo), "max": list(self.hi)}


def union_distance(boxes: Sequence[Box], x):
    """Distance from ``x`` to a finite union of boxes (``inf`` if empty)."""
    x = np.asarray(x, dtype=float)
    if not boxes:
        return np.full(x.shape[:-1], np.inf) if x.ndim > 1 else math.inf
    d = np.min([np.asarray(b.distance(x)) for b in boxes], axis=0)
    return float(d) if np.ndim(d) == 0 else d


@dataclass(frozen=True)
class RobotSpec:
    """One robot: dynamics family, control box, speed bound and Lipschitz constant.

    For ``custom_affine`` the velocity is ``A x + B u + c``.
    """

    id: int
    dynamics: DynamicsKind
    control_lo: tuple
    control_hi: tuple
    state_dim: int
    speed_bound: float
    lipschitz: float = 0.0
    A: tuple | None = None
    B: tuple | None = None
    c: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "dynamics", DynamicsKind(self.dynamics))
        lo = tuple(float(v) for v in self.control_lo)
        hi = tuple(float(v) for v in self.control_hi)
        object.__setattr__(self, "control_lo", lo)
        object.__setattr__(self, "control_hi", hi)
        if not lo or len(lo) != len(hi) or any(a > b for a, b in zip(lo, hi)):
            raise ScenarioError(f"robot {self.id}: control box must be nonempty and bounded")
        if not all(math.isfinite(v) for v in lo + hi):
            raise ScenarioError(f"robot {self.id}: control box must be bounded")
        if not self.speed_bound > 0:
            raise ScenarioError(f"robot {self.id}: speed bound must be positive")
        if self.lipschitz < 0:
            raise ScenarioError(f"robot {self.id}: Lipschitz constant must be nonnegative")
        kind = self.dynamics
        if kind is DynamicsKind.UNICYCLE and (self.state_dim != 2 or len(lo) != 2):
            raise ScenarioError(f"robot {self.id}: unicycle needs 2-D state and (heading, speed) control")
        if kind is DynamicsKind.SINGLE_INTEGRATOR_2D and (self.state_dim != 2 or len(lo) != 2):
            raise ScenarioError(f"robot {self.id}: single_integrator_2d needs 2-D state and control")
        if kind is DynamicsKind.SINGLE_INTEGRATOR and len(lo) != self.state_dim:
            raise ScenarioError(f"robot {self.id}: single integrator needs control_dim == state_dim")
        if kind is DynamicsKind.CUSTOM_AFFINE:
            if self.A is None or self.B is None:
                raise ScenarioError(f"robot {self.id}: custom_affine needs A and B")
            A = np.asarray(self.A, dtype=float)
            B = np.asarray(self.B, dtype=float)
            c = np.zeros(self.state_dim) if self.c is None else np.asarray(self.c, dtype=float)
            if A.shape != (self.state_dim, self.state_dim) or B.shape != (self.state_dim, len(lo)):
                raise ScenarioError(f"robot {self.id}: affine matrices have wrong shape")
            object.__setattr__(self, "A", tuple(map(tuple, A)))
            object.__setattr__(self, "B", tuple(map(tuple, B)))
            object.__setattr__(self, "c", tuple(c))

    @property
    def control_dim(self) -> int:
        return len(self.control_lo)

    def control_in_box(self, u, tol: float = TOL) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= np.asarray(self.control_lo) - tol) and np.all(u <= np.asarray(self.control_hi) + tol))

    def velocity(self, x, u) -> np.ndarray:
        """Vectorized ``f(x, u)``; no control-box check."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        kind = self.dynamics
        if kind is DynamicsKind.UNICYCLE:
            theta, v = u[..., 0], u[..., 1]
            out = np.stack([v * np.cos(theta), v * np.sin(theta)], axis=-1)
            return np.broadcast_to(out, np.broadcast_shapes(out.shape, x.shape)).copy()
        if kind in (DynamicsKind.SINGLE_INTEGRATOR, DynamicsKind.SINGLE_INTEGRATOR_2D):
            return np.broadcast_to(u, np.broadcast_shapes(u.shape, x.shape)).astype(float)
        A = np.asarray(self.A)
        B = np.asarray(self.B)
        return x @ A.T + u @ B.T + np.asarray(self.c)

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "dynamics": self.dynamics.value,
            "control_box": {"min": list(self.control_lo), "max": list(self.control_hi)},
            "state_dim": self.state_dim,
            "speed_bound": self.speed_bound,
            "lipschitz": self.lipschitz,
        }
        if self.dynamics is DynamicsKind.CUSTOM_AFFINE:
            d.update(A=[list(r) for r in self.A], B=[list(r) for r in self.B], c=list(self.c))
        return d


def eval_dynamics(robot: RobotSpec, state, control) -> np.ndarray:
    """Velocity of ``robot`` at ``state`` under ``control``."""
    if not robot.control_in_box(control):
        raise ValueError(f"control {list(np.ravel(control))} outside the control box of robot {robot.id}")
    state = np.asarray(state, dtype=float)
    if state.shape != (robot.state_dim,):
        raise ValueError(f"state of robot {robot.id} must have length {robot.state_dim}")
    return robot.velocity(state, np.asarray(control, dtype=float))


@dataclass(frozen=True)
class Scenario:
    """Team configuration: state boxes, obstacles, goals and safety distance."""

    robots: tuple
    state_boxes: tuple
    obstacles: tuple
    goals: tuple
    sigma: float
    name: str = "scenario"
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "robots", tuple(self.robots))
        object.__setattr__(self, "state_boxes", tuple(self.state_boxes))
        object.__setattr__(self, "obstacles", tuple(tuple(o) for o in self.obstacles))
        object.__setattr__(self, "goals", tuple(tuple(g) for g in self.goals))
        self.validate()

    @property
    def n_robots(self) -> int:
        return len(self.robots)

    def validate(self) -> None:
        n = len(self.robots)
        if n == 0:
            raise ScenarioError("scenario needs at least one robot")
        if not (len(self.state_boxes) == len(self.obstacles) == len(self.goals) == n):
            raise ScenarioError("state_boxes, obstacles and goals need one entry per robot")
        if not self.sigma > 0:
            raise ScenarioError("safety distance sigma must be positive")
        dims = {r.state_dim for r in self.robots}
        if n > 1 and len(dims) != 1:
            raise ScenarioError("pairwise distances need a common state dimension")
        for i, r in enumerate(self.robots):
            if self.state_boxes[i].dim != r.state_dim:
                raise ScenarioError(f"robot {i}: state box dimension mismatch")
            if not self.goals[i]:
                raise ScenarioError(f"robot {i}: goal region is empty")
            for g in self.goals[i]:
                if g.dim != r.state_dim:
                    raise ScenarioError(f"robot {i}: goal box dimension mismatch")
                for o in self.obstacles[i]:
                    if g.intersects(o):
                        raise ScenarioError(f"goal-obstacle disjointness violated for robot {i}")
        for i in range(n):
            for j in range(i + 1, n):
                gap = min(a.gap_to(b) for a in self.goals[i] for b in self.goals[j])
                if gap < self.sigma - TOL:
                    raise ScenarioError(
                        f"goal separation violated: goals of robots {i} and {j} are {gap:.4g} < sigma apart")

    # -- region predicates -------------------------------------------------
    def in_goal(self, i: int, x) -> np.ndarray | bool:
        return union_distance(self.goals[i], x) <= 0.0

    def in_obstacle(self, i: int, x) -> np.ndarray | bool:
        x = np.asarray(x, dtype=float)
        if not self.obstacles[i]:
            return np.zeros(x.shape[:-1], dtype=bool) if x.ndim > 1 else False
        inside = np.any([np.asarray(o.contains(x)) for o in self.obstacles[i]], axis=0)
        return bool(inside) if np.ndim(inside) == 0 else inside

    def goal_distance(self, i: int, x):
        return union_distance(self.goals[i], x)

    def in_free(self, i: int, x) -> np.ndarray | bool:
        """Membership in robot ``i``'s free region (box, obstacles, goal standoff)."""
        x = np.asarray(x, dtype=float)
        ok = np.asarray(self.state_boxes[i].contains(x, TOL)) & ~np.asarray(self.in_obstacle(i, x))
        for j in range(self.n_robots):
            if j != i:
                ok = ok & (np.asarray(union_distance(self.goals[j], x)) >= self.sigma - TOL)
        return bool(ok) if ok.ndim == 0 else ok

    def in_safety(self, state: Sequence) -> bool:
        """Joint safety: every robot free and all pairwise distances >= sigma."""
        if len(state) != self.n_robots:
            raise ValueError("state does not match the number of robots")
        xs = [np.asarray(s, dtype=float) for s in state]
        for i, x in enumerate(xs):
            if x.shape != (self.robots[i].state_dim,):
                raise ValueError(f"state of robot {i} has wrong dimension")
            if not self.in_free(i, x):
                return False
        for i in range(len(xs)):
            for j in range(i + 1, len(xs)):
                if np.linalg.norm(xs[i] - xs[j]) < self.sigma - TOL:
                    return False
        return True

    def hash(self) -> str:
        from .io import scenario_hash

        return scenario_hash(self)


def in_safety(scenario: Scenario, state) -> bool:
    return scenario.in_safety(state)


def team_bounds(scenario: Scenario) -> tuple[float, float]:
    """``(M+, l+)``: 2-norm aggregates of the speed bounds and Lipschitz constants."""
    m = math.sqrt(sum(r.speed_bound ** 2 for r in scenario.robots))
    l = math.sqrt(sum(r.lipschitz ** 2 for r in scenario.robots))
    return m, l


def control_grid(robot: RobotSpec, density) -> np.ndarray:
    """Regular sample of the control box; ``density`` per dimension (int or list).

    Degenerate intervals contribute one sample.
    """
    if np.isscalar(density):
        density = [int(density)] * robot.control_dim
    axes = []
    for lo, hi, k in zip(robot.control_lo, robot.control_hi, density):
        if k < 1:
            raise ValueError("control density must be positive")
        axes.append(np.array([lo]) if hi == lo or k == 1 else np.linspace(lo, hi, int(k)))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def audit_speed_bound(robot: RobotSpec, box: Box, samples: int = 2000, seed: int = 0) -> float:
    """Largest sampled ``|f(x, u)|`` over the state and control boxes.

    Returns the observed maximum; raises ``ScenarioError`` if it exceeds the
    declared speed bound.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(box.lo, box.hi, size=(samples, robot.state_dim))
    u = rng.uniform(robot.control_lo, robot.control_hi, size=(samples, robot.control_dim))
    corners = control_grid(robot, 2)
    x = np.vstack([x, np.repeat(x[:1], len(corners), axis=0)])
    u = np.vstack([u, corners])
    top = float(np.linalg.norm(robot.velocity(x, u), axis=1).max())
    if top > robot.speed_bound + TOL:
        raise ScenarioError(f"robot {robot.id}: sampled speed {top:.4g} exceeds bound {robot.speed_bound}")
    return top


def check_goal_standoff(scenario: Scenario, h1: float, eps1: float, pitch: float | None = None) -> list[str]:
    """Check that each goal, inflated by ``sigma + M_i eps1 + h1``, misses the
    other robots' free regions.  Returns human-readable violations (empty if ok).

    Free regions are probed on a lattice of pitch ``h1 / 4`` (or ``pitch``).
    """
    pitch = pitch or h1 / 4
    problems = []
    for i, r in enumerate(scenario.robots):
        radius = scenario.sigma + r.speed_bound * eps1 + h1
        for j in range(scenario.n_robots):
            if j == i:
                continue
            box = scenario.state_boxes[j]
            far = min(g.gap_to(box) for g in scenario.goals[i])
            if far > radius + TOL:
                continue
            axes = [np.arange(lo, hi + pitch / 2, pitch) for lo, hi in zip(box.lo, box.hi)]
            mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
            free = mesh[np.asarray(scenario.in_free(j, mesh))]
            if len(free) == 0:
                continue
            d = float(np.min(union_distance(scenario.goals[i], free)))
            if d <= radius + TOL:
                problems.append(
                    f"goal of robot {i} inflated by {radius:.4g} reaches free region of robot {j} (gap {d:.4g})")
    return problems
