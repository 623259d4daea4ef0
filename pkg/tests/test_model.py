import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pareto_mrmp.model import (Box, RobotSpec, Scenario, ScenarioError, audit_speed_bound, check_goal_standoff,
                               control_grid, eval_dynamics, in_safety, team_bounds)

from conftest import line_scenario


def unicycle(i=0, vmax=0.25):
    return RobotSpec(i, "unicycle", (-math.pi, 0.0), (math.pi, vmax), 2, vmax)


def plane_pair(sigma=0.4, obstacles=((), ())):
    r = [RobotSpec(i, "single_integrator_2d", (-1, -1), (1, 1), 2, math.sqrt(2)) for i in range(2)]
    box = Box((-2, -2), (2, 2))
    goals = ((Box((1.5, 1.5), (2, 2)),), (Box((-2, -2), (-1.5, -1.5)),))
    return Scenario(tuple(r), (box, box), obstacles, goals, sigma)


def test_unicycle_velocity():
    r = unicycle()
    assert np.allclose(eval_dynamics(r, (0, 0), (0, 0.25)), (0.25, 0))
    assert np.allclose(eval_dynamics(r, (3, -1), (1.2, 0.0)), (0, 0))


def test_single_integrator_velocity():
    r = RobotSpec(0, "single_integrator_2d", (-1, -1), (1, 1), 2, 1.5)
    assert np.allclose(eval_dynamics(r, (1, 1), (-0.3, 0.4)), (-0.3, 0.4))
    with pytest.raises(ValueError):
        eval_dynamics(r, (1, 1), (2.0, 0.0))


def test_custom_affine_velocity():
    r = RobotSpec(0, "custom_affine", (-1,), (1,), 1, 3.0, 1.0, A=[[-1.0]], B=[[1.0]], c=[0.5])
    assert np.allclose(eval_dynamics(r, (1.0,), (0.2,)), (-0.3,))


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-math.pi, math.pi), st.floats(0, 0.25))
def test_unicycle_speed_within_bound(x, y, theta, v):
    assert np.linalg.norm(eval_dynamics(unicycle(), (x, y), (theta, v))) <= 0.25 + 1e-9


def test_speed_audit():
    assert audit_speed_bound(unicycle(), Box((0, 0), (1, 1))) <= 0.25 + 1e-9
    liar = RobotSpec(0, "single_integrator_2d", (-1, -1), (1, 1), 2, 1.0)
    with pytest.raises(ScenarioError):
        audit_speed_bound(liar, Box((0, 0), (1, 1)))


@pytest.mark.parametrize("kwargs", [
    dict(control_lo=(1.0,), control_hi=(0.0,)),
    dict(control_lo=(-math.inf,), control_hi=(1.0,)),
    dict(speed_bound=0.0),
    dict(lipschitz=-1.0),
])
def test_robot_validation(kwargs):
    base = dict(id=0, dynamics="single_integrator", control_lo=(-1.0,), control_hi=(1.0,), state_dim=1,
                speed_bound=1.0)
    base.update(kwargs)
    with pytest.raises(ScenarioError):
        RobotSpec(**base)


def test_team_bounds():
    two = Scenario(tuple(unicycle(i) for i in range(2)), (Box((0, 0), (1, 0)), Box((0, 1), (1, 1))), ((), ()),
                   ((Box((1, 0), (1, 0)),), (Box((0, 1), (0, 1)),)), 0.4)
    assert team_bounds(two)[0] == pytest.approx(0.25 * math.sqrt(2))
    assert team_bounds(line_scenario(speed=0.7)) == (0.7, 0.0)
    robots = tuple(RobotSpec(i, "single_integrator", (-1,), (1,), 1, m) for i, m in enumerate((3.0, 4.0, 1e-9)))
    box = Box((0,), (100,))
    goals = tuple((Box((g,), (g,)),) for g in (0.0, 50.0, 100.0))
    three = Scenario(robots, (box,) * 3, ((),) * 3, goals, 1.0)
    assert team_bounds(three)[0] == pytest.approx(5.0)


def test_in_safety_boundary_and_obstacles():
    scen = plane_pair(obstacles=((Box((0.5, 0.5), (0.8, 0.8)),), ()))
    assert in_safety(scen, [(0.0, 0.0), (0.4, 0.0)])
    assert not in_safety(scen, [(0.0, 0.0), (0.36, 0.0)])
    assert not in_safety(scen, [(0.6, 0.6), (-1.0, 0.0)])


@given(st.lists(st.floats(-1.4, 1.4), min_size=4, max_size=4))
def test_in_safety_symmetric_in_robot_order(c):
    scen = plane_pair()
    a, b = (c[0], c[1]), (c[2], c[3])
    # swap the goals with the robots so the free regions swap too
    swapped = Scenario(scen.robots, scen.state_boxes, scen.obstacles, scen.goals[::-1], scen.sigma)
    assert scen.in_safety([a, b]) == swapped.in_safety([b, a])


def test_goal_separation_rejected():
    r = [RobotSpec(i, "single_integrator_2d", (-1, -1), (1, 1), 2, 1.5) for i in range(2)]
    box = Box((-1, -1), (1, 1))
    with pytest.raises(ScenarioError, match="goal separation"):
        Scenario(tuple(r), (box, box), ((), ()), ((Box((0, 0), (0.1, 0.1)),), (Box((0.2, 0), (0.3, 0.1)),)), 0.4)


def test_goal_obstacle_overlap_rejected():
    with pytest.raises(ScenarioError, match="goal-obstacle"):
        line_scenario(obstacles=(Box((0.0,), (0.2,)),))


def test_goal_standoff_check(intersection):
    assert check_goal_standoff(intersection, 0.2, math.sqrt(0.2 / team_bounds(intersection)[0])) == []
    problems = check_goal_standoff(plane_pair(), 0.5, 1.2)
    assert problems and "goal of robot" in problems[0]


def test_control_grid_density():
    r = unicycle()
    assert control_grid(r, 3).shape == (9, 2)
    flat = RobotSpec(0, "single_integrator_2d", (-0.2, 0.0), (0.2, 0.0), 2, 0.2)
    assert control_grid(flat, 3).tolist() == [[-0.2, 0.0], [0.0, 0.0], [0.2, 0.0]]


def test_box_distances():
    b = Box((0, 0), (1, 1))
    assert b.distance((2, 1)) == pytest.approx(1.0)
    assert b.signed_distance((0.5, 0.5)) == pytest.approx(-0.5)
    assert b.contains((1.0, 1.0)) and not b.contains((1.1, 0.0))
