import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pareto_mrmp.grid import build_stage
from pareto_mrmp.io import load_scenario
from pareto_mrmp.model import Box, RobotSpec, Scenario, check_goal_standoff

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def line_scenario(lo=-1.0, hi=1.0, goal=(-0.05, 0.05), speed=1.0, sigma=0.1, obstacles=()):
    robot = RobotSpec(0, "single_integrator", (-speed,), (speed,), 1, speed)
    return Scenario((robot,), (Box((lo,), (hi,)),), (tuple(obstacles),), ((Box((goal[0],), (goal[1],)),),),
                    sigma)


@pytest.fixture(scope="session")
def crossing():
    return load_scenario("crossing_lines")


@pytest.fixture(scope="session")
def crossing_stage(crossing):
    return build_stage(crossing, 0.1, 0.25)


@pytest.fixture(scope="session")
def intersection():
    return load_scenario("intersection_2robot")


@pytest.fixture(scope="session")
def line():
    return load_scenario("line_1robot")


@pytest.fixture(scope="session")
def line_stage(line):
    return build_stage(line, 0.1, math.sqrt(0.1))


def random_micro_scenario(rng: np.random.Generator, h: float = 0.1, eps: float = 0.25) -> Scenario:
    """Small random 1- or 2-robot single-integrator instance.

    Robot 0 runs along y=0 towards its goal at the right end; robot 1 runs
    along a vertical lane crossing it, with its goal far enough up that every
    goal, inflated by ``sigma + M_i eps + h``, misses the other robot's lane.
    """
    n = int(rng.integers(1, 3))
    sigma = 0.05
    length = h * int(rng.integers(4, 6))
    speeds = [float(rng.choice([0.2, 0.3, 0.5])) for _ in range(n)]
    robots = [RobotSpec(0, "single_integrator_2d", (-speeds[0], 0.0), (speeds[0], 0.0), 2, speeds[0])]
    boxes = [Box((0.0, 0.0), (length, 0.0))]
    goals = [(Box((length, 0.0), (length, 0.0)),)]
    if n == 2:
        off = h * int(rng.integers(0, 2))
        below, above = h * int(rng.integers(1, 3)), h * int(rng.integers(3, 5))
        robots.append(RobotSpec(1, "single_integrator_2d", (0.0, -speeds[1]), (0.0, speeds[1]), 2, speeds[1]))
        boxes.append(Box((off, -below), (off, above)))
        goals.append((Box((off, above), (off, above)),))
    scen = Scenario(tuple(robots), tuple(boxes), ((),) * n, tuple(goals), sigma)
    assert check_goal_standoff(scen, h, eps) == []
    return scen
