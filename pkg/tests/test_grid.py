import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pareto_mrmp.grid import ScheduleError, build_stage, coverage_radius, embed_joint
from pareto_mrmp.model import Box, RobotSpec, Scenario

from conftest import line_scenario


def square_pair(sigma=0.25):
    r = tuple(RobotSpec(i, "single_integrator_2d", (-1, -1), (1, 1), 2, math.sqrt(2)) for i in range(2))
    box = Box((0, 0), (1, 1))
    goals = ((Box((0, 0), (0.1, 0.1)),), (Box((0.9, 0.9), (1, 1)),))
    return Scenario(r, (box, box), ((), ()), goals, sigma)


def test_lattice_on_unit_interval():
    stage = build_stage(line_scenario(0.0, 1.0, goal=(0.0, 0.0)), 0.5, 1.2)
    assert stage.lattices[0].coords.ravel().tolist() == [0.0, 0.5, 1.0]
    assert stage.n_joint == 3


def test_refined_lattice_contains_coarse_nodes(intersection):
    coarse = build_stage(intersection, 0.2, 1.0)
    fine = build_stage(intersection, 0.1, 0.7)
    ids = embed_joint(coarse, fine)
    assert np.allclose(fine.joint_coords(ids), coarse.joint_coords(np.arange(coarse.n_joint)))


def test_joint_node_count_is_product(crossing_stage):
    assert crossing_stage.sizes == (5, 5) and crossing_stage.n_joint == 25
    scen = Scenario(tuple(RobotSpec(i, "single_integrator", (-1,), (1,), 1, 1.0) for i in range(2)),
                    (Box((0,), (1,)), Box((3,), (4,))), ((), ()), ((Box((0,), (0,)),), (Box((4,), (4,)),)), 0.1)
    assert build_stage(scen, 0.5, 1.2).n_joint == 9


def test_extent_must_be_multiple_of_h():
    with pytest.raises(ScheduleError):
        build_stage(line_scenario(0.0, 1.0, goal=(0.0, 0.0)), 0.3, 1.0)


def test_eps_must_exceed_two_h():
    with pytest.raises(ScheduleError):
        build_stage(line_scenario(), 0.1, 0.2)


def test_encode_decode_roundtrip(crossing_stage):
    ids = np.arange(crossing_stage.n_joint)
    assert np.array_equal(crossing_stage.encode(crossing_stage.decode(ids).reshape(-1, 2)), ids)


def test_safety_single_robot_no_obstacles():
    stage = build_stage(line_scenario(), 0.1, 0.4)
    assert stage.safety_mask.all()


def test_colocated_robots_are_unsafe(crossing_stage):
    origin = crossing_stage.node_of_state([(0.0, 0.0), (0.0, 0.0)])
    assert not crossing_stage.safety_mask[origin]


def test_expanded_safety_admits_near_miss():
    scen = square_pair()
    plain = build_stage(scen, 0.1, 0.4)
    wide = build_stage(scen, 0.1, 0.4, expand=True)
    # pairwise distance 0.2 = sigma - h/2
    node = plain.node_of_state([(0.5, 0.5), (0.5, 0.7)])
    assert not plain.safety_mask[node]
    assert wide.safety_mask[node]
    assert np.all(wide.safety_mask[plain.safety_mask])


def test_pair_margin_shrinks_safety():
    scen = square_pair()
    plain = build_stage(scen, 0.1, 0.4)
    tight = build_stage(scen, 0.1, 0.4, pair_margin=0.1)
    node = plain.node_of_state([(0.5, 0.5), (0.5, 0.8)])
    assert plain.safety_mask[node] and not tight.safety_mask[node]
    assert not np.any(tight.safety_mask & ~plain.safety_mask)


def test_goal_proximity_boundaries():
    # M eps + h = 0.3 + 0.1 = 0.4
    stage = build_stage(line_scenario(0.0, 1.0, goal=(0.0, 0.0)), 0.1, 0.3)
    prox = stage.robot_proximate[0]
    coords = stage.lattices[0].coords.ravel()
    assert prox[np.isclose(coords, 0.0)].all()
    assert prox[np.isclose(coords, 0.4)].all()
    assert not prox[np.isclose(coords, 0.8)].any()
    assert stage.goal_proximity_set(int(np.argmin(np.abs(coords - 0.4)))) == frozenset({0})


def test_equivalent_nodes():
    stage = build_stage(line_scenario(0.0, 1.0, goal=(0.0, 0.0)), 0.1, 0.3)
    far = int(np.argmin(np.abs(stage.lattices[0].coords.ravel() - 0.9)))
    assert stage.equivalent_nodes(far).tolist() == [far]
    near = 2
    # nodes 0, 0.1, 0.2, 0.3, 0.4 are all goal-proximate
    assert stage.equivalent_nodes(near).tolist() == [0, 1, 2, 3, 4]


def test_equivalent_nodes_reflexive_and_consistent(crossing_stage):
    st_ = crossing_stage
    for j in range(st_.n_joint):
        eq = st_.equivalent_nodes(j)
        assert j in eq
        for k in eq:
            if st_.goal_proximity_set(int(k)) == st_.goal_proximity_set(j):
                assert np.array_equal(st_.equivalent_nodes(int(k)), eq)


def test_goal_proximity_shrinks_under_refinement(intersection):
    coarse = build_stage(intersection, 0.2, math.sqrt(0.2 / (0.25 * math.sqrt(2))))
    fine = build_stage(intersection, 0.1, math.sqrt(0.1 / (0.25 * math.sqrt(2))))
    ids = embed_joint(coarse, fine)
    for j in range(0, coarse.n_joint, 7):
        assert fine.goal_proximity_set(int(ids[j])) <= coarse.goal_proximity_set(j)


def test_nodes_within():
    stage = build_stage(line_scenario(0.0, 1.0, goal=(0.0, 0.0)), 0.1, 0.3)
    c = stage.lattices[0].coords
    assert stage.nodes_within([c[3]], 0.0).tolist() == [3]
    assert stage.nodes_within([np.array([0.35])], 0.1).tolist() == [3, 4]
    assert stage.nodes_within([np.array([0.5])], 2.0).tolist() == list(range(11))
    with pytest.raises(ValueError):
        stage.nodes_within([np.array([0.5])], -1.0)


def test_nearest_node_rules():
    stage = build_stage(line_scenario(0.0, 0.4, goal=(0.0, 0.0)), 0.1, 0.3)
    all_nodes = np.arange(stage.n_joint)
    assert stage.nearest_node([np.array([0.2])], all_nodes) == 2
    assert stage.nearest_node([np.array([0.25])], all_nodes) == 2
    # linear scan oracle for points outside the hull
    for x in (-0.7, 0.9, 0.33):
        d = np.abs(stage.lattices[0].coords.ravel() - x)
        assert stage.nearest_node([np.array([x])], all_nodes) == int(np.flatnonzero(d == d.min()).min())


@given(st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4))
def test_lattice_covers_box(c):
    stage = build_stage(square_pair(), 0.1, 0.4)
    point = [np.array(c[:2]), np.array(c[2:])]
    j = stage.nearest_node(point, np.arange(stage.n_joint))
    d = np.linalg.norm(np.concatenate(point) - np.concatenate(stage.node_state(j)))
    assert d <= coverage_radius(stage) + 1e-12
