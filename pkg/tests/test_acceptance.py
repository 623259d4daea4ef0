"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[Cn] PASS|FAIL`` line (visible even under output
capture) before asserting.
"""
import math
import time

import numpy as np
import pytest

from pareto_mrmp.cli import RunConfig, bench_error_curve, cmd_plan, cmd_simulate
from pareto_mrmp.dynamics import SuccessorCache, kappa
from pareto_mrmp.grid import build_stage
from pareto_mrmp.oracle import verify_stage
from pareto_mrmp.pareto import dominates, frontier_distance, hausdorff, pareto_frontier, quantize
from pareto_mrmp.planner import (PlanOptions, Schedule, ValueFunction, equivalence_violations,
                                 indicator_points, monotonicity_violations, plan, sup_frontier_distance,
                                 sweep_once, zero_value, zero_value_violations)
from pareto_mrmp.simulation import simulate

from conftest import random_micro_scenario

pytestmark = pytest.mark.acceptance

C1_STAGES = [0.1, 0.05, 0.025, 0.0125]
ORACLE_DENSITY = 3


def verdict(capsys, tag, ok, detail):
    with capsys.disabled():
        print(f"\n[{tag}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def line_run(line):
    t0 = time.perf_counter()
    res = plan(line, Schedule.from_h(C1_STAGES), PlanOptions(stop="fixed", keep_history=True))
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def crossing_run(crossing):
    return plan(crossing, Schedule.from_h([0.1], [0.25]),
                PlanOptions(stop="fixed", keep_history=True, control_density=ORACLE_DENSITY)).final


def _analytic_error(stage_result):
    stage = stage_result.stage
    errs = []
    for j in stage.safety_nodes:
        x = float(stage.node_state(int(j))[0][0])
        want = 1 - math.exp(-max(0.0, abs(x) - 0.05))
        errs.append(abs(stage_result.value.frontier(int(j))[0, 0] - want))
    return max(errs)


def test_c1_minimal_time_agreement(capsys, line_run):
    res, elapsed = line_run
    errs = [_analytic_error(s) for s in res.stages]
    ok = errs[-1] <= 0.15 and errs[-1] < errs[0] and elapsed < 30
    detail = ", ".join(f"h={h:g}: {e:.4f}" for h, e in zip(C1_STAGES, errs))
    verdict(capsys, "C1", ok, f"sup errors {detail} (need finest <= 0.15 and < coarsest); {elapsed:.1f}s")


def test_c2_oracle_equivalence(capsys, crossing_stage):
    t0 = time.perf_counter()
    report = verify_stage(crossing_stage, n_steps=10, t_max=12 * crossing_stage.h, density=ORACLE_DENSITY)
    elapsed = time.perf_counter() - t0
    eq = [r["equivalent"] for r in report["steps"]]
    ok = len(eq) == 11 and all(eq) and report["counterexample"] is None and elapsed < 60
    verdict(capsys, "C2", ok, f"{sum(eq)}/11 steps equivalent, counterexample={report['counterexample']}, "
                              f"{elapsed:.1f}s")


def _random_value(stage, rng):
    sets = []
    for j in range(stage.n_joint):
        if not stage.safety_mask[j]:
            sets.append(np.ones((1, stage.n_robots)))
            continue
        pts = rng.random((int(rng.integers(1, 4)), stage.n_robots))
        parts = stage.decode(j)
        for i in range(stage.n_robots):
            if stage.robot_proximate[i][parts[i]]:
                pts[:, i] = 0.0
        sets.append(pareto_frontier(pts))
    return ValueFunction.from_sets(stage, sets)


def _iterate(stage, cache, v, cap=500):
    seq = [v]
    for _ in range(cap):
        nxt = sweep_once(stage, cache, seq[-1])
        if nxt.same_as(seq[-1]):
            return seq
        seq.append(nxt)
    raise AssertionError("no fixed point")


def test_c3_contraction(capsys, crossing_stage):
    stage = crossing_stage
    cache = SuccessorCache(stage, ORACLE_DENSITY)
    factor = math.exp(-kappa(stage.h, stage.eps))
    nodes = stage.safety_nodes
    rng = np.random.default_rng(2024)
    inits = [zero_value(stage), ValueFunction.from_points(stage, indicator_points(stage))]
    inits += [_random_value(stage, rng) for _ in range(5)]
    worst, checked = -math.inf, 0
    for v0 in inits:
        seq = _iterate(stage, cache, v0)
        v_inf = seq[-1]
        t_inf = sweep_once(stage, cache, v_inf)
        for v in seq:
            lhs = sup_frontier_distance(sweep_once(stage, cache, v), t_inf, nodes)
            rhs = factor * sup_frontier_distance(v, v_inf, nodes)
            worst = max(worst, lhs - rhs)
            checked += 1
    ok = worst <= 1e-9
    verdict(capsys, "C3", ok, f"{checked} iterates from {len(inits)} initial values, "
                              f"max(lhs - e^-kappa rhs) = {worst:.3g}")


def test_c4_invariants(capsys, line_run, crossing_run):
    res, _ = line_run
    histories = [s.history for s in res.stages] + [crossing_run.history]
    rng = np.random.default_rng(7)
    for _ in range(500):
        scen = random_micro_scenario(rng)
        histories.append(plan(scen, Schedule.from_h([0.1], [0.25]),
                              PlanOptions(stop="fixed", keep_history=True,
                                          control_density=ORACLE_DENSITY)).final.history)
    zero = eq = sweeps = 0
    for hist in histories:
        for v in hist:
            zero += len(zero_value_violations(v))
            eq += len(equivalence_violations(v))
            sweeps += 1
    ok = zero == 0 and eq == 0
    verdict(capsys, "C4", ok, f"{sweeps} value functions over {len(histories)} runs: "
                              f"{zero} zero-value and {eq} equivalence violations")


def test_c5_zero_init_monotone(capsys, line, crossing, intersection):
    runs = [(line, Schedule.from_h(C1_STAGES)), (crossing, Schedule.from_h([0.1], [0.25])),
            (intersection, Schedule.from_h([0.2], "sqrt_h_over_m", intersection))]
    bad = pairs = 0
    for scen, sched in runs:
        res = plan(scen, sched, PlanOptions(stop="fixed", initial="zero", keep_history=True, max_sweeps=60))
        for stage_res in res.stages:
            for a, b in zip(stage_res.history, stage_res.history[1:]):
                bad += len(monotonicity_violations(a, b))
                pairs += 1
    verdict(capsys, "C5", bad == 0, f"{pairs} consecutive sweep pairs, {bad} violating nodes")


def _feasible_runs(scen, result, pick, seeds=20):
    ok = 0
    for seed in range(seeds):
        tr = simulate(scen, result, scen.meta["starts"], seed=seed, horizon=80, control_pick=pick)
        if tr.all_arrived and tr.min_pairwise_distance >= 0.4 and tr.dead_end_epochs == 0:
            ok += 1
    return ok


def test_c6_intersection_feasibility(capsys, intersection):
    t0 = time.perf_counter()
    sched = Schedule.from_h([0.2], "sqrt_h_over_m", intersection)
    margin = plan(intersection, sched, PlanOptions(pair_margin=0.5)).final
    ok_runs = _feasible_runs(intersection, margin, "track")
    elapsed = time.perf_counter() - t0
    faithful = plan(intersection, sched, PlanOptions()).final
    base = _feasible_runs(intersection, faithful, "uniform")
    ok = ok_runs >= 18 and elapsed < 600
    verdict(capsys, "C6", ok, f"{ok_runs}/20 feasible with pair margin 0.5 and tracking pick "
                              f"({elapsed:.1f}s); {base}/20 with no margin and uniform pick")


def test_c7_anytime_error_curve(capsys, intersection):
    sched = Schedule.from_h([0.2, 0.1, 0.05, 0.025], "sqrt_h_over_m", intersection)
    out = bench_error_curve(intersection, sched, PlanOptions())
    errs = [b["error"] for b in out["boundaries"]] + [0.0]
    later = errs[1:]
    ok = all(b <= a for a, b in zip(later, later[1:])) and len(out["stages"]) >= 3
    detail = ", ".join(f"h={h:g}: {e:.2f}" for h, e in zip(out["stages"], errs))
    verdict(capsys, "C7", ok, f"stages {out['stages']} (benchmark h={out['benchmark_h']:g}); boundary errors {detail}")


def test_c8_pareto_hausdorff_suite(capsys):
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    fails = 0
    cases = 10_000
    for _ in range(cases):
        d = int(rng.integers(1, 4))
        pts = quantize(rng.random((int(rng.integers(1, 10)), d)))
        f = pareto_frontier(pts)
        fp = f.points
        rows = {tuple(r) for r in pts}
        if pareto_frontier(fp) != f or not all(tuple(r) in rows for r in fp):
            fails += 1
        le = np.all(fp[:, None, :] <= fp[None, :, :], axis=2)
        if np.any(le & ~np.eye(len(fp), dtype=bool)):
            fails += 1
        if not np.all(np.all(fp[None, :, :] <= pts[:, None, :], axis=2).any(axis=1)):
            fails += 1
    for _ in range(cases):
        a, b, c = (rng.random((int(rng.integers(1, 6)), 2)) for _ in range(3))
        for dist in (hausdorff, frontier_distance):
            ab, bc, ac = dist(a, b), dist(b, c), dist(a, c)
            if dist(a, a) != 0 or ab != dist(b, a) or ac > ab + bc + 1e-12:
                fails += 1
    for _ in range(cases):
        a, b = rng.random((int(rng.integers(1, 6)), 2)), rng.random((int(rng.integers(1, 6)), 2))
        eta = float(rng.uniform(0, 0.3))
        probes = rng.uniform(-0.5, 1.5, (8, 2))
        u = np.vstack([a, b])

        def within(s):
            return np.linalg.norm(s[None, :, :] - probes[:, None, :], axis=2).min(axis=1) <= eta

        if not np.array_equal(within(u), within(a) | within(b)):
            fails += 1
    elapsed = time.perf_counter() - t0
    ok = fails == 0 and elapsed < 30
    verdict(capsys, "C8", ok, f"3 x {cases} randomized cases, {fails} failures, {elapsed:.1f}s")


def _snapshot(path):
    # timings.json holds wall-clock measurements and is excluded by design
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "timings.json"}


def test_c9_determinism(capsys, tmp_path):
    snaps = []
    for k in range(2):
        base = dict(scenario="intersection_2robot", stages=[0.2], eps_rule="sqrt_h_over_m", seed=7,
                    pair_margin=0.5, control_pick="track", horizon=80.0)
        cmd_plan(RunConfig(out=tmp_path / f"plan{k}", **base))
        cmd_simulate(RunConfig(out=tmp_path / f"sim{k}", **base))
        snaps.append((_snapshot(tmp_path / f"plan{k}"), _snapshot(tmp_path / f"sim{k}")))
    same = snaps[0] == snaps[1]
    files = sum(len(s) for s in snaps[0])
    verdict(capsys, "C9", same, f"{files} artifacts compared across two runs, identical={same}")
