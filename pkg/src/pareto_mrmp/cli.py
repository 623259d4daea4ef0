"""Command-line entry point: plan, simulate, verify and bench."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import ScheduleError, build_stage
from .io import (ParseError, load_schedule_doc, load_scenario, scenario_hash, write_json, write_policy_dump,
                 write_trajectory_csv, write_value_dump)
from .model import ScenarioError
from .planner import (PlanOptions, Schedule, approximation_error, equivalence_violations, plan,
                      zero_value_violations)

log = logging.getLogger("pareto_mrmp")

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_COUNTEREXAMPLE = 0, 2, 3, 4


@dataclass
class RunConfig:
    """Everything a command needs; serialized into every artifact."""

    scenario: str
    out: Path = Path("out")
    schedule: str | None = None
    stages: list = field(default_factory=lambda: [0.2])
    eps_rule: object = "sqrt_h"
    gamma: float = 0.5
    window: int = 1
    stop: str = "reldiff"
    threshold: float = 0.1
    control_density: int = 9
    expand_safety: bool = False
    goal_refine: bool = False
    pair_margin: float = 0.0
    node_budget: int = 2_000_000
    seed: int = 0
    horizon: float = 60.0
    stage: int = -1
    control_pick: str = "uniform"
    goal_mode: str = "approach"
    start: list | None = None
    oracle_steps: int = 10
    oracle_t_max: float | None = None
    oracle_cap: int = 10_000

    def options(self) -> PlanOptions:
        return PlanOptions(control_density=self.control_density, expand_safety=self.expand_safety, stop=self.stop,
                           threshold=self.threshold, node_budget=self.node_budget, pair_margin=self.pair_margin)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["out"] = None
        return d


def _schedule(cfg: RunConfig, scenario) -> Schedule:
    if cfg.schedule is not None:
        doc = load_schedule_doc(cfg.schedule)
        if "h" not in doc:
            raise ParseError(f"{cfg.schedule}: missing field h")
        cfg.stages = [float(h) for h in doc["h"]]
        cfg.eps_rule = doc.get("eps", cfg.eps_rule)
        cfg.gamma = float(doc.get("gamma", cfg.gamma))
        cfg.window = int(doc.get("window", cfg.window))
        cfg.stop = doc.get("stop", cfg.stop)
        cfg.threshold = float(doc.get("threshold", cfg.threshold))
        return Schedule.from_h(cfg.stages, cfg.eps_rule, scenario, doc.get("n"), cfg.gamma, cfg.window)
    return Schedule.from_h(cfg.stages, cfg.eps_rule, scenario, gamma=cfg.gamma, window=cfg.window)


def _config_doc(cfg: RunConfig, scen_hash: str, schedule: Schedule | None = None) -> dict:
    doc = {"run": cfg.to_json(), "scenario_hash": scen_hash}
    if schedule is not None:
        doc["schedule"] = schedule.to_json()
    return doc


def _run_plan(cfg: RunConfig):
    scenario = load_scenario(cfg.scenario)
    schedule = _schedule(cfg, scenario)
    result = plan(scenario, schedule, cfg.options(), goal_refine=cfg.goal_refine)
    return scenario, schedule, result


def cmd_plan(cfg: RunConfig) -> int:
    """Write per-stage value and policy dumps, a stage summary and timings."""
    scenario, schedule, result = _run_plan(cfg)
    h = scenario_hash(scenario)
    conf = _config_doc(cfg, h, schedule)
    cfg.out.mkdir(parents=True, exist_ok=True)
    stages = list(result.stages) + ([result.refined] if result.refined is not None else [])
    summary = []
    for k, res in enumerate(stages):
        tag = f"stage{k}" if k < len(result.stages) else "refined"
        write_value_dump(cfg.out / f"value_{tag}.jsonl", res, h, conf)
        write_policy_dump(cfg.out / f"policy_{tag}.jsonl", res, h, conf)
        summary.append({"stage": tag, "h": res.stage.h, "eps": res.stage.eps, "sweeps": res.sweeps,
                        "stop": res.stop_reason, "joint_nodes": res.stage.n_joint,
                        "safety_nodes": int(len(res.stage.safety_nodes)), "policy_entries": len(res.policy),
                        "dead_ends": int(res.dead_ends.sum())})
    write_json(cfg.out / "stages.json", {"config": conf, "stages": summary})
    # wall-clock numbers vary run to run, so they live apart from the reproducible artifacts
    write_json(cfg.out / "timings.json", {"scenario_hash": h, "stages": [dict(h=s.stage.h, **s.timings)
                                                                         for s in stages]})
    for row in summary:
        print(f"{row['stage']}: h={row['h']:g} sweeps={row['sweeps']} ({row['stop']}) "
              f"safety nodes={row['safety_nodes']} policy entries={row['policy_entries']}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    """Plan, then run the closed loop once; exit 3 if the run is infeasible."""
    from .simulation import simulate, trajectory_metrics

    scenario, schedule, result = _run_plan(cfg)
    h = scenario_hash(scenario)
    start = cfg.start if cfg.start is not None else scenario.meta.get("starts")
    if not start:
        raise ParseError("no start state: pass --start or add start fields to the scenario")
    x0 = [np.asarray(s, dtype=float) for s in start]
    stage_res = result.stages[cfg.stage]
    traj = simulate(scenario, stage_res, x0, seed=cfg.seed, horizon=cfg.horizon, goal_mode=cfg.goal_mode,
                    refined=result.refined, control_density=cfg.control_density, control_pick=cfg.control_pick)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(cfg.out / "trajectory.csv", traj)
    metrics = trajectory_metrics(traj, scenario)
    write_json(cfg.out / "metrics.json", {"config": _config_doc(cfg, h, schedule), "metrics": metrics})
    print(f"arrived={metrics['all_arrived']} min_pairwise={traj.min_pairwise_distance:.4f} "
          f"dead_end_epochs={traj.dead_end_epochs} feasible={traj.feasible}")
    return EXIT_OK if traj.feasible else EXIT_INFEASIBLE


def cmd_verify(cfg: RunConfig) -> int:
    """Oracle suite on the coarsest configured stage, plus planner invariants."""
    from .oracle import verify_stage

    scenario = load_scenario(cfg.scenario)
    schedule = _schedule(cfg, scenario)
    spec = schedule.stages[0]
    stage = build_stage(scenario, spec.h, spec.eps, 0, cfg.expand_safety, cfg.pair_margin)
    report = verify_stage(stage, cfg.oracle_steps, cfg.oracle_t_max, cfg.control_density, cfg.oracle_cap)
    opts = dataclasses.replace(cfg.options(), keep_history=True)
    result = plan(scenario, Schedule((spec,), schedule.gamma, schedule.window), opts)
    history = result.final.history
    report["invariants"] = {
        "zero_value_violations": sum(len(zero_value_violations(v)) for v in history),
        "equivalence_violations": sum(len(equivalence_violations(v)) for v in history),
        "sweeps_checked": len(history),
    }
    inv_ok = all(v == 0 for k, v in report["invariants"].items() if k.endswith("violations"))
    report["passed"] = bool(report["passed"] and inv_ok)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "verify_report.json", {"config": _config_doc(cfg, scenario_hash(scenario), schedule),
                                                "report": report})
    for row in report["steps"]:
        print(f"n={row['n']}: equivalent={row['equivalent']} commutation_violations={row['commutation_violations']}"
              f" shrinking={row['shrinking']}")
    print(f"invariants: {report['invariants']}")
    print("PASS" if report["passed"] else "FAIL")
    if report["counterexample"] is not None:
        print(json.dumps(report["counterexample"]))
        return EXIT_COUNTEREXAMPLE
    return EXIT_OK if report["passed"] else EXIT_COUNTEREXAMPLE


def bench_error_curve(scenario, schedule: Schedule, options: PlanOptions) -> dict:
    """Solve every stage, take the finest as benchmark, and record the lifted
    error after each sweep and at each stage boundary.

    Stages beyond ``options.node_budget`` are dropped first.
    """
    kept = []
    for spec in schedule.stages:
        stage = build_stage(scenario, spec.h, spec.eps, len(kept), options.expand_safety, options.pair_margin)
        if stage.n_joint > options.node_budget:
            log.warning("dropping stage h=%g: %d joint nodes exceed the budget", spec.h, stage.n_joint)
            continue
        kept.append(spec)
    if len(kept) < 2:
        raise ScheduleError("bench needs at least two stages within the node budget")
    schedule = Schedule(tuple(kept), schedule.gamma, schedule.window)
    opts = dataclasses.replace(options, keep_history=True)
    t0 = time.perf_counter()
    marks = []
    result = plan(scenario, schedule, opts, on_stage=lambda r: marks.append(time.perf_counter() - t0))
    bench = result.final.value
    series, boundary = [], []
    for k, res in enumerate(result.stages[:-1]):
        for n, v in enumerate(res.history[1:], start=1):
            series.append({"stage": k, "h": res.stage.h, "sweep": n,
                           "error": approximation_error(v, bench)})
        boundary.append({"stage": k, "h": res.stage.h, "elapsed": marks[k],
                         "error": approximation_error(res.value, bench)})
    return {"stages": [s.h for s in kept], "benchmark_h": kept[-1].h, "per_sweep": series,
            "boundaries": boundary}


def cmd_bench(cfg: RunConfig) -> int:
    scenario = load_scenario(cfg.scenario)
    schedule = _schedule(cfg, scenario)
    out = bench_error_curve(scenario, schedule, cfg.options())
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "bench.json", {"config": _config_doc(cfg, scenario_hash(scenario), schedule), **out})
    for row in out["boundaries"]:
        print(f"stage {row['stage']} (h={row['h']:g}): error {row['error']:.4f} at {row['elapsed']:.1f}s")
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "simulate": cmd_simulate, "verify": cmd_verify, "bench": cmd_bench}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pareto-mrmp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario JSON (bundled names resolve)")
    common.add_argument("--schedule", help="schedule JSON with h, eps, gamma, n, stop, threshold")
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--stages", type=_floats, default=[0.2], help="comma-separated spacings, coarse first")
    common.add_argument("--eps-rule", default="sqrt_h", help="sqrt_h, sqrt_h_over_m or comma-separated values")
    common.add_argument("--gamma", type=float, default=0.5)
    common.add_argument("--stop", choices=["budget", "reldiff", "fixed"], default="reldiff")
    common.add_argument("--threshold", type=float, default=0.1)
    common.add_argument("--control-density", type=int, default=9)
    common.add_argument("--expand-safety", action="store_true")
    common.add_argument("--goal-refine", action="store_true")
    common.add_argument("--pair-margin", type=float, default=0.0)
    common.add_argument("--node-budget", type=int, default=2_000_000)
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("plan", parents=[common], help="solve every stage and dump values and policies")
    s = sub.add_parser("simulate", parents=[common], help="plan, then run the closed loop")
    s.add_argument("--horizon", type=float, default=60.0)
    s.add_argument("--stage", type=int, default=-1, help="stage index whose policy drives the team")
    s.add_argument("--control-pick", choices=["uniform", "track"], default="uniform")
    s.add_argument("--goal-mode", choices=["approach", "hold"], default="approach")
    s.add_argument("--start", type=json.loads, help="JSON list of per-robot start states")
    v = sub.add_parser("verify", parents=[common], help="oracle suite on the coarsest stage")
    v.add_argument("--steps", type=int, default=10)
    v.add_argument("--t-max", type=float)
    v.add_argument("--oracle-cap", type=int, default=10_000)
    sub.add_parser("bench", parents=[common], help="multi-stage error curve against the finest stage")
    return p


def _to_config(ns: argparse.Namespace) -> RunConfig:
    rule = ns.eps_rule
    if rule not in ("sqrt_h", "sqrt_h_over_m"):
        rule = _floats(rule)
    return RunConfig(
        scenario=ns.scenario, out=ns.out, schedule=ns.schedule, stages=ns.stages, eps_rule=rule, gamma=ns.gamma,
        stop=ns.stop, threshold=ns.threshold, control_density=ns.control_density,
        expand_safety=ns.expand_safety, goal_refine=ns.goal_refine, pair_margin=ns.pair_margin,
        node_budget=ns.node_budget, seed=ns.seed,
        horizon=getattr(ns, "horizon", 60.0), stage=getattr(ns, "stage", -1),
        control_pick=getattr(ns, "control_pick", "uniform"), goal_mode=getattr(ns, "goal_mode", "approach"),
        start=getattr(ns, "start", None), oracle_steps=getattr(ns, "steps", 10),
        oracle_t_max=getattr(ns, "t_max", None), oracle_cap=getattr(ns, "oracle_cap", 10_000))


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[ns.command](_to_config(ns))
    except (ParseError, ScenarioError, ScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
