"""Anytime error curve on the intersection: every stage against the finest one."""
import argparse
import json
from pathlib import Path

from pareto_mrmp.cli import bench_error_curve
from pareto_mrmp.io import load_scenario
from pareto_mrmp.planner import PlanOptions, Schedule


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--stages", default="0.2,0.1,0.05,0.025", help="comma-separated spacings, coarse first")
    p.add_argument("--node-budget", type=int, default=2_000_000)
    p.add_argument("--out", type=Path, default=Path("out/bench.json"))
    args = p.parse_args()

    scen = load_scenario("intersection_2robot")
    hs = [float(h) for h in args.stages.split(",")]
    sched = Schedule.from_h(hs, "sqrt_h_over_m", scen)
    out = bench_error_curve(scen, sched, PlanOptions(node_budget=args.node_budget))
    for row in out["boundaries"]:
        print(f"stage {row['stage']} h={row['h']:g}: error {row['error']:.3f} after {row['elapsed']:.1f}s")
    print(f"benchmark h={out['benchmark_h']:g}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
