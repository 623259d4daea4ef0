"""Scenario and schedule loading, hashing, and artifact writers."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .model import Box, RobotSpec, Scenario, ScenarioError

SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ParseError(ValueError):
    """A config document is malformed; the message names the offending field."""


def _need(doc: dict, key: str, where: str):
    if not isinstance(doc, dict) or key not in doc:
        raise ParseError(f"missing field {where}.{key}" if where else f"missing field {key}")
    return doc[key]


def _box(doc, where: str) -> Box:
    lo = _need(doc, "min", where)
    hi = _need(doc, "max", where)
    try:
        return Box(tuple(float(v) for v in lo), tuple(float(v) for v in hi))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise ScenarioError(f"{where}: {exc}") from None
        raise ParseError(f"{where}: box bounds must be numeric lists") from None


def _boxes(doc, where: str) -> list[Box]:
    if isinstance(doc, dict):
        return [_box(doc, where)]
    if not isinstance(doc, list):
        raise ParseError(f"{where} must be a box or a list of boxes")
    return [_box(d, f"{where}[{k}]") for k, d in enumerate(doc)]


def scenario_from_json(doc: dict) -> Scenario:
    """Validated scenario from a parsed JSON document."""
    robots_doc = _need(doc, "robots", "")
    if not isinstance(robots_doc, list) or not robots_doc:
        raise ParseError("robots must be a nonempty list")
    sigma = _need(doc, "sigma", "")
    robots, boxes, obstacles, goals, starts = [], [], [], [], []
    for k, r in enumerate(robots_doc):
        where = f"robots[{k}]"
        cb = _need(r, "control_box", where)
        state_box = _box(_need(r, "state_box", where), f"{where}.state_box")
        try:
            robots.append(RobotSpec(
                id=int(r.get("id", k)),
                dynamics=_need(r, "dynamics", where),
                control_lo=tuple(_need(cb, "min", f"{where}.control_box")),
                control_hi=tuple(_need(cb, "max", f"{where}.control_box")),
                state_dim=int(r.get("state_dim", state_box.dim)),
                speed_bound=float(_need(r, "speed_bound", where)),
                lipschitz=float(r.get("lipschitz", 0.0)),
                A=r.get("A"), B=r.get("B"), c=r.get("c"),
            ))
        except ScenarioError as exc:
            raise ScenarioError(f"{where}: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where}: {exc}") from None
        boxes.append(state_box)
        obstacles.append(_boxes(r.get("obstacles", []), f"{where}.obstacles"))
        goals.append(_boxes(_need(r, "goal", where), f"{where}.goal"))
        if "start" in r:
            starts.append([float(v) for v in r["start"]])
    meta = {"starts": starts} if len(starts) == len(robots) else {}
    return Scenario(tuple(robots), tuple(boxes), tuple(obstacles), tuple(goals), float(sigma),
                    name=str(doc.get("name", "scenario")), meta=meta)


def scenario_to_json(scen: Scenario) -> dict:
    robots = []
    for i, r in enumerate(scen.robots):
        d = r.to_json()
        d["state_box"] = scen.state_boxes[i].to_json()
        d["obstacles"] = [o.to_json() for o in scen.obstacles[i]]
        d["goal"] = [g.to_json() for g in scen.goals[i]]
        if scen.meta.get("starts"):
            d["start"] = list(scen.meta["starts"][i])
        robots.append(d)
    return {"name": scen.name, "sigma": scen.sigma, "robots": robots}


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file; bundled names resolve without a path."""
    p = Path(path)
    if not p.exists() and (SCENARIO_DIR / p.name).exists():
        p = SCENARIO_DIR / p.name
    if not p.exists() and (SCENARIO_DIR / f"{p.name}.json").exists():
        p = SCENARIO_DIR / f"{p.name}.json"
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{p}: line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ParseError(f"cannot read scenario {p}: {exc.strerror}") from None
    return scenario_from_json(doc)


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def scenario_hash(scen: Scenario) -> str:
    return hashlib.sha256(canonical(scenario_to_json(scen)).encode()).hexdigest()[:16]


def load_schedule_doc(path) -> dict:
    p = Path(path)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{p}: line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ParseError(f"cannot read schedule {p}: {exc.strerror}") from None


# ------------------------------------------------------------- artifacts --

def _f(x) -> list:
    return [float(v) for v in np.ravel(x)]


def write_value_dump(path, result, scen_hash: str, config: dict) -> None:
    """JSON lines: a header record, then ``{node, coords, frontier}`` per node."""
    stage, value = result.stage, result.value
    from .dynamics import kappa, stage_alpha

    header = {"kind": "value", "stage": stage.index, "h": stage.h, "eps": stage.eps,
              "kappa": kappa(stage.h, stage.eps), "alpha": stage_alpha(stage), "sweeps": result.sweeps,
              "stop": result.stop_reason, "n_joint": stage.n_joint, "scenario_hash": scen_hash,
              "config": config}
    with open(path, "w") as fh:
        fh.write(canonical(header) + "\n")
        for j in range(stage.n_joint):
            rec = {"node": j, "coords": [_f(x) for x in stage.node_state(j)],
                   "frontier": value.frontier(j).tolist()}
            fh.write(canonical(rec) + "\n")


def write_policy_dump(path, result, scen_hash: str, config: dict) -> None:
    """JSON lines: a header record, then ``{node, coords, entries}`` per node with entries."""
    stage, policy = result.stage, result.policy
    header = {"kind": "policy", "stage": stage.index, "h": stage.h, "eps": stage.eps,
              "entries": len(policy), "scenario_hash": scen_hash, "config": config}
    with open(path, "w") as fh:
        fh.write(canonical(header) + "\n")
        for j in np.flatnonzero(np.diff(policy.off) > 0):
            entries = [{"successor": e.successor, "tau": list(e.tau),
                        "controls": [None if c is None else c.tolist() for c in e.controls]}
                       for e in policy.entries(int(j))]
            rec = {"node": int(j), "coords": [_f(x) for x in stage.node_state(int(j))], "entries": entries}
            fh.write(canonical(rec) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_trajectory_csv(path, traj) -> None:
    """Columns: ``t``, per-robot state components, per-robot controls, min pairwise distance."""
    n = len(traj.states[0])
    header = ["t"]
    header += [f"x{i}_{k}" for i in range(n) for k in range(len(traj.states[0][i]))]
    header += [f"u{i}_{k}" for i in range(n) for k in range(traj.control_dims[i])]
    header.append("min_pairwise_distance")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, xs, us, d in zip(traj.times, traj.states, traj.controls, traj.pairwise):
            row = [repr(float(t))]
            row += [repr(float(v)) for x in xs for v in x]
            row += [repr(float(v)) for u in us for v in u]
            row.append(repr(float(d)))
            w.writerow(row)
