from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional, TypedDict

import numpy as np
from langgraph.graph import END, StateGraph

from cmploss import STRATEGIES
from console import log
from errors import ConfigError
from tasks import Dataset
from trainer import (TrainConfig, evaluate, evaluate_per_query, robustness_index, train)

SWEEP_AXES = ("c", "schedule", "context", "depth", "hidden")
ABLATIONS = ("drop", "crop")
LEAD_COLUMNS = ("strategy", "seed", "axis", "value")

# ------------------------------
# State
# ------------------------------

class ExperimentState(TypedDict):
    # inputs
    kind: Literal["compare", "sweep"]
    base: Dict[str, Any]
    train_set: Any
    eval_set: Any
    strategies: List[str]
    seeds: List[int]
    axis: Optional[str]
    values: List[Any]
    verbose: bool

    # internals
    jobs: List[Dict[str, Any]]
    cursor: int
    rows: List[Dict[str, Any]]
    summary: List[Dict[str, Any]]
    columns: List[str]


def _log(state: ExperimentState, msg: str) -> None:
    log(state.get("verbose", False), msg)


def _cycled(pattern: List[str], c: int) -> List[str]:
    pattern = pattern or ["drop"]
    return [pattern[i % len(pattern)] for i in range(c)]

def parse_schedule(value: str) -> List[str]:
    """'crop+drop' -> ['crop', 'drop']; 'none' is the empty schedule."""
    if value.strip().lower() == "none":
        return []
    steps = [s.strip() for s in value.split("+")]
    bad = [s for s in steps if s not in ABLATIONS]
    if bad:
        raise ConfigError(f"unknown ablation step(s) {bad} in schedule {value!r}")
    return steps



def job_config(base: Dict[str, Any], job: Dict[str, Any]) -> TrainConfig:
    update = dict(base, strategy=job["strategy"], seed=job["seed"])
    axis, value = job.get("axis"), job.get("value")
    if axis == "c":
        update["c"] = value
        update["schedule"] = _cycled(list(base.get("schedule") or []), value)
    elif axis == "schedule":
        steps = parse_schedule(value)
        update["c"] = len(steps)
        update["schedule"] = steps
    elif axis == "hidden":
        if TrainConfig(**base).resolved_arch == "mlp":
            update["hidden"] = [value]
        else:
            update["d_model"] = value
    return TrainConfig(**update)

# ------------------------------
# Nodes
# ------------------------------

def node_plan(state: ExperimentState) -> Dict[str, Any]:
    strategies, seeds = state["strategies"], state["seeds"]
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise ConfigError(f"unknown strategy name(s): {unknown}")
    if len(set(seeds)) != len(seeds) or not seeds:
        raise ConfigError(f"seeds must be distinct and non-empty, got {seeds}")
    task = state["base"].get("task", "cls")
    jobs: List[Dict[str, Any]] = []
    if state["kind"] == "compare":
        jobs = [{"strategy": s, "seed": seed} for s in strategies for seed in seeds]
    else:
        axis, values = state["axis"], state["values"]
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
        if not values:
            raise ConfigError("sweep needs at least one value")
        if axis == "depth" and task != "rank":
            raise ConfigError("depth sweeps need the rank task")
        if axis == "context" and task == "rank":
            raise ConfigError("context sweeps need the cls or span task; use depth for rank")
        if axis == "schedule":
            if not all(isinstance(v, str) for v in values):
                raise ConfigError(f"schedule values must be strings like 'drop+crop', got {values}")
            for v in values:
                parse_schedule(v)
        elif any(v < 0 for v in values) or (axis == "hidden" and min(values) < 1):
            raise ConfigError(f"invalid {axis} values {values}")
        for s in strategies:
            for seed in seeds:
                if axis in ("c", "schedule", "hidden"):
                    jobs += [{"strategy": s, "seed": seed, "axis": axis, "value": v} for v in values]
                else:
                    jobs.append({"strategy": s, "seed": seed, "axis": axis, "values": list(values)})
    for job in jobs:
        job_config(state["base"], job)
    _log(state, f"Planned {len(jobs)} training job(s)")
    return {"jobs": jobs, "cursor": 0, "rows": []}


def node_run(state: ExperimentState) -> Dict[str, Any]:
    job = state["jobs"][state["cursor"]]
    _log(state, f"Job {state['cursor'] + 1}/{len(state['jobs'])}: {job}")
    train_set: Dataset = state["train_set"]
    eval_set: Dataset = state["eval_set"]
    config = job_config(state["base"], job)
    params, record = train(config, train_set, eval_set)
    cost = record.cost_summary()
    rows = list(state["rows"])
    lead = {"strategy": job["strategy"], "seed": job["seed"], "axis": job.get("axis"), "value": job.get("value")}

    if "values" not in job:
        rows.append(dict(lead, **record.final_metrics(), forward_per_sample=cost["forward_per_sample"]))
        return {"rows": rows, "cursor": state["cursor"] + 1}

    per_query: Dict[int, List[float]] = {}

    def scores_at(depth: int) -> List[float]:
        if depth not in per_query:
            per_query[depth] = evaluate_per_query(params, eval_set, context_size=depth)
        return per_query[depth]

    for v in job["values"]:
        row = dict(lead, value=v, **evaluate(params, eval_set, context_size=v))
        if job["axis"] == "depth":
            row["robustness_index"] = robustness_index(scores_at(v), scores_at(v - 1)) if v >= 1 else None
        rows.append(row)
    return {"rows": rows, "cursor": state["cursor"] + 1}


def should_continue(state: ExperimentState) -> Literal["run", "finish"]:
    if state["cursor"] < len(state["jobs"]):
        return "run"
    return "finish"


def _metric_columns(rows: List[Dict[str, Any]]) -> List[str]:
    names: List[str] = []
    for r in rows:
        for k in r:
            if k not in LEAD_COLUMNS and k not in names:
                names.append(k)
    return names


def node_summarize(state: ExperimentState) -> Dict[str, Any]:
    rows = state["rows"]
    metric_cols = _metric_columns(rows)
    groups: Dict[tuple, List[Dict[str, Any]]] = {}
    for r in rows:
        groups.setdefault((r["strategy"], r["axis"], r["value"]), []).append(r)
    summary = []
    for (strategy, axis, value), members in groups.items():
        if len(members) < 2:
            continue
        mean_row = {"strategy": strategy, "seed": "mean", "axis": axis, "value": value}
        std_row = {"strategy": strategy, "seed": "std", "axis": axis, "value": value}
        for col in metric_cols:
            vals = [m[col] for m in members if m.get(col) is not None]
            if not vals:
                mean_row[col] = std_row[col] = None
                continue
            mean_row[col] = float(np.mean(vals))
            std_row[col] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        summary += [mean_row, std_row]
    _log(state, f"Summarized {len(rows)} row(s) into {len(summary)} aggregate row(s)")
    return {"summary": summary, "columns": list(LEAD_COLUMNS) + metric_cols}

# ------------------------------
# Build graph
# ------------------------------

def build_graph():
    g = StateGraph(ExperimentState)
    g.add_node("plan", node_plan)
    g.add_node("run", node_run)
    g.add_node("summarize", node_summarize)

    g.set_entry_point("plan")
    g.add_conditional_edges("plan", should_continue, {"run": "run", "finish": "summarize"})
    g.add_conditional_edges("run", should_continue, {"run": "run", "finish": "summarize"})
    g.add_edge("summarize", END)

    return g.compile()

# ------------------------------
# Public runner
# ------------------------------

def run_experiment(
    kind: Literal["compare", "sweep"],
    base: TrainConfig,
    train_set: Dataset,
    eval_set: Optional[Dataset] = None,
    *,
    strategies: Optional[List[str]] = None,
    seeds: Optional[List[int]] = None,
    axis: Optional[str] = None,
    values: Optional[List[Any]] = None,
    verbose: bool = False,
) -> Dict[str, Any]:
    """
    Run every (strategy, seed[, value]) job on identical data and aggregate.

    Returns a dict with "rows" (one per job and swept value, in plan order),
    "summary" (mean and sample std per strategy and value) and "columns".
    """
    graph = build_graph()
    n_jobs = len(strategies or [base.strategy]) * len(seeds or [base.seed]) * max(1, len(values or []))
    initial: ExperimentState = {
        "kind": kind,
        "base": base.model_dump(),
        "train_set": train_set,
        "eval_set": eval_set if eval_set is not None else train_set,
        "strategies": list(strategies or [base.strategy]),
        "seeds": list(seeds if seeds is not None else [base.seed]),
        "axis": axis,
        "values": list(values or []),
        "verbose": bool(verbose),
        "jobs": [],
        "cursor": 0,
        "rows": [],
        "summary": [],
        "columns": [],
    }
    final_state = graph.invoke(initial, config={"recursion_limit": n_jobs + 10})
    return {"rows": final_state["rows"], "summary": final_state["summary"], "columns": final_state["columns"]}
