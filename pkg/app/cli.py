"""
Command-line entry points: gen, train, eval, compare, sweep.

Usage:
  python run_cmplab.py gen --task cls --seed 7 --n 2000 --classes 4 --noise-segments 6 --out data/
  python run_cmplab.py train --config cfg.json --data data/cls-seed7-n2000.jsonl --out run1/
  python run_cmplab.py eval --checkpoint run1/model.ckpt.json --data data/cls-seed8-n1000.jsonl --context-size 0 2 6
  python run_cmplab.py compare --config cfg.json --data d.jsonl --strategies cmp,average,first,second,max --seeds 0,1,2
  python run_cmplab.py sweep --config cfg.json --data d.jsonl --axis c --values 1..4
  python run_cmplab.py sweep --config cfg.json --data d.jsonl --axis schedule --values drop,crop,crop+drop

Exit codes: 0 success, 2 usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, field_validator, model_validator

from artifacts import write_csv, write_json
from console import env_flag, fail, say
from errors import CmpLabError, ConfigError, DivergenceError, NumericError
from experiments import SWEEP_AXES, run_experiment
from models import load_checkpoint, save_checkpoint
from tasks import PRIMARY_METRIC, Dataset, gen_classification, gen_extraction, gen_ranking
from trainer import TrainConfig, evaluate, mean_task_loss, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

# ------------------------------
# Experiment spec
# ------------------------------

class ExperimentSpec(BaseModel):
    command: Literal["gen", "train", "eval", "compare", "sweep"]
    config: Optional[TrainConfig] = None
    data: Optional[str] = None
    eval_data: Optional[str] = None
    out: str = "runs"
    seeds: List[int] = []

    @field_validator("seeds")
    @classmethod
    def _distinct(cls, v: List[int]) -> List[int]:
        if len(set(v)) != len(v):
            raise ValueError(f"seeds must be distinct, got {v}")
        return v

    @model_validator(mode="after")
    def _writable(self) -> "ExperimentSpec":
        out = Path(self.out)
        target = out if not out.suffix else out.parent
        target.mkdir(parents=True, exist_ok=True)
        if not os.access(target, os.W_OK):
            raise ConfigError(f"output directory {target} is not writable")
        return self


def _int_list(raw: Optional[str]) -> List[int]:
    """'0,1,2' or '1..4' (inclusive)."""
    if not raw:
        return []
    items: List[int] = []
    for part in raw.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            items += list(range(int(lo), int(hi) + 1))
        elif part:
            items.append(int(part))
    return items


def _str_list(raw: Optional[str]) -> List[str]:
    return [s.strip() for s in (raw or "").split(",") if s.strip()]


def load_config(path: str, seed: Optional[int] = None, quiet: bool = False) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    if seed is not None:
        raw["seed"] = seed
    config = TrainConfig.model_validate(raw)
    verbose = (config.verbose or env_flag("CMPLAB_VERBOSE")) and not quiet
    return config.model_copy(update={"verbose": verbose})


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value

# ------------------------------
# Commands
# ------------------------------

def cmd_gen(args) -> int:
    if args.task == "cls":
        ds = gen_classification(args.seed, args.n, n_classes=args.classes, n_support=args.support_segments,
                                n_noise=args.noise_segments, segment_len=args.segment_len,
                                vocab=args.vocab or 64, spurious_rate=args.spurious_rate)
    elif args.task == "span":
        ds = gen_extraction(args.seed, args.n, n_distractors=args.distractors, segment_len=args.segment_len,
                            vocab=args.vocab or 48)
    else:
        ds = gen_ranking(args.seed, args.n, pool_size=args.pool_size, n_feedback=args.feedback, dim=args.dim,
                         n_topics=args.topics)
    out = Path(args.out)
    path = out if out.suffix == ".jsonl" else out / f"{args.task}-seed{args.seed}-n{args.n}.jsonl"
    ExperimentSpec(command="gen", out=str(path))
    ds.write(path)
    say(args.quiet, f"✅ wrote {len(ds)} samples to {path}")
    print(f"sha256 {Dataset.digest(path)}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(_require(args.config, "--config"), args.seed, args.quiet)
    spec = ExperimentSpec(command="train", config=config, data=_require(args.data, "--data"),
                          eval_data=args.eval_data, out=args.out)
    train_set = Dataset.from_jsonl(spec.data)
    eval_set = Dataset.from_jsonl(spec.eval_data) if spec.eval_data else None
    out = Path(spec.out)
    say(args.quiet, f"🚀 training {config.task} strategy={config.strategy} c={config.c} "
                    f"schedule={config.schedule} on {len(train_set)} samples")
    try:
        params, record = train(config, train_set, eval_set, out_dir=out)
    except DivergenceError as e:
        write_json(out / "ABORTED.json", {"error": str(e), "checkpoint": e.checkpoint})
        raise

    record.write(out)
    save_checkpoint(params, out / "model.ckpt.json", extra={"steps": record.steps[-1].step + 1 if record.steps else 0})
    cost = record.cost_summary()
    final = record.final_metrics()
    write_json(out / "summary.json", {"cost": cost, "final": final, "config": config.model_dump()})

    primary = PRIMARY_METRIC[config.task]
    say(args.quiet, f"📊 forward passes per sample {cost['forward_per_sample']:.3f} "
                    f"(ERM 1.000, ratio {cost['ratio_to_erm']:.3f}), "
                    f"mean chain length {cost['mean_chain_length']:.3f}, shortened {cost['shortened_chains']}")
    print(f"✅ final {primary}={final.get(primary, float('nan')):.4f} loss={final.get('loss', float('nan')):.4f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    dataset = Dataset.from_jsonl(_require(args.data, "--data"))
    if params.config.head != dataset.task:
        raise ConfigError(f"checkpoint head {params.config.head!r} cannot evaluate {dataset.task!r} data")
    out = Path(args.out)
    path = out if out.suffix == ".csv" else out / "eval.csv"
    ExperimentSpec(command="eval", data=args.data, out=str(path))
    sizes = args.context_size or [None]
    rows = []
    for size in sizes:
        scores = evaluate(params, dataset, context_size=size)
        scores["loss"] = mean_task_loss(params, dataset, context_size=size)
        rows += [[size, name, value] for name, value in scores.items()]
        say(args.quiet, f"📊 context={size if size is not None else 'full'}: "
                        + " ".join(f"{k}={v:.4f}" for k, v in scores.items()))
    write_csv(path, ["context_size", "metric_name", "metric_value"], rows, comment="cmplab eval")
    say(args.quiet, f"✅ wrote {path}")
    return EXIT_OK


def _experiment(args, kind: str) -> int:
    config = load_config(_require(args.config, "--config"), args.seed, args.quiet)
    seeds = _int_list(args.seeds) or [config.seed]
    strategies = _str_list(args.strategies) or [config.strategy]
    spec = ExperimentSpec(command=kind, config=config, data=_require(args.data, "--data"),
                          eval_data=args.eval_data, out=args.out, seeds=seeds)
    train_set = Dataset.from_jsonl(spec.data)
    eval_set = Dataset.from_jsonl(spec.eval_data) if spec.eval_data else None
    axis = getattr(args, "axis", None)
    raw_values = getattr(args, "values", None)
    values = _str_list(raw_values) if axis == "schedule" else _int_list(raw_values)
    say(args.quiet, f"🚀 {kind}: strategies={strategies} seeds={seeds}"
                    + (f" axis={axis} values={values}" if kind == "sweep" else ""))
    result = run_experiment(kind, config, train_set, eval_set, strategies=strategies, seeds=seeds,
                            axis=axis, values=values, verbose=config.verbose)
    columns = result["columns"]
    table = result["rows"] + result["summary"]
    path = Path(spec.out) / f"{kind}.csv"
    write_csv(path, columns, [[r.get(c) for c in columns] for r in table], comment=f"cmplab {kind}")
    primary = PRIMARY_METRIC[config.task]
    for r in result["summary"]:
        if r["seed"] == "mean":
            label = r["strategy"] if r["value"] is None else f"{r['strategy']} {axis}={r['value']}"
            say(args.quiet, f"📊 {label}: mean {primary}={r.get(primary)}")
    print(f"✅ wrote {len(table)} row(s) to {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    return _experiment(args, "compare")


def cmd_sweep(args) -> int:
    return _experiment(args, "sweep")

# ------------------------------
# Parser
# ------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed (overrides the config seed)")
    common.add_argument("--out", default=os.getenv("CMPLAB_OUT", "runs"), help="Output directory or file")
    common.add_argument("--config", help="TrainConfig JSON file")
    common.add_argument("--data", help="Training or evaluation JSONL dataset")
    common.add_argument("--eval-data", dest="eval_data", help="Held-out JSONL dataset")
    common.add_argument("--quiet", action="store_true", help="Only print result lines")

    parser = argparse.ArgumentParser(prog="cmplab", description="Comparative-loss training lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="Generate a synthetic dataset")
    gen.add_argument("--task", choices=["cls", "span", "rank"], required=True)
    gen.add_argument("--n", type=int, default=1000, help="Samples (queries for rank)")
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--support-segments", dest="support_segments", type=int, default=1)
    gen.add_argument("--noise-segments", dest="noise_segments", type=int, default=6)
    gen.add_argument("--spurious-rate", dest="spurious_rate", type=float, default=0.1)
    gen.add_argument("--distractors", type=int, default=4)
    gen.add_argument("--segment-len", dest="segment_len", type=int, default=8)
    gen.add_argument("--vocab", type=int, default=0, help="0 picks the task default")
    gen.add_argument("--pool-size", dest="pool_size", type=int, default=16)
    gen.add_argument("--feedback", type=int, default=5, help="PRF feedback documents per query")
    gen.add_argument("--dim", type=int, default=16)
    gen.add_argument("--topics", type=int, default=8)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", parents=[common], help="Train one model")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="model.ckpt.json written by train")
    ev.add_argument("--context-size", dest="context_size", type=int, nargs="*",
                    help="Non-support segments (PRF depth for rank) kept at evaluation")
    ev.set_defaults(func=cmd_eval)

    cmp = sub.add_parser("compare", parents=[common], help="Compare weighting strategies across seeds")
    cmp.add_argument("--strategies", help="Comma-separated, e.g. cmp,average,first,second,max")
    cmp.add_argument("--seeds", help="Comma-separated seeds or a range like 0..4")
    cmp.set_defaults(func=cmd_compare)

    sw = sub.add_parser("sweep", parents=[common],
                        help="Sweep c, ablation schedule, context size, PRF depth or width")
    sw.add_argument("--axis", choices=list(SWEEP_AXES), required=True)
    sw.add_argument("--values", required=True,
                    help="Comma-separated values or a range like 1..4; schedules like drop,crop+drop,none")
    sw.add_argument("--strategies", help="Comma-separated strategies")
    sw.add_argument("--seeds", help="Comma-separated seeds or a range like 0..4")
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        fail(f"numeric failure: {e}")
        return EXIT_NUMERIC
    except (CmpLabError, ValueError, IndexError, FileNotFoundError) as e:
        fail(str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
