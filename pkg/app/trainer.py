"""Comparative training loop, evaluation and diagnostics.

Each training sample gets its own ablation chain: the full model's loss l(0),
then one loss per schedule step (``drop`` masks hidden units of the previous
submodel, ``crop`` removes non-support segments of the previous input). The
per-sample objective is the comparative loss (or a heuristic weighting), the
batch objective their mean, and parameters move by plain SGD.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import autodiff as ad
from ablation import CropChain, MaskChain, RngStream, chain_json, crop_step, drop_step, masks_for_step
from artifacts import write_csv, write_json
from cmploss import ComparisonChain, Strategy, comparative_loss, dynamic_weights, strategy_objective
from console import log
from errors import ConfigError, ContractError, DivergenceError, NoCroppableSegments, NumericError
from models import ModelConfig, ModelParams, forward, init_params, save_checkpoint, site_widths
from tasks import (PRIMARY_METRIC, Dataset, RankPool, SegmentedContext, TaskKind, metrics,
                   per_sample_scores, predict, task_loss)

# ------------------------------
# Config
# ------------------------------

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    c: int = Field(default=0, ge=0)
    p: float = Field(default=0.1, gt=0.0, lt=1.0)
    b_policy: Literal["zero", "full_model_loss"] = "zero"
    schedule: List[Literal["drop", "crop"]] = Field(default_factory=list)
    strategy: Strategy = "cmp"
    lr: float = Field(default=0.1, ge=0.0)
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)
    task: TaskKind = "cls"
    eval_every: int = Field(default=0, ge=0)

    # extensions
    arch: Optional[Literal["mlp", "encoder"]] = None
    hidden: List[int] = Field(default_factory=lambda: [32])
    d_model: int = Field(default=16, ge=1)
    d_ff: int = Field(default=32, ge=1)
    momentum: float = Field(default=0.0, ge=0.0, lt=1.0)
    batch_mode: Literal["sample", "batch_mean"] = "sample"
    early_stopping: int = Field(default=0, ge=0)
    prf_depth: int = Field(default=5, ge=0)
    rank_temperature: float = Field(default=1.0, gt=0.0)
    max_steps: int = Field(default=0, ge=0)
    verbose: bool = False

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if len(self.schedule) != self.c:
            raise ConfigError(f"schedule has {len(self.schedule)} step(s) but c={self.c}")
        if self.strategy == "second" and self.c < 1:
            raise ConfigError("strategy 'second' needs c >= 1")
        if self.arch == "mlp" and self.task != "cls":
            raise ConfigError(f"arch 'mlp' cannot run the {self.task} task")
        return self

    @property
    def resolved_arch(self) -> str:
        if self.arch is not None:
            return self.arch
        return "mlp" if self.task == "cls" else "encoder"


def build_model_config(config: TrainConfig, dataset: Dataset) -> ModelConfig:
    if dataset.task != config.task:
        raise ConfigError(f"dataset task {dataset.task!r} does not match config task {config.task!r}")
    arch = config.resolved_arch
    if config.task == "rank":
        return ModelConfig(arch="encoder", head="rank", input_dim=dataset.dim,
                           d_model=config.d_model, d_ff=config.d_ff, max_len=1,
                           rank_temperature=config.rank_temperature)
    max_len = max(len(seg) for s in dataset.samples for seg in s.segments)
    if config.task == "span":
        return ModelConfig(arch="encoder", head="span", vocab=dataset.vocab,
                           d_model=config.d_model, d_ff=config.d_ff, max_len=max_len)
    n_classes = int(dataset.params.get("n_classes", 0)) or 1 + max(int(s.label) for s in dataset.samples)
    if arch == "mlp":
        return ModelConfig(arch="mlp", head="cls", dims=[dataset.vocab, *config.hidden, n_classes],
                           vocab=dataset.vocab)
    return ModelConfig(arch="encoder", head="cls", vocab=dataset.vocab, n_out=n_classes,
                       d_model=config.d_model, d_ff=config.d_ff, max_len=max_len)

# ------------------------------
# Records
# ------------------------------

class StepRecord(BaseModel):
    step: int
    epoch: int
    sample_id: int
    losses: List[float]
    b: float
    alphas: List[int]
    cmp_loss: float
    objective: float
    fwd_count: int
    shortened: bool = False
    chains: Optional[Dict[str, list]] = None


class EvalRecord(BaseModel):
    step: int
    metric_name: str
    metric_value: float
    context_size: Optional[int] = None


class RunRecord(BaseModel):
    """Append-only training log."""

    c: int
    steps: List[StepRecord] = Field(default_factory=list)
    evals: List[EvalRecord] = Field(default_factory=list)

    def append_step(self, rec: StepRecord) -> None:
        self.steps.append(rec)

    def append_eval(self, rec: EvalRecord) -> None:
        self.evals.append(rec)

    def final_metrics(self) -> Dict[str, float]:
        if not self.evals:
            return {}
        last = self.evals[-1].step
        return {e.metric_name: e.metric_value for e in self.evals if e.step == last and e.context_size is None}

    def step_header(self) -> List[str]:
        k = self.c + 1
        return (["step", "sample_id"] + [f"l_{i}" for i in range(k)] + ["b"]
                + [f"alpha_{i}" for i in range(k)] + ["cmp_loss", "fwd_count", "shortened"])

    def step_rows(self) -> List[list]:
        k = self.c + 1
        rows = []
        for r in self.steps:
            pad = [None] * (k - len(r.losses))
            rows.append([r.step, r.sample_id, *r.losses, *pad, r.b, *r.alphas, *pad,
                         r.cmp_loss, r.fwd_count, int(r.shortened)])
        return rows

    def eval_rows(self) -> List[list]:
        return [[e.step, e.metric_name, e.metric_value, e.context_size] for e in self.evals]

    def cost_summary(self) -> Dict[str, float]:
        """Forward-pass accounting relative to conventional training (1 pass per sample)."""
        n = len(self.steps)
        passes = sum(r.fwd_count for r in self.steps)
        per_sample = passes / n if n else 0.0
        return {
            "c": self.c,
            "sample_steps": n,
            "forward_passes": passes,
            "mean_chain_length": per_sample - 1.0 if n else 0.0,
            "forward_per_sample": per_sample,
            "ratio_to_erm": per_sample,
            "shortened_chains": sum(1 for r in self.steps if r.shortened),
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        write_csv(out / "steps.csv", self.step_header(), self.step_rows(), comment="cmplab steps")
        write_csv(out / "evals.csv", ["step", "metric_name", "metric_value", "context_size"],
                  self.eval_rows(), comment="cmplab evals")
        chains = [{"step": r.step, "sample_id": r.sample_id, "chains": r.chains}
                  for r in self.steps if r.chains is not None]
        if chains:
            write_json(out / "chains.json", chains)

# ------------------------------
# Shared data plumbing
# ------------------------------

def epoch_order(seed: int, n: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(order: Sequence[int], batch_size: int) -> List[List[int]]:
    return [list(order[k : k + batch_size]) for k in range(0, len(order), batch_size)]


def sample_rng(seed: int, epoch: int, sample_id: int) -> RngStream:
    return RngStream(seed=seed).derive(epoch, sample_id)


def training_context(sample: Union[SegmentedContext, RankPool], config: TrainConfig,
                     rng: RngStream) -> SegmentedContext:
    """Input for one training step; ranking pools get a PRF depth drawn from rng."""
    if isinstance(sample, RankPool):
        top = min(config.prf_depth, len(sample.feedback_order))
        depth = int(rng.derive(0).next_generator().integers(0, top + 1))
        return sample.context(depth)
    return sample


def eval_context(sample: Union[SegmentedContext, RankPool], context_size: Optional[int]) -> SegmentedContext:
    if isinstance(sample, RankPool):
        depth = len(sample.feedback_order) if context_size is None else min(context_size, len(sample.feedback_order))
        return sample.context(depth)
    return sample.truncated(context_size)

# ------------------------------
# Chains
# ------------------------------

def _loss(params: ModelParams, context: SegmentedContext, outputs) -> ad.Node:
    return task_loss(context.task, outputs, context.target(), params.config.rank_temperature)


class ChainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    losses: List[ad.Node]
    shortened: bool = False
    chains: Optional[Dict[str, list]] = None


def run_chain(params: ModelParams, context: SegmentedContext, schedule: Sequence[str], p: float,
              rng: RngStream, graph: ad.Graph, keep_chains: bool = False) -> ChainResult:
    """l(0) on the full model and input, then one loss per realized ablation step."""
    losses = [_loss(params, context, forward(params, context, None, graph))]
    mask_chain = MaskChain(p=p, widths=site_widths(params.config))
    crop_chain = CropChain(original=context)
    x, masks, shortened = context, None, False
    for op in schedule:
        if op == "drop":
            mask_chain = drop_step(mask_chain, rng)
            masks = masks_for_step(mask_chain, mask_chain.n_steps)
        else:
            try:
                crop_chain = crop_step(crop_chain, rng)
            except NoCroppableSegments:
                shortened = True
                continue
            x = crop_chain.context_at(crop_chain.n_steps)
        losses.append(_loss(params, x, forward(params, x, masks, graph)))
    chains = None
    if keep_chains:
        chains = {"drop": chain_json(mask_chain), "crop": chain_json(crop_chain)}
    return ChainResult(losses=losses, shortened=shortened, chains=chains)


def _baseline(config: TrainConfig, l0: ad.Node) -> float:
    return float(l0.value) if config.b_policy == "full_model_loss" else 0.0


def _sample_objective(config: TrainConfig, chain: ComparisonChain) -> ad.Node:
    strategy = config.strategy
    if strategy == "second" and chain.c < 1:
        strategy = "first"
    return strategy_objective(strategy, chain)

# ------------------------------
# Optimizer
# ------------------------------

def sgd_update(params: ModelParams, grads: Dict[str, np.ndarray], lr: float) -> ModelParams:
    """theta - lr * g for every parameter with a gradient."""
    new = {}
    for name, t in params.tensors.items():
        g = grads.get(name)
        if g is None:
            new[name] = t
            continue
        if g.shape != t.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {t.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        new[name] = t - lr * g
    return params.replace(new)


def momentum_update(params: ModelParams, grads: Dict[str, np.ndarray], lr: float, momentum: float,
                    velocity: Dict[str, np.ndarray]) -> ModelParams:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        velocity[name] = momentum * velocity.get(name, 0.0) + g
    return sgd_update(params, dict(velocity), lr)

# ------------------------------
# Training
# ------------------------------

def train_step(params: ModelParams, samples: Sequence[Union[SegmentedContext, RankPool]],
               config: TrainConfig, rng: RngStream, step: int = 0, epoch: int = 0,
               velocity: Optional[Dict[str, np.ndarray]] = None) -> Tuple[ModelParams, List[StepRecord]]:
    """One update on a batch; ``rng`` is the epoch stream, split per sample id."""
    if isinstance(samples, (SegmentedContext, RankPool)):
        samples = [samples]
    graph = ad.Graph()
    chains: List[ComparisonChain] = []
    results: List[ChainResult] = []
    for sample in samples:
        srng = rng.derive(sample.sample_id)
        ctx = training_context(sample, config, srng)
        res = run_chain(params, ctx, config.schedule, config.p, srng.derive(1), graph,
                        keep_chains=config.verbose)
        for i, node in enumerate(res.losses):
            if not math.isfinite(float(node.value)):
                raise NumericError(f"non-finite task loss at chain index {i} (sample {sample.sample_id})")
        results.append(res)
        chains.append(ComparisonChain(losses=res.losses, b=_baseline(config, res.losses[0])))

    if config.batch_mode == "batch_mean" and len(chains) > 1:
        depth = min(ch.c for ch in chains) + 1
        means = [ad.mean([ch.losses[i] for ch in chains]) for i in range(depth)]
        batch_chain = ComparisonChain(losses=means, b=_baseline(config, means[0]))
        loss = _sample_objective(config, batch_chain)
        objectives = [float(loss.value)] * len(chains)
    else:
        nodes = [_sample_objective(config, ch) for ch in chains]
        loss = ad.mean(nodes)
        objectives = [float(n.value) for n in nodes]

    if not math.isfinite(float(loss.value)):
        raise NumericError(f"non-finite batch objective at step {step}")
    grads = graph.backward(loss)
    if velocity is not None and config.momentum > 0:
        new_params = momentum_update(params, grads, config.lr, config.momentum, velocity)
    else:
        new_params = sgd_update(params, grads, config.lr)

    records = []
    for sample, ch, res, obj in zip(samples, chains, results, objectives):
        alphas = dynamic_weights(ch).values[: ch.c + 1]
        records.append(StepRecord(
            step=step, epoch=epoch, sample_id=sample.sample_id,
            losses=[float(n.value) for n in ch.losses], b=ch.b, alphas=[int(a) for a in alphas],
            cmp_loss=float(comparative_loss(ComparisonChain.from_values([float(n.value) for n in ch.losses], ch.b)).value),
            objective=obj, fwd_count=len(ch.losses), shortened=res.shortened, chains=res.chains,
        ))
    return new_params, records


def _check_schedule(config: TrainConfig, dataset: Dataset) -> None:
    if "crop" not in config.schedule:
        return
    if config.task == "rank":
        if config.prf_depth == 0 or not any(s.feedback_order for s in dataset.samples):
            raise ConfigError("crop steps need PRF feedback documents (prf_depth >= 1)")
        return
    if not any(s.n_non_support() for s in dataset.samples):
        raise ConfigError("crop steps need inputs with non-support segments")


def _eval_round(params: ModelParams, config: TrainConfig, eval_set: Dataset, step: int,
                record: RunRecord) -> Dict[str, float]:
    scores = evaluate(params, eval_set)
    scores["loss"] = mean_task_loss(params, eval_set)
    if config.c >= 1:
        scores["order_violation"] = order_violation_rate(params, eval_set, config.schedule, config, n_chains=1)
    for name, value in scores.items():
        record.append_eval(EvalRecord(step=step, metric_name=name, metric_value=value))
    return scores


def train(config: TrainConfig, dataset: Dataset, eval_dataset: Optional[Dataset] = None,
          out_dir=None, params: Optional[ModelParams] = None) -> Tuple[ModelParams, RunRecord]:
    """Fixed epoch budget (optionally early-stopped) of comparative training.

    Checkpoints go to ``out_dir`` at eval cadence; a non-finite objective saves
    the last good parameters as ``abort.ckpt.json`` and raises DivergenceError.
    """
    model_config = build_model_config(config, dataset)
    _check_schedule(config, dataset)
    params = params if params is not None else init_params(model_config, config.seed)
    eval_set = eval_dataset if eval_dataset is not None else dataset
    record = RunRecord(c=config.c)
    velocity: Dict[str, np.ndarray] = {}
    primary = PRIMARY_METRIC[config.task]
    best, stale, last_ckpt = -math.inf, 0, None
    step = 0
    log(config.verbose, f"training {config.task} with strategy={config.strategy} c={config.c} "
                        f"schedule={config.schedule} params={params.count()}")

    def checkpoint(name: str, p: ModelParams) -> Optional[str]:
        if out_dir is None:
            return None
        return str(save_checkpoint(p, Path(out_dir) / name, extra={"step": step}))

    stop = False
    for epoch in range(config.epochs):
        rng = RngStream(seed=config.seed).derive(epoch)
        for batch in batches(epoch_order(config.seed, len(dataset), epoch), config.batch_size):
            samples = [dataset.samples[i] for i in batch]
            try:
                params, recs = train_step(params, samples, config, rng, step, epoch, velocity)
            except NumericError as e:
                path = checkpoint("abort.ckpt.json", params) or last_ckpt
                raise DivergenceError(f"step {step}: {e}", checkpoint=path) from e
            for r in recs:
                record.append_step(r)
            step += 1
            if config.eval_every and step % config.eval_every == 0:
                scores = _eval_round(params, config, eval_set, step, record)
                last_ckpt = checkpoint(f"ckpt-step{step:06d}.json", params) or last_ckpt
                log(config.verbose, f"step {step}: {primary}={scores[primary]:.4f} loss={scores['loss']:.4f}")
                if config.early_stopping:
                    if scores[primary] > best:
                        best, stale = scores[primary], 0
                    else:
                        stale += 1
                        stop = stale >= config.early_stopping
            if (config.max_steps and step >= config.max_steps) or stop:
                stop = True
                break
        if stop:
            break

    if not record.evals or record.evals[-1].step != step:
        _eval_round(params, config, eval_set, step, record)
    return params, record


def train_erm(config: TrainConfig, dataset: Dataset, eval_dataset: Optional[Dataset] = None,
              params: Optional[ModelParams] = None) -> Tuple[ModelParams, RunRecord]:
    """Conventional training on the bare full-model loss, same data order and inputs.

    Momentum applies as in ``train``. Both batch modes reduce to the batch-mean loss
    here, since a one-model chain has nothing to compare.
    """
    erm_config = config.model_copy(update={"c": 0, "schedule": [], "strategy": "first"})
    model_config = build_model_config(erm_config, dataset)
    params = params if params is not None else init_params(model_config, config.seed)
    record = RunRecord(c=0)
    step = 0
    velocity: Dict[str, np.ndarray] = {}
    for epoch in range(config.epochs):
        rng = RngStream(seed=config.seed).derive(epoch)
        for batch in batches(epoch_order(config.seed, len(dataset), epoch), config.batch_size):
            graph = ad.Graph()
            losses, ids = [], []
            for i in batch:
                sample = dataset.samples[i]
                ctx = training_context(sample, erm_config, rng.derive(sample.sample_id))
                losses.append(_loss(params, ctx, forward(params, ctx, None, graph)))
                ids.append(sample.sample_id)
            loss = ad.mean(losses)
            if not math.isfinite(float(loss.value)):
                raise NumericError(f"non-finite batch loss at step {step}")
            grads = graph.backward(loss)
            if config.momentum > 0:
                params = momentum_update(params, grads, config.lr, config.momentum, velocity)
            else:
                params = sgd_update(params, grads, config.lr)
            for sid, node in zip(ids, losses):
                v = float(node.value)
                record.append_step(StepRecord(step=step, epoch=epoch, sample_id=sid, losses=[v], b=0.0,
                                              alphas=[1 if v > 0 else 0], cmp_loss=v, objective=v,
                                              fwd_count=1))
            step += 1
            if config.max_steps and step >= config.max_steps:
                break
        if config.max_steps and step >= config.max_steps:
            break
    _eval_round(params, erm_config, eval_dataset if eval_dataset is not None else dataset, step, record)
    return params, record

# ------------------------------
# Evaluation and diagnostics
# ------------------------------

def _predictions(params: ModelParams, dataset: Dataset, context_size: Optional[int]):
    preds, labels = [], []
    for sample in dataset.samples:
        ctx = eval_context(sample, context_size)
        out = forward(params, ctx)
        preds.append(predict(ctx.task, out, ctx))
        labels.append(ctx.target() if ctx.task != "rank" else int(ctx.label))
    return preds, labels


def evaluate(params: ModelParams, dataset: Dataset, context_size: Optional[int] = None) -> Dict[str, float]:
    """Full-model metrics; ``context_size`` keeps that many non-support segments
    (PRF depth for ranking)."""
    preds, labels = _predictions(params, dataset, context_size)
    return metrics(dataset.task, preds, labels)


def evaluate_per_query(params: ModelParams, dataset: Dataset, context_size: Optional[int] = None) -> List[float]:
    preds, labels = _predictions(params, dataset, context_size)
    return per_sample_scores(dataset.task, preds, labels)


def mean_task_loss(params: ModelParams, dataset: Dataset, context_size: Optional[int] = None) -> float:
    total = 0.0
    for sample in dataset.samples:
        ctx = eval_context(sample, context_size)
        total += float(_loss(params, ctx, forward(params, ctx)).value)
    return total / max(len(dataset), 1)


def order_violation_rate(params: ModelParams, dataset: Dataset, schedule: Sequence[str],
                         config: TrainConfig, n_chains: int = 1) -> float:
    """Fraction of (sample, chain, i<j) with l(i) > l(j) along sampled ablation chains."""
    if not schedule:
        raise ContractError("order violation rate needs at least one ablation step")
    if n_chains < 1:
        raise ContractError("n_chains must be >= 1")
    violations = pairs = 0
    for sample in dataset.samples:
        ctx = eval_context(sample, None)
        for k in range(n_chains):
            rng = RngStream(seed=config.seed).derive(1_000_003, sample.sample_id, k)
            res = run_chain(params, ctx, schedule, config.p, rng, ad.Graph())
            vals = [float(n.value) for n in res.losses]
            for i in range(len(vals)):
                for j in range(i + 1, len(vals)):
                    pairs += 1
                    violations += vals[i] > vals[j]
    return violations / pairs if pairs else 0.0


def robustness_index(results_with_k: Sequence[float], results_with_k_minus_1: Sequence[float]) -> float:
    """(N+ - N-) / |Q| for per-query metrics at depth k versus k-1; ties count neither."""
    if len(results_with_k) != len(results_with_k_minus_1):
        raise ContractError(f"{len(results_with_k)} vs {len(results_with_k_minus_1)} queries")
    if not results_with_k:
        raise ContractError("robustness index on an empty query set")
    up = sum(1 for a, b in zip(results_with_k, results_with_k_minus_1) if a > b)
    down = sum(1 for a, b in zip(results_with_k, results_with_k_minus_1) if a < b)
    return (up - down) / len(results_with_k)
