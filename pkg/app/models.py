"""Toy task models with declared dropout sites.

Two architectures share one parameter container:

- ``mlp``: bag-of-words features through hidden ReLU layers, classification head.
- ``encoder``: one single-head attention block with residual connections, used with
  a classification, span or ranking head.

Dropout masks act on activations and are per-feature (the same survivor set for
every token row), so a zeroed unit is equivalent to zeroing the weights wired to it.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

import autodiff as ad
from artifacts import write_json
from errors import ConfigError, ContractError, DimensionError

if TYPE_CHECKING:
    from tasks import SegmentedContext

CHECKPOINT_MAGIC = "CMPLAB1"

Masks = Mapping[str, np.ndarray]
HeadOutput = Union[ad.Node, Tuple[ad.Node, ad.Node]]

# ------------------------------
# Config
# ------------------------------

class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arch: Literal["mlp", "encoder"] = "mlp"
    head: Literal["cls", "span", "rank"] = "cls"
    dims: List[int] = Field(default_factory=lambda: [8, 16, 4])  # mlp: [vocab, hidden..., classes]
    vocab: int = 0
    input_dim: int = 0  # vector inputs (ranking); 0 means token ids
    d_model: int = 16
    d_ff: int = 32
    max_len: int = 64
    n_out: int = 2
    heads: Literal[1] = 1
    rank_temperature: float = Field(default=1.0, gt=0.0)  # rank logits are rank_score / temperature

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.arch == "mlp":
            if len(self.dims) < 2 or any(d <= 0 for d in self.dims):
                raise ConfigError(f"mlp dims must be >= 2 positive sizes, got {self.dims}")
            if self.head != "cls":
                raise ConfigError("mlp only supports the cls head")
            if self.vocab and self.dims[0] != self.vocab:
                raise ConfigError(f"mlp input dim {self.dims[0]} must equal vocab {self.vocab}")
        else:
            if min(self.d_model, self.d_ff, self.max_len) <= 0:
                raise ConfigError("encoder sizes must be positive")
            if self.input_dim <= 0 and self.vocab <= 0:
                raise ConfigError("encoder needs vocab (token inputs) or input_dim (vector inputs)")
            if self.head == "rank" and self.input_dim <= 0:
                raise ConfigError("rank head needs input_dim")
            if self.head == "cls" and self.n_out < 2:
                raise ConfigError("cls head needs n_out >= 2")
        return self

    @computed_field
    @property
    def dropout_sites(self) -> List[str]:
        return list(site_widths(self))

    @property
    def query_first(self) -> bool:
        return self.head != "cls"


def site_widths(config: ModelConfig) -> Dict[str, int]:
    if config.arch == "mlp":
        return {f"mlp.l{k}.drop": config.dims[k + 1] for k in range(len(config.dims) - 2)}
    return {"enc.attn.drop": config.d_model, "enc.ffn.drop": config.d_model}


def site_wiring(config: ModelConfig) -> Dict[str, List[Tuple[str, int]]]:
    """Site -> [(parameter, axis indexed by the site's units)]."""
    if config.arch == "mlp":
        wiring = {}
        for k in range(len(config.dims) - 2):
            wiring[f"mlp.l{k}.drop"] = [(f"mlp.l{k}.W", 1), (f"mlp.l{k}.b", 0), (f"mlp.l{k + 1}.W", 0)]
        return wiring
    return {
        "enc.attn.drop": [("enc.attn.Wo", 1)],
        "enc.ffn.drop": [("enc.ffn.W2", 1), ("enc.ffn.b2", 0)],
    }


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    if config.arch == "mlp":
        for k, (d_in, d_out) in enumerate(zip(config.dims[:-1], config.dims[1:])):
            shapes[f"mlp.l{k}.W"] = (d_in, d_out)
            shapes[f"mlp.l{k}.b"] = (d_out,)
        return shapes

    d = config.d_model
    if config.input_dim > 0:
        shapes["enc.embed.in.W"] = (config.input_dim, d)
        shapes["enc.embed.in.b"] = (d,)
    else:
        shapes["enc.embed.tok"] = (config.vocab, d)
        shapes["enc.embed.pos"] = (config.max_len, d)
    shapes["enc.embed.role"] = (2, d)
    for name in ("Wq", "Wk", "Wv", "Wo"):
        shapes[f"enc.attn.{name}"] = (d, d)
    shapes["enc.ffn.W1"] = (d, config.d_ff)
    shapes["enc.ffn.b1"] = (config.d_ff,)
    shapes["enc.ffn.W2"] = (config.d_ff, d)
    shapes["enc.ffn.b2"] = (d,)
    if config.head == "cls":
        shapes["head.W"] = (d, config.n_out)
        shapes["head.b"] = (config.n_out,)
    elif config.head == "span":
        for side in ("start", "end"):
            shapes[f"head.{side}.W"] = (d, 1)
            shapes[f"head.{side}.b"] = (1,)
    else:
        shapes["head.W"] = (d, config.input_dim)
        shapes["head.b"] = (config.input_dim,)
    return shapes


def parameter_roles(config: ModelConfig) -> Dict[str, str]:
    """'vw' for parameters wired to a dropout site, 'u' for the rest."""
    wired = {name for links in site_wiring(config).values() for name, _ in links}
    return {name: ("vw" if name in wired else "u") for name in param_shapes(config)}

# ------------------------------
# Parameters
# ------------------------------

class ModelParams(BaseModel):
    """Immutable parameter version; updates build a new instance."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    @field_validator("tensors", mode="before")
    @classmethod
    def _freeze(cls, value: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        frozen = {}
        for name, arr in value.items():
            a = np.array(arr, dtype=np.float64, copy=True)
            a.setflags(write=False)
            frozen[name] = a
        return frozen

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelParams":
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ContractError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionError(name, shape, self.tensors[name].shape)
        return self

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def replace(self, tensors: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams(config=self.config, tensors=dict(tensors))

    def equals(self, other: "ModelParams") -> bool:
        if set(self.tensors) != set(other.tensors):
            return False
        return all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            s = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-s, s, size=shape)
    return ModelParams(config=config, tensors=tensors)


def ones_masks(config: ModelConfig) -> Dict[str, np.ndarray]:
    return {site: np.ones(width) for site, width in site_widths(config).items()}


def ablated_entries(config: ModelConfig, masks: Masks) -> Dict[str, np.ndarray]:
    """Boolean map of parameter entries wired to units whose mask is 0."""
    entries = {name: np.zeros(shape, dtype=bool) for name, shape in param_shapes(config).items()}
    for site, links in site_wiring(config).items():
        if site not in masks:
            continue
        dropped = np.asarray(masks[site]) == 0
        for name, axis in links:
            view = np.moveaxis(entries[name], axis, 0)
            view[dropped] = True
    return entries


def zero_ablated(params: ModelParams, masks: Masks) -> ModelParams:
    """Weight-ablation view of a neuron mask: wired entries set to 0."""
    entries = ablated_entries(params.config, masks)
    return params.replace({name: np.where(entries[name], 0.0, t) for name, t in params.tensors.items()})

# ------------------------------
# Forward
# ------------------------------

def bag_of_words(context: "SegmentedContext", vocab: int) -> np.ndarray:
    counts = np.zeros(vocab)
    for seg in context.segments:
        np.add.at(counts, np.asarray(seg.ids, dtype=np.int64), 1.0)
    return counts


def _check_masks(config: ModelConfig, masks: Optional[Masks]) -> None:
    if masks is None:
        return
    widths = site_widths(config)
    missing = [s for s in widths if s not in masks]
    if missing:
        raise ContractError(f"missing mask for dropout site(s): {missing}")
    unknown = [s for s in masks if s not in widths]
    if unknown:
        raise ContractError(f"unknown dropout site(s): {unknown}")
    for site, width in widths.items():
        if np.shape(masks[site]) != (width,):
            raise DimensionError(site, (width,), np.shape(masks[site]))


def _drop(x: ad.Node, masks: Optional[Masks], site: str) -> ad.Node:
    if masks is None:
        return x
    return ad.apply_mask(x, np.broadcast_to(np.asarray(masks[site], dtype=np.float64), x.shape))


def _mlp(params: ModelParams, graph: ad.Graph, x, masks: Optional[Masks]) -> ad.Node:
    cfg = params.config
    if isinstance(x, np.ndarray):
        feats = np.asarray(x, dtype=np.float64).reshape(1, -1)
    else:
        feats = bag_of_words(x, cfg.dims[0]).reshape(1, -1)
    if feats.shape[1] != cfg.dims[0]:
        raise DimensionError("mlp input", (1, cfg.dims[0]), feats.shape)
    h = graph.constant(feats)
    last = len(cfg.dims) - 2
    for k in range(last + 1):
        h = ad.affine(h, graph.parameter(f"mlp.l{k}.W", params.tensors[f"mlp.l{k}.W"]),
                      graph.parameter(f"mlp.l{k}.b", params.tensors[f"mlp.l{k}.b"]))
        if k < last:
            h = _drop(ad.relu(h), masks, f"mlp.l{k}.drop")
    return ad.reshape(h, (cfg.dims[-1],))


def _embed(params: ModelParams, graph: ad.Graph, context: "SegmentedContext") -> ad.Node:
    cfg = params.config
    p = lambda name: graph.parameter(name, params.tensors[name])  # noqa: E731
    roles: List[int] = []
    if cfg.input_dim > 0:
        rows = []
        for s, seg in enumerate(context.segments):
            if seg.vectors is None:
                raise ContractError(f"segment {s} has no vectors for a vector-input encoder")
            rows.extend(seg.vectors)
            roles.extend([0 if (s == 0 and cfg.query_first) else 1] * len(seg.vectors))
        x = graph.constant(np.asarray(rows, dtype=np.float64).reshape(-1, cfg.input_dim))
        h = ad.affine(x, p("enc.embed.in.W"), p("enc.embed.in.b"))
    else:
        ids: List[int] = []
        pos: List[int] = []
        for s, seg in enumerate(context.segments):
            if len(seg.ids) > cfg.max_len:
                raise ContractError(f"segment {s} length {len(seg.ids)} exceeds max_len {cfg.max_len}")
            ids.extend(seg.ids)
            pos.extend(range(len(seg.ids)))
            roles.extend([0 if (s == 0 and cfg.query_first) else 1] * len(seg.ids))
        h = ad.add(ad.embedding(p("enc.embed.tok"), ids), ad.embedding(p("enc.embed.pos"), pos))
    if h.shape[0] == 0:
        raise ContractError("encoder input has no tokens")
    return ad.add(h, ad.embedding(p("enc.embed.role"), roles))


def _encoder(params: ModelParams, graph: ad.Graph, context: "SegmentedContext",
             masks: Optional[Masks]) -> HeadOutput:
    cfg = params.config
    p = lambda name: graph.parameter(name, params.tensors[name])  # noqa: E731
    h0 = _embed(params, graph, context)

    q = ad.matmul(h0, p("enc.attn.Wq"))
    k = ad.matmul(h0, p("enc.attn.Wk"))
    v = ad.matmul(h0, p("enc.attn.Wv"))
    att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(cfg.d_model)))
    o = _drop(ad.matmul(ad.matmul(att, v), p("enc.attn.Wo")), masks, "enc.attn.drop")
    h1 = ad.add(h0, o)

    f = ad.relu(ad.affine(h1, p("enc.ffn.W1"), p("enc.ffn.b1")))
    f = _drop(ad.affine(f, p("enc.ffn.W2"), p("enc.ffn.b2")), masks, "enc.ffn.drop")
    h2 = ad.add(h1, f)

    n = h2.shape[0]
    if cfg.head == "span":
        start = ad.reshape(ad.affine(h2, p("head.start.W"), p("head.start.b")), (n,))
        end = ad.reshape(ad.affine(h2, p("head.end.W"), p("head.end.b")), (n,))
        return start, end
    pooled = ad.reshape(ad.mean_rows(h2), (1, cfg.d_model))
    if cfg.head == "cls":
        return ad.reshape(ad.affine(pooled, p("head.W"), p("head.b")), (cfg.n_out,))
    out = ad.reshape(ad.affine(pooled, p("head.W"), p("head.b")), (cfg.input_dim,))
    return ad.l2_normalize(out)


def forward(params: ModelParams, x, masks: Optional[Masks] = None,
            graph: Optional[ad.Graph] = None) -> HeadOutput:
    """Run the model on a SegmentedContext (or a raw feature vector for the mlp).

    ``masks=None`` is the identity path; otherwise every declared site needs a
    per-feature mask vector.
    """
    _check_masks(params.config, masks)
    graph = graph if graph is not None else ad.Graph()
    if params.config.arch == "mlp":
        return _mlp(params, graph, x, masks)
    return _encoder(params, graph, x, masks)


def rank_score(q, d) -> float:
    qv = np.asarray(q, dtype=np.float64)
    dv = np.asarray(d, dtype=np.float64)
    if qv.ndim != 1 or qv.shape != dv.shape:
        raise DimensionError("rank_score", qv.shape, dv.shape)
    return float(np.dot(qv, dv))

# ------------------------------
# Checkpoints
# ------------------------------

def save_checkpoint(params: ModelParams, path, extra: Optional[dict] = None) -> Path:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "config": params.config.model_dump(exclude={"dropout_sites"}),
        "params": {
            name: {"shape": list(t.shape), "values": t.reshape(-1).tolist()}
            for name, t in sorted(params.tensors.items())
        },
    }
    if extra:
        payload["extra"] = extra
    return write_json(path, payload)


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    config = ModelConfig.model_validate(payload["config"])
    tensors = {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return ModelParams(config=config, tensors=tensors)
