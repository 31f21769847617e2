"""Synthetic tasks with annotated support segments, task losses and metrics.

Three task kinds:

- ``cls``: classification; support segments carry class-indicative tokens.
- ``span``: extraction; a question segment and one gold paragraph are support,
  distractor paragraphs carry near-miss patterns.
- ``rank``: pseudo-relevance feedback; a query vector plus the top-k feedback
  documents of a base retriever must rank the positive first in its pool.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

import autodiff as ad
from artifacts import digest, write_text
from errors import ConfigError, ContractError, DimensionError
from models import rank_score

TaskKind = Literal["cls", "span", "rank"]

MAX_SPAN_LEN = 3
TOP_K = 10

# ------------------------------
# Types
# ------------------------------

class Segment(BaseModel):
    ids: List[int] = Field(default_factory=list)
    vectors: Optional[List[List[float]]] = None
    support: bool = False

    def __len__(self) -> int:
        return len(self.vectors) if self.vectors is not None else len(self.ids)


class SpanLabel(BaseModel):
    """Inclusive token span relative to one support segment."""

    segment: int
    start: int
    end: int


class RankTarget(BaseModel):
    docs: List[List[float]]
    positive: int


class SegmentedContext(BaseModel):
    task: TaskKind
    segments: List[Segment]
    label: Union[int, SpanLabel]
    candidates: Optional[List[List[float]]] = None
    meta: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self) -> "SegmentedContext":
        if not any(s.support for s in self.segments):
            raise ContractError("context needs at least one support segment")
        if self.task == "span":
            if not isinstance(self.label, SpanLabel):
                raise ContractError("span context needs a SpanLabel")
            lab = self.label
            if not 0 <= lab.segment < len(self.segments) or not self.segments[lab.segment].support:
                raise ContractError(f"span label segment {lab.segment} is not a support segment")
            if not 0 <= lab.start <= lab.end < len(self.segments[lab.segment]):
                raise ContractError(f"span ({lab.start}, {lab.end}) outside segment {lab.segment}")
        elif isinstance(self.label, SpanLabel):
            raise ContractError(f"{self.task} context cannot carry a span label")
        if self.task == "rank":
            if self.candidates is None or not 0 <= int(self.label) < len(self.candidates):
                raise ContractError("rank context needs candidates containing the positive")
        return self

    @property
    def sample_id(self) -> int:
        return int(self.meta.get("id", 0))

    def n_tokens(self) -> int:
        return sum(len(s) for s in self.segments)

    def n_non_support(self) -> int:
        return sum(1 for s in self.segments if not s.support)

    def keep(self, indices: Sequence[int]) -> "SegmentedContext":
        """Sub-context of the given segments, order preserved, label re-based."""
        idx = sorted(set(int(i) for i in indices))
        missing = [i for i, s in enumerate(self.segments) if s.support and i not in idx]
        if missing:
            raise ContractError(f"keep() would drop support segment(s) {missing}")
        label = self.label
        if isinstance(label, SpanLabel):
            label = SpanLabel(segment=idx.index(label.segment), start=label.start, end=label.end)
        return self.model_copy(update={"segments": [self.segments[i] for i in idx], "label": label})

    def truncated(self, n_non_support: Optional[int]) -> "SegmentedContext":
        if n_non_support is None:
            return self
        kept, seen = [], 0
        for i, s in enumerate(self.segments):
            if s.support:
                kept.append(i)
            elif seen < n_non_support:
                kept.append(i)
                seen += 1
        return self.keep(kept)

    def absolute_span(self) -> Tuple[int, int]:
        if not isinstance(self.label, SpanLabel):
            raise ContractError("absolute_span needs a span label")
        offset = sum(len(s) for s in self.segments[: self.label.segment])
        return offset + self.label.start, offset + self.label.end

    def span_tokens(self) -> List[int]:
        s, e = self.absolute_span()
        flat = [t for seg in self.segments for t in seg.ids]
        return flat[s : e + 1]

    def target(self) -> Union[int, Tuple[int, int], RankTarget]:
        if self.task == "span":
            return self.absolute_span()
        if self.task == "rank":
            return RankTarget(docs=self.candidates, positive=int(self.label))
        return int(self.label)


class RankPool(BaseModel):
    task: Literal["rank"] = "rank"
    query: List[float]
    docs: List[List[float]]
    positive: int
    feedback_order: List[int]
    meta: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self) -> "RankPool":
        if not 0 <= self.positive < len(self.docs):
            raise ContractError(f"positive {self.positive} not among {len(self.docs)} docs")
        if any(not 0 <= j < len(self.docs) for j in self.feedback_order):
            raise ContractError("feedback_order indexes outside the pool")
        return self

    @property
    def sample_id(self) -> int:
        return int(self.meta.get("id", 0))

    def context(self, depth: int) -> SegmentedContext:
        """Query plus the top-``depth`` feedback documents."""
        if not 0 <= depth <= len(self.feedback_order):
            raise ContractError(f"PRF depth {depth} outside [0, {len(self.feedback_order)}]")
        segments = [Segment(vectors=[self.query], support=True)]
        segments += [Segment(vectors=[self.docs[j]]) for j in self.feedback_order[:depth]]
        return SegmentedContext(task="rank", segments=segments, label=self.positive,
                                candidates=self.docs, meta=dict(self.meta, depth=depth))


Sample = Union[SegmentedContext, RankPool]


class Dataset(BaseModel):
    task: TaskKind
    vocab: int = 0
    dim: int = 0
    seed: int = 0
    params: Dict[str, Any] = Field(default_factory=dict)
    samples: List[Sample] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, n_first: int) -> Tuple["Dataset", "Dataset"]:
        a = self.model_copy(update={"samples": self.samples[:n_first]})
        b = self.model_copy(update={"samples": self.samples[n_first:]})
        return a, b

    def to_jsonl(self) -> str:
        return "".join(s.model_dump_json(exclude_none=True) + "\n" for s in self.samples)

    def write(self, path) -> Path:
        return write_text(path, self.to_jsonl())

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        samples: List[Sample] = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                raw = json.loads(line)
                if raw.get("task") == "rank":
                    samples.append(RankPool.model_validate(raw))
                else:
                    samples.append(SegmentedContext.model_validate(raw))
        if not samples:
            raise ConfigError(f"{path}: no samples")
        gen = samples[0].meta.get("gen", {})
        return cls(task=samples[0].task, vocab=int(gen.get("vocab", 0)), dim=int(gen.get("dim", 0)),
                   seed=int(gen.get("seed", 0)), params=gen, samples=samples)

    @staticmethod
    def digest(path) -> str:
        return digest(path)

# ------------------------------
# Generators
# ------------------------------

def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def gen_classification(seed: int, n_samples: int, n_classes: int = 4, n_support: int = 1,
                       n_noise: int = 6, segment_len: int = 8, vocab: int = 64,
                       spurious_rate: float = 0.1, n_cues: int = 2) -> Dataset:
    """Support segments hold ``n_cues`` tokens of the label's class set; noise
    segments hold filler and, at ``spurious_rate``, one class token that matches
    the label half of the time."""
    _require(n_samples >= 1, "n_samples must be >= 1")
    _require(n_classes >= 2, "n_classes must be >= 2")
    _require(n_support >= 1, "n_support must be >= 1")
    _require(n_noise >= 0, "n_noise must be >= 0")
    _require(0.0 <= spurious_rate <= 1.0, "spurious_rate must lie in [0, 1]")
    _require(2 <= n_cues <= segment_len, "need 2 <= n_cues <= segment_len")
    class_size = max(2, (vocab // 4) // n_classes)
    n_class_tokens = n_classes * class_size
    _require(vocab >= n_class_tokens + 4, f"vocab {vocab} too small for {n_classes} classes")

    rng = np.random.default_rng(seed)
    class_tokens = np.arange(n_class_tokens).reshape(n_classes, class_size)
    filler = np.arange(n_class_tokens, vocab)
    gen = dict(kind="cls", seed=seed, n_samples=n_samples, n_classes=n_classes, n_support=n_support,
               n_noise=n_noise, segment_len=segment_len, vocab=vocab, spurious_rate=spurious_rate,
               n_cues=n_cues)

    samples = []
    for i in range(n_samples):
        label = int(rng.integers(n_classes))
        segments = []
        for _ in range(n_support):
            ids = rng.choice(filler, size=segment_len)
            ids[:n_cues] = rng.choice(class_tokens[label], size=n_cues)
            segments.append(Segment(ids=[int(t) for t in rng.permutation(ids)], support=True))
        for _ in range(n_noise):
            ids = rng.choice(filler, size=segment_len)
            if rng.random() < spurious_rate:
                cls = label if rng.random() < 0.5 else int(rng.integers(n_classes))
                ids[int(rng.integers(segment_len))] = rng.choice(class_tokens[cls])
            segments.append(Segment(ids=[int(t) for t in ids], support=False))
        order = rng.permutation(len(segments))
        segments = [segments[j] for j in order]
        samples.append(SegmentedContext(task="cls", segments=segments, label=label,
                                        meta={"id": i, "gen": gen}))
    return Dataset(task="cls", vocab=vocab, seed=seed, params=gen, samples=samples)


def gen_extraction(seed: int, n_samples: int, n_distractors: int = 4, segment_len: int = 8,
                   vocab: int = 48, n_keys: int = 4, n_answer_tokens: int = 8) -> Dataset:
    """Question segment first (support) carrying cue ``k``; the gold paragraph
    (support) has marker ``k`` followed by a 1-3 token answer; distractors carry
    other markers followed by answer-like tokens."""
    _require(n_samples >= 1, "n_samples must be >= 1")
    _require(n_distractors >= 0, "n_distractors must be >= 0")
    _require(n_keys >= 2, "n_keys must be >= 2")
    _require(segment_len >= MAX_SPAN_LEN + 2, f"segment_len must be >= {MAX_SPAN_LEN + 2}")
    _require(vocab >= 2 * n_keys + n_answer_tokens + 4, f"vocab {vocab} too small")

    rng = np.random.default_rng(seed)
    cues = np.arange(n_keys)
    markers = np.arange(n_keys, 2 * n_keys)
    answers = np.arange(2 * n_keys, 2 * n_keys + n_answer_tokens)
    filler = np.arange(2 * n_keys + n_answer_tokens, vocab)
    gen = dict(kind="span", seed=seed, n_samples=n_samples, n_distractors=n_distractors,
               segment_len=segment_len, vocab=vocab, n_keys=n_keys, n_answer_tokens=n_answer_tokens)

    def paragraph(marker: int) -> Tuple[List[int], int, int]:
        length = int(rng.integers(1, MAX_SPAN_LEN + 1))
        at = int(rng.integers(0, segment_len - length))
        ids = rng.choice(filler, size=segment_len)
        ids[at] = marker
        ids[at + 1 : at + 1 + length] = rng.choice(answers, size=length)
        return [int(t) for t in ids], at + 1, at + length

    samples = []
    for i in range(n_samples):
        key = int(rng.integers(n_keys))
        question = rng.choice(filler, size=segment_len)
        question[int(rng.integers(segment_len))] = cues[key]
        gold_ids, start, end = paragraph(int(markers[key]))
        others = [int(m) for m in markers if m != markers[key]]
        body = [Segment(ids=paragraph(int(rng.choice(others)))[0]) for _ in range(n_distractors)]
        gold_at = int(rng.integers(n_distractors + 1))
        body.insert(gold_at, Segment(ids=gold_ids, support=True))
        segments = [Segment(ids=[int(t) for t in question], support=True)] + body
        samples.append(SegmentedContext(task="span", segments=segments,
                                        label=SpanLabel(segment=gold_at + 1, start=start, end=end),
                                        meta={"id": i, "gen": gen}))
    return Dataset(task="span", vocab=vocab, seed=seed, params=gen, samples=samples)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(float(np.linalg.norm(v)), 1e-12)


def averaging_oracle_rank(pool: RankPool, depth: Optional[int] = None) -> List[int]:
    """Rank the pool by query + relevant feedback documents averaged."""
    depth = len(pool.feedback_order) if depth is None else depth
    relevant = set(pool.meta.get("relevant", []))
    vecs = [np.asarray(pool.query)]
    vecs += [np.asarray(pool.docs[j]) for j in pool.feedback_order[:depth] if j in relevant]
    probe = _unit(np.mean(vecs, axis=0))
    scores = np.asarray(pool.docs) @ probe
    return [int(j) for j in np.argsort(-scores, kind="stable")]


def gen_ranking(seed: int, n_queries: int, pool_size: int = 16, n_feedback: int = 5,
                dim: int = 16, n_topics: int = 8, max_tries: int = 200) -> Dataset:
    """Topic-centred pools: the positive sits near the topic centre, the query
    is a noisy view of it, related documents share the topic, drift documents
    follow the query's noise direction and the rest are off-topic. Feedback is
    the base retriever's order (raw query dot product) over non-positives."""
    _require(n_queries >= 1, "n_queries must be >= 1")
    _require(pool_size >= 2, "pool_size must be >= 2")
    _require(n_feedback >= 1, "n_feedback must be >= 1")
    _require(n_feedback <= pool_size - 1, "n_feedback cannot exceed pool_size - 1")
    _require(dim >= 2 and n_topics >= 2, "dim and n_topics must be >= 2")

    rng = np.random.default_rng(seed)
    centers = np.stack([_unit(rng.normal(size=dim)) for _ in range(n_topics)])
    n_related = max(1, (pool_size - 1) // 3)
    n_drift = (pool_size - 1) // 3
    n_off = pool_size - 1 - n_related - n_drift
    gen = dict(kind="rank", seed=seed, n_queries=n_queries, pool_size=pool_size,
               n_feedback=n_feedback, dim=dim, n_topics=n_topics)

    def noise() -> np.ndarray:
        return rng.normal(size=dim) / np.sqrt(dim)

    samples = []
    for i in range(n_queries):
        for _ in range(max_tries):
            topic = int(rng.integers(n_topics))
            c = centers[topic]
            drift_dir = _unit(rng.normal(size=dim))
            positive = _unit(c + 0.2 * noise())
            query = _unit(c + 0.9 * (drift_dir + noise()))
            docs = [positive]
            docs += [_unit(c + 0.6 * noise()) for _ in range(n_related)]
            docs += [_unit(drift_dir + 0.6 * noise()) for _ in range(n_drift)]
            for _ in range(n_off):
                other = (topic + 1 + int(rng.integers(n_topics - 1))) % n_topics
                docs.append(_unit(centers[other] + 0.6 * noise()))
            kinds = ["positive"] + ["related"] * n_related + ["drift"] * n_drift + ["off"] * n_off
            order = rng.permutation(pool_size)
            docs = [np.round(docs[j], 6) for j in order]
            kinds = [kinds[j] for j in order]
            pos = kinds.index("positive")
            base = np.asarray(docs) @ np.round(query, 6)
            feedback = [int(j) for j in np.argsort(-base, kind="stable") if j != pos][:n_feedback]
            pool = RankPool(query=[float(v) for v in np.round(query, 6)],
                            docs=[[float(v) for v in d] for d in docs], positive=pos,
                            feedback_order=feedback,
                            meta={"id": i, "topic": topic, "gen": gen,
                                  "relevant": [j for j, k in enumerate(kinds) if k == "related"]})
            if averaging_oracle_rank(pool)[0] == pos:
                samples.append(pool)
                break
        else:
            raise ConfigError(f"query {i}: no pool where the averaging oracle ranks the positive first")
    return Dataset(task="rank", dim=dim, seed=seed, params=gen, samples=samples)

# ------------------------------
# Losses
# ------------------------------

def task_loss(task: TaskKind, outputs, target, temperature: float = 1.0) -> ad.Node:
    if task == "cls":
        if isinstance(outputs, tuple):
            raise ContractError("cls loss expects a logit node")
        return ad.softmax_cross_entropy(outputs, int(target))
    if task == "span":
        if not isinstance(outputs, tuple) or len(outputs) != 2:
            raise ContractError("span loss expects (start_logits, end_logits)")
        start, end = outputs
        s, e = target
        n = start.shape[0]
        if not 0 <= s <= e < n:
            raise ContractError(f"span target ({s}, {e}) outside {n} positions")
        return ad.weighted_sum([ad.softmax_cross_entropy(start, s), ad.softmax_cross_entropy(end, e)],
                               [0.5, 0.5])
    if task == "rank":
        if not isinstance(target, RankTarget):
            raise ContractError("rank loss expects a RankTarget")
        docs = np.asarray(target.docs, dtype=np.float64)
        if docs.ndim != 2 or docs.shape[1] != outputs.shape[0]:
            raise DimensionError("rank loss", docs.shape, outputs.shape)
        # logits are rank_score(q, d) for every candidate
        scores = ad.matvec(outputs.graph.constant(docs), outputs)
        if temperature != 1.0:
            scores = ad.scale(scores, 1.0 / temperature)
        return ad.softmax_cross_entropy(scores, target.positive)
    raise ContractError(f"unknown task kind {task!r}")

# ------------------------------
# Predictions and metrics
# ------------------------------

def decode_span(start: np.ndarray, end: np.ndarray, max_len: int = MAX_SPAN_LEN) -> Tuple[int, int]:
    best, best_score = (0, 0), -np.inf
    for s in range(len(start)):
        for e in range(s, min(len(end), s + max_len)):
            score = start[s] + end[e]
            if score > best_score:
                best, best_score = (s, e), score
    return best


def predict(task: TaskKind, outputs, context: Optional[SegmentedContext] = None):
    if task == "cls":
        return int(np.argmax(outputs.value))
    if task == "span":
        return decode_span(outputs[0].value, outputs[1].value)
    if context is None or context.candidates is None:
        raise ContractError("rank prediction needs the candidate pool")
    scores = np.array([rank_score(outputs.value, d) for d in context.candidates])
    return [int(j) for j in np.argsort(-scores, kind="stable")]


def span_f1(pred: Tuple[int, int], gold: Tuple[int, int]) -> float:
    p = set(range(pred[0], pred[1] + 1))
    g = set(range(gold[0], gold[1] + 1))
    overlap = len(p & g)
    if overlap == 0:
        return 0.0
    precision = overlap / len(p)
    recall = overlap / len(g)
    return 2 * precision * recall / (precision + recall)


def reciprocal_rank(ranking: Sequence[int], positive: int, k: int = TOP_K) -> float:
    top = list(ranking)[:k]
    return 1.0 / (top.index(positive) + 1) if positive in top else 0.0


def per_sample_scores(task: TaskKind, predictions: Sequence, labels: Sequence, k: int = TOP_K) -> List[float]:
    """Primary per-sample score: correctness, exact match, or reciprocal rank."""
    if len(predictions) != len(labels):
        raise ContractError(f"{len(predictions)} predictions vs {len(labels)} labels")
    if task == "cls":
        return [float(int(p) == int(y)) for p, y in zip(predictions, labels)]
    if task == "span":
        return [float(tuple(p) == tuple(y)) for p, y in zip(predictions, labels)]
    return [reciprocal_rank(p, int(y), k) for p, y in zip(predictions, labels)]


def metrics(task: TaskKind, predictions: Sequence, labels: Sequence, k: int = TOP_K) -> Dict[str, float]:
    if not predictions:
        raise ContractError("metrics on an empty prediction list")
    primary = per_sample_scores(task, predictions, labels, k)
    n = len(primary)
    if task == "cls":
        return {"accuracy": sum(primary) / n}
    if task == "span":
        f1 = [span_f1(tuple(p), tuple(y)) for p, y in zip(predictions, labels)]
        return {"em": sum(primary) / n, "f1": sum(f1) / n}
    recall = [float(int(y) in list(p)[:k]) for p, y in zip(predictions, labels)]
    return {f"mrr@{k}": sum(primary) / n, f"recall@{k}": sum(recall) / n}


PRIMARY_METRIC = {"cls": "accuracy", "span": "em", "rank": f"mrr@{TOP_K}"}
