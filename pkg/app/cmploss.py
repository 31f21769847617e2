"""Comparative loss over a chain of progressively ablated models.

For task losses l(0..c) of the full model and its ablated submodels plus a
detached baseline b = l(c+1), the loss is the pairwise hinge

    sum_{i=0..c} sum_{j=i+1..c+1} max(0, l(i) - l(j))

which equals the dynamic weighting sum_i alpha(i) * l(i), where alpha(i) counts
order violations through the CMP indicator.
"""

from __future__ import annotations

import math
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

import autodiff as ad
from errors import ContractError, NumericError

Strategy = Literal["cmp", "average", "first", "second", "max"]
STRATEGIES = ("cmp", "average", "first", "second", "max")


class ComparisonChain(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    losses: List[ad.Node]
    b: float = 0.0

    def __init__(self, **data) -> None:
        super().__init__(**data)
        if not self.losses:
            raise ContractError("comparison chain needs at least the full-model loss")
        _checked_values(self)

    @property
    def c(self) -> int:
        return len(self.losses) - 1

    @classmethod
    def from_values(cls, values: Sequence[float], b: float = 0.0,
                    graph: Optional[ad.Graph] = None) -> "ComparisonChain":
        graph = graph if graph is not None else ad.Graph()
        return cls(losses=[graph.constant(float(v)) for v in values], b=b)


class WeightVector(BaseModel):
    values: List[Union[int, float]]

    def __len__(self) -> int:
        return len(self.values)

    def total(self) -> Union[int, float]:
        return sum(self.values)


def _checked_values(chain: ComparisonChain) -> List[float]:
    vals = []
    for i, node in enumerate(chain.losses):
        if node.value.shape != ():
            raise ContractError(f"loss {i} is not a scalar (shape {node.shape})")
        v = float(node.value)
        if not math.isfinite(v):
            raise NumericError(f"non-finite task loss at chain index {i}: {v}")
        if v < 0:
            raise ContractError(f"task loss at chain index {i} is negative: {v}")
        vals.append(v)
    if not math.isfinite(chain.b):
        raise NumericError(f"non-finite baseline b: {chain.b}")
    return vals + [float(chain.b)]


def cmp_weight(i: int, j: int, li: float, lj: float) -> int:
    if i == j:
        raise ContractError("CMP is undefined for i == j")
    if i < j and li > lj:
        return 1
    if i > j and li < lj:
        return -1
    return 0


def _alphas(vals: Sequence[float]) -> List[int]:
    n = len(vals)
    return [sum(cmp_weight(i, j, vals[i], vals[j]) for j in range(n) if j != i) for i in range(n)]


def dynamic_weights(chain: ComparisonChain) -> WeightVector:
    """alpha over l(0..c) and the dummy; sums to 0 exactly."""
    return WeightVector(values=_alphas(_checked_values(chain)))


def comparative_loss(chain: ComparisonChain) -> ad.Node:
    vals = _checked_values(chain)
    c = chain.c
    total = 0.0
    for i in range(c + 1):
        for j in range(i + 1, c + 2):
            total += max(0.0, vals[i] - vals[j])
    # hinge subgradient at ties is 0, so d/dl(i) is exactly alpha(i)
    alphas = _alphas(vals)[: c + 1]
    graph = chain.losses[0].graph
    graph.note_kink(np.sign(np.subtract.outer(vals, vals)))
    losses = list(chain.losses)

    def back(gy):
        for a, node in zip(alphas, losses):
            if a:
                node.grad += a * gy

    return graph.record("cmp_loss", total, losses, back)


def weighted_form(chain: ComparisonChain) -> float:
    vals = _checked_values(chain)
    return float(sum(a * v for a, v in zip(_alphas(vals), vals)))


def truncated_form(chain: ComparisonChain) -> float:
    """sum_{i<=c} alpha(i) l(i); differs from the full form by -#{l(i) > b} * b."""
    vals = _checked_values(chain)
    alphas = _alphas(vals)
    return float(sum(alphas[i] * vals[i] for i in range(chain.c + 1)))


def decomposed_form(chain: ComparisonChain) -> float:
    """ERM part sum_{l(i)>b} (l(i) - b) plus the ordering part over real models."""
    vals = _checked_values(chain)
    b = vals[-1]
    c = chain.c
    erm = sum(v - b for v in vals[: c + 1] if v > b)
    order = sum(max(0.0, vals[i] - vals[j]) for i in range(c + 1) for j in range(i + 1, c + 1))
    return float(erm + order)


def strategy_weights(strategy: str, chain: ComparisonChain) -> WeightVector:
    vals = _checked_values(chain)[:-1]
    c = chain.c
    if strategy == "cmp":
        return WeightVector(values=_alphas(_checked_values(chain))[: c + 1])
    if strategy == "average":
        return WeightVector(values=[1.0 / (c + 1)] * (c + 1))
    if strategy == "first":
        return WeightVector(values=[1] + [0] * c)
    if strategy == "second":
        if c < 1:
            raise ContractError("strategy 'second' needs at least one ablated model (c >= 1)")
        return WeightVector(values=[0, 1] + [0] * (c - 1))
    if strategy == "max":
        top = int(np.argmax(vals))
        return WeightVector(values=[1 if i == top else 0 for i in range(c + 1)])
    raise ContractError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")


def strategy_objective(strategy: str, chain: ComparisonChain) -> ad.Node:
    """Training objective for one sample under a weighting strategy."""
    if strategy == "cmp":
        return comparative_loss(chain)
    weights = strategy_weights(strategy, chain)
    if strategy == "max":
        chain.losses[0].graph.note_kink(np.asarray(weights.values))
    return ad.weighted_sum(chain.losses, weights.values)
