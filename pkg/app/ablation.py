"""Progressive ablation chains.

Dropout chains: nested per-feature dropout masks. Each step resamples the surviving
units of the previous step, so survivor sets are nested by construction and a
survivor after ``n`` steps is scaled by ``(1 - p) ** -n``.

Crop chains: nested segment subsets that always retain the support segments.
"""

from __future__ import annotations

from typing import Any, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from errors import ContractError, IndexOutOfRange, NoCroppableSegments
from tasks import SegmentedContext


class RngStream(BaseModel):
    """Counter-based random stream: (seed, counter) fixes every later draw."""

    seed: int = Field(ge=0)
    counter: int = Field(default=0, ge=0)

    def next_generator(self) -> np.random.Generator:
        gen = np.random.default_rng([self.seed, self.counter])
        self.counter += 1
        return gen

    def derive(self, *keys: int) -> "RngStream":
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return RngStream(seed=int(ss.generate_state(1, dtype=np.uint64)[0]))

# ------------------------------
# Dropout chains
# ------------------------------

class MaskChain(BaseModel):
    model_config = ConfigDict(frozen=True)

    p: float
    widths: Dict[str, int]
    steps: Tuple[Dict[str, Tuple[int, ...]], ...] = ()

    @field_validator("p")
    @classmethod
    def _rate(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"drop rate must lie in (0, 1), got {v}")
        return v

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def survivors(self, i: int) -> Dict[str, np.ndarray]:
        if not 0 <= i <= self.n_steps:
            raise IndexOutOfRange(f"mask step {i} outside [0, {self.n_steps}]")
        if i == 0:
            return {site: np.arange(w) for site, w in self.widths.items()}
        return {site: np.asarray(idx, dtype=np.int64) for site, idx in self.steps[i - 1].items()}


def drop_step(chain: MaskChain, rng: RngStream) -> MaskChain:
    gen = rng.next_generator()
    prev = chain.survivors(chain.n_steps)
    step = {}
    for site in sorted(chain.widths):
        alive = prev[site]
        keep = gen.random(len(alive)) >= chain.p
        step[site] = tuple(int(j) for j in alive[keep])
    return chain.model_copy(update={"steps": chain.steps + (step,)})


def masks_for_step(chain: MaskChain, i: int) -> Dict[str, np.ndarray]:
    surv = chain.survivors(i)
    scale = (1.0 - chain.p) ** (-i)
    masks = {}
    for site, width in chain.widths.items():
        m = np.zeros(width)
        m[surv[site]] = scale
        masks[site] = m
    return masks


def effective_keep_prob(chain: MaskChain) -> float:
    return (1.0 - chain.p) ** chain.n_steps

# ------------------------------
# Crop chains
# ------------------------------

class CropChain(BaseModel):
    model_config = ConfigDict(frozen=True)

    original: SegmentedContext
    steps: Tuple[Tuple[int, ...], ...] = ()

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def retained(self, i: int) -> Tuple[int, ...]:
        if not 0 <= i <= self.n_steps:
            raise IndexOutOfRange(f"crop step {i} outside [0, {self.n_steps}]")
        if i == 0:
            return tuple(range(len(self.original.segments)))
        return self.steps[i - 1]

    def removable(self) -> List[int]:
        segs = self.original.segments
        return [j for j in self.retained(self.n_steps) if not segs[j].support]

    def context_at(self, i: int) -> SegmentedContext:
        return self.original.keep(self.retained(i))


def crop_step(chain: CropChain, rng: RngStream) -> CropChain:
    """Drop a uniformly sized, uniformly chosen nonempty set of non-support segments."""
    removable = chain.removable()
    if not removable:
        raise NoCroppableSegments(f"no non-support segment left after {chain.n_steps} crop(s)")
    gen = rng.next_generator()
    k = int(gen.integers(1, len(removable) + 1))
    dropped = set(int(j) for j in gen.choice(removable, size=k, replace=False))
    kept = tuple(j for j in chain.retained(chain.n_steps) if j not in dropped)
    return chain.model_copy(update={"steps": chain.steps + (kept,)})


def chain_json(chain) -> List[Any]:
    """Debug view of a chain: per-step survivor lists per site, or retained segments."""
    if isinstance(chain, MaskChain):
        return [{site: list(step[site]) for site in sorted(step)} for step in chain.steps]
    if isinstance(chain, CropChain):
        return [list(step) for step in chain.steps]
    raise ContractError(f"not a chain: {type(chain).__name__}")
