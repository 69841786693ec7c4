"""Exact and Monte-Carlo output distributions, and total-variation tests.

Exact enumeration runs the real decoder code under
:class:`EnumeratingSource`, which replaces each random decision by a branch:
token draws branch over the positive-mass tokens, acceptance draws over
accept/reject with their interval masses. Every execution path is replayed
from the start with a different choice script, so the result is the exact
output distribution of the implementation, not of a re-derivation of it.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .decoders import DecoderSpec, run_decoder
from .errors import BudgetError, ConfigError
from .models import LanguageModel, TokenSeq
from .sampling import RandomSource, as_source

DEFAULT_BUDGET = 100_000
MIN_MC_SAMPLES = 10_000


class Method(str, enum.Enum):
    EXACT_ENUM = "EXACT_ENUM"
    MONTE_CARLO = "MONTE_CARLO"


@dataclass
class DivergenceResult:
    decoder: str
    method: Method
    total_variation: float
    size: int

    def to_dict(self) -> dict:
        return {
            "decoder": self.decoder,
            "method": self.method.value,
            "total_variation": self.total_variation,
            "size": self.size,
        }


class EnumeratingSource(RandomSource):
    """Replays a fixed script of branch choices and records the path mass."""

    def __init__(self, script: Sequence[int] = ()):
        self.script = list(script)
        self.pos = 0
        self.prob = 1.0
        self.arities: list[int] = []

    def _choose(self, options: list[tuple[object, float]]):
        idx = self.script[self.pos] if self.pos < len(self.script) else 0
        self.arities.append(len(options))
        self.pos += 1
        value, weight = options[idx]
        self.prob *= weight
        return value

    def random(self) -> float:
        raise TypeError("enumeration only supports token and bernoulli draws")

    def token(self, dist) -> int:
        return self._choose([(i, float(p)) for i, p in enumerate(dist) if p > 0])

    def bernoulli(self, prob: float) -> tuple[bool, None]:
        options = [(v, w) for v, w in ((True, prob), (False, 1.0 - prob)) if w > 0]
        return self._choose(options), None

    def next_script(self) -> list[int] | None:
        """Odometer step to the next unexplored execution, or ``None``."""
        taken = self.script[: self.pos] + [0] * (self.pos - len(self.script))
        for i in range(len(self.arities) - 1, -1, -1):
            if taken[i] + 1 < self.arities[i]:
                return taken[:i] + [taken[i] + 1]
        return None


def _check_budget(vocab_size: int, horizon: int, budget: int) -> None:
    if vocab_size**horizon > budget:
        raise BudgetError(
            f"vocab_size**horizon = {vocab_size}**{horizon} exceeds the enumeration budget {budget}; "
            "use Monte-Carlo instead"
        )


def exact_output_distribution(
    spec: DecoderSpec,
    p_model: LanguageModel,
    q_model: LanguageModel,
    prompt: Iterable[int],
    horizon: int,
    budget: int = DEFAULT_BUDGET,
) -> dict[TokenSeq, float]:
    """Exact distribution of the sequence a decoder emits within ``horizon`` tokens."""
    prompt = tuple(prompt)
    _check_budget(p_model.vocab_size, horizon, budget)
    dist: dict[TokenSeq, float] = {}
    script: list[int] | None = []
    runs = 0
    while script is not None:
        runs += 1
        if runs > budget:
            raise BudgetError(f"more than {budget} execution paths; use Monte-Carlo instead")
        source = EnumeratingSource(script)
        tokens, _ = run_decoder(spec, p_model, q_model, prompt, horizon, source)
        out = tuple(tokens[len(prompt):])[:horizon]
        dist[out] = dist.get(out, 0.0) + source.prob
        script = source.next_script()
    return dist


def target_distribution(p_model: LanguageModel, prompt: Iterable[int], horizon: int) -> dict[TokenSeq, float]:
    """Exact distribution of ancestral samples of up to ``horizon`` tokens (uncounted)."""
    prompt = tuple(prompt)
    out: dict[TokenSeq, float] = {}

    def walk(seq: TokenSeq, prob: float) -> None:
        if len(seq) == horizon or (seq and seq[-1] == p_model.eos):
            out[seq] = out.get(seq, 0.0) + prob
            return
        dist = p_model.distribution(prompt + seq)
        for tok, pt in enumerate(dist):
            if pt > 0:
                walk(seq + (tok,), prob * float(pt))

    walk((), 1.0)
    return out


def total_variation(d1: dict, d2: dict) -> float:
    """Half the L1 distance over the union of supports."""
    keys = set(d1) | set(d2)
    tv = 0.5 * math.fsum(abs(d1.get(x, 0.0) - d2.get(x, 0.0)) for x in keys)
    return min(max(tv, 0.0), 1.0)


def monte_carlo_distribution(
    spec: DecoderSpec,
    p_model: LanguageModel,
    q_model: LanguageModel,
    prompt: Iterable[int],
    horizon: int,
    samples: int,
    rng: RandomSource | np.random.Generator | int | None,
) -> dict[TokenSeq, float]:
    prompt = tuple(prompt)
    source = as_source(rng)
    counts: Counter[TokenSeq] = Counter()
    for _ in range(samples):
        tokens, _ = run_decoder(spec, p_model, q_model, prompt, horizon, source)
        counts[tuple(tokens[len(prompt):])[:horizon]] += 1
    return {x: c / samples for x, c in counts.items()}


def divergence_test(
    spec: DecoderSpec,
    p_model: LanguageModel,
    q_model: LanguageModel,
    prompt: Iterable[int],
    horizon: int,
    samples: int,
    rng: RandomSource | np.random.Generator | int | None,
    method: Method | str | None = None,
    budget: int = DEFAULT_BUDGET,
) -> DivergenceResult:
    """TV distance between a decoder's output and the target model over ``horizon`` tokens.

    With ``method=None`` exact enumeration is used when the budget allows,
    otherwise Monte-Carlo with ``samples`` runs.
    """
    prompt = tuple(prompt)
    method = None if method is None else Method(method)
    if method is not Method.MONTE_CARLO:
        try:
            exact = exact_output_distribution(spec, p_model, q_model, prompt, horizon, budget)
        except BudgetError:
            if method is Method.EXACT_ENUM:
                raise
        else:
            target = target_distribution(p_model, prompt, horizon)
            return DivergenceResult(spec.name, Method.EXACT_ENUM, total_variation(exact, target), len(exact))
    if samples < MIN_MC_SAMPLES:
        raise ConfigError(
            f"Monte-Carlo needs samples >= {MIN_MC_SAMPLES} (got {samples}) and exact enumeration is unavailable"
        )
    try:
        _check_budget(p_model.vocab_size, horizon, budget)
    except BudgetError as exc:
        raise ConfigError(f"target distribution cannot be enumerated: {exc}") from None
    empirical = monte_carlo_distribution(spec, p_model, q_model, prompt, horizon, samples, rng)
    target = target_distribution(p_model, prompt, horizon)
    return DivergenceResult(spec.name, Method.MONTE_CARLO, total_variation(empirical, target), samples)
