"""Reference decoders: greedy, multinomial, and flat token-level speculative.

The flat speculative decoder is the standard lossless scheme: its output
distribution equals the target model's, which makes it the ground truth the
harness measures HVT's divergence against.
"""

from __future__ import annotations

import enum
from typing import Iterable

import numpy as np

from .models import LanguageModel, TokenSeq
from .report import DecodeReport, StepStats
from .sampling import RandomSource, as_source


class BaselineKind(str, enum.Enum):
    GREEDY = "GREEDY"
    MULTINOMIAL = "MULTINOMIAL"
    FLAT_SPECULATIVE = "FLAT_SPECULATIVE"


def argmax_token(dist: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest id among ties
    return int(np.argmax(dist))


def _autoregressive(
    p_model: LanguageModel,
    prompt: Iterable[int],
    max_new_tokens: int,
    choose,
    name: str,
) -> tuple[TokenSeq, DecodeReport]:
    tokens = list(p_model.check_prefix(prompt))
    report = DecodeReport(name)
    for _ in range(max_new_tokens):
        tok = choose(p_model.next_distribution(tokens))
        report.totals.p_forward += 1
        tokens.append(tok)
        report.tokens_generated += 1
        if tok == p_model.eos:
            break
    report.steps = report.tokens_generated
    return tuple(tokens), report


def greedy_decode(p_model: LanguageModel, prompt: Iterable[int], max_new_tokens: int) -> tuple[TokenSeq, DecodeReport]:
    return _autoregressive(p_model, prompt, max_new_tokens, argmax_token, "greedy")


def multinomial_decode(
    p_model: LanguageModel,
    prompt: Iterable[int],
    max_new_tokens: int,
    rng: RandomSource | np.random.Generator | int | None,
) -> tuple[TokenSeq, DecodeReport]:
    source = as_source(rng)
    return _autoregressive(p_model, prompt, max_new_tokens, source.token, "multinomial")


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``normalize(max(0, p - q))``; falls back to ``p`` when the mass is zero."""
    r = np.maximum(p - q, 0.0)
    total = r.sum()
    if total <= 0.0:
        return p
    return r / total


def flat_speculative_decode(
    p_model: LanguageModel,
    q_model: LanguageModel,
    prompt: Iterable[int],
    gamma: int,
    max_new_tokens: int,
    rng: RandomSource | np.random.Generator | int | None,
) -> tuple[TokenSeq, DecodeReport]:
    """Token-level speculative sampling.

    Per round: draft up to ``gamma`` tokens from ``q_model`` (one draft pass
    each), score them all with a single batched target pass, accept each in
    order with probability ``min(1, p_i / q_i)``, replace the first rejected
    token by a draw from ``normalize(max(0, p_i - q_i))``, or append a bonus
    target draw when every draft survives. Rounds never emit past
    ``max_new_tokens`` or EOS.

    Draw order per round: draft tokens, then one uniform per checked token,
    then the replacement or bonus draw.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    source = as_source(rng)
    tokens = list(p_model.check_prefix(prompt))
    q_model.check_prefix(prompt)
    eos = p_model.eos
    report = DecodeReport("flat-spec")
    generated = 0
    while generated < max_new_tokens:
        stats = StepStats()
        budget = max_new_tokens - generated
        drafts: list[int] = []
        q_dists: list[np.ndarray] = []
        for _ in range(min(gamma, budget)):
            qd = q_model.next_distribution(tokens + drafts)
            stats.q_forward += 1
            tok = source.token(qd)
            drafts.append(tok)
            q_dists.append(qd)
            if tok == eos:
                break
        stats.total_nodes = len(drafts)

        ends_eos = eos is not None and drafts[-1] == eos
        scored = drafts[:-1] if ends_eos else drafts
        p_dists = p_model.batch_distributions(tokens, scored)
        stats.p_forward += 1

        emitted: list[int] = []
        for i, tok in enumerate(drafts):
            p_i, q_i = float(p_dists[i][tok]), float(q_dists[i][tok])
            ok, _ = source.bernoulli(min(1.0, p_i / q_i))
            stats.verified_nodes += 1
            if ok:
                stats.accepted_nodes += 1
                emitted.append(tok)
                continue
            stats.rejected_nodes += 1
            emitted.append(source.token(residual_distribution(p_dists[i], q_dists[i])))
            break
        stats.unvisited_nodes = stats.total_nodes - stats.verified_nodes
        if stats.rejected_nodes == 0 and not ends_eos and len(emitted) < budget:
            emitted.append(source.token(p_dists[len(drafts)]))

        report.add_step(stats)
        tokens.extend(emitted)
        generated += len(emitted)
        if eos is not None and emitted[-1] == eos:
            break
    report.tokens_generated = generated
    return tuple(tokens), report
