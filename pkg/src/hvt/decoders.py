"""Uniform entry point over every decoder the harness can run."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from .baselines import flat_speculative_decode, greedy_decode, multinomial_decode
from .engine import HvtConfig, decode
from .errors import ConfigError
from .models import LanguageModel, TokenSeq
from .report import DecodeReport
from .sampling import RandomSource

DECODERS = ("greedy", "multinomial", "flat-spec", "hvt")


@dataclass
class DecoderSpec:
    """A decoder name plus its parameters.

    ``hvt`` carries the HVT configuration; ``flat-spec`` uses ``hvt.gamma`` as
    its draft length so the two are compared at equal depth.
    """

    name: str
    hvt: HvtConfig = field(default_factory=HvtConfig)

    def __post_init__(self) -> None:
        if self.name not in DECODERS:
            raise ConfigError(f"unknown decoder {self.name!r}; expected one of {', '.join(DECODERS)}")

    @property
    def stochastic(self) -> bool:
        return self.name != "greedy"

    def label(self) -> dict[str, Any]:
        if self.name == "hvt":
            c = self.hvt
            return {"gamma": c.gamma, "k": c.k, "W": c.W, "priority_mode": c.priority_mode.value}
        if self.name == "flat-spec":
            return {"gamma": self.hvt.gamma, "k": "", "W": "", "priority_mode": ""}
        return {"gamma": "", "k": "", "W": "", "priority_mode": ""}


def run_decoder(
    spec: DecoderSpec,
    p_model: LanguageModel,
    q_model: LanguageModel,
    prompt: Iterable[int],
    max_new_tokens: int,
    source: RandomSource,
) -> tuple[TokenSeq, DecodeReport]:
    """Decode once and return the (best) full sequence with its report."""
    prompt = tuple(prompt)
    if spec.name == "greedy":
        return greedy_decode(p_model, prompt, max_new_tokens)
    if spec.name == "multinomial":
        return multinomial_decode(p_model, prompt, max_new_tokens, source)
    if spec.name == "flat-spec":
        return flat_speculative_decode(p_model, q_model, prompt, spec.hvt.gamma, max_new_tokens, source)
    beams, report = decode(p_model, q_model, prompt, replace(spec.hvt, max_new_tokens=max_new_tokens), source)
    return beams[0][0], report
