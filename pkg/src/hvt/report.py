"""Per-run decode report shared by HVT and the baseline decoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Any


@dataclass
class StepStats:
    """Counters for one verification step.

    For the flat speculative baseline a "node" is one drafted token:
    ``verified`` counts tokens checked against the target, ``unvisited``
    counts drafted tokens discarded after a rejection.
    """

    total_nodes: int = 0
    verified_nodes: int = 0
    accepted_nodes: int = 0
    rejected_nodes: int = 0
    pruned_nodes: int = 0
    unvisited_nodes: int = 0
    residual_draws: int = 0
    p_forward: int = 0
    q_forward: int = 0

    def __iadd__(self, other: StepStats) -> StepStats:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def check(self) -> None:
        assert self.verified_nodes == self.accepted_nodes + self.rejected_nodes
        assert self.verified_nodes + self.pruned_nodes + self.unvisited_nodes == self.total_nodes


def step_metrics(stats: StepStats) -> tuple[float, float]:
    """``(acceptance_rate, verification_reduction_rate)`` for one step.

    Both pruned and unvisited nodes count as avoided verification work.
    """
    if stats.total_nodes <= 0:
        raise ValueError("step_metrics needs total_nodes > 0")
    acc = stats.accepted_nodes / stats.verified_nodes if stats.verified_nodes else 0.0
    return acc, 1.0 - stats.verified_nodes / stats.total_nodes


@dataclass
class DecodeReport:
    decoder: str
    tokens_generated: int = 0
    steps: int = 0
    totals: StepStats = field(default_factory=StepStats)
    step_stats: list[StepStats] = field(default_factory=list)

    @property
    def p_forward(self) -> int:
        return self.totals.p_forward

    @property
    def q_forward(self) -> int:
        return self.totals.q_forward

    @property
    def acceptance_rate(self) -> float:
        t = self.totals
        return t.accepted_nodes / t.verified_nodes if t.verified_nodes else 0.0

    @property
    def mean_step_acceptance_rate(self) -> float:
        """Unweighted mean of per-step acceptance rates (steps with no verification skipped)."""
        rates = [s.accepted_nodes / s.verified_nodes for s in self.step_stats if s.verified_nodes]
        return sum(rates) / len(rates) if rates else 0.0

    @property
    def verification_reduction_rate(self) -> float:
        t = self.totals
        return 1.0 - t.verified_nodes / t.total_nodes if t.total_nodes else 0.0

    @property
    def p_forward_per_token(self) -> float:
        return self.p_forward / self.tokens_generated if self.tokens_generated else 0.0

    def add_step(self, stats: StepStats) -> None:
        self.steps += 1
        self.totals += stats
        self.step_stats.append(stats)

    def to_dict(self) -> dict[str, Any]:
        return {
            "decoder": self.decoder,
            "tokens_generated": self.tokens_generated,
            "steps": self.steps,
            "p_forward": self.p_forward,
            "q_forward": self.q_forward,
            "acceptance_rate": self.acceptance_rate,
            "verification_reduction_rate": self.verification_reduction_rate,
            "totals": asdict(self.totals),
            "step_stats": [asdict(s) for s in self.step_stats],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DecodeReport:
        return cls(
            decoder=data["decoder"],
            tokens_generated=data["tokens_generated"],
            steps=data["steps"],
            totals=StepStats(**data["totals"]),
            step_stats=[StepStats(**s) for s in data["step_stats"]],
        )
