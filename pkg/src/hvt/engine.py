"""Hierarchical verification of speculative draft trees.

One step pops draft nodes from a max-priority queue, verifies each against
the target model with ``P_accept = min(1, p_v / q_v)`` on whole-path
probabilities, prunes the subtree under every rejection, and keeps the top-W
maximal accepted paths. When fewer than W survive, the gap is refilled from
the residual ``max(0, p(x) - q(x))`` over the tree's leaves.

Random draws, in consumption order within a step: one uniform per
verification (none in threshold mode), then one inverse-CDF draw per
residual pick, then one per token of any ancestral fallback sample. In
``SAMPLED`` draft mode the tree build draws come before all of these.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable

import numpy as np

from .errors import ConfigError
from .models import LanguageModel, TokenSeq, is_log_zero, safe_log
from .report import DecodeReport, StepStats
from .sampling import RandomSource, as_source
from .tree import (
    DraftMode,
    DraftTree,
    NodeStatus,
    PriorityMode,
    build_draft_tree,
    descendants,
    path_tokens,
    priority,
)

RESIDUAL_EPS = 1e-12


class FrontierRank(str, enum.Enum):
    CUM_LOGPROB = "CUM_LOGPROB"
    LENGTH_NORMALIZED = "LENGTH_NORMALIZED"


class AcceptanceMode(str, enum.Enum):
    STOCHASTIC = "STOCHASTIC"
    #: accept iff the ratio is >= 1; consumes no randomness (debugging aid)
    THRESHOLD = "THRESHOLD"


class VerificationQueue:
    """Max-priority queue with lazy removal.

    Equal priorities pop in ascending order of the item itself, so items must
    be mutually comparable (node ids, or ``(tree, node)`` pairs).
    """

    def __init__(self) -> None:
        self._heap: list[tuple[float, Any]] = []
        self._live: set[Hashable] = set()

    def push(self, item: Hashable, prio: float) -> None:
        if item in self._live:
            raise ValueError(f"{item!r} already queued")
        self._live.add(item)
        heapq.heappush(self._heap, (-prio, item))

    def pop(self) -> tuple[float, Any]:
        while self._heap:
            neg, item = heapq.heappop(self._heap)
            if item in self._live:
                self._live.discard(item)
                return -neg, item
        raise IndexError("pop from empty queue")

    def remove(self, item: Hashable) -> bool:
        if item in self._live:
            self._live.discard(item)
            return True
        return False

    def drain(self) -> list[Any]:
        out = []
        while self:
            out.append(self.pop()[1])
        return out

    def __contains__(self, item: Hashable) -> bool:
        return item in self._live

    def __len__(self) -> int:
        return len(self._live)


@dataclass
class HvtConfig:
    gamma: int = 3
    k: int = 2
    W: int = 2
    priority_mode: PriorityMode = PriorityMode.LOG_LIKELIHOOD
    stop_at_W: bool = True
    node_cap: int = 4096
    max_new_tokens: int = 16
    seed: int = 0
    frontier_rank: FrontierRank = FrontierRank.CUM_LOGPROB
    draft_mode: DraftMode = DraftMode.TOP_K
    acceptance: AcceptanceMode = AcceptanceMode.STOCHASTIC

    def __post_init__(self) -> None:
        self.priority_mode = PriorityMode(self.priority_mode)
        self.frontier_rank = FrontierRank(self.frontier_rank)
        self.draft_mode = DraftMode(self.draft_mode)
        self.acceptance = AcceptanceMode(self.acceptance)

    def validate(self) -> None:
        for name in ("gamma", "k", "W", "max_new_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.node_cap < self.k:
            raise ConfigError("node_cap must be >= k")

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for key, value in self.__dict__.items():
            out[key] = value.value if isinstance(value, enum.Enum) else value
        return out


@dataclass
class TraceEvent:
    event: str
    tree: int
    node: int
    priority: float | None = None
    u: float | None = None
    status: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class StepResult:
    accepted: set[int]
    continuations: list[tuple[TokenSeq, float]]
    stats: StepStats
    trace: list[TraceEvent] = field(default_factory=list)


def acceptance_probability(p_logp: float, q_logp: float) -> float:
    """``min(1, p_v / q_v)`` from cumulative log-probabilities."""
    if is_log_zero(p_logp):
        return 0.0
    if is_log_zero(q_logp):
        return 1.0
    return math.exp(min(0.0, p_logp - q_logp))


def ensure_p_logp(tree: DraftTree, v: int, p_model: LanguageModel) -> float:
    """Target log-prob of the path to ``v``, memoized on the nodes.

    Costs one target forward pass per node not yet evaluated (the node and
    any unevaluated ancestors).
    """
    node = tree.nodes[v]
    if node.p_logp_cum is None:
        parent_logp = ensure_p_logp(tree, node.parent, p_model)
        dist = p_model.next_distribution(tree.root_prefix + path_tokens(tree, node.parent))
        tree.p_forward += 1
        node.p_logp_cum = parent_logp + safe_log(float(dist[node.token]))
    return node.p_logp_cum


def _verify(
    tree: DraftTree,
    v: int,
    p_model: LanguageModel,
    source: RandomSource,
    acceptance: AcceptanceMode,
) -> tuple[NodeStatus, float | None]:
    node = tree.nodes[v]
    if node.status is not NodeStatus.PENDING:
        raise AssertionError(f"node {v} verified twice")
    for a in tree.ancestors(v):
        if tree.nodes[a].status is not NodeStatus.ACCEPTED:
            raise AssertionError(f"node {v} verified before ancestor {a} was accepted")
    p_logp = ensure_p_logp(tree, v, p_model)
    prob = acceptance_probability(p_logp, node.q_logp_cum)
    if acceptance is AcceptanceMode.THRESHOLD:
        ok, u = prob >= 1.0, None
    else:
        ok, u = source.bernoulli(prob)
    node.status = NodeStatus.ACCEPTED if ok else NodeStatus.REJECTED
    return node.status, u


def verify_node(
    tree: DraftTree,
    v: int,
    p_model: LanguageModel,
    rng: RandomSource | np.random.Generator | int | None,
    acceptance: AcceptanceMode | str = AcceptanceMode.STOCHASTIC,
) -> NodeStatus:
    """Accept ``v`` with probability ``min(1, p_v / q_v)``.

    All of ``v``'s ancestors must already be accepted.
    """
    return _verify(tree, v, p_model, as_source(rng), AcceptanceMode(acceptance))[0]


def _rank_key(score: float, length: int, rank: FrontierRank) -> float:
    if rank is FrontierRank.LENGTH_NORMALIZED:
        return score / max(length, 1)
    return score


@dataclass
class _ForestOutcome:
    frontier: list[tuple[int, int]]
    stats: StepStats
    residual: list[tuple[int, TokenSeq, float]] = field(default_factory=list)


def _verify_forest(
    trees: list[DraftTree],
    p_model: LanguageModel,
    cfg: HvtConfig,
    source: RandomSource,
    trace: list[TraceEvent] | None,
) -> _ForestOutcome:
    """Priority-ordered verification over one global queue spanning ``trees``."""
    p_before = sum(t.p_forward for t in trees)
    queue = VerificationQueue()
    for ti, tree in enumerate(trees):
        for node in tree.non_root():
            queue.push((ti, node.index), priority(tree, node.index, cfg.priority_mode))

    stats = StepStats(total_nodes=sum(t.total_nodes for t in trees))
    frontier: dict[tuple[int, int], None] = {}

    def log(event: str, ti: int, v: int, **kw: Any) -> None:
        if trace is not None:
            trace.append(TraceEvent(event, ti, v, **kw))

    while queue:
        if cfg.stop_at_W and len(frontier) >= cfg.W:
            break
        prio, (ti, v) = queue.pop()
        log("pop", ti, v, priority=prio)
        tree = trees[ti]
        chain = [a for a in tree.ancestors(v) if tree.nodes[a].status is NodeStatus.PENDING] + [v]
        for u in chain:
            queue.remove((ti, u))
            status, draw = _verify(tree, u, p_model, source, cfg.acceptance)
            stats.verified_nodes += 1
            log("verify", ti, u, u=draw, status=status.value)
            if status is NodeStatus.ACCEPTED:
                stats.accepted_nodes += 1
                frontier[(ti, u)] = None
                frontier.pop((ti, tree.nodes[u].parent), None)
                continue
            stats.rejected_nodes += 1
            for d in sorted(descendants(tree, u)):
                tree.nodes[d].status = NodeStatus.PRUNED
                queue.remove((ti, d))
                stats.pruned_nodes += 1
                log("prune", ti, d, status=NodeStatus.PRUNED.value)
            break

    for ti, v in queue.drain():
        trees[ti].nodes[v].status = NodeStatus.UNVISITED
        stats.unvisited_nodes += 1
        log("unvisited", ti, v, status=NodeStatus.UNVISITED.value)

    stats.q_forward = sum(t.q_forward for t in trees)
    stats.p_forward = sum(t.p_forward for t in trees) - p_before
    return _ForestOutcome(list(frontier), stats)


def _residual(
    trees: list[DraftTree],
    p_model: LanguageModel,
    count: int,
    source: RandomSource,
    exclude: Iterable[tuple[int, int]] = (),
) -> list[tuple[int, TokenSeq, float]]:
    """Residual picks as ``(tree index, continuation, log p)`` triples."""
    if count < 1:
        raise ValueError("count must be >= 1")
    skip = set(exclude)
    support = [(ti, v) for ti, t in enumerate(trees) for v in t.leaves() if (ti, v) not in skip]
    weights = np.zeros(len(support))
    for i, (ti, v) in enumerate(support):
        tree = trees[ti]
        p_logp = ensure_p_logp(tree, v, p_model)
        p = 0.0 if is_log_zero(p_logp) else math.exp(p_logp)
        q = 0.0 if is_log_zero(tree.nodes[v].q_logp_cum) else math.exp(tree.nodes[v].q_logp_cum)
        weights[i] = max(0.0, p - q)

    picks: list[tuple[int, TokenSeq, float]] = []
    while len(picks) < count:
        total = weights.sum()
        if total < RESIDUAL_EPS:
            break
        i = source.token(weights / total)
        ti, v = support[i]
        picks.append((ti, path_tokens(trees[ti], v), trees[ti].nodes[v].p_logp_cum))
        weights[i] = 0.0

    # residual mass exhausted: ancestral samples from the target
    base = trees[0]
    while len(picks) < count:
        context = list(base.root_prefix)
        tokens: list[int] = []
        logp = 0.0
        for _ in range(base.gamma):
            dist = p_model.next_distribution(context)
            base.p_forward += 1
            tok = source.token(dist)
            tokens.append(tok)
            logp += safe_log(float(dist[tok]))
            if tok == p_model.eos:
                break
            context.append(tok)
        picks.append((0, tuple(tokens), logp))
    return picks


def residual_sample(
    tree: DraftTree,
    p_model: LanguageModel,
    q_model: LanguageModel,
    count: int,
    rng: RandomSource | np.random.Generator | int | None,
    exclude: Iterable[int] = (),
) -> list[tuple[TokenSeq, float]]:
    """Draw ``count`` continuations from the normalized ``max(0, p - q)`` residual.

    The support is the tree's leaves (minus ``exclude``), drawn without
    replacement. Once the remaining residual mass is below 1e-12 the rest
    are ancestral samples of up to ``gamma`` tokens from ``p_model``. Scores
    are target log-probabilities. ``q(x)`` is read from the tree, so
    ``q_model`` is not queried.
    """
    picks = _residual([tree], p_model, count, as_source(rng), [(0, v) for v in exclude])
    return [(tokens, score) for _, tokens, score in picks]


def _select(
    trees: list[DraftTree],
    outcome: _ForestOutcome,
    p_model: LanguageModel,
    cfg: HvtConfig,
    source: RandomSource,
) -> list[tuple[int, TokenSeq, float]]:
    """Top-W frontier continuations per tree-relative score, plus residual fill."""
    ranked = sorted(
        outcome.frontier,
        key=lambda ref: (
            -_rank_key(trees[ref[0]].nodes[ref[1]].p_logp_cum, trees[ref[0]].nodes[ref[1]].depth, cfg.frontier_rank),
            ref,
        ),
    )
    chosen = [(ti, path_tokens(trees[ti], v), trees[ti].nodes[v].p_logp_cum) for ti, v in ranked[: cfg.W]]
    if len(chosen) < cfg.W:
        p_before = sum(t.p_forward for t in trees)
        picks = _residual(trees, p_model, cfg.W - len(chosen), source, exclude=outcome.frontier)
        outcome.residual = picks
        outcome.stats.residual_draws += len(picks)
        outcome.stats.p_forward += sum(t.p_forward for t in trees) - p_before
        chosen.extend(picks)
    return chosen


def hvt_step(
    tree: DraftTree,
    p_model: LanguageModel,
    q_model: LanguageModel,
    cfg: HvtConfig,
    rng: RandomSource | np.random.Generator | int | None,
    trace: list[TraceEvent] | None = None,
) -> StepResult:
    """Verify one draft tree and select up to W continuations."""
    source = as_source(rng)
    events: list[TraceEvent] = [] if trace is None else trace
    outcome = _verify_forest([tree], p_model, cfg, source, events)
    chosen = _select([tree], outcome, p_model, cfg, source)
    accepted = {n.index for n in tree.non_root() if n.status is NodeStatus.ACCEPTED}
    return StepResult(
        accepted=accepted,
        continuations=[(tokens, score) for _, tokens, score in chosen],
        stats=outcome.stats,
        trace=events,
    )


@dataclass
class _Beam:
    tokens: TokenSeq
    score: float
    generated: int
    finished: bool = False


def decode(
    p_model: LanguageModel,
    q_model: LanguageModel,
    prompt: Iterable[int],
    cfg: HvtConfig,
    rng: RandomSource | np.random.Generator | int | None = None,
    trace: list[TraceEvent] | None = None,
    tree_dumps: list[list[dict]] | None = None,
) -> tuple[list[tuple[TokenSeq, float]], DecodeReport]:
    """Multi-step HVT beam decoding.

    Each iteration drafts one tree per unfinished beam, verifies all trees
    through a single global queue, and keeps the top-W beams among finished
    beams and the extended ones. A beam finishes on EOS or when it has
    ``max_new_tokens`` new tokens. Scores are cumulative target log-probs of
    the generated tokens. ``rng`` defaults to ``cfg.seed``.
    """
    prompt = tuple(int(t) for t in prompt)
    report = DecodeReport("hvt")
    if cfg.max_new_tokens == 0:
        return [(prompt, 0.0)], report
    cfg.validate()
    if p_model.vocab_size != q_model.vocab_size or p_model.eos != q_model.eos:
        raise ConfigError("target and draft models must share vocabulary and EOS")
    p_model.check_prefix(prompt)
    q_model.check_prefix(prompt)
    source = as_source(cfg.seed if rng is None else rng)
    eos = p_model.eos

    beams = [_Beam(prompt, 0.0, 0)]
    while True:
        active = [b for b in beams if not b.finished]
        if not active:
            break
        trees = [
            build_draft_tree(
                q_model,
                b.tokens,
                min(cfg.gamma, cfg.max_new_tokens - b.generated),
                cfg.k,
                cfg.node_cap,
                cfg.draft_mode,
                source,
            )
            for b in active
        ]
        outcome = _verify_forest(trees, p_model, cfg, source, trace)
        chosen = _select(trees, outcome, p_model, cfg, source)
        if tree_dumps is not None:
            tree_dumps.append([rec | {"tree": ti} for ti, t in enumerate(trees) for rec in t.dump()])
        report.add_step(outcome.stats)

        pool: dict[TokenSeq, _Beam] = {}
        for b in (b for b in beams if b.finished):
            pool[b.tokens] = b
        for ti, cont, logp in chosen:
            parent = active[ti]
            generated = parent.generated + len(cont)
            beam = _Beam(
                parent.tokens + cont,
                parent.score + logp,
                generated,
                finished=(eos is not None and len(cont) > 0 and cont[-1] == eos) or generated >= cfg.max_new_tokens,
            )
            if beam.tokens not in pool or pool[beam.tokens].score < beam.score:
                pool[beam.tokens] = beam
        ordered = sorted(pool.values(), key=lambda b: -_rank_key(b.score, b.generated, cfg.frontier_rank))
        beams = ordered[: cfg.W]
        if not beams:
            break

    report.tokens_generated = beams[0].generated if beams else 0
    return [(b.tokens, b.score) for b in beams], report
