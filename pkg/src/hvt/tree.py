"""Speculative draft trie built from the draft model.

Each node is one drafted token; the path from the root spells the drafted
continuation of ``root_prefix``. Nodes carry the cumulative draft log-prob
``q_logp_cum`` (the beam score), and the target log-prob ``p_logp_cum`` once
the verifier has evaluated them.
"""

from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import UndefinedPriorityError
from .models import LanguageModel, TokenSeq, safe_log
from .sampling import RandomSource, as_source


class NodeStatus(str, enum.Enum):
    PENDING = "PENDING"
    ACCEPTED = "ACCEPTED"
    REJECTED = "REJECTED"
    PRUNED = "PRUNED"
    UNVISITED = "UNVISITED"


class PriorityMode(str, enum.Enum):
    LOG_LIKELIHOOD = "LOG_LIKELIHOOD"
    NEG_PERPLEXITY = "NEG_PERPLEXITY"


class DraftMode(str, enum.Enum):
    TOP_K = "TOP_K"
    SAMPLED = "SAMPLED"


@dataclass
class DraftNode:
    index: int
    token: int | None
    parent: int | None
    depth: int
    q_logp_step: float
    q_logp_cum: float
    p_logp_cum: float | None = None
    status: NodeStatus = NodeStatus.PENDING
    children: list[int] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class DraftTree:
    root_prefix: TokenSeq
    gamma: int
    k: int
    nodes: list[DraftNode]
    truncated: bool = False
    eos: int | None = None
    #: forward passes spent on this tree by each model
    q_forward: int = 0
    p_forward: int = 0

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> DraftNode:
        return self.nodes[0]

    def node(self, v: int) -> DraftNode:
        return self.nodes[v]

    def non_root(self) -> Iterator[DraftNode]:
        return iter(self.nodes[1:])

    @property
    def total_nodes(self) -> int:
        return len(self.nodes) - 1

    def leaves(self) -> list[int]:
        return [n.index for n in self.nodes[1:] if n.is_leaf]

    def ancestors(self, v: int) -> list[int]:
        """Strict non-root ancestors of ``v``, root-first."""
        out = []
        parent = self.nodes[v].parent
        while parent is not None and parent != 0:
            out.append(parent)
            parent = self.nodes[parent].parent
        out.reverse()
        return out

    def dump(self) -> list[dict]:
        return [
            {
                "node": n.index,
                "parent": n.parent,
                "token": n.token,
                "depth": n.depth,
                "s": n.q_logp_cum,
                "p_logp_cum": n.p_logp_cum,
                "status": n.status.value,
            }
            for n in self.nodes
        ]

    def dumps(self) -> str:
        """One JSON record per node, in id order."""
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.dump())


def _top_k(dist: np.ndarray, k: int) -> list[int]:
    # stable sort on -p keeps ascending ids among ties
    order = np.argsort(-dist, kind="stable")
    return [int(t) for t in order[:k]]


def _sample_k(dist: np.ndarray, k: int, source: RandomSource) -> list[int]:
    """``k`` distinct tokens by successive inverse-CDF draws without replacement."""
    weights = np.array(dist, dtype=np.float64)
    picks: list[int] = []
    while len(picks) < k:
        total = weights.sum()
        if total <= 0:
            break
        tok = source.token(weights / total)
        picks.append(tok)
        weights[tok] = 0.0
    return picks


def build_draft_tree(
    q_model: LanguageModel,
    prefix: TokenSeq | list[int],
    gamma: int,
    k: int,
    node_cap: int = 4096,
    mode: DraftMode | str = DraftMode.TOP_K,
    rng: RandomSource | np.random.Generator | int | None = None,
) -> DraftTree:
    """Expand the draft trie breadth-first from ``prefix``.

    Every node above depth ``gamma`` that is not EOS gets ``k`` children: the
    top-k tokens of the draft conditional (ascending-id tie-break) or, in
    ``SAMPLED`` mode, ``k`` distinct draws. Expansion stops, with
    ``truncated`` set, before a node whose children would push the non-root
    node count past ``node_cap``.
    """
    mode = DraftMode(mode)
    if gamma < 1 or k < 1:
        raise ValueError("gamma and k must be >= 1")
    if k > q_model.vocab_size:
        raise ValueError("k cannot exceed the vocabulary size")
    if node_cap < k:
        raise ValueError("node_cap must be >= k")
    prefix = q_model.check_prefix(prefix)
    source = as_source(rng) if mode is DraftMode.SAMPLED else None

    root = DraftNode(0, None, None, 0, 0.0, 0.0, p_logp_cum=0.0, status=NodeStatus.ACCEPTED)
    tree = DraftTree(prefix, gamma, k, [root], eos=q_model.eos)
    paths: dict[int, TokenSeq] = {0: ()}
    frontier = deque([0])
    while frontier:
        v = frontier.popleft()
        node = tree.nodes[v]
        if node.depth >= gamma or (node.token is not None and node.token == q_model.eos):
            continue
        if tree.total_nodes + k > node_cap:
            tree.truncated = True
            break
        dist = q_model.next_distribution(prefix + paths[v])
        tree.q_forward += 1
        tokens = _top_k(dist, k) if source is None else _sample_k(dist, k, source)
        for tok in tokens:
            step = safe_log(float(dist[tok]))
            child = DraftNode(len(tree.nodes), tok, v, node.depth + 1, step, node.q_logp_cum + step)
            tree.nodes.append(child)
            node.children.append(child.index)
            paths[child.index] = paths[v] + (tok,)
            frontier.append(child.index)
    return tree


def likelihood(tree: DraftTree, v: int) -> float:
    """Draft probability of the path to ``v``: ``exp(s(v))``."""
    return math.exp(tree.nodes[v].q_logp_cum)


def priority(tree: DraftTree, v: int, mode: PriorityMode | str = PriorityMode.LOG_LIKELIHOOD) -> float:
    """Verification priority of ``v``.

    ``LOG_LIKELIHOOD`` returns ``s(v)``; ``NEG_PERPLEXITY`` returns
    ``-exp(-s(v) / depth)``, the negated per-token draft perplexity.
    """
    if v == 0:
        raise UndefinedPriorityError("the root has no priority")
    node = tree.nodes[v]
    if PriorityMode(mode) is PriorityMode.LOG_LIKELIHOOD:
        return node.q_logp_cum
    exponent = -node.q_logp_cum / node.depth
    if exponent > 709.0:
        return -math.inf
    return -math.exp(exponent)


def descendants(tree: DraftTree, v: int) -> set[int]:
    out: set[int] = set()
    stack = list(tree.nodes[v].children)
    while stack:
        u = stack.pop()
        out.add(u)
        stack.extend(tree.nodes[u].children)
    return out


def path_tokens(tree: DraftTree, v: int) -> TokenSeq:
    tokens = []
    node = tree.nodes[v]
    while node.parent is not None:
        tokens.append(node.token)
        node = tree.nodes[node.parent]
    return tuple(reversed(tokens))
