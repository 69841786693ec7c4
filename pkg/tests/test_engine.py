import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvt.baselines import greedy_decode
from hvt.engine import (
    AcceptanceMode,
    HvtConfig,
    VerificationQueue,
    acceptance_probability,
    decode,
    hvt_step,
    residual_sample,
    verify_node,
)
from hvt.models import InterpolatedModel, SoftmaxModel, TableModel, random_table_model
from hvt.report import StepStats, step_metrics
from hvt.sampling import RandomSource
from hvt.tree import NodeStatus, PriorityMode, build_draft_tree, descendants, priority

from conftest import random_pair
from reference import RefTree, ref_decode, ref_forest_step


class TestQueue:
    def test_max_first_with_low_id_tiebreak(self):
        q = VerificationQueue()
        for item, p in [(3, 1.0), (1, 2.0), (2, 2.0), (4, -5.0)]:
            q.push(item, p)
        assert [q.pop() for _ in range(4)] == [(2.0, 1), (2.0, 2), (1.0, 3), (-5.0, 4)]

    def test_removed_never_popped(self):
        q = VerificationQueue()
        for i in range(5):
            q.push(i, float(i))
        q.remove(4)
        q.remove(2)
        assert 4 not in q and len(q) == 3
        assert q.drain() == [3, 1, 0]
        with pytest.raises(IndexError):
            q.pop()

    def test_double_push_rejected(self):
        q = VerificationQueue()
        q.push(1, 0.0)
        with pytest.raises(ValueError):
            q.push(1, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=40), st.data())
    def test_pop_sequence_sorted(self, prios, data):
        q = VerificationQueue()
        for i, p in enumerate(prios):
            q.push(i, p)
        removed = data.draw(st.sets(st.integers(0, len(prios) - 1)))
        for r in removed:
            q.remove(r)
        popped = [q.pop() for _ in range(len(q))]
        expected = sorted(((p, i) for i, p in enumerate(prios) if i not in removed), key=lambda x: (-x[0], x[1]))
        assert popped == expected


def two_model_tree(p_probs, q_probs, gamma=1, k=None):
    p = TableModel(len(p_probs), None, 0, p_probs)
    q = TableModel(len(q_probs), None, 0, q_probs)
    return p, q, build_draft_tree(q, (), gamma, k or len(q_probs))


class TestVerifyNode:
    def test_equal_models_always_accept(self):
        p, q, tree = two_model_tree([0.6, 0.4], [0.6, 0.4])
        assert acceptance_probability(math.log(0.6), math.log(0.6)) == 1.0
        assert verify_node(tree, 1, p, RandomSource(0)) is NodeStatus.ACCEPTED

    def test_ratio_above_one(self):
        p, q, tree = two_model_tree([0.3, 0.7], [0.2, 0.8])
        v = next(n.index for n in tree.non_root() if n.token == 0)
        assert verify_node(tree, v, p, RandomSource(0)) is NodeStatus.ACCEPTED
        assert acceptance_probability(tree.nodes[v].p_logp_cum, tree.nodes[v].q_logp_cum) == 1.0

    def test_one_pass_per_new_node(self):
        p, q = SoftmaxModel(5, None, 1), SoftmaxModel(5, None, 2)
        tree = build_draft_tree(q, (), 2, 2)
        verify_node(tree, 1, p, RandomSource(0), "THRESHOLD")
        tree.nodes[1].status = NodeStatus.ACCEPTED
        verify_node(tree, 3, p, RandomSource(0))
        assert p.forward_count == tree.p_forward == 2
        expected = math.log(p.distribution(())[tree.nodes[1].token]) + math.log(
            p.distribution((tree.nodes[1].token,))[tree.nodes[3].token]
        )
        assert tree.nodes[3].p_logp_cum == pytest.approx(expected, abs=1e-12)

    def test_quarter_acceptance_frequency(self):
        p, q, tree = two_model_tree([0.1, 0.9], [0.4, 0.6])
        v = next(n.index for n in tree.non_root() if n.token == 0)
        source = RandomSource(7)
        node = tree.nodes[v]
        n = 1_000_000
        hits = 0
        for _ in range(n):
            node.status = NodeStatus.PENDING
            hits += verify_node(tree, v, p, source) is NodeStatus.ACCEPTED
        assert p.forward_count == 1  # memoized after the first evaluation
        assert abs(hits / n - 0.25) < 0.002

    def test_ancestor_not_accepted_is_a_bug(self):
        p, q = SoftmaxModel(5, None, 1), SoftmaxModel(5, None, 2)
        tree = build_draft_tree(q, (), 2, 2)
        with pytest.raises(AssertionError):
            verify_node(tree, 3, p, RandomSource(0))

    def test_threshold_mode_consumes_nothing(self):
        p, q, tree = two_model_tree([0.1, 0.9], [0.4, 0.6])
        a, b = RandomSource(3), RandomSource(3)
        verify_node(tree, 1, p, a, AcceptanceMode.THRESHOLD)
        assert a.random() == b.random()


class TestHvtStep:
    def test_identical_models_accept_everything(self):
        p = SoftmaxModel(6, None, 21)
        tree = build_draft_tree(p, (), 3, 2)
        res = hvt_step(tree, p, p, HvtConfig(gamma=3, k=2, W=2), RandomSource(0))
        s = res.stats
        assert s.rejected_nodes == 0 and s.pruned_nodes == 0
        pops = sum(1 for e in res.trace if e.event == "pop")
        assert s.verified_nodes == s.accepted_nodes == pops
        assert len(res.continuations) == 2

    def test_zero_probability_prunes_whole_subtree(self):
        # target never emits token 0; draft ranks it first
        q = TableModel(3, None, 0, [0.5, 0.3, 0.2])
        p = TableModel(3, None, 0, [0.0, 0.6, 0.4])
        gamma, k = 3, 2
        tree = build_draft_tree(q, (), gamma, k)
        a = next(n.index for n in tree.non_root() if n.depth == 1 and n.token == 0)
        res = hvt_step(tree, p, q, HvtConfig(gamma=gamma, k=k, W=2, stop_at_W=False), RandomSource(1))
        below = descendants(tree, a)
        assert tree.nodes[a].status is NodeStatus.REJECTED
        assert len(below) == sum(k**j for j in range(1, gamma))
        assert all(tree.nodes[d].status is NodeStatus.PRUNED for d in below)
        verified = {e.node for e in res.trace if e.event == "verify"}
        assert not verified & below
        res.stats.check()

    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("mode", ["LOG_LIKELIHOOD", "NEG_PERPLEXITY"])
    def test_trace_matches_reference(self, seed, mode):
        p, q = SoftmaxModel(5, None, 100 + seed), SoftmaxModel(5, None, 200 + seed)
        cfg = HvtConfig(gamma=2, k=2, W=2, priority_mode=mode)
        tree = build_draft_tree(q, (1,), 2, 2)
        rng = np.random.default_rng(seed)
        res = hvt_step(tree, p, q, cfg, RandomSource(rng))
        got = [(e.event, e.tree, e.node, e.priority, e.u, e.status) for e in res.trace]

        ref_rng = np.random.default_rng(seed)
        ref_trace, _, counts, status = ref_forest_step([RefTree(q, (1,), 2, 2)], p, 2, mode, True, ref_rng)
        assert got == ref_trace
        assert {n.index: n.status.value for n in tree.non_root()} == {i: s for (_, i), s in status.items()}
        assert res.stats.verified_nodes == counts["verified"]

    def test_unstopped_step_visits_all_unpruned(self):
        p, q = SoftmaxModel(5, None, 4), InterpolatedModel(SoftmaxModel(5, None, 4), 0.6)
        tree = build_draft_tree(q, (), 3, 3)
        res = hvt_step(tree, p, q, HvtConfig(gamma=3, k=3, W=1, stop_at_W=False), RandomSource(2))
        assert res.stats.unvisited_nodes == 0
        res.stats.check()


class TestResidual:
    def test_single_positive_weight(self):
        p, q, tree = two_model_tree([0.6, 0.4], [0.5, 0.5])
        for seed in range(20):
            for n in tree.non_root():
                n.p_logp_cum = None
            assert residual_sample(tree, p, q, 1, RandomSource(seed)) == [((0,), math.log(0.6))]

    def test_equal_models_fall_back_to_ancestral(self):
        p = SoftmaxModel(5, None, 9)
        tree = build_draft_tree(p, (2,), 2, 2)
        before = p.forward_count
        out = residual_sample(tree, p, p, 3, RandomSource(5))
        assert len(out) == 3
        # 6 leaf evaluations (memo) + 2 passes per ancestral sample
        assert p.forward_count - before == tree.total_nodes + 3 * 2
        for tokens, score in out:
            assert len(tokens) == 2
            lp = math.log(p.distribution((2,))[tokens[0]]) + math.log(p.distribution((2, tokens[0]))[tokens[1]])
            assert score == pytest.approx(lp, abs=1e-12)

    def test_fallback_is_iid_from_target(self):
        p = TableModel(3, None, 0, [0.2, 0.5, 0.3])
        tree = build_draft_tree(p, (), 1, 3)
        src = RandomSource(11)
        counts = Counter(residual_sample(tree, p, p, 1, src)[0][0] for _ in range(30_000))
        for t, pt in enumerate([0.2, 0.5, 0.3]):
            sigma = math.sqrt(pt * (1 - pt) / 30_000)
            assert abs(counts[(t,)] / 30_000 - pt) < 4 * sigma

    def test_three_leaf_frequencies(self):
        p_probs = [0.5, 0.3, 0.2, 0.0]
        q_probs = [0.2, 0.1, 0.1, 0.6]
        p, q, tree = two_model_tree(p_probs, q_probs, k=3)
        # top-3 of q: 3, 0, then {1, 2} tie -> 1
        assert [n.token for n in tree.non_root()] == [3, 0, 1]
        hand = {(3,): 0.0, (0,): 0.3, (1,): 0.2}
        total = sum(hand.values())
        src = RandomSource(123)
        n = 1_000_000
        counts = Counter(residual_sample(tree, p, q, 1, src)[0][0] for _ in range(n))
        for x, w in hand.items():
            assert abs(counts[x] / n - w / total) < 0.003

    def test_draws_without_replacement(self):
        p, q, tree = two_model_tree([0.5, 0.3, 0.2, 0.0], [0.2, 0.1, 0.1, 0.6], k=3)
        out = residual_sample(tree, p, q, 2, RandomSource(0))
        assert sorted(t for t, _ in out) == [(0,), (1,)]

    def test_exclude_and_exhaustion(self):
        p, q, tree = two_model_tree([0.5, 0.3, 0.2, 0.0], [0.2, 0.1, 0.1, 0.6], k=3)
        out = residual_sample(tree, p, q, 2, RandomSource(0), exclude=[2])
        # only leaf (1,) carries mass; the second pick is ancestral
        assert out[0][0] == (1,)
        assert len(out) == 2


class TestDecode:
    def test_zero_budget_returns_prompt(self):
        p = SoftmaxModel(4, None, 1)
        beams, report = decode(p, p, (1, 2), HvtConfig(max_new_tokens=0))
        assert beams == [((1, 2), 0.0)] and report.steps == 0 and report.p_forward == 0

    def test_point_mass_matches_greedy(self):
        p = random_table_model(6, 5, order=1, eos=5, point_mass=True)
        beams, _ = decode(p, p, (0,), HvtConfig(gamma=1, k=1, W=1, max_new_tokens=8), RandomSource(0))
        assert beams[0][0] == greedy_decode(p, (0,), 8)[0]

    def test_stops_at_eos(self):
        # every context forces EOS (token 2) next
        p = TableModel(3, 2, 1, [0, 0, 1], {(0,): [0, 0, 1], (1,): [0, 0, 1]})
        beams, report = decode(p, p, (0,), HvtConfig(gamma=2, k=1, W=1, max_new_tokens=5), RandomSource(0))
        assert beams[0][0] == (0, 2)
        assert report.tokens_generated == 1

    def test_report_matches_counters(self, model_pair):
        p, q = model_pair
        beams, report = decode(p, q, (0,), HvtConfig(gamma=2, k=2, W=2, max_new_tokens=10), RandomSource(3))
        assert report.p_forward == p.forward_count
        assert report.q_forward == q.forward_count
        report.totals.check()
        assert len(beams) <= 2
        assert all(len(b[0]) - 1 <= 10 for b in beams)

    @pytest.mark.parametrize("seed", range(8))
    def test_lockstep_with_reference(self, seed):
        p, q = random_pair(seed, vocab=3, order=1, eos=2 if seed % 2 else None)
        cfg = HvtConfig(gamma=2, k=2, W=2, max_new_tokens=5)
        beams, report = decode(p, q, (0,), cfg, RandomSource(np.random.default_rng(seed)))
        ref_beams, totals, steps = ref_decode(p, q, (0,), 2, 2, 2, "LOG_LIKELIHOOD", 5, seed)
        assert [b[0] for b in beams] == [b[0] for b in ref_beams]
        np.testing.assert_allclose([b[1] for b in beams], [b[1] for b in ref_beams], rtol=0, atol=1e-12)
        t = report.totals
        assert report.steps == steps
        assert (t.verified_nodes, t.accepted_nodes, t.rejected_nodes, t.pruned_nodes, t.unvisited_nodes) == (
            totals["verified"], totals["accepted"], totals["rejected"], totals["pruned"], totals["unvisited"])
        assert (t.total_nodes, t.p_forward, t.q_forward, t.residual_draws) == (
            totals["total"], totals["p_forward"], totals["q_forward"], totals["residual"])

    def test_deterministic(self, model_pair):
        p, q = model_pair
        cfg = HvtConfig(gamma=3, k=2, W=3, priority_mode="NEG_PERPLEXITY", max_new_tokens=12, seed=5)
        a = decode(p, q, (1,), cfg)
        b = decode(p, q, (1,), cfg)
        assert a[0] == b[0] and a[1].to_dict() == b[1].to_dict()

    def test_length_normalized_ranking(self, model_pair):
        p, q = model_pair
        cfg = HvtConfig(gamma=2, k=2, W=3, frontier_rank="LENGTH_NORMALIZED", max_new_tokens=6)
        beams, _ = decode(p, q, (1,), cfg, RandomSource(0))
        keys = [s / (len(t) - 1) for t, s in beams]
        assert keys == sorted(keys, reverse=True)

    def test_mismatched_models(self):
        with pytest.raises(ValueError):
            decode(SoftmaxModel(4, None, 1), SoftmaxModel(5, None, 1), (), HvtConfig())


class TestStepMetrics:
    def test_all_accepted(self):
        assert step_metrics(StepStats(total_nodes=40, verified_nodes=10, accepted_nodes=10)) == (1.0, 0.75)

    def test_half_accepted_no_reduction(self):
        assert step_metrics(StepStats(total_nodes=8, verified_nodes=8, accepted_nodes=4, rejected_nodes=4)) == (0.5, 0.0)

    def test_no_verification(self):
        assert step_metrics(StepStats(total_nodes=3, unvisited_nodes=3)) == (0.0, 1.0)

    def test_empty_step(self):
        with pytest.raises(ValueError):
            step_metrics(StepStats())

    def test_identical_models_counter_arithmetic(self):
        p = SoftmaxModel(6, None, 21)
        tree = build_draft_tree(p, (), 3, 2)
        res = hvt_step(tree, p, p, HvtConfig(gamma=3, k=2, W=2), RandomSource(0))
        acc, vrr = step_metrics(res.stats)
        assert acc == 1.0
        assert vrr == 1 - res.stats.verified_nodes / 14
        assert res.stats.verified_nodes <= 6


@settings(max_examples=150, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    gamma=st.integers(1, 4),
    k=st.integers(1, 3),
    W=st.integers(1, 4),
    mode=st.sampled_from(list(PriorityMode)),
    stop=st.booleans(),
    weight=st.floats(0, 1),
)
def test_step_invariants(seed, gamma, k, W, mode, stop, weight):
    p = SoftmaxModel(5, 4 if seed % 3 == 0 else None, seed % 9973, embed_dim=3)
    q = InterpolatedModel(SoftmaxModel(5, p.eos, (seed // 7) % 9973, embed_dim=3), weight)
    tree = build_draft_tree(q, (0,), gamma, k)
    cfg = HvtConfig(gamma=gamma, k=k, W=W, priority_mode=mode, stop_at_W=stop)
    res = hvt_step(tree, p, q, cfg, RandomSource(seed))
    res.stats.check()

    verified_order = [e.node for e in res.trace if e.event == "verify"]
    seen = set()
    for v in verified_order:
        # ancestor-first, and never under a rejected or pruned node
        assert all(a in seen for a in tree.ancestors(v))
        assert all(tree.nodes[a].status is NodeStatus.ACCEPTED for a in tree.ancestors(v))
        seen.add(v)
    for n in tree.non_root():
        if n.status is NodeStatus.ACCEPTED:
            assert all(tree.nodes[a].status is NodeStatus.ACCEPTED for a in tree.ancestors(n.index))

    # pops come out in non-increasing priority order (tie: lower id first)
    pops = [(e.priority, -e.node) for e in res.trace if e.event == "pop"]
    assert pops == sorted(pops, reverse=True)
    assert all(e.priority == priority(tree, e.node, mode) for e in res.trace if e.event == "pop")

    # memoized target cost: one pass per node whose target log-prob was computed,
    # plus ancestral fallback passes (which only happen with residual draws)
    evaluated = sum(1 for n in tree.non_root() if n.p_logp_cum is not None)
    assert res.stats.p_forward >= evaluated
    if res.stats.residual_draws == 0:
        assert res.stats.p_forward == evaluated
    assert res.stats.p_forward == p.forward_count
    assert res.stats.verified_nodes <= res.stats.total_nodes
    assert tree.q_forward <= sum(k**j for j in range(gamma))
    assert len(res.continuations) <= W
