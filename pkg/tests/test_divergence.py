import json
import math
from pathlib import Path

import pytest

from hvt.decoders import DecoderSpec
from hvt.divergence import (
    Method,
    divergence_test,
    exact_output_distribution,
    target_distribution,
    total_variation,
)
from hvt.engine import HvtConfig
from hvt.errors import BudgetError, ConfigError
from hvt.models import SoftmaxModel, TableModel
from hvt.sampling import RandomSource

from conftest import random_pair


def spec(name, **hvt):
    return DecoderSpec(name, HvtConfig(**hvt))


class TestTotalVariation:
    def test_identical(self):
        d = {(0,): 0.7, (1,): 0.3}
        assert total_variation(d, dict(d)) == 0.0

    def test_disjoint_point_masses(self):
        assert total_variation({(0,): 1.0}, {(1,): 1.0}) == 1.0

    def test_two_point(self):
        assert total_variation({(0,): 0.7, (1,): 0.3}, {(0,): 0.5, (1,): 0.5}) == pytest.approx(0.2, abs=1e-15)


class TestExactDistribution:
    def test_greedy_is_point_mass(self, softmax8):
        d = exact_output_distribution(spec("greedy"), softmax8, softmax8, (0,), 3)
        assert len(d) == 1 and next(iter(d.values())) == 1.0

    def test_multinomial_horizon_one_is_conditional(self, softmax8):
        d = exact_output_distribution(spec("multinomial"), softmax8, softmax8, (0, 1), 1)
        for t, pt in enumerate(softmax8.distribution((0, 1))):
            assert d[(t,)] == pytest.approx(pt, abs=1e-15)

    def test_flat_v2_reference_pair(self):
        p = TableModel(2, None, 0, [0.7, 0.3])
        q = TableModel(2, None, 0, [0.5, 0.5])
        d = exact_output_distribution(spec("flat-spec", gamma=1), p, q, (), 1)
        assert d[(0,)] == pytest.approx(0.7, abs=1e-12)
        assert d[(1,)] == pytest.approx(0.3, abs=1e-12)

    @pytest.mark.parametrize("name", ["greedy", "multinomial", "flat-spec", "hvt"])
    @pytest.mark.parametrize("seed", range(3))
    def test_sums_to_one(self, name, seed):
        p, q = random_pair(seed, vocab=3, order=1, eos=2)
        d = exact_output_distribution(spec(name, gamma=2, k=2, W=2), p, q, (0,), 3)
        assert math.fsum(d.values()) == pytest.approx(1.0, abs=1e-9)
        assert all(len(x) <= 3 for x in d)

    def test_target_distribution_sums(self, softmax8):
        t = target_distribution(softmax8, (0,), 2)
        assert len(t) == 64
        assert math.fsum(t.values()) == pytest.approx(1.0, abs=1e-12)

    def test_budget(self, softmax8):
        with pytest.raises(BudgetError, match="Monte-Carlo"):
            exact_output_distribution(spec("multinomial"), softmax8, softmax8, (), 6)


class TestDivergenceTest:
    def test_greedy_tv_is_complement_of_path(self):
        p = TableModel(2, None, 0, [0.7, 0.3])
        res = divergence_test(spec("greedy"), p, p, (), 1, 0, 0)
        assert res.method is Method.EXACT_ENUM
        assert res.total_variation == pytest.approx(0.3, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_flat_exact_is_lossless(self, seed):
        p, q = random_pair(seed, vocab=4, order=1)
        res = divergence_test(spec("flat-spec", gamma=2), p, q, (1,), 2, 0, 0)
        assert res.method is Method.EXACT_ENUM
        assert res.total_variation < 1e-9

    def test_multinomial_monte_carlo(self):
        p = TableModel(3, None, 0, [0.2, 0.5, 0.3])
        res = divergence_test(spec("multinomial"), p, p, (), 1, 1_000_000, RandomSource(8), method="MONTE_CARLO")
        assert res.method is Method.MONTE_CARLO and res.size == 1_000_000
        assert res.total_variation < 0.005

    def test_hvt_divergence_is_reported_in_range(self):
        p, q = random_pair(4, vocab=3, order=1)
        res = divergence_test(spec("hvt", gamma=2, k=2, W=2), p, q, (0,), 2, 0, 0)
        assert 0.0 <= res.total_variation <= 1.0

    def test_too_few_samples_without_enumeration(self):
        p = SoftmaxModel(8, None, 1)
        with pytest.raises(ConfigError, match="samples"):
            divergence_test(spec("multinomial"), p, p, (), 6, 100, 0)

    def test_forced_exact_over_budget(self):
        p = SoftmaxModel(8, None, 1)
        with pytest.raises(BudgetError):
            divergence_test(spec("multinomial"), p, p, (), 6, 10**5, 0, method="EXACT_ENUM")


HVT_TV = json.loads((Path(__file__).parent / "golden" / "hvt_tv.json").read_text())["cases"]


@pytest.mark.parametrize("case", HVT_TV, ids=lambda c: f"seed{c['seed']}-W{c['W']}")
def test_hvt_tv_regression_bound(case):
    p, q = random_pair(case["seed"], vocab=3, order=1)
    res = divergence_test(spec("hvt", gamma=2, k=2, W=case["W"]), p, q, (0,), 2, 0, 0)
    assert res.total_variation <= case["tv"] + 0.01
