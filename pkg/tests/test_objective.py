import math

import pytest
from hypothesis import given, settings, strategies as st

from oracles import objective_oracle
from sm2.core import Polarity
from sm2.objective import (AttributeVector, ObjectiveWeights, RawAttributes, halve, normalize_attributes,
                           objective_score, rank)

HIB, LIB = Polarity.HIGHER_IS_BETTER, Polarity.LOWER_IS_BETTER
unit = st.floats(0.0, 1.0)


def raw(cid, perf=0.5, energy=1.0, lr=0.1, polarity=HIB):
    return RawAttributes(cid, perf, polarity, energy, lr)


class TestNormalize:
    def test_energy_inverted(self):
        out = normalize_attributes([raw(0, energy=10), raw(1, energy=20), raw(2, energy=30)])
        assert [a.E for a in out] == [1.0, 0.5, 0.0]

    def test_lower_is_better_flipped(self):
        out = normalize_attributes([raw(0, perf=5, polarity=LIB), raw(1, perf=10, polarity=LIB)])
        assert [a.P for a in out] == [1.0, 0.0]

    def test_lr_not_inverted(self):
        out = normalize_attributes([raw(0, lr=0.01), raw(1, lr=0.1)])
        assert [a.LR for a in out] == [0.0, 1.0]

    def test_zero_range_is_all_ones(self):
        out = normalize_attributes([raw(0, energy=3.0), raw(1, energy=3.0), raw(2, energy=3.0)])
        assert [a.E for a in out] == [1.0, 1.0, 1.0]

    def test_single_config(self):
        assert normalize_attributes([raw(7, perf=0.1)]) == [AttributeVector(7, 1.0, 1.0, 1.0)]

    def test_mixed_polarity(self):
        with pytest.raises(ValueError):
            normalize_attributes([raw(0), raw(1, polarity=LIB)])

    def test_empty(self):
        with pytest.raises(ValueError):
            normalize_attributes([])

    @given(st.lists(st.tuples(st.floats(-10, 10), st.floats(0.01, 100), st.floats(1e-3, 1)), min_size=2, max_size=12))
    @settings(max_examples=100, deadline=None)
    def test_range_and_extremes(self, rows):
        out = normalize_attributes([raw(i, p, e, lr) for i, (p, e, lr) in enumerate(rows)])
        for name in ("P", "E", "LR"):
            vals = [getattr(a, name) for a in out]
            assert all(0.0 <= v <= 1.0 for v in vals)
            assert max(vals) == 1.0


class TestObjectiveScore:
    def test_worked_example(self):
        a = AttributeVector(0, 0.8, 0.4, 0.6)
        assert objective_score(a, ObjectiveWeights(0.75, 0.5)) == pytest.approx(0.725, abs=1e-15)

    @given(unit, unit)
    def test_all_ones(self, alpha, beta):
        assert objective_score(AttributeVector(0, 1, 1, 1), ObjectiveWeights(alpha, beta)) == pytest.approx(1.0,
                                                                                                            abs=1e-15)

    @given(unit, unit, unit, unit)
    def test_alpha_one_is_performance(self, p, e, lr, beta):
        assert objective_score(AttributeVector(0, p, e, lr), ObjectiveWeights(1.0, beta)) == p

    @given(unit, unit, unit, unit, unit)
    def test_matches_expanded_form(self, p, e, lr, alpha, beta):
        got = objective_score(AttributeVector(0, p, e, lr), ObjectiveWeights(alpha, beta))
        assert got == pytest.approx(objective_oracle(p, e, lr, alpha, beta), abs=1e-12)

    @pytest.mark.parametrize("alpha,beta", [(-0.1, 0.5), (0.5, 1.5), (math.nan, 0.5)])
    def test_weights_validated(self, alpha, beta):
        with pytest.raises(ValueError):
            ObjectiveWeights(alpha, beta)


class TestHalving:
    def test_eight_distinct(self):
        scored = [(i, i / 10, 0.5) for i in range(8)]
        assert sorted(halve(scored)) == [0, 1, 2, 3]

    def test_three_configs(self):
        assert halve([(0, 0.9, 0.0), (1, 0.1, 0.0), (2, 0.5, 0.0)]) == [1]

    def test_tie_goes_to_efficient(self):
        assert halve([(0, 0.7, 0.2), (1, 0.7, 0.9)]) == [0]

    def test_full_tie_by_id(self):
        assert rank([(3, 0.5, 0.5), (1, 0.5, 0.5), (2, 0.5, 0.5)]) == [1, 2, 3]

    def test_closure(self):
        for n in range(2, 40):
            ids = list(range(n))
            rounds = 0
            while len(ids) > 1:
                dropped = halve([(i, float(i), 0.0) for i in ids])
                ids = [i for i in ids if i not in dropped]
                rounds += 1
            assert rounds == math.ceil(math.log2(n))

    def test_needs_two(self):
        with pytest.raises(ValueError):
            halve([(0, 1.0, 1.0)])

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            halve([(0, 1.0, 1.0), (1, 0.0, 1.0)], active_count=3)
