from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab.metrics import (
    ComparabilityError,
    ForgettingThreshold,
    MetricsConfig,
    MetricsReport,
    evaluate,
    extraction_attack,
    extraction_likelihood,
    extraction_likelihood_many,
    flops_estimate,
    forgetting_threshold,
    is_forgotten,
    memorization_accuracy,
    memorization_accuracy_many,
    ngram_overlap,
)
from unlearnlab.model import ModelConfig, init_model

from oracles import HandModel, el_oracle, ma_oracle, overlap_oracle

BOS2 = 2  # the binary toy vocabulary is {0, 1} plus BOS


def repeat_last(ctx):
    """Predict the previous token again; after BOS alone predict 0."""
    last = ctx[-1]
    want = 0 if last == BOS2 else last
    return [1.0 if want == 0 else 0.0, 1.0 if want == 1 else 0.0, -5.0]


def follower(x, eos=None):
    """A model that continues every prefix of x with the true next token."""
    x = [int(v) for v in x]

    def rule(ctx):
        pos = len(ctx) - 1  # tokens of x already present
        logits = [0.0] * (max(x) + 3)
        if pos < len(x) and ctx[1:] == x[:pos]:
            logits[x[pos]] = 1.0
        elif eos is not None:
            logits[eos] = 1.0
        return logits

    return rule


def table_rule(seed, vocab=2, order=2):
    """Random logits keyed on the last ``order`` tokens and the position."""
    rng = np.random.default_rng(seed)
    table = {}

    def rule(ctx):
        key = (tuple(ctx[-order:]), len(ctx))
        if key not in table:
            table[key] = list(np.round(rng.normal(size=vocab), 1)) + [-9.0]
        return table[key]

    return rule


class TestOverlap:
    def test_identity(self):
        assert ngram_overlap([1, 2, 3, 4], [1, 2, 3, 4], 2) == 1.0

    def test_disjoint(self):
        assert ngram_overlap([1, 2, 3], [4, 5, 6], 1) == 0.0

    def test_hand_enumeration(self):
        assert ngram_overlap([1, 2, 3, 4], [2, 3, 4, 5], 2) == pytest.approx(2 / 3)

    def test_duplicates_counted_as_list(self):
        # a's 2-grams [11, 11, 12] against b's set {11}: two of three hit
        assert ngram_overlap([1, 1, 1, 2], [1, 1], 2) == pytest.approx(2 / 3)

    def test_short_a_is_zero(self):
        assert ngram_overlap([1, 2], [1, 2, 3], 3) == 0.0

    def test_bad_n(self):
        with pytest.raises(ValueError):
            ngram_overlap([1], [1], 0)

    @settings(max_examples=300)
    @given(st.lists(st.integers(0, 3), max_size=12), st.lists(st.integers(0, 3), max_size=12), st.integers(1, 4))
    def test_matches_enumeration(self, a, b, n):
        got = ngram_overlap(a, b, n)
        assert got == overlap_oracle(a, b, n)
        assert 0.0 <= got <= 1.0

    @given(st.lists(st.integers(0, 5), min_size=1, max_size=15), st.lists(st.integers(0, 5), max_size=5))
    def test_monotone_in_n_for_prefixes(self, a, tail):
        b = a + tail
        vals = [ngram_overlap(a, b, n) for n in range(1, len(a) + 1)]
        assert all(v == 1.0 for v in vals)
        assert ngram_overlap(a, b, len(a) + 1) == 0.0


class TestHandSetToyModel:
    """Binary vocabulary, T=8, n=2, logits set by hand."""

    x = [1, 0, 1, 1, 0, 1, 1, 1]

    def test_el_by_hand(self):
        # repeat-last generations for t = 1..6 and their bigram overlap with x_>=t:
        # 00000000 -> 0, 1111111 -> 1, 000000 -> 0, 11111 -> 1, 1111 -> 1, 000 -> 0
        model = HandModel(repeat_last, 3, BOS2)
        assert extraction_likelihood(model, self.x, MetricsConfig(n=2)) == 0.5

    def test_ma_by_hand(self):
        # predictions x_{t-1} for t = 2..8 hit at t = 4, 7, 8
        model = HandModel(repeat_last, 3, BOS2)
        assert Fraction(memorization_accuracy(model, self.x)).limit_denominator(100) == Fraction(3, 7)

    @pytest.mark.parametrize("seed", range(12))
    def test_el_matches_simulation(self, seed):
        model = HandModel(table_rule(seed), 3, BOS2)
        x = list(np.random.default_rng(100 + seed).integers(0, 2, 8))
        assert extraction_likelihood(model, x, MetricsConfig(n=2)) == el_oracle(model, x, 2)

    @pytest.mark.parametrize("seed", range(12))
    def test_ma_matches_enumeration(self, seed):
        model = HandModel(table_rule(seed, order=3), 3, BOS2)
        x = list(np.random.default_rng(200 + seed).integers(0, 2, 8))
        assert memorization_accuracy(model, x) == ma_oracle(model, x)

    def test_eos_shortens_generation(self):
        # the follower emits EOS (token 3) after the first wrong token, so late prefixes score 0
        x = [1, 0, 1, 1, 0, 1, 1, 1]
        model = HandModel(follower(x, eos=3), 4, BOS2, eos_id=3)
        assert extraction_likelihood(model, x, MetricsConfig(n=2)) == 1.0
        assert el_oracle(model, x, 2) == 1.0


@pytest.fixture(scope="module")
def model():
    state = init_model(ModelConfig(vocab_size=260, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=32, seed=1))
    rng = np.random.default_rng(0)
    for p in state.params.values():
        p.data = (p.data + rng.normal(0, 0.4, p.data.shape)).astype(np.float32)
    return state


class TestRealModel:
    def test_el_matches_simulation(self, model):
        rng = np.random.default_rng(1)
        seqs = [rng.integers(97, 101, 12) for _ in range(3)]
        got = extraction_likelihood_many(model, seqs, MetricsConfig(n=2))
        for x, g in zip(seqs, got):
            assert g == pytest.approx(el_oracle(model, x, 2), abs=1e-12)

    def test_ma_matches_per_position(self, model):
        rng = np.random.default_rng(2)
        seqs = [rng.integers(97, 100, 10) for _ in range(4)]
        got = memorization_accuracy_many(model, seqs)
        for x, g in zip(seqs, got):
            assert g == pytest.approx(ma_oracle(model, x), abs=1e-12)

    def test_deterministic(self, model):
        seqs = [np.arange(97, 109)]
        a = evaluate(model, seqs, MetricsConfig(n=3))
        b = evaluate(model, seqs, MetricsConfig(n=3))
        assert a.el == b.el and a.ma == b.ma


class TestSaturation:
    def test_perfect_memorization(self):
        x = [3, 1, 4, 1, 5, 9, 2, 6]
        model = HandModel(follower(x), 12, 10)
        assert extraction_likelihood(model, x, MetricsConfig(n=2)) == 1.0
        assert memorization_accuracy(model, x) == 1.0

    def test_never_matching_model(self):
        model = HandModel(lambda ctx: [0.0, 0.0, 1.0, -1.0], 4, 3)
        x = [0, 1, 0, 1, 1, 0]
        assert extraction_likelihood(model, x, MetricsConfig(n=2)) == 0.0
        assert memorization_accuracy(model, x) == 0.0

    def test_t_not_above_n(self):
        with pytest.raises(ValueError):
            extraction_likelihood(HandModel(repeat_last, 3, BOS2), [0, 1], MetricsConfig(n=2))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 10_000), st.lists(st.integers(0, 1), min_size=4, max_size=10), st.integers(1, 3))
    def test_bounds(self, seed, x, n):
        model = HandModel(table_rule(seed), 3, BOS2)
        el = extraction_likelihood(model, x, MetricsConfig(n=n))
        ma = memorization_accuracy(model, x)
        assert 0.0 <= el <= 1.0 and 0.0 <= ma <= 1.0


def report(el, ma, cfg=MetricsConfig()):
    return MetricsReport(list(el), list(ma), cfg)


class TestThreshold:
    def test_single_sequence(self):
        model = HandModel(table_rule(1), 3, BOS2)
        x = [0, 1, 1, 0, 1, 0, 0, 1]
        thr = forgetting_threshold(model, [x], MetricsConfig(n=2))
        assert thr.el == extraction_likelihood(model, x, MetricsConfig(n=2))
        assert thr.ma == memorization_accuracy(model, x)

    def test_duplication_invariant(self):
        model = HandModel(table_rule(2), 3, BOS2)
        d = [[0, 1, 1, 0, 1, 0], [1, 1, 1, 0, 0, 0]]
        a = forgetting_threshold(model, d, MetricsConfig(n=2))
        b = forgetting_threshold(model, d * 3, MetricsConfig(n=2))
        assert a.el == pytest.approx(b.el, abs=1e-15) and a.ma == pytest.approx(b.ma, abs=1e-15)

    def test_three_sequence_mean(self):
        model = HandModel(table_rule(3), 3, BOS2)
        d = [[0, 1, 1, 0, 1, 0, 1], [1, 1, 1, 0, 0, 0, 1], [0, 0, 1, 1, 0, 1, 1]]
        thr = forgetting_threshold(model, d, MetricsConfig(n=2))
        assert thr.el == pytest.approx(sum(el_oracle(model, x, 2) for x in d) / 3, abs=1e-15)
        assert thr.ma == pytest.approx(sum(ma_oracle(model, x) for x in d) / 3, abs=1e-15)
        assert 0 <= thr.el <= 1 and 0 <= thr.ma <= 1

    def test_empty(self):
        with pytest.raises(ValueError):
            forgetting_threshold(HandModel(repeat_last, 3, BOS2), [])

    def test_cached_per_checkpoint(self):
        state = init_model(ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=8, max_seq_len=16, seed=9))
        d = [np.arange(97, 107)]
        a = forgetting_threshold(state, d, MetricsConfig(n=2))
        assert forgetting_threshold(state, d, MetricsConfig(n=2)) is a
        assert a.checkpoint_id == state.checkpoint_id
        state.params["head.w"].data[0, 0] += 1.0
        assert forgetting_threshold(state, d, MetricsConfig(n=2)) is not a


class TestIsForgotten:
    thr = ForgettingThreshold(0.3, 0.5, MetricsConfig())

    def test_zero_report(self):
        assert is_forgotten(report([0.0], [0.0]), self.thr)

    def test_conjunction(self):
        assert not is_forgotten(report([0.1], [0.9]), self.thr)
        assert not is_forgotten(report([0.9], [0.1]), self.thr)

    def test_boundary_inclusive(self):
        assert is_forgotten(report([0.3], [0.5]), self.thr)

    def test_uses_aggregates(self):
        # the second sequence is above on its own, the mean is not
        assert is_forgotten(report([0.1, 0.4], [0.2, 0.6]), self.thr)

    def test_comparability(self):
        with pytest.raises(ComparabilityError):
            is_forgotten(report([0.0], [0.0], MetricsConfig(n=3)), self.thr)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, el, ma, d_el, d_ma):
        if is_forgotten(report([el], [ma]), self.thr):
            assert is_forgotten(report([el * (1 - d_el)], [ma * (1 - d_ma)]), self.thr)


class TestReportJson:
    def test_fields(self):
        r = MetricsReport([0.2, 0.4], [0.5, 1.0], MetricsConfig(n=2), "abc", ["a", "b"], perplexity=3.5)
        doc = r.to_json(ForgettingThreshold(0.35, 0.75, MetricsConfig(n=2)))
        assert set(doc) == {"checkpoint_id", "config", "per_sequence", "aggregates", "threshold", "forgotten"}
        assert doc["aggregates"] == {"el": pytest.approx(0.3), "ma": 0.75, "ppl": 3.5}
        assert doc["forgotten"] is True
        assert doc["per_sequence"][1] == {"id": "b", "el": 0.4, "ma": 1.0}
        assert doc["config"]["hash"] == MetricsConfig(n=2).digest()


class TestAttack:
    x = [5, 6, 7, 8, 5, 6, 8, 7, 6, 5]

    def test_memorized_half_prefix(self):
        model = HandModel(follower(self.x), 12, 11)
        tr = extraction_attack(model, self.x, 5, n=2)
        assert tr.overlap == 1.0
        assert tr.tokens["generated"] == self.x[5:]

    def test_last_token_degenerate(self):
        model = HandModel(follower(self.x), 12, 11)
        tr = extraction_attack(model, self.x, 9, n=2)
        assert tr.tokens["generated"] == [self.x[-1]]
        assert tr.overlap == 0.0 and "shorter than n" in tr.note

    def test_render_marks_generation(self):
        text = [ord(c) for c in "hello world"]
        model = HandModel(follower(text), 260, 256)
        out = extraction_attack(model, text, 5, n=2).render()
        assert "hello[[ world]]" in out

    def test_bad_prefix(self):
        with pytest.raises(ValueError):
            extraction_attack(HandModel(repeat_last, 3, BOS2), [0, 1, 0], 3)


class TestFlops:
    def test_values(self):
        assert flops_estimate(1, 1) == 6
        assert flops_estimate(0, 123) == 0
        assert flops_estimate(2_000_000, 1_100_000) == 13_200_000_000_000

    def test_negative(self):
        with pytest.raises(ValueError):
            flops_estimate(-1, 5)
