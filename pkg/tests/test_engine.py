import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scoreprop import engine as E
from scoreprop import graph as G
from scoreprop import store as S
from scoreprop.errors import ConfigError, ShapeError


def explained(seed, mode="paper-equal", classes=None, **kw):
    m = S.make_toy_model(seed, **kw)
    tape = G.forward_with_tape(m, S.random_image(m.input_shape, seed))
    return m, tape, E.explain(m, tape, classes, mode)


class TestInvariants:
    @pytest.mark.parametrize("mode", E.AVGPOOL_MODES)
    @pytest.mark.parametrize("seed", range(5))
    def test_conservation(self, seed, mode):
        _, tape, b = explained(seed, mode)
        for c, st_ in b.states.items():
            assert st_.conservation_error() <= 1e-6, (c, st_.total, tape.logits[c])

    def test_scores_are_lambda_times_activation(self):
        m, tape, b = explained(1)
        st_ = b.states[2]
        for l in range(len(m)):
            np.testing.assert_array_equal(st_.scores[l], st_.lambdas[l] * tape.activations[l + 1].astype(np.float64))
        np.testing.assert_array_equal(st_.input_scores, st_.input_lambda * tape.activations[0].astype(np.float64))

    def test_layer_conservation_chain(self):
        # each layer: sum S_out = sum S_in + sum S_k + residual, up to float32 activation storage
        m, tape, b = explained(2, dropout=0.3)
        st_ = b.states[0]
        for l in range(len(m)):
            below = st_.scores[l - 1].sum() if l else st_.input_scores.sum()
            got = below + st_.constants[l].sum() + st_.residuals[l]
            assert got == pytest.approx(st_.scores[l].sum(), rel=1e-6, abs=1e-6)

    def test_seed_scale_is_linear(self):
        m = S.make_toy_model(3)
        tape = G.forward_with_tape(m, S.random_image(m.input_shape, 3))
        a = E.propagate(m, tape, 1)
        b = E.propagate(m, tape, 1, seed_scale=-2.5)
        np.testing.assert_allclose(b.input_scores, -2.5 * a.input_scores, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(b.constant_totals, -2.5 * a.constant_totals, rtol=1e-12, atol=1e-15)

    def test_argmax_of_totals_is_prediction(self):
        for seed in range(5):
            _, tape, b = explained(seed)
            totals = b.totals()
            assert max(totals, key=totals.get) == int(np.argmax(tape.logits))

    def test_threads_do_not_change_results(self):
        m = S.make_toy_model(4)
        tape = G.forward_with_tape(m, S.random_image(m.input_shape, 4))
        one = E.explain(m, tape, threads=1)
        many = E.explain(m, tape, threads=4)
        for c in one.classes:
            assert one.states[c].input_scores.tobytes() == many.states[c].input_scores.tobytes()

    def test_keep_tensors_false_matches(self):
        m = S.make_toy_model(5)
        tape = G.forward_with_tape(m, S.random_image(m.input_shape, 5))
        full, lean = E.propagate(m, tape, 0), E.propagate(m, tape, 0, keep_tensors=False)
        assert lean.scores is None and lean.lambdas is None
        assert full.input_scores.tobytes() == lean.input_scores.tobytes()
        assert full.total == lean.total

    def test_feature_scores_sum(self):
        m, tape, b = explained(6)
        st_ = b.states[3]
        lin = max(i for i, l in enumerate(m.layers) if l.kind == "linear")
        assert st_.feature_scores.sum() + st_.constant_totals[lin] == pytest.approx(st_.logit, rel=1e-6)


class TestRules:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_linear_rule_conserves(self, seed):
        rng = np.random.default_rng(seed)
        w, b, a, lam = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4), rng.normal(size=3)
        lam_in, s_k = E.score_linear(lam, w, b, a)
        assert (lam_in * a).sum() + s_k.sum() == pytest.approx(lam @ (w @ a + b), rel=1e-9, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.sampled_from([(1, 0), (1, 1), (2, 1)]))
    def test_conv_rule_conserves(self, seed, sp):
        from reference import conv2d_naive
        stride, pad = sp
        rng = np.random.default_rng(seed)
        a, w, b = rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        out = conv2d_naive(a, w, b, stride, pad)
        lam = rng.normal(size=out.shape)
        lam_in, s_k = E.score_conv(lam, w, b, a, stride, pad)
        assert (lam_in * a).sum() + s_k.sum() == pytest.approx((lam * out).sum(), rel=1e-9, abs=1e-9)

    def test_avgpool_modes_agree_without_zeros(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0.5, 2, size=(2, 4, 4))
        lam = rng.normal(size=(2, 2, 2))
        out = a.reshape(2, 2, 2, 2, 2).mean(axis=(2, 4))
        l1, _, r1 = E.score_avgpool(lam, a, 2, mode="paper-equal")
        l2, _, r2 = E.score_avgpool(lam, a, 2, mode="linear")
        assert r1 == r2 == 0
        assert (l1 * a).sum() == pytest.approx((lam * out).sum(), rel=1e-12)
        assert (l2 * a).sum() == pytest.approx((lam * out).sum(), rel=1e-12)

    def test_maxpool_routes_to_winner_only(self):
        rng = np.random.default_rng(1)
        from scoreprop.tensor import maxpool2d_forward
        a = rng.normal(size=(2, 4, 4)).astype(np.float32)
        out, idx = maxpool2d_forward(a, 2, 2)
        lam_in, _ = E.score_maxpool(np.ones(out.shape), idx, a, 2, 2)
        assert np.count_nonzero(lam_in) == out.size

    def test_bad_mode(self):
        m = S.make_toy_model(0)
        tape = G.forward_with_tape(m, S.random_image(m.input_shape, 0))
        with pytest.raises(ConfigError):
            E.propagate(m, tape, 0, avgpool_mode="fancy")

    def test_bad_class(self):
        with pytest.raises((IndexError, ValueError)):
            E.init_class_score([1.0, 2.0], 5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            E.score_relu(np.ones(3), np.ones(4))


class TestBlocks:
    def test_block_view_numbering(self):
        m, _, b = explained(0)
        blocks = E.block_view(m, b.states[0])
        assert [bl.number for bl in blocks] == list(range(1, len(blocks) + 1))
        assert len(blocks) == 5  # 2 toy blocks of two triples, plus the head
        for bl in blocks:
            assert m.layers[bl.conv].kind == "conv2d" and m.layers[bl.relu].kind == "relu"
