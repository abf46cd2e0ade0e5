import numpy as np
import pytest

from tquant import model as M
from tquant import tensor as T
from tquant import ternarize as tz
from tquant.tensor import GradTape, ShapeError, Tensor

from oracles import fd_gradient, rel_norm_error

CFG = M.ModelConfig(layers=2, hidden=8, heads=2, ffn=16, vocab=10,
                    max_positions=8, classes=3, dropout=0.0)


def batch(rng, cfg=CFG, b=2, n=4):
    tokens = rng.integers(0, cfg.vocab, size=(b, n))
    segments = rng.integers(0, cfg.segments, size=(b, n))
    return tokens, segments


def run_forward(params, cfg, tokens, segments, plan=None, dtype=None, **kw):
    if dtype is not None:
        params = {k: v.astype(dtype) for k, v in params.items()}
    leaves, _ = M.build_leaves(params, plan, trainable=False)
    return M.forward(leaves, cfg, tokens, segments, plan=plan, **kw)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            M.ModelConfig(layers=1, hidden=10, heads=3, ffn=8, vocab=4)

    def test_plan_notation_round_trip(self):
        plan = M.plan_from_notation("2-2-8", method="lat")
        assert plan.notation == "2-2-8"
        assert plan.w_method == "lat_approx"

    def test_8bit_row_granularity_rejected(self):
        with pytest.raises(ValueError):
            M.plan_from_notation("8-8-8", w_gran="row")

    def test_activation_bits_restricted(self):
        with pytest.raises(ValueError):
            M.plan_from_notation("2-2-2")

    def test_3bit_resolves_to_laq(self):
        plan = M.plan_from_notation("3-3-8")
        assert plan.w_method == "laq3"


class TestForward:
    def test_trace_shapes(self):
        rng = np.random.default_rng(0)
        params = M.init_params(CFG, rng)
        tokens, segments = batch(rng)
        trace = run_forward(params, CFG, tokens, segments)
        assert [h.shape for h in trace.hidden] == [(2, 4, 8)] * 3
        assert [a.shape for a in trace.attention] == [(4, 4, 4)] * 2
        assert trace.logits.shape == (2, 3)

    def test_zero_layers(self):
        cfg = M.ModelConfig(layers=0, hidden=8, heads=2, ffn=16, vocab=10,
                            max_positions=8, classes=3, dropout=0.0)
        rng = np.random.default_rng(1)
        params = M.init_params(cfg, rng)
        tokens, segments = batch(rng, cfg)
        trace = run_forward(params, cfg, tokens, segments)
        assert len(trace.hidden) == 1
        assert trace.attention == []
        assert trace.logits.shape == (2, 3)

    def test_all_zero_weights_force_uniform_attention(self):
        rng = np.random.default_rng(2)
        params = {k: np.zeros_like(v) for k, v in M.init_params(CFG, rng).items()}
        for k in params:
            if k.endswith("_g"):
                params[k] = np.ones_like(params[k])
        tokens, segments = batch(rng)
        trace = run_forward(params, CFG, tokens, segments)
        for a in trace.attention:
            np.testing.assert_array_equal(a.data, 0.0)
        np.testing.assert_allclose(
            trace.logits.data,
            np.broadcast_to(trace.logits.data[0:1, :], trace.logits.shape),
            atol=1e-7)

    def test_noop_plan_bit_identical_to_float_path(self):
        rng = np.random.default_rng(3)
        params = M.init_params(CFG, rng)
        tokens, segments = batch(rng)
        plain = run_forward(params, CFG, tokens, segments, plan=None)
        noop = run_forward(params, CFG, tokens, segments, plan=M.NOOP_PLAN)
        np.testing.assert_array_equal(plain.logits.data, noop.logits.data)
        for a, b in zip(plain.hidden, noop.hidden):
            np.testing.assert_array_equal(a.data, b.data)

    def test_quantized_forward_matches_dequantize_then_float(self):
        rng = np.random.default_rng(4)
        params = M.init_params(CFG, rng)
        tokens, segments = batch(rng)
        plan = M.plan_from_notation("2-2-8")
        quant = run_forward(params, CFG, tokens, segments, plan=plan)

        # reference: materialize dequantized weights, then run the float
        # path with the same activation plan
        deq_params = {}
        for name, value in params.items():
            q = M.quantize_param(name, value, plan)
            deq_params[name] = tz.dequantize(q) if q is not None else value
        act_only = M.QuantPlan(w_bits=32, e_bits=32, a_bits=8,
                               act_scheme=plan.act_scheme)
        ref = run_forward(deq_params, CFG, tokens, segments, plan=act_only)
        scale_mag = max(np.abs(ref.logits.data).max(), 1e-3)
        assert np.abs(quant.logits.data - ref.logits.data).max() / scale_mag < 1e-4

    def test_input_validation(self):
        rng = np.random.default_rng(5)
        params = M.init_params(CFG, rng)
        with pytest.raises(ShapeError):
            run_forward(params, CFG, np.array([[99, 0]]), np.zeros((1, 2), int))
        with pytest.raises(ShapeError):
            run_forward(params, CFG, np.zeros((1, 20), int), np.zeros((1, 20), int))

    def test_attention_scale_switch(self):
        # default normalizes scores by sqrt(d); the conventional variant
        # by sqrt(d_head), so outputs must differ when d != d_head
        rng = np.random.default_rng(20)
        params = M.init_params(CFG, rng)
        tokens, segments = batch(rng)
        base = run_forward(params, CFG, tokens, segments)
        alt_cfg = M.ModelConfig(**{**CFG.to_dict(), "attn_scale": "sqrt_dh"})
        alt = run_forward(params, alt_cfg, tokens, segments)
        assert not np.array_equal(base.logits.data, alt.logits.data)
        # raw traced scores are pre-normalization, identical either way
        np.testing.assert_array_equal(base.attention[0].data,
                                      alt.attention[0].data)

    def test_dropout_needs_rng(self):
        cfg = M.ModelConfig(layers=1, hidden=8, heads=2, ffn=16, vocab=10,
                            max_positions=8, classes=3, dropout=0.1)
        rng = np.random.default_rng(6)
        params = M.init_params(cfg, rng)
        tokens, segments = batch(rng, cfg)
        with pytest.raises(ValueError):
            run_forward(params, cfg, tokens, segments, train=True)

    @pytest.mark.parametrize("layers,hidden,heads,ffn", [
        (1, 4, 1, 8), (2, 8, 2, 16), (3, 12, 4, 6)])
    def test_trace_shapes_property_sweep(self, layers, hidden, heads, ffn):
        cfg = M.ModelConfig(layers=layers, hidden=hidden, heads=heads, ffn=ffn,
                            vocab=6, max_positions=8, classes=2, dropout=0.0)
        rng = np.random.default_rng(7)
        params = M.init_params(cfg, rng)
        tokens, segments = batch(rng, cfg, b=3, n=5)
        trace = run_forward(params, cfg, tokens, segments)
        assert len(trace.hidden) == layers + 1
        assert all(h.shape == (3, 5, hidden) for h in trace.hidden)
        assert all(a.shape == (heads * 3, 5, 5) for a in trace.attention)


class TestAttentionScores:
    def test_single_nonzero_row_pattern(self):
        cfg = M.ModelConfig(layers=1, hidden=4, heads=1, ffn=8, vocab=4,
                            max_positions=4, classes=2, dropout=0.0)
        rng = np.random.default_rng(8)
        h = np.zeros((1, 3, 4), dtype=np.float32)
        h[0, 1] = rng.standard_normal(4)
        wq = Tensor(rng.standard_normal((4, 4)).astype(np.float32))
        wk = Tensor(rng.standard_normal((4, 4)).astype(np.float32))
        scores = M.attention_scores(Tensor(h), wq, wk, cfg)[0].data[0]
        mask = np.zeros((3, 3), dtype=bool)
        mask[1, 1] = True
        np.testing.assert_array_equal(scores[~mask], 0.0)

    def test_orthonormal_rows_give_gram_matrix(self):
        cfg = M.ModelConfig(layers=1, hidden=4, heads=1, ffn=8, vocab=4,
                            max_positions=4, classes=2, dropout=0.0)
        h = np.eye(4, dtype=np.float32).reshape(1, 4, 4)
        eye = Tensor(np.eye(4, dtype=np.float32))
        scores = M.attention_scores(Tensor(h), eye, eye, cfg)[0].data[0]
        np.testing.assert_allclose(scores, np.eye(4), atol=1e-6)
        assert all(scores[i, i] >= scores[i].max() for i in range(4))

    def test_matches_two_step_oracle(self):
        rng = np.random.default_rng(9)
        h = rng.standard_normal((2, 5, 8)).astype(np.float32)
        wq = rng.standard_normal((8, 8)).astype(np.float32)
        wk = rng.standard_normal((8, 8)).astype(np.float32)
        scores = M.attention_scores(Tensor(h), Tensor(wq), Tensor(wk), CFG)
        q = h.astype(np.float64) @ wq.T.astype(np.float64)
        k = h.astype(np.float64) @ wk.T.astype(np.float64)
        for hh in range(CFG.heads):
            sl = slice(hh * CFG.d_head, (hh + 1) * CFG.d_head)
            expected = q[:, :, sl] @ np.swapaxes(k[:, :, sl], 1, 2)
            np.testing.assert_allclose(scores[hh].data, expected, atol=1e-5)


class TestHeadPermutation:
    def test_permuting_heads_permutes_scores_and_keeps_mha_output(self):
        cfg = M.ModelConfig(layers=1, hidden=8, heads=2, ffn=16, vocab=10,
                            max_positions=8, classes=3, dropout=0.0)
        rng = np.random.default_rng(10)
        params = M.init_params(cfg, rng)
        tokens, segments = batch(rng, cfg)
        base = run_forward(params, cfg, tokens, segments)

        dh = cfg.d_head
        perm = {k: v.copy() for k, v in params.items()}
        for name in ("layer0.wq", "layer0.wk", "layer0.wv"):
            w = perm[name]
            perm[name] = np.concatenate([w[dh:], w[:dh]], axis=0)
        for name in ("layer0.bq", "layer0.bk", "layer0.bv"):
            b = perm[name]
            perm[name] = np.concatenate([b[dh:], b[:dh]])
        # wo consumes the concatenated heads, so permute its input columns
        perm["layer0.wo"] = np.concatenate(
            [params["layer0.wo"][:, dh:], params["layer0.wo"][:, :dh]], axis=1)
        swapped = run_forward(perm, cfg, tokens, segments)

        b = tokens.shape[0]
        np.testing.assert_allclose(swapped.attention[0].data[:b],
                                   base.attention[0].data[b:], atol=1e-5)
        np.testing.assert_allclose(swapped.attention[0].data[b:],
                                   base.attention[0].data[:b], atol=1e-5)
        np.testing.assert_allclose(swapped.logits.data, base.logits.data,
                                   atol=1e-4)


class TestGradients:
    def test_full_model_finite_differences(self):
        rng = np.random.default_rng(11)
        params = {k: v.astype(np.float64)
                  for k, v in M.init_params(CFG, rng).items()}
        tokens, segments = batch(rng)
        labels = rng.integers(0, CFG.classes, size=2)
        onehot = np.zeros((2, CFG.classes))
        onehot[np.arange(2), labels] = 1.0

        def loss_fn(p):
            trace = run_forward(p, CFG, tokens, segments)
            log_sm = T.log_softmax_rows(trace.logits)
            return float(-(log_sm.data * onehot).sum() / 2)

        leaves, _ = M.build_leaves(params, None, trainable=True)
        with GradTape() as tape:
            trace = M.forward(leaves, CFG, tokens, segments)
            log_sm = T.log_softmax_rows(trace.logits)
            loss = T.scale(T.sum_all(T.mul(log_sm, Tensor(onehot))), -0.5)
        grads = tape.gradients(loss)
        checked = 0
        for name in ("layer0.wq", "layer1.w2", "emb.word", "head.w",
                     "layer0.ln1_g", "layer1.b1"):
            fd = fd_gradient(loss_fn, params, name)
            assert rel_norm_error(grads.wrt(leaves[name]), fd) < 1e-3, name
            checked += 1
        assert checked == 6

    def test_gradient_lands_on_dequantized_leaf(self):
        rng = np.random.default_rng(12)
        params = M.init_params(CFG, rng)
        tokens, segments = batch(rng)
        plan = M.plan_from_notation("2-2-8")
        with GradTape() as tape:
            leaves, qinfo = M.build_leaves(params, plan, trainable=True)
            trace = M.forward(leaves, CFG, tokens, segments, plan=plan)
            loss = T.mean_all(T.mul(trace.logits, trace.logits))
        grads = tape.gradients(loss)
        assert "layer0.wq" in qinfo
        assert np.abs(grads.wrt(leaves["layer0.wq"])).sum() > 0
