import math

import numpy as np
import pytest

from groundnav import gridnav, nets
from groundnav.autodiff import Graph, Tensor
from groundnav.nets import (
    AttentionState,
    ModelConfig,
    apply_attention,
    attention_step,
    compute_attention,
    concat_fusion,
    config_digest,
    count_report,
    encode_image,
    encode_instruction,
    init_params,
    initial_attention_state,
    load_params,
    model_step,
    paper_config,
    param_shapes,
    policy_forward,
    save_params,
    token_ids,
)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def gru_scalar_oracle(wz, bz, wr, br, wh, bh, xs):
    """Pure-Python GRU: h = (1-z)*h + z*tanh(Wh.[r*h, x] + bh)."""
    l = len(bz)

    def affine(w, b, vec):
        return [sum(w[i][j] * vec[j] for j in range(len(vec))) + b[i]
                for i in range(l)]

    h = [0.0] * l
    for x in xs:
        hx = list(h) + list(x)
        z = [_sigmoid(v) for v in affine(wz, bz, hx)]
        r = [_sigmoid(v) for v in affine(wr, br, hx)]
        rhx = [r[i] * h[i] for i in range(l)] + list(x)
        hbar = [math.tanh(v) for v in affine(wh, bh, rhx)]
        h = [(1 - z[i]) * h[i] + z[i] * hbar[i] for i in range(l)]
    return h


def lstm_scalar_oracle(weights, h, c, x, forget_sees_input=True):
    """Pure-Python gate arithmetic for one cell update."""
    wf, bf, wi, bi, wc, bc, wo, bo = weights
    d = len(bf)
    hx = list(h) + list(x)
    f_in = hx if forget_sees_input else list(h)

    def affine(w, b, vec):
        return [sum(w[i][j] * vec[j] for j in range(len(vec))) + b[i]
                for i in range(d)]

    f = [_sigmoid(v) for v in affine(wf, bf, f_in)]
    i_ = [_sigmoid(v) for v in affine(wi, bi, hx)]
    cb = [math.tanh(v) for v in affine(wc, bc, hx)]
    c_new = [f[k] * c[k] + i_[k] * cb[k] for k in range(d)]
    o = [_sigmoid(v) for v in affine(wo, bo, hx)]
    h_new = [o[k] * math.tanh(c_new[k]) for k in range(d)]
    return h_new, c_new


@pytest.fixture(scope="module")
def corpus():
    return gridnav.build_corpus(7)


@pytest.fixture(scope="module")
def vocab(corpus):
    return nets.build_vocab(corpus.train + corpus.test)


@pytest.fixture(scope="module")
def small_config(vocab):
    return ModelConfig(vocab=vocab, d=8, l=8, embed_dim=4, hidden=8,
                       render_h=27, render_w=36,
                       conv_specs=((4, 5, 3), (6, 4, 2), (8, 3, 1)))


class TestModelConfig:
    def test_paper_feature_geometry(self, vocab):
        config = paper_config(vocab)
        assert (config.d, config.feat_h, config.feat_w) == (64, 8, 17)
        assert config.state_len == 8 * 17 == 136
        assert config.l == 256

    def test_last_conv_must_match_d(self, vocab):
        with pytest.raises(ValueError):
            ModelConfig(vocab=vocab, d=16,
                        conv_specs=((8, 5, 3), (12, 4, 2), (10, 3, 1)))

    def test_bad_enums(self, vocab):
        with pytest.raises(ValueError):
            ModelConfig(vocab=vocab, attention_source="transformer")
        with pytest.raises(ValueError):
            ModelConfig(vocab=vocab, application="bilinear")

    def test_vocab_reserves_unk(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab=("go", "to"))


class TestInitParams:
    def test_same_seed_bit_identical(self, small_config):
        a = init_params(small_config, 5)
        b = init_params(small_config, 5)
        for name in a.names():
            assert (a[name].data == b[name].data).all()

    def test_different_seed_differs(self, small_config):
        a = init_params(small_config, 5)
        b = init_params(small_config, 6)
        assert (a["conv1_w"].data != b["conv1_w"].data).any()

    def test_forget_gate_bias_plus_one(self, small_config):
        params = init_params(small_config, 0)
        assert (params["lstm_bf"].data == 1.0).all()

    def test_other_biases_zero(self, small_config):
        params = init_params(small_config, 0)
        assert (params["conv1_b"].data == 0.0).all()
        assert (params["gru_bz"].data == 0.0).all()

    def test_shapes_match_config(self, small_config):
        params = init_params(small_config, 0)
        for name, shape in param_shapes(small_config).items():
            assert params[name].data.shape == shape

    def test_bound_respected(self, small_config):
        params = init_params(small_config, 0)
        w = params["trunk_w"].data
        bound = 1.0 / math.sqrt(w.shape[1])
        assert np.abs(w).max() <= bound


class TestEncodeImage:
    def test_zero_image_zero_features(self, small_config):
        params = init_params(small_config, 1)
        g = Graph()
        out = encode_image(g, params, small_config,
                           Tensor(np.zeros((3, 27, 36))))
        assert out.shape == (8, 1, 2)
        assert (out.data == 0.0).all()

    def test_paper_output_shape(self, vocab):
        config = paper_config(vocab)
        params = init_params(config, 0)
        g = Graph()
        out = encode_image(g, params, config,
                           Tensor(np.random.default_rng(0)
                                  .uniform(0, 1, (3, 156, 300))))
        assert out.shape == (64, 8, 17)

    def test_shape_mismatch_rejected(self, small_config):
        params = init_params(small_config, 1)
        with pytest.raises(ValueError):
            encode_image(Graph(), params, small_config,
                         Tensor(np.zeros((3, 48, 64))))

    def test_first_layer_kernel_gradient(self, small_config):
        params = init_params(small_config, 2)
        image = Tensor(np.random.default_rng(3).uniform(0, 1, (3, 27, 36)))

        def loss_value():
            g = Graph()
            return g.sum_all(g.tanh(g.flatten(
                encode_image(g, params, small_config, image)))).item()

        g = Graph()
        loss = g.sum_all(g.tanh(g.flatten(
            encode_image(g, params, small_config, image))))
        params.zero_grads()
        g.backward(loss)
        w = params["conv1_w"]
        flat = w.data.reshape(-1)
        grads = w.grad.reshape(-1)
        rng = np.random.default_rng(0)
        for idx in rng.choice(flat.size, size=8, replace=False):
            orig = flat[idx]
            flat[idx] = orig + 1e-5
            fp = loss_value()
            flat[idx] = orig - 1e-5
            fm = loss_value()
            flat[idx] = orig
            fd = (fp - fm) / 2e-5
            assert abs(grads[idx] - fd) / max(abs(fd), abs(grads[idx]), 1e-3) < 1e-4


class TestEncodeInstruction:
    def test_output_length(self, small_config):
        params = init_params(small_config, 0)
        out = encode_instruction(Graph(), params, small_config,
                                 ("go", "to", "the", "red", "pillar"))
        assert out.shape == (small_config.l,)

    def test_zero_weights_zero_vector(self, small_config):
        params = init_params(small_config, 0)
        for name in params.names():
            if name.startswith("gru") or name == "embed":
                params[name].data[...] = 0.0
        out = encode_instruction(Graph(), params, small_config, ("go", "to"))
        assert (out.data == 0.0).all()

    def test_empty_sequence_rejected(self, small_config):
        params = init_params(small_config, 0)
        with pytest.raises(ValueError):
            encode_instruction(Graph(), params, small_config, ())

    def test_unknown_token_maps_to_unk(self, small_config):
        ids = token_ids(small_config, ("go", "xyzzy"))
        assert ids[1] == 0
        params = init_params(small_config, 1)
        out = encode_instruction(Graph(), params, small_config,
                                 ("go", "xyzzy"))
        assert np.isfinite(out.data).all()

    def test_matches_scalar_oracle(self, vocab):
        config = ModelConfig(vocab=vocab, d=8, l=2, embed_dim=2, hidden=4,
                             render_h=27, render_w=36,
                             conv_specs=((4, 5, 3), (6, 4, 2), (8, 3, 1)))
        rng = np.random.default_rng(9)
        params = init_params(config, 9)
        tokens = ("go", "to", "the", "red", "pillar")
        ids = token_ids(config, tokens)
        xs = [params["embed"].data[i].tolist() for i in ids]
        expected = gru_scalar_oracle(
            params["gru_wz"].data.tolist(), params["gru_bz"].data.tolist(),
            params["gru_wr"].data.tolist(), params["gru_br"].data.tolist(),
            params["gru_wh"].data.tolist(), params["gru_bh"].data.tolist(),
            xs)
        out = encode_instruction(Graph(), params, config, tokens)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_repeated_token_changes_encoding(self, vocab):
        config = ModelConfig(vocab=vocab, d=8, l=2, embed_dim=2, hidden=4,
                             render_h=27, render_w=36,
                             conv_specs=((4, 5, 3), (6, 4, 2), (8, 3, 1)))
        params = init_params(config, 4)
        one = encode_instruction(Graph(), params, config, ("pillar",))
        two = encode_instruction(Graph(), params, config, ("pillar", "pillar"))
        assert (one.data != two.data).any()


class TestAttentionStep:
    def _params(self, config, seed=0):
        return init_params(config, seed)

    def test_pure_carry(self, small_config):
        params = self._params(small_config)
        params["lstm_bf"].data[...] = 500.0   # sigmoid saturates to exactly 1
        params["lstm_bi"].data[...] = -500.0  # and to exactly 0
        rng = np.random.default_rng(1)
        prev = AttentionState(h=Tensor(rng.uniform(-1, 1, 8)),
                              C=Tensor(rng.uniform(-1, 1, 8)))
        x = Tensor(rng.uniform(-1, 1, small_config.lstm_input_len))
        out = attention_step(Graph(), params, small_config, prev, x)
        np.testing.assert_array_equal(out.C.data, prev.C.data)

    def test_pure_write(self, small_config):
        params = self._params(small_config)
        params["lstm_bf"].data[...] = -500.0
        params["lstm_bi"].data[...] = 500.0
        rng = np.random.default_rng(2)
        prev = AttentionState(h=Tensor(rng.uniform(-1, 1, 8)),
                              C=Tensor(rng.uniform(-1, 1, 8)))
        x = Tensor(rng.uniform(-1, 1, small_config.lstm_input_len))
        g = Graph()
        out = attention_step(g, params, small_config, prev, x)
        hx = np.concatenate([prev.h.data, x.data])
        cbar = np.tanh(params["lstm_wc"].data @ hx + params["lstm_bc"].data)
        np.testing.assert_allclose(out.C.data, cbar, atol=1e-12)

    def test_matches_scalar_oracle(self, vocab):
        config = ModelConfig(vocab=vocab, d=2, l=2, embed_dim=2, hidden=4,
                             render_h=27, render_w=36,
                             conv_specs=((4, 5, 3), (6, 4, 2), (2, 3, 1)))
        rng = np.random.default_rng(5)
        params = init_params(config, 5)
        prev = AttentionState(h=Tensor(rng.uniform(-1, 1, 2)),
                              C=Tensor(rng.uniform(-1, 1, 2)))
        x = Tensor(rng.uniform(-1, 1, config.lstm_input_len))
        out = attention_step(Graph(), params, config, prev, x)
        weights = tuple(params[n].data.tolist() for n in (
            "lstm_wf", "lstm_bf", "lstm_wi", "lstm_bi",
            "lstm_wc", "lstm_bc", "lstm_wo", "lstm_bo"))
        h_exp, c_exp = lstm_scalar_oracle(
            weights, prev.h.data.tolist(), prev.C.data.tolist(),
            x.data.tolist())
        np.testing.assert_allclose(out.h.data, h_exp, atol=1e-12)
        np.testing.assert_allclose(out.C.data, c_exp, atol=1e-12)

    def test_literal_forget_gate_variant(self, vocab):
        config = ModelConfig(vocab=vocab, d=2, l=2, embed_dim=2, hidden=4,
                             render_h=27, render_w=36,
                             conv_specs=((4, 5, 3), (6, 4, 2), (2, 3, 1)),
                             forget_gate_sees_input=False)
        params = init_params(config, 6)
        assert params["lstm_wf"].data.shape == (2, 2)
        rng = np.random.default_rng(6)
        prev = AttentionState(h=Tensor(rng.uniform(-1, 1, 2)),
                              C=Tensor(rng.uniform(-1, 1, 2)))
        x = Tensor(rng.uniform(-1, 1, config.lstm_input_len))
        out = attention_step(Graph(), params, config, prev, x)
        weights = tuple(params[n].data.tolist() for n in (
            "lstm_wf", "lstm_bf", "lstm_wi", "lstm_bi",
            "lstm_wc", "lstm_bc", "lstm_wo", "lstm_bo"))
        h_exp, c_exp = lstm_scalar_oracle(
            weights, prev.h.data.tolist(), prev.C.data.tolist(),
            x.data.tolist(), forget_sees_input=False)
        np.testing.assert_allclose(out.h.data, h_exp, atol=1e-12)
        np.testing.assert_allclose(out.C.data, c_exp, atol=1e-12)

    def test_dimension_mismatch(self, small_config):
        params = self._params(small_config)
        prev = initial_attention_state(small_config)
        with pytest.raises(ValueError):
            attention_step(Graph(), params, small_config, prev,
                           Tensor(np.zeros(3)))


class TestApplyAttention:
    def test_conv1d_one_hot(self, small_config):
        params = init_params(small_config, 1)
        rng = np.random.default_rng(1)
        features = Tensor(rng.uniform(-1, 1, (8, 1, 2)))
        att = np.zeros(8)
        att[3] = 1.0
        out = apply_attention(Graph(), "conv1d", Tensor(att), features, params)
        np.testing.assert_allclose(out.data, features.data[3].reshape(-1),
                                   atol=1e-14)

    def test_conv1d_state_length(self, small_config):
        params = init_params(small_config, 1)
        rng = np.random.default_rng(2)
        features = Tensor(rng.uniform(-1, 1, (8, 1, 2)))
        out = apply_attention(Graph(), "conv1d",
                              Tensor(rng.uniform(0, 1, 8)), features, params)
        assert out.shape == (small_config.state_len,)

    def test_hadamard_ones_is_fc_of_features(self, vocab):
        config = ModelConfig(vocab=vocab, d=8, l=8, embed_dim=4, hidden=8,
                             render_h=27, render_w=36,
                             conv_specs=((4, 5, 3), (6, 4, 2), (8, 3, 1)),
                             application="hadamard_fc")
        params = init_params(config, 3)
        rng = np.random.default_rng(3)
        features = Tensor(rng.uniform(-1, 1, (8, 1, 2)))
        out = apply_attention(Graph(), "hadamard_fc", Tensor(np.ones(8)),
                              features, params)
        expected = params["had_w"].data @ features.data.reshape(-1) \
            + params["had_b"].data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        assert out.shape == (config.state_len,)

    def test_unknown_application(self, small_config):
        params = init_params(small_config, 1)
        with pytest.raises(ValueError):
            apply_attention(Graph(), "bilinear", Tensor(np.ones(8)),
                            Tensor(np.zeros((8, 1, 2))), params)

    def test_paper_state_length(self, vocab):
        assert paper_config(vocab).state_len == 136


class TestComputeAttention:
    def test_static_identical_across_steps(self, vocab):
        config = ModelConfig(vocab=vocab, d=8, l=8, embed_dim=4, hidden=8,
                             render_h=27, render_w=36,
                             conv_specs=((4, 5, 3), (6, 4, 2), (8, 3, 1)),
                             attention_source="static_instruction")
        params = init_params(config, 7)
        rng = np.random.default_rng(7)
        g = Graph()
        x_l = Tensor(rng.uniform(-1, 1, 8))
        prev = initial_attention_state(config)
        vectors = []
        for _ in range(5):
            features = Tensor(rng.uniform(-1, 1, (8, 1, 2)))
            att, prev = compute_attention(g, "static_instruction", params,
                                          config, x_l, features, prev)
            vectors.append(att.data.tobytes())
        assert len(set(vectors)) == 1
        att_values = np.frombuffer(vectors[0])
        assert ((att_values > 0) & (att_values < 1)).all()

    def test_cellstate_differs_across_steps(self, small_config):
        params = init_params(small_config, 8)
        rng = np.random.default_rng(8)
        g = Graph()
        x_l = Tensor(rng.uniform(-1, 1, 8))
        prev = initial_attention_state(small_config)
        vectors = []
        for _ in range(3):
            features = Tensor(rng.uniform(-1, 1, (8, 1, 2)))
            att, prev = compute_attention(g, "lstm_cellstate", params,
                                          small_config, x_l, features, prev)
            vectors.append(att.data.copy())
        assert (vectors[1] != vectors[2]).any()

    def test_cellstate_two_step_oracle(self, vocab):
        config = ModelConfig(vocab=vocab, d=2, l=2, embed_dim=2, hidden=4,
                             render_h=27, render_w=36,
                             conv_specs=((4, 5, 3), (6, 4, 2), (2, 3, 1)))
        params = init_params(config, 10)
        rng = np.random.default_rng(10)
        g = Graph()
        x_l = rng.uniform(-1, 1, 2)
        feats = [rng.uniform(-1, 1, (2, 1, 2)) for _ in range(2)]
        weights = tuple(params[n].data.tolist() for n in (
            "lstm_wf", "lstm_bf", "lstm_wi", "lstm_bi",
            "lstm_wc", "lstm_bc", "lstm_wo", "lstm_bo"))

        h, c = [0.0, 0.0], [1.0, 1.0]
        prev = initial_attention_state(config)
        for t in range(2):
            att, prev = compute_attention(g, "lstm_cellstate", params, config,
                                          Tensor(x_l), Tensor(feats[t]), prev)
            np.testing.assert_allclose(att.data, c, atol=1e-12)
            # oracle: apply current attention, then update the cell
            state = [sum(c[k] * feats[t][k, i, j] for k in range(2))
                     for i in range(1) for j in range(2)]
            x_t = state + list(x_l)
            h, c = lstm_scalar_oracle(weights, h, c, x_t)
        np.testing.assert_allclose(prev.C.data, c, atol=1e-12)

    def test_lstm_output_source_uses_h(self, small_config):
        params = init_params(small_config, 11)
        rng = np.random.default_rng(11)
        config = ModelConfig(**{**small_config.__dict__,
                                "attention_source": "lstm_output"})
        g = Graph()
        x_l = Tensor(rng.uniform(-1, 1, 8))
        features = Tensor(rng.uniform(-1, 1, (8, 1, 2)))
        prev = initial_attention_state(config)
        att, new = compute_attention(g, "lstm_output", params, config, x_l,
                                     features, prev)
        np.testing.assert_array_equal(att.data, prev.h.data)
        assert new is not prev

    def test_missing_prev_state_rejected(self, small_config):
        params = init_params(small_config, 0)
        with pytest.raises(ValueError):
            compute_attention(Graph(), "lstm_cellstate", params, small_config,
                              Tensor(np.zeros(8)), Tensor(np.zeros((8, 1, 2))),
                              None)


class TestConcatFusion:
    def _config(self, vocab):
        return ModelConfig(vocab=vocab, d=8, l=8, embed_dim=4, hidden=8,
                           render_h=27, render_w=36,
                           conv_specs=((4, 5, 3), (6, 4, 2), (8, 3, 1)),
                           fusion="concat")

    def test_zero_inputs_zero_state(self, vocab):
        config = self._config(vocab)
        params = init_params(config, 0)
        params["cat_b"].data[...] = 0.0
        out = concat_fusion(Graph(), params, Tensor(np.zeros(8)),
                            Tensor(np.zeros((8, 1, 2))))
        assert (out.data == 0.0).all()

    def test_output_length_matches_conv1d_state(self, vocab):
        config = self._config(vocab)
        params = init_params(config, 1)
        rng = np.random.default_rng(1)
        out = concat_fusion(Graph(), params, Tensor(rng.uniform(-1, 1, 8)),
                            Tensor(rng.uniform(-1, 1, (8, 1, 2))))
        assert out.shape == (config.state_len,)

    def test_fc_gradient(self, vocab):
        config = self._config(vocab)
        params = init_params(config, 2)
        rng = np.random.default_rng(2)
        x_l = Tensor(rng.uniform(-1, 1, 8))
        features = Tensor(rng.uniform(-1, 1, (8, 1, 2)))

        def loss_value():
            g = Graph()
            return g.sum_all(concat_fusion(g, params, x_l, features)).item()

        g = Graph()
        params.zero_grads()
        g.backward(g.sum_all(concat_fusion(g, params, x_l, features)))
        w = params["cat_w"]
        flat = w.data.reshape(-1)
        grads = w.grad.reshape(-1)
        for idx in np.random.default_rng(0).choice(flat.size, 6, replace=False):
            orig = flat[idx]
            flat[idx] = orig + 1e-5
            fp = loss_value()
            flat[idx] = orig - 1e-5
            fm = loss_value()
            flat[idx] = orig
            fd = (fp - fm) / 2e-5
            assert abs(grads[idx] - fd) / max(abs(fd), abs(grads[idx]), 1e-3) < 1e-4


class TestPolicyHeads:
    def test_zero_weights_uniform_and_zero_value(self, small_config):
        params = init_params(small_config, 0)
        for name in ("trunk_w", "trunk_b", "policy_w", "policy_b",
                     "value_w", "value_b"):
            params[name].data[...] = 0.0
        probs, value = policy_forward(Graph(), params,
                                      Tensor(np.ones(small_config.state_len)))
        np.testing.assert_allclose(probs.data, [1 / 3] * 3, atol=1e-15)
        assert value.item() == 0.0

    def test_probs_sum_to_one(self, small_config):
        params = init_params(small_config, 3)
        rng = np.random.default_rng(3)
        for _ in range(20):
            probs, _ = policy_forward(
                Graph(), params,
                Tensor(rng.uniform(-2, 2, small_config.state_len)))
            assert abs(probs.data.sum() - 1.0) < 1e-9

    def test_value_head_gradient(self, small_config):
        params = init_params(small_config, 4)
        rng = np.random.default_rng(4)
        state = Tensor(rng.uniform(-1, 1, small_config.state_len))

        def value_of():
            g = Graph()
            _, v = policy_forward(g, params, state)
            return v

        g = Graph()
        _, v = policy_forward(g, params, state)
        params.zero_grads()
        g.backward(v)
        w = params["value_w"]
        flat = w.data.reshape(-1)
        grads = w.grad.reshape(-1)
        for idx in range(min(6, flat.size)):
            orig = flat[idx]
            flat[idx] = orig + 1e-5
            fp = value_of().item()
            flat[idx] = orig - 1e-5
            fm = value_of().item()
            flat[idx] = orig
            fd = (fp - fm) / 2e-5
            assert abs(grads[idx] - fd) / max(abs(fd), abs(grads[idx]), 1e-3) < 1e-4


class TestParameterCounts:
    def test_conv1d_strictly_fewer_than_hadamard(self, vocab):
        base = dict(vocab=vocab, d=16, l=64, embed_dim=16, hidden=64,
                    render_h=48, render_w=64,
                    conv_specs=((8, 4, 4), (12, 3, 2), (16, 2, 1)))
        conv = ModelConfig(**base, application="conv1d")
        had = ModelConfig(**base, application="hadamard_fc")
        assert count_report(conv)["total"] < count_report(had)["total"]
        assert count_report(conv)["fusion_stage"] == 0
        assert count_report(had)["fusion_stage"] > 0

    def test_total_is_sum_of_shapes(self, small_config):
        params = init_params(small_config, 0)
        assert params.total_count() == count_report(small_config)["total"]


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, small_config, tmp_path):
        params = init_params(small_config, 12)
        path = tmp_path / "model.bin"
        save_params(path, params, small_config)
        loaded = load_params(path, small_config)
        for name in params.names():
            assert (loaded[name].data == params[name].data).all()

    def test_manifest_written(self, small_config, tmp_path):
        params = init_params(small_config, 0)
        path = tmp_path / "model.bin"
        save_params(path, params, small_config)
        manifest = (tmp_path / "model.bin.manifest.txt").read_text()
        lines = manifest.strip().splitlines()
        assert len(lines) == len(params.names())
        assert lines[0].split()[0] == "conv1_w"

    def test_digest_mismatch_rejected(self, small_config, vocab, tmp_path):
        params = init_params(small_config, 0)
        path = tmp_path / "model.bin"
        save_params(path, params, small_config)
        other = ModelConfig(**{**small_config.__dict__, "hidden": 16})
        with pytest.raises(ValueError):
            load_params(path, other)

    def test_not_a_checkpoint_rejected(self, small_config, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError):
            load_params(path, small_config)

    def test_digest_stable(self, small_config):
        assert config_digest(small_config) == config_digest(small_config)
        other = ModelConfig(**{**small_config.__dict__, "d": 4,
                               "conv_specs": ((4, 5, 3), (6, 4, 2), (4, 3, 1))})
        assert config_digest(other) != config_digest(small_config)


class TestModelStep:
    def test_recurrent_carry_with_saturated_gates(self, small_config, corpus):
        params = init_params(small_config, 13)
        params["lstm_bf"].data[...] = 500.0
        params["lstm_bi"].data[...] = -500.0
        ins = corpus.train[0]
        state, obs = gridnav.reset(0, "easy", ins, render_hw=(27, 36))
        g = Graph()
        x_l = encode_instruction(g, params, small_config, ins.tokens)
        att = initial_attention_state(small_config)
        c0 = att.C.data.copy()
        for t in range(4):
            out = model_step(g, params, small_config, x_l, obs.image, att)
            att = out.next_attention_state
            np.testing.assert_array_equal(att.C.data, c0)
            state, obs = gridnav.step(state, "turn_left")

    def test_attended_maps_exposed(self, small_config, corpus):
        params = init_params(small_config, 14)
        ins = corpus.train[1]
        _, obs = gridnav.reset(1, "easy", ins, render_hw=(27, 36))
        g = Graph()
        x_l = encode_instruction(g, params, small_config, ins.tokens)
        out = model_step(g, params, small_config, x_l, obs.image,
                         initial_attention_state(small_config))
        assert out.attended.shape == (1, 1, 2)
        assert out.probs.shape == (3,)
        assert out.value.shape == ()

    def test_concat_fusion_path(self, vocab, corpus):
        config = ModelConfig(vocab=vocab, d=8, l=8, embed_dim=4, hidden=8,
                             render_h=27, render_w=36,
                             conv_specs=((4, 5, 3), (6, 4, 2), (8, 3, 1)),
                             fusion="concat")
        params = init_params(config, 15)
        ins = corpus.train[2]
        _, obs = gridnav.reset(2, "easy", ins, render_hw=(27, 36))
        g = Graph()
        x_l = encode_instruction(g, params, config, ins.tokens)
        out = model_step(g, params, config, x_l, obs.image, None)
        assert out.attention is None
        assert out.state.shape == (config.state_len,)
