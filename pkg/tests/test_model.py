import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomask import tensor as T
from geomask.model import (
    CheckpointError,
    Model,
    ModelConfig,
    agma_attention,
    feature_jitter,
    forward,
    init_params,
    load_checkpoint,
    mask_count,
    param_shapes,
    save_checkpoint,
    select_mask,
    trainable,
)

SMALL = dict(channels=16, heads=2, blocks=2, groups=8, group_size=6)


def np_layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def reference_attention(q_in, kv_in, params, prefix, heads, eps=1e-5):
    """Plain numpy multi-head attention over exactly the rows in ``kv_in``."""
    P = lambda k: params[f"{prefix}.{k}"].data  # noqa: E731
    qn = np_layer_norm(q_in, P("ln_q.g"), P("ln_q.b"), eps)
    kvn = np_layer_norm(kv_in, P("ln_kv.g"), P("ln_kv.b"), eps) if f"{prefix}.ln_kv.g" in params \
        else np_layer_norm(kv_in, P("ln_q.g"), P("ln_q.b"), eps)
    Q, K, V = qn @ P("wq") + P("bq"), kvn @ P("wk") + P("bk"), kvn @ P("wv") + P("bv")
    c = Q.shape[1]
    d = c // heads
    out = np.zeros_like(Q)
    for h in range(heads):
        s = slice(h * d, (h + 1) * d)
        logits = Q[:, s] @ K[:, s].T / np.sqrt(d)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        out[:, s] = (w / w.sum(axis=1, keepdims=True)) @ V[:, s]
    return q_in + out @ P("wo") + P("bo")


def random_params(seed):
    # non-trivial gains and biases so the oracle comparison exercises them
    params = init_params(ModelConfig(**SMALL), seed)
    rng = np.random.default_rng(seed + 100)
    for p in params.values():
        if p.ndim == 1:
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    return params


class TestMaskedAttention:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_equals_attention_over_complement(self, seed, cross):
        rng = np.random.default_rng(seed)
        params = random_params(int(rng.integers(1000)))
        g = int(rng.integers(2, 12))
        x = rng.standard_normal((g, 16))
        kv = rng.standard_normal((g, 16)) if cross else x
        mask = rng.random(g) < 0.5
        mask[rng.integers(g)] = False
        prefix = "gqd.0.cross" if cross else "lge.0.attn"
        got = agma_attention(T.Tensor(x), T.Tensor(kv) if cross else None, mask, params, prefix, 2).data
        want = reference_attention(x, kv[~mask], params, prefix, 2)
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_masked_tokens_are_still_queries(self):
        params = random_params(0)
        x = np.random.default_rng(1).standard_normal((5, 16))
        mask = np.array([True, False, False, True, False])
        out = agma_attention(T.Tensor(x), None, mask, params, "lge.0.attn", 2).data
        assert out.shape == (5, 16)
        assert not np.allclose(out[0], x[0])


class TestMaskSelection:
    def test_count_over_grid(self):
        for g in range(1, 200):
            for rho in np.linspace(0, 0.95, 39):
                plan = select_mask(np.arange(g, dtype=float), rho, np.random.default_rng(g))
                assert plan.masked.sum() == mask_count(g, rho)

    def test_split_between_pools(self):
        vg = np.random.default_rng(0).random(128)
        plan = select_mask(vg, 0.4, np.random.default_rng(1))
        high = set(np.argsort(vg)[64:].tolist())
        n_high = sum(i in high for i in np.flatnonzero(plan.masked))
        assert plan.masked.sum() == 51 and n_high == 26

    def test_ties_by_index(self):
        plan = select_mask(np.zeros(6), 0.0, np.random.default_rng(0))
        assert plan.low_pool.tolist() == [0, 1, 2] and plan.high_pool.tolist() == [3, 4, 5]

    def test_rho_range(self):
        with pytest.raises(ValueError):
            select_mask(np.zeros(4), 1.0, np.random.default_rng(0))


def _inputs(seed=0, g=8, k=6):
    rng = np.random.default_rng(seed)
    rel = rng.standard_normal((g, k, 3))
    centers = rng.standard_normal((g, 3))
    return rel, centers, rng.random(g)


class TestForward:
    def test_rho_zero_ignores_mask_rng(self):
        cfg = ModelConfig(**SMALL, rho=0.0)
        params = init_params(cfg, 0)
        rel, centers, vg = _inputs()
        outs = [forward(params, cfg, rel, centers, vg, train=True, mask_rng=np.random.default_rng(s),
                        jitter_rng=np.random.default_rng(9)).reconstructed.data.tobytes() for s in range(4)]
        assert len(set(outs)) == 1

    def test_eval_is_deterministic_and_unmasked(self):
        cfg = ModelConfig(**SMALL)
        params = init_params(cfg, 0)
        rel, centers, _ = _inputs()
        a = forward(params, cfg, rel, centers)
        b = forward(params, cfg, rel, centers)
        assert a.plan is None
        assert a.reconstructed.data.tobytes() == b.reconstructed.data.tobytes()

    def test_training_needs_rngs(self):
        cfg = ModelConfig(**SMALL)
        rel, centers, vg = _inputs()
        with pytest.raises(ValueError):
            forward(init_params(cfg, 0), cfg, rel, centers, vg, train=True)

    def test_no_agma_variant_never_masks(self):
        cfg = ModelConfig(**SMALL, use_agma=False)
        rel, centers, vg = _inputs()
        out = forward(init_params(cfg, 0), cfg, rel, centers, vg, train=True,
                      mask_rng=np.random.default_rng(0), jitter_rng=np.random.default_rng(0))
        assert out.plan is None

    def test_full_model_gradient(self):
        cfg = ModelConfig(**SMALL, train_encoder=True, gamma=0.0)
        params = init_params(cfg, 3)
        rel, centers, vg = _inputs(4)
        plan = select_mask(vg, 0.4, np.random.default_rng(0))
        f = lambda: forward(params, cfg, rel, centers, train=True, plan=plan).loss  # noqa: E731
        assert T.gradcheck(f, list(params.values()), per_param=3) < 1e-3


class TestJitter:
    def test_scale(self):
        tok = T.Tensor(np.full((2000, 16), 0.25))  # norm 1 per token
        noisy = feature_jitter(tok, 8.0, np.random.default_rng(0)).data
        assert np.std(noisy - tok.data) == pytest.approx(0.5, rel=0.02)

    def test_gamma_zero_is_identity(self):
        tok = T.Tensor(np.ones((3, 4)))
        assert feature_jitter(tok, 0.0, np.random.default_rng(0)) is tok

    def test_noise_has_no_gradient(self):
        tok = T.Tensor(np.ones((3, 4)), requires_grad=True)
        T.backward(T.sum(feature_jitter(tok, 5.0, np.random.default_rng(0))))
        np.testing.assert_array_equal(tok.grad, 1.0)


class TestParams:
    def test_encoder_frozen_by_default(self):
        params = init_params(ModelConfig(**SMALL), 0)
        frozen = {n for n, p in params.items() if not p.requires_grad}
        assert frozen == {n for n in params if n.startswith("enc.")}
        assert len(trainable(params)) == len(params) - len(frozen)

    def test_shapes(self):
        shapes = param_shapes(ModelConfig(**SMALL))
        assert shapes["lge.1.ffn.w1"] == (16, 64)
        assert "gqd.0.cross.ln_kv.g" in shapes and "lge.0.attn.ln_kv.g" not in shapes

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(channels=10, heads=3)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = ModelConfig(**SMALL)
        model = Model(cfg, init_params(cfg, 0), {"score_range": [0.1, 2.0]})
        opt = T.AdamW(trainable(model.params), lr=1e-3)
        for p in opt.params:
            p.grad = np.ones(p.shape)
        opt.step()
        path = tmp_path / "m.bin"
        save_checkpoint(path, model, opt)
        back, opt2 = load_checkpoint(path, with_optimizer=True)
        assert back.config == cfg and back.extra == model.extra
        for n in model.params:
            assert back.params[n].data.tobytes() == model.params[n].data.tobytes()
        assert opt2.step_count == 1
        for a, b in zip(opt.m + opt.v, opt2.m + opt2.v):
            assert a.tobytes() == b.tobytes()
        save_checkpoint(tmp_path / "again.bin", back, opt2)
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()

    def test_truncated(self, tmp_path):
        cfg = ModelConfig(**SMALL)
        path = tmp_path / "m.bin"
        save_checkpoint(path, Model(cfg, init_params(cfg, 0)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"NOTACKPT" + bytes(40))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        cfg = ModelConfig(**SMALL)
        params = init_params(cfg, 0)
        params["lge.0.attn.wq"] = T.Tensor(np.zeros((16, 8)))
        path = tmp_path / "m.bin"
        save_checkpoint(path, Model(cfg, params))
        with pytest.raises(CheckpointError, match="lge.0.attn.wq"):
            load_checkpoint(path)


class TestWorkedExamples:
    def test_ten_tokens_four_masked_two_each_side(self):
        vg = np.arange(10, dtype=float)
        plan = select_mask(vg, 0.4, np.random.default_rng(0))
        idx = np.flatnonzero(plan.masked)
        assert len(idx) == 4 and (idx >= 5).sum() == 2 and (idx < 5).sum() == 2

    def test_count_grid_up_to_256(self):
        from fractions import Fraction
        for g in range(4, 257):
            for rho in ("0", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"):
                exact = Fraction(rho) * g
                want = int(exact + Fraction(1, 2))  # half up
                assert select_mask(np.zeros(g), float(rho), np.random.default_rng(0)).masked.sum() == want

    def test_single_unmasked_key_gives_its_value(self):
        params = random_params(1)
        x = np.random.default_rng(2).standard_normal((4, 16))
        mask = np.array([True, True, False, True])
        out = agma_attention(T.Tensor(x), None, mask, params, "lge.0.attn", 2).data
        P = lambda k: params[f"lge.0.attn.{k}"].data  # noqa: E731
        xn = np_layer_norm(x, P("ln_q.g"), P("ln_q.b"), 1e-5)
        v2 = xn[2] @ P("wv") + P("bv")
        np.testing.assert_allclose(out, x + (v2 @ P("wo") + P("bo"))[None, :], atol=1e-12)

    def test_zero_norm_token_unperturbed(self):
        tok = np.ones((3, 4))
        tok[1] = 0.0
        out = feature_jitter(T.Tensor(tok), 20.0, np.random.default_rng(0)).data
        np.testing.assert_array_equal(out[1], 0.0)

    def test_residual_identity_path(self):
        from geomask.model import lge_forward
        cfg = ModelConfig(**SMALL)
        params = init_params(cfg, 0)
        for name, p in params.items():
            if name.startswith("lge.") and (name.endswith(("attn.wo", "attn.bo", "ffn.w2", "ffn.b2"))):
                p.data = np.zeros(p.shape)
        rng = np.random.default_rng(1)
        tok, pos = rng.standard_normal((8, 16)), rng.standard_normal((8, 16))
        out = lge_forward(T.Tensor(tok), T.Tensor(pos), None, params, cfg).data
        np.testing.assert_allclose(out, np_layer_norm(tok + pos, 1.0, 0.0, 1e-5), atol=1e-12)

    def test_uniform_cross_attention_is_mean_of_values(self):
        params = random_params(3)
        for k in ("wq", "bq", "wk", "bk"):
            params[f"gqd.0.cross.{k}"].data = np.zeros(params[f"gqd.0.cross.{k}"].shape)
        rng = np.random.default_rng(4)
        q, kv = rng.standard_normal((5, 16)), rng.standard_normal((7, 16))
        out = agma_attention(T.Tensor(q), T.Tensor(kv), None, params, "gqd.0.cross", 2).data
        P = lambda k: params[f"gqd.0.cross.{k}"].data  # noqa: E731
        V = np_layer_norm(kv, P("ln_kv.g"), P("ln_kv.b"), 1e-5) @ P("wv") + P("bv")
        ctx = V.mean(axis=0) @ P("wo") + P("bo")
        np.testing.assert_allclose(out - q, np.broadcast_to(ctx, q.shape), atol=1e-12)

    def test_loss_hand_evaluation(self):
        from geomask.model import reconstruction_loss
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal((9, 16)), rng.standard_normal((9, 16))
        want = sum(np.sqrt(sum((a[i, j] - b[i, j]) ** 2 for j in range(16))) for i in range(9)) / 9
        assert abs(reconstruction_loss(T.Tensor(a), T.Tensor(b)).item() - want) < 1e-12

    def test_permutation_equivariance(self):
        from geomask.model import lge_forward
        cfg = ModelConfig(**SMALL)
        params = init_params(cfg, 0)
        rng = np.random.default_rng(6)
        tok, pos = rng.standard_normal((8, 16)), rng.standard_normal((8, 16))
        perm = rng.permutation(8)
        a = lge_forward(T.Tensor(tok), T.Tensor(pos), None, params, cfg).data
        b = lge_forward(T.Tensor(tok[perm]), T.Tensor(pos[perm]), None, params, cfg).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)
