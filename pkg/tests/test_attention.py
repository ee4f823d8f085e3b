import dataclasses
import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose, assert_array_equal

from flatformer.model import (
    DispatcherAttention,
    EncoderBlock,
    Flatformer,
    FullAttention,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
    scaled_dot_attention,
)

from .oracles import gelu_exact, loop_batchnorm_train, loop_multi_head_cross, loop_softmax_attention


def tiny_config(**overrides) -> ModelConfig:
    defaults = dict(
        n_variates=3,
        lookback=16,
        horizon=4,
        patch_len=4,
        stride=4,
        d_model=8,
        n_heads=2,
        n_dispatchers=2,
        n_layers=1,
        d_ff=16,
        dropout=0.0,
        dtype="float64",
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def rand64(*shape, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=shape))


class TestScaledDotAttention:
    def test_single_key_broadcasts_value(self):
        q = rand64(3, 4, seed=1)
        k = rand64(1, 4, seed=2)
        v = rand64(1, 5, seed=3)
        out, attn = scaled_dot_attention(q, k, v)
        assert_allclose(attn.detach().numpy(), np.ones((3, 1)))
        assert_allclose(out.detach().numpy(), np.repeat(v.detach().numpy(), 3, axis=0), atol=1e-15)

    def test_identical_keys_average_values(self):
        q = rand64(2, 4, seed=4)
        k_row = rand64(1, 4, seed=5)
        k = torch.cat([k_row, k_row])
        v = rand64(2, 3, seed=6)
        out, attn = scaled_dot_attention(q, k, v)
        assert_allclose(attn.detach().numpy(), np.full((2, 2), 0.5), atol=1e-15)
        assert_allclose(out.detach().numpy(), np.tile(v.detach().numpy().mean(axis=0), (2, 1)), atol=1e-14)

    def test_matches_loop_oracle(self):
        q = rand64(3, 2, seed=7)
        k = rand64(4, 2, seed=8)
        v = rand64(4, 5, seed=9)
        out, attn = scaled_dot_attention(q, k, v)
        o_ref, a_ref = loop_softmax_attention(q.detach().numpy(), k.detach().numpy(), v.detach().numpy())
        assert_allclose(out.detach().numpy(), o_ref, atol=1e-12)
        assert_allclose(attn.detach().numpy(), a_ref, atol=1e-12)

    def test_rows_sum_to_one(self):
        out, attn = scaled_dot_attention(rand64(6, 3, seed=10), rand64(9, 3, seed=11), rand64(9, 3, seed=12))
        assert_allclose(attn.sum(dim=-1).detach().numpy(), 1.0, atol=1e-12)
        assert (attn.detach().numpy() >= 0).all()

    def test_kv_permutation_leaves_output(self):
        q, k, v = rand64(3, 4, seed=13), rand64(5, 4, seed=14), rand64(5, 2, seed=15)
        out, _ = scaled_dot_attention(q, k, v)
        perm = torch.as_tensor([3, 0, 4, 1, 2])
        out_p, _ = scaled_dot_attention(q, k[perm], v[perm])
        assert_allclose(out.detach().numpy(), out_p.detach().numpy(), atol=1e-12)

    def test_query_permutation_permutes_output(self):
        q, k, v = rand64(4, 3, seed=16), rand64(5, 3, seed=17), rand64(5, 2, seed=18)
        out, _ = scaled_dot_attention(q, k, v)
        perm = torch.as_tensor([2, 0, 3, 1])
        out_p, _ = scaled_dot_attention(q[perm], k, v)
        assert_allclose(out_p.detach().numpy(), out.detach().numpy()[perm.detach().numpy()], atol=1e-14)

    def test_large_scores_stay_finite(self):
        q = torch.full((2, 3), 1e4, dtype=torch.float64)
        k = torch.cat([torch.full((1, 3), 1e4, dtype=torch.float64), -torch.full((1, 3), 1e4, dtype=torch.float64)])
        out, attn = scaled_dot_attention(q, k, torch.ones(2, 2, dtype=torch.float64))
        assert torch.isfinite(out).all()
        assert torch.isfinite(attn).all()
        assert_allclose(attn.sum(dim=-1).detach().numpy(), 1.0, atol=1e-12)

    def test_nan_input_rejected(self):
        q = torch.full((1, 2), math.nan, dtype=torch.float64)
        with pytest.raises(ValueError, match="NaN"):
            scaled_dot_attention(q, rand64(2, 2), rand64(2, 2))


class TestFullAttention:
    def test_single_token(self):
        cfg = tiny_config(n_variates=1, lookback=4, patch_len=4, stride=4, n_heads=1, attention_mode="full")
        torch.manual_seed(0)
        attn = FullAttention(cfg)
        x = rand64(1, 1, 8, seed=20)
        out, weights = attn(x)
        assert_allclose(weights.detach().numpy(), np.ones((1, 1, 1)))
        expected = (x[0].detach().numpy() @ attn.w_v.detach().numpy()) @ attn.w_o.detach().numpy()
        assert_allclose(out[0].detach().numpy(), expected, atol=1e-12)

    def test_matches_composed_loop_oracle(self):
        cfg = tiny_config(n_variates=2, lookback=8, patch_len=4, stride=4, d_model=4, n_heads=1, attention_mode="full")
        torch.manual_seed(1)
        attn = FullAttention(cfg)
        x = rand64(1, 4, 4, seed=21)
        out, weights = attn(x)
        o_ref, w_ref = loop_multi_head_cross(
            x[0].detach().numpy(), x[0].detach().numpy(),
            attn.w_q.detach().numpy(), attn.w_k.detach().numpy(), attn.w_v.detach().numpy(),
            n_heads=1, w_o=attn.w_o.detach().numpy(),
        )
        assert_allclose(out[0].detach().numpy(), o_ref, atol=1e-10)
        assert_allclose(weights[0].detach().numpy(), w_ref, atol=1e-10)

    def test_token_permutation_equivariance(self):
        cfg = tiny_config(n_variates=2, lookback=8, d_model=8, n_heads=2, attention_mode="full")
        torch.manual_seed(2)
        attn = FullAttention(cfg)
        x = rand64(1, 6, 8, seed=22)
        out, _ = attn(x)
        perm = torch.randperm(6)
        out_p, _ = attn(x[:, perm])
        assert_allclose(out_p.detach().numpy(), out[:, perm].detach().numpy(), atol=1e-12)

    def test_within_variate_mask_blocks_cross_pairs(self):
        cfg = tiny_config(
            n_variates=2, lookback=8, patch_len=4, stride=4,
            attention_mode="full", within_variate_only=True,
        )
        torch.manual_seed(3)
        attn = FullAttention(cfg)
        x = rand64(2, cfg.n_tokens, 8, seed=23)
        _, weights = attn(x)
        w = weights.detach().numpy()  # [B, 4, 4]; tokens 0,1 variate 0; 2,3 variate 1
        assert_allclose(w[:, :2, 2:], 0.0, atol=1e-15)
        assert_allclose(w[:, 2:, :2], 0.0, atol=1e-15)
        assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


class TestDispatcherAttention:
    def test_single_token_aggregate(self):
        cfg = tiny_config(n_variates=1, lookback=4, patch_len=4, stride=4, n_heads=2)
        torch.manual_seed(4)
        attn = DispatcherAttention(cfg)
        x = rand64(1, 1, 8, seed=24)
        d = rand64(1, 2, 8, seed=25)
        updated, weights = attn.aggregate(d, x)
        assert_allclose(weights.detach().numpy(), np.ones((1, 2, 1)))
        projected = x[0].detach().numpy() @ attn.w_v1.detach().numpy()
        assert_allclose(updated[0].detach().numpy(), np.repeat(projected, 2, axis=0), atol=1e-12)

    def test_single_dispatcher_aggregate_is_weighted_average(self):
        cfg = tiny_config(n_dispatchers=1, n_heads=1)
        torch.manual_seed(5)
        attn = DispatcherAttention(cfg)
        x = rand64(1, 6, 8, seed=26)
        d = rand64(1, 1, 8, seed=27)
        updated, weights = attn.aggregate(d, x)
        w = weights[0, 0].detach().numpy()
        assert_allclose(w.sum(), 1.0, atol=1e-12)
        assert_allclose(updated[0, 0].detach().numpy(), w @ (x[0].detach().numpy() @ attn.w_v1.detach().numpy()), atol=1e-12)

    def test_aggregate_matches_loop_oracle(self):
        cfg = tiny_config(d_model=4, n_heads=2)
        torch.manual_seed(6)
        attn = DispatcherAttention(cfg)
        x = rand64(1, 6, 4, seed=28)
        d = rand64(1, 2, 4, seed=29)
        updated, weights = attn.aggregate(d, x)
        o_ref, w_ref = loop_multi_head_cross(
            d[0].detach().numpy(), x[0].detach().numpy(),
            attn.w_q1.detach().numpy(), attn.w_k1.detach().numpy(), attn.w_v1.detach().numpy(), n_heads=2,
        )
        assert_allclose(updated[0].detach().numpy(), o_ref, atol=1e-10)
        assert_allclose(weights[0].detach().numpy(), w_ref, atol=1e-10)

    def test_single_dispatcher_distribute_rank_one(self):
        cfg = tiny_config(n_dispatchers=1, n_heads=2)
        torch.manual_seed(7)
        attn = DispatcherAttention(cfg)
        x = rand64(1, 5, 8, seed=30)
        updated = rand64(1, 1, 8, seed=31)
        out, weights = attn.distribute(x, updated)
        assert_allclose(weights.detach().numpy(), np.ones((1, 5, 1)))
        # every token receives the identical dispatcher message
        assert_allclose(out[0].detach().numpy(), np.tile(out[0, 0].detach().numpy(), (5, 1)), atol=1e-12)

    def test_identical_dispatchers_give_identical_rows(self):
        cfg = tiny_config(n_heads=2)
        torch.manual_seed(8)
        attn = DispatcherAttention(cfg)
        x = rand64(1, 5, 8, seed=32)
        row = rand64(1, 1, 8, seed=33)
        updated = row.repeat(1, 4, 1)
        out, _ = attn.distribute(x, updated)
        cols = out[0].detach().numpy()
        assert_allclose(cols, np.tile(cols[0], (5, 1)), atol=1e-12)

    def test_distribute_matches_loop_oracle(self):
        cfg = tiny_config(d_model=4, n_heads=2)
        torch.manual_seed(9)
        attn = DispatcherAttention(cfg)
        x = rand64(1, 6, 4, seed=34)
        updated = rand64(1, 3, 4, seed=35)
        out, weights = attn.distribute(x, updated)
        o_ref, w_ref = loop_multi_head_cross(
            x[0].detach().numpy(), updated[0].detach().numpy(),
            attn.w_q2.detach().numpy(), attn.w_k2.detach().numpy(), attn.w_v2.detach().numpy(),
            n_heads=2, w_o=attn.w_o.detach().numpy(),
        )
        assert_allclose(out[0].detach().numpy(), o_ref, atol=1e-10)
        assert_allclose(weights[0].detach().numpy(), w_ref, atol=1e-10)


def encoder_block_oracle(block: EncoderBlock, x: np.ndarray, dispatchers: np.ndarray | None) -> np.ndarray:
    """Recompute one training-mode block step-by-step in numpy."""
    attn = block.attn
    b = x.shape[0]
    attn_out = np.zeros_like(x)
    for i in range(b):
        if dispatchers is not None:
            d_updated, _ = loop_multi_head_cross(
                dispatchers, x[i], attn.w_q1.detach().numpy(), attn.w_k1.detach().numpy(), attn.w_v1.detach().numpy(), attn.n_heads
            )
            attn_out[i], _ = loop_multi_head_cross(
                x[i], d_updated, attn.w_q2.detach().numpy(), attn.w_k2.detach().numpy(), attn.w_v2.detach().numpy(),
                attn.n_heads, w_o=attn.w_o.detach().numpy(),
            )
        else:
            attn_out[i], _ = loop_multi_head_cross(
                x[i], x[i], attn.w_q.detach().numpy(), attn.w_k.detach().numpy(), attn.w_v.detach().numpy(),
                attn.n_heads, w_o=attn.w_o.detach().numpy(),
            )
    y = loop_batchnorm_train(
        x + attn_out, block.norm1.weight.detach().numpy(), block.norm1.bias.detach().numpy()
    )
    w1 = block.ffn.lin1.weight.detach().numpy()
    b1 = block.ffn.lin1.bias.detach().numpy()
    w2 = block.ffn.lin2.weight.detach().numpy()
    b2 = block.ffn.lin2.bias.detach().numpy()
    ffn = gelu_exact(y @ w1.T + b1) @ w2.T + b2
    return loop_batchnorm_train(
        y + ffn, block.norm2.weight.detach().numpy(), block.norm2.bias.detach().numpy()
    )


class TestEncoderBlock:
    @pytest.mark.parametrize("mode", ["dispatcher", "full"])
    def test_matches_composed_oracle(self, mode):
        cfg = tiny_config(attention_mode=mode, d_model=4, n_heads=2, d_ff=8)
        torch.manual_seed(10)
        block = EncoderBlock(cfg)
        block.train()
        x = rand64(2, 6, 4, seed=36)
        d = rand64(2, 4, seed=37) if mode == "dispatcher" else None
        d_in = d.unsqueeze(0).expand(2, 2, 4) if d is not None else None
        out, _ = block(x, d_in)
        ref = encoder_block_oracle(block, x.detach().numpy(), d.detach().numpy() if d is not None else None)
        assert_allclose(out.detach().numpy(), ref, atol=1e-8)

    def test_zero_weight_paths_reduce_to_double_norm(self):
        cfg = tiny_config(attention_mode="full", d_model=4, n_heads=1, d_ff=8)
        torch.manual_seed(11)
        block = EncoderBlock(cfg)
        block.train()
        with torch.no_grad():
            block.attn.w_v.zero_()
            block.ffn.lin2.weight.zero_()
            block.ffn.lin2.bias.zero_()
        x = rand64(2, 5, 4, seed=38)
        out, _ = block(x, None)
        ref = loop_batchnorm_train(
            loop_batchnorm_train(
                x.detach().numpy(), block.norm1.weight.detach().numpy(), block.norm1.bias.detach().numpy()
            ),
            block.norm2.weight.detach().numpy(),
            block.norm2.bias.detach().numpy(),
        )
        assert_allclose(out.detach().numpy(), ref, atol=1e-8)

    def test_eval_batchnorm_with_unit_stats_is_near_identity(self):
        cfg = tiny_config(attention_mode="full", d_model=4, n_heads=1, d_ff=8)
        torch.manual_seed(12)
        block = EncoderBlock(cfg)
        block.eval()
        x = rand64(1, 5, 4, seed=39)
        # fresh BN has running mean 0, var 1, weight 1, bias 0
        out = block._bn(block.norm1, x)
        assert_allclose(out.detach().numpy(), x.detach().numpy(), rtol=2e-5, atol=1e-12)


class TestModelForward:
    def test_output_shape_contract(self):
        for cfg in [
            tiny_config(),
            tiny_config(attention_mode="full"),
            tiny_config(n_variates=1, n_layers=2),
            tiny_config(patch_len=5, stride=3, lookback=17),
        ]:
            torch.manual_seed(13)
            model = Flatformer(cfg)
            x = rand64(3, cfg.n_variates, cfg.lookback, seed=40)
            out, _ = model(x)
            assert out.shape == (3, cfg.n_variates, cfg.horizon)

    def test_constant_path_all_zero_weights(self):
        cfg = tiny_config()
        torch.manual_seed(14)
        model = Flatformer(cfg)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            bias = torch.as_tensor([1.0, -2.0, 0.5, 3.0])
            model.head.bias.copy_(bias)
        model.eval()
        x = rand64(2, 3, 16, seed=41)
        out, _ = model(x)
        mean = x.mean(dim=-1, keepdim=True).detach().numpy()
        std = x.std(dim=-1, unbiased=False, keepdim=True).detach().numpy()
        expected = bias.detach().numpy() * (std + 1e-5) + mean
        assert_allclose(out.detach().numpy(), expected, atol=1e-12)

    def test_eval_mode_bitwise_deterministic(self):
        cfg = tiny_config(dropout=0.2)
        torch.manual_seed(15)
        model = Flatformer(cfg)
        model.eval()
        x = rand64(2, 3, 16, seed=42)
        out1, _ = model(x)
        out2, _ = model(x)
        assert torch.equal(out1, out2)

    def test_shape_mismatch_rejected(self):
        model = Flatformer(tiny_config())
        with pytest.raises(ValueError, match="expected input"):
            model(torch.zeros(2, 4, 16, dtype=torch.float64))

    def test_captured_records_row_stochastic(self):
        cfg = tiny_config(n_layers=2, capture_attention=True)
        torch.manual_seed(16)
        model = Flatformer(cfg)
        model.eval()
        _, records = model(rand64(2, 3, 16, seed=43))
        assert len(records) == 2
        for rec in records:
            assert rec.agg.shape == (2, 2, 12)
            assert rec.dist.shape == (2, 12, 2)
            for m in rec.matrices():
                assert_allclose(m.sum(axis=-1), 1.0, atol=1e-6)
                assert (m >= 0).all()

    def test_capture_off_in_train_mode(self):
        cfg = tiny_config(capture_attention=True)
        model = Flatformer(cfg)
        model.train()
        _, records = model(rand64(2, 3, 16, seed=44))
        assert records == []

    def test_per_layer_dispatchers_option(self):
        cfg = tiny_config(n_layers=2, per_layer_dispatchers=True)
        torch.manual_seed(17)
        model = Flatformer(cfg)
        assert len(model.dispatchers) == 2
        out, _ = model(rand64(1, 3, 16, seed=45))
        assert out.shape == (1, 3, 4)

    def test_instance_norm_off(self):
        cfg = tiny_config(instance_norm=False)
        torch.manual_seed(18)
        model = Flatformer(cfg)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            model.head.bias.fill_(2.0)
        model.eval()
        out, _ = model(rand64(1, 3, 16, seed=46))
        assert_allclose(out.detach().numpy(), 2.0, atol=1e-15)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = tiny_config(n_layers=2)
        torch.manual_seed(19)
        model = Flatformer(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == cfg
        for (name_a, a), (name_b, b) in zip(
            model.state_dict().items(), loaded.state_dict().items()
        ):
            assert name_a == name_b
            assert torch.equal(a, b)
        x = rand64(2, 3, 16, seed=47)
        model.eval()
        assert torch.equal(model(x)[0], loaded(x)[0])

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        torch.save({"format": "other"}, path)
        with pytest.raises(ValueError, match="format"):
            load_checkpoint(path)


class TestConfigValidation:
    def test_heads_must_divide_d_model(self):
        with pytest.raises(ValueError, match="divide"):
            tiny_config(d_model=8, n_heads=3)

    def test_dispatcher_count_positive(self):
        with pytest.raises(ValueError, match="n_dispatchers"):
            tiny_config(n_dispatchers=0)

    def test_mask_only_in_full_mode(self):
        with pytest.raises(ValueError, match="within_variate_only"):
            tiny_config(within_variate_only=True)

    def test_dropout_range(self):
        with pytest.raises(ValueError, match="dropout"):
            tiny_config(dropout=1.0)

    def test_n_patches_derived(self):
        cfg = ModelConfig(n_variates=2, lookback=96, horizon=96)
        assert cfg.n_patches == 11
        assert cfg.n_tokens == 22
