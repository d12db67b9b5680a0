"""Frozen trunk behavior, adapter equivalence, and pretraining."""

import numpy as np
import pytest

from tokencast import rng
from tokencast import tensor as T
from tokencast.backbone import (
    Backbone,
    BackboneConfig,
    expected_parameter_count,
    expected_tensor_count,
    pretrain_then_freeze,
)
from tokencast.data import MultivariateSeries, SplitSpec, chronological_split
from tokencast.dlora import MODULE_NAMES, LoraAdapter
from tokencast.tensor import ShapeError, Tensor


def rand(shape, seed):
    return np.random.Generator(np.random.PCG64(seed)).uniform(-1, 1, size=shape)


def small_cfg(**kw):
    base = dict(layers=2, dim=8, heads=2, ffn_dim=16)
    base.update(kw)
    return BackboneConfig(**base)


def make_adapters(block, r=2, seed=0):
    gen = rng.generator(seed, "test_adapters")
    out = {}
    for name in MODULE_NAMES:
        w = block.weights[name]
        out[name] = LoraAdapter(name, w.shape[0], w.shape[1], r, gen)
        out[name].up.data[...] = rand((r, w.shape[1]), seed + hash(name) % 97) * 0.1
    return out


# --------------------------------------------------------- independent oracle


def np_rmsnorm(x, w, eps=1e-6):
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * inv * w


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_silu(x):
    return x / (1.0 + np.exp(-x))


def np_block(h, block, adapters=None, gate=0.0):
    """Plain-numpy replica of one block used as an equivalence oracle."""

    def lin(z, name):
        out = z @ block.weights[name].data + block.biases[name].data
        if adapters is not None and gate != 0.0:
            ad = adapters[name]
            out = out + gate * ((z @ ad.down.data) @ ad.up.data)
        return out

    x = np_rmsnorm(h, block.attn_norm.data)
    q, k, v = lin(x, "q_proj"), lin(x, "k_proj"), lin(x, "v_proj")
    dh = block.head_dim
    heads = []
    for i in range(block.cfg.heads):
        s = slice(i * dh, (i + 1) * dh)
        attn = np_softmax((q[:, s] @ k[:, s].T) / np.sqrt(dh))
        heads.append(attn @ v[:, s])
    h = h + lin(np.concatenate(heads, axis=-1), "o_proj")
    x2 = np_rmsnorm(h, block.ffn_norm.data)
    ffn = lin(np_silu(lin(x2, "gate_proj")) * lin(x2, "up_proj"), "down_proj")
    return h + ffn


# -------------------------------------------------------------------- tests


def test_closed_gates_match_plain_block_exactly():
    bb = Backbone(small_cfg(), seed=1)
    block = bb.blocks[0]
    adapters = make_adapters(block)
    h = Tensor(rand((5, 8), 2))
    gates = {name: 0.0 for name in MODULE_NAMES}
    with_adapters = block.forward(h, adapters, gates)
    plain = block.forward(h)
    np.testing.assert_array_equal(with_adapters.data, plain.data)


def test_zero_up_factors_match_plain_block_exactly():
    bb = Backbone(small_cfg(), seed=3)
    block = bb.blocks[0]
    gen = rng.generator(0, "zero_up")
    adapters = {
        name: LoraAdapter(name, block.weights[name].shape[0],
                          block.weights[name].shape[1], 2, gen)
        for name in MODULE_NAMES
    }  # up factors start at zero
    h = Tensor(rand((5, 8), 4))
    gates = {name: 1.0 for name in MODULE_NAMES}
    np.testing.assert_array_equal(
        block.forward(h, adapters, gates).data, block.forward(h).data
    )


def test_block_matches_numpy_oracle():
    bb = Backbone(small_cfg(), seed=5)
    block = bb.blocks[0]
    adapters = make_adapters(block, seed=6)
    h = rand((6, 8), 7)
    gates = {name: 1.0 for name in MODULE_NAMES}
    ours = block.forward(Tensor(h), adapters, gates).data
    oracle = np_block(h, block, adapters, gate=1.0)
    np.testing.assert_allclose(ours, oracle, atol=1e-10)


def test_block_single_token_attention_is_identity_weight():
    # one token: softmax over a single key is exactly 1
    bb = Backbone(small_cfg(), seed=8)
    block = bb.blocks[0]
    h = rand((1, 8), 9)
    ours = block.forward(Tensor(h)).data
    np.testing.assert_allclose(ours, np_block(h, block), atol=1e-12)


def test_zero_layer_backbone_is_identity():
    bb = Backbone(small_cfg(layers=0), seed=10)
    h = Tensor(rand((4, 8), 11))
    out, pre = bb.forward(h)
    assert out is h and pre == []


def test_pre_states_returned_per_layer():
    bb = Backbone(small_cfg(layers=3), seed=12)
    h = Tensor(rand((2, 4, 8), 13))
    out, pre = bb.forward(h)
    assert len(pre) == 3
    assert pre[0] is h
    assert all(p.shape == (2, 4, 8) for p in pre)
    assert out.shape == (2, 4, 8)


def test_batched_matches_per_sample():
    bb = Backbone(small_cfg(), seed=14)
    x = rand((3, 5, 8), 15)
    batched, _ = bb.forward(Tensor(x))
    for b in range(3):
        single, _ = bb.forward(Tensor(x[b]))
        np.testing.assert_allclose(batched.data[b], single.data, atol=1e-12)


def test_causal_mask_blocks_future_tokens():
    cfg = small_cfg(causal_mask=True)
    bb = Backbone(cfg, seed=16)
    x = rand((4, 8), 17)
    base, _ = bb.forward(Tensor(x))
    bumped = x.copy()
    bumped[3] += 1.0
    out, _ = bb.forward(Tensor(bumped))
    # first token cannot see the change under the causal mask
    np.testing.assert_array_equal(base.data[0], out.data[0])
    # bidirectional attention does propagate it
    bb2 = Backbone(small_cfg(), seed=16)
    base2, _ = bb2.forward(Tensor(x))
    out2, _ = bb2.forward(Tensor(bumped))
    assert not np.array_equal(base2.data[0], out2.data[0])


def test_construction_is_deterministic():
    a = Backbone(small_cfg(), seed=20)
    b = Backbone(small_cfg(), seed=20)
    assert a.checksum() == b.checksum()
    c = Backbone(small_cfg(), seed=21)
    assert a.checksum() != c.checksum()


def test_random_frozen_freezes_at_construction():
    bb = Backbone(small_cfg(), seed=22)
    assert bb.frozen
    assert all(not t.requires_grad for t in bb.tensors().values())
    assert all(t.grad is None for t in bb.tensors().values())


def test_frozen_tensor_count_expectation():
    for layers in (1, 2, 4):
        bb = Backbone(small_cfg(layers=layers), seed=23)
        assert bb.frozen_tensor_count() == expected_tensor_count(layers)
        assert bb.frozen_tensor_count() == layers * 16


def test_parameter_count_arithmetic():
    cfg = small_cfg(layers=2)
    bb = Backbone(cfg, seed=24)
    assert bb.parameter_count() == expected_parameter_count(cfg)
    desk = BackboneConfig(layers=4, dim=64, heads=4, ffn_dim=256)
    assert expected_parameter_count(desk) == 4 * 66496


def test_frozen_params_never_gain_grads():
    bb = Backbone(small_cfg(), seed=25)
    h = Tensor(rand((3, 8), 26))
    with T.Tape() as tape:
        out, _ = bb.forward(h)
        tape.backward(T.mean(T.square(out)))
    assert all(t.grad is None for t in bb.tensors().values())


def test_optimizer_step_leaves_frozen_backbone_unchanged():
    from tokencast.training import AdamW

    bb = Backbone(small_cfg(), seed=27)
    before = bb.checksum()
    extra = T.parameter(rand((4, 4), 28))
    opt = AdamW({**bb.tensors(), "extra": extra}, lr=0.1)
    with T.Tape() as tape:
        h, _ = bb.forward(Tensor(rand((3, 8), 29)))
        loss = T.add(T.mean(T.square(h)), T.mean(T.square(extra)))
        tape.backward(loss)
    opt.step()
    assert bb.checksum() == before
    assert not np.array_equal(extra.data, rand((4, 4), 28))


def test_pretrain_then_freeze_runs_and_freezes():
    series = MultivariateSeries(
        name="p", values=np.sin(np.arange(400.0) / 7.0).reshape(400, 1)
    )
    view, _, _ = chronological_split(series, SplitSpec(400, 0, 0), lookback=16)
    cfg = small_cfg(pretrain_mode="pretrain_then_freeze")
    bb = Backbone(cfg, seed=30)
    assert not bb.frozen  # pretraining mode defers the freeze
    losses = pretrain_then_freeze(bb, view, lookback=16, horizon=4, steps=12, seed=30)
    assert bb.frozen and len(losses) == 12
    assert np.mean(losses[-4:]) < np.mean(losses[:4])


def test_pretrain_rejects_random_frozen_mode():
    series = MultivariateSeries(name="p", values=np.zeros((100, 1)))
    view, _, _ = chronological_split(series, SplitSpec(100, 0, 0), lookback=8)
    bb = Backbone(small_cfg(), seed=31)
    with pytest.raises(ShapeError, match="not configured"):
        pretrain_then_freeze(bb, view, lookback=8, horizon=2, steps=2)


def test_heads_must_divide_dim():
    with pytest.raises(ShapeError, match="divide"):
        BackboneConfig(layers=1, dim=8, heads=3, ffn_dim=16)
