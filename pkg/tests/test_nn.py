"""Layers, optimizer, and checkpoint format."""

import json
import zipfile

import numpy as np
import pytest

from spadnet.errors import ConfigError
from spadnet.nn import (
    Adam,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerBlock,
    load_checkpoint,
    params_hash,
    restore_params,
    save_checkpoint,
)
from spadnet.rope3d import RopeParams
from spadnet.tensor import Tensor, check_gradients, grad


def rng_(seed=0):
    return np.random.default_rng(seed)


def grid_positions(n, rng):
    return rng.integers(0, 12, size=(n, 3)).astype(np.float64)


# ---------------------------------------------------------------- modules

def test_named_parameter_paths():
    class Inner(Module):
        def __init__(self, rng):
            self.lin = Linear(rng, 3, 2)

    class Outer(Module):
        def __init__(self, rng):
            self.emb = Tensor(np.zeros(4), requires_grad=True)
            self.blocks = [Inner(rng), Inner(rng)]
            self.head = Linear(rng, 2, 2, bias=False)

    m = Outer(rng_())
    names = set(m.named_parameters())
    assert names == {
        "emb",
        "blocks.0.lin.weight", "blocks.0.lin.bias",
        "blocks.1.lin.weight", "blocks.1.lin.bias",
        "head.weight",
    }


def test_linear_matches_numpy():
    rng = rng_(1)
    lin = Linear(rng, 5, 3, dtype=np.float64)
    x = rng.normal(size=(4, 5))
    y = lin(Tensor(x))
    want = x @ lin.weight.data + lin.bias.data
    assert np.allclose(y.data, want, atol=1e-12)


def test_linear_gradients():
    rng = rng_(2)
    lin = Linear(rng, 4, 3, dtype=np.float64)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    tgt = rng.normal(size=(5, 3))

    def loss():
        d = lin(x) - tgt
        return (d * d).sum()

    ok, worst = check_gradients(loss, [x, lin.weight, lin.bias])
    assert ok, worst


def test_layernorm_statistics():
    rng = rng_(3)
    ln = LayerNorm(16, dtype=np.float64)
    x = Tensor(rng.normal(2.0, 3.0, size=(10, 16)))
    y = ln(x).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-3)


def test_layernorm_matches_reference():
    rng = rng_(4)
    ln = LayerNorm(8, dtype=np.float64)
    ln.gamma.data = rng.normal(size=8)
    ln.beta.data = rng.normal(size=8)
    x = rng.normal(size=(6, 8))
    want = ((x - x.mean(-1, keepdims=True))
            / np.sqrt(x.var(-1, keepdims=True) + ln.eps)
            * ln.gamma.data + ln.beta.data)
    got = ln(Tensor(x)).data
    assert np.allclose(got, want, atol=1e-12)


def test_layernorm_gradients():
    rng = rng_(5)
    ln = LayerNorm(6, dtype=np.float64)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = rng.normal(size=(4, 6))
    ok, worst = check_gradients(lambda: (ln(x) * w).sum(), [x, ln.gamma, ln.beta])
    assert ok, worst


# ---------------------------------------------------------------- attention

def test_attention_shape_and_determinism():
    rng = rng_(6)
    attn = MultiHeadAttention(rng_(6), 32, 4, dtype=np.float64)
    x = Tensor(rng.normal(size=(9, 32)))
    pos = grid_positions(9, rng)
    a = attn(x, pos).data
    b = attn(x, pos).data
    assert a.shape == (9, 32)
    assert np.array_equal(a, b)


def test_attention_position_validation():
    attn = MultiHeadAttention(rng_(7), 16, 2, dtype=np.float64)
    x = Tensor(np.zeros((5, 16)))
    with pytest.raises(ConfigError):
        attn(x, np.zeros((4, 3)))


def test_attention_rope_dim_must_match_head_dim():
    with pytest.raises(ConfigError):
        MultiHeadAttention(rng_(8), 32, 4, rope=RopeParams(d=32))


def test_attention_width_divisible_by_heads():
    with pytest.raises(ConfigError):
        MultiHeadAttention(rng_(9), 30, 4)


def test_attention_translation_invariance():
    # rotary angles are linear in position, so a shared offset cancels
    rng = rng_(10)
    attn = MultiHeadAttention(rng_(10), 32, 4, dtype=np.float64)
    x = Tensor(rng.normal(size=(12, 32)))
    pos = grid_positions(12, rng)
    base = attn(x, pos).data
    for off in ((5.0, -3.0, 7.0), (100.0, 100.0, 100.0)):
        moved = attn(x, pos + np.asarray(off)).data
        assert np.max(np.abs(moved - base)) <= 1e-9


def test_attention_gradients():
    rng = rng_(11)
    attn = MultiHeadAttention(rng_(11), 8, 2, dtype=np.float64)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    pos = grid_positions(4, rng)
    w = rng.normal(size=(4, 8))
    params = [x] + attn.parameters()
    ok, worst = check_gradients(lambda: (attn(x, pos) * w).sum(), params)
    assert ok, worst


def test_block_shape_and_gradients():
    rng = rng_(12)
    blk = TransformerBlock(rng_(12), 8, 2, dtype=np.float64)
    x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    pos = grid_positions(5, rng)
    assert blk(x, pos).shape == (5, 8)
    w = rng.normal(size=(5, 8))
    ok, worst = check_gradients(lambda: (blk(x, pos) * w).sum(),
                                [x] + blk.parameters())
    assert ok, worst


def test_block_mlp_ratio():
    blk = TransformerBlock(rng_(13), 16, 2, mlp_ratio=2)
    assert blk.fc1.weight.shape == (16, 32)
    assert blk.fc2.weight.shape == (32, 16)


# ---------------------------------------------------------------- optimizer

def test_adam_first_step_magnitude():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    opt.step({"p": np.array([0.3, -0.7])})
    # bias-corrected first step is lr * sign(g) up to eps
    assert np.allclose(p.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-6)


def test_adam_minimizes_quadratic():
    rng = rng_(14)
    target = rng.normal(size=7)
    p = Tensor(np.zeros(7), requires_grad=True)
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(500):
        d = p - target
        loss = (d * d).sum()
        (g,) = grad(loss, [p])
        opt.step({"p": g})
    assert np.max(np.abs(p.data - target)) < 1e-3


def test_adam_key_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"p": p})
    with pytest.raises(ConfigError):
        opt.step({"q": np.zeros(3)})


def test_adam_deterministic():
    def run():
        rng = rng_(15)
        p = Tensor(rng.normal(size=5), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01)
        for _ in range(20):
            (g,) = grad((p * p).sum(), [p])
            opt.step({"p": g})
        return p.data.copy()

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------- checkpoints

def small_model(seed=20):
    m = Module()
    m.lin = Linear(rng_(seed), 3, 4)
    m.emb = Tensor(rng_(seed + 1).normal(size=6).astype(np.float32),
                   requires_grad=True)
    return m


def test_checkpoint_round_trip(tmp_path):
    m = small_model()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, m.named_parameters(), {"arch": "toy", "seed": 20, "step": 7})
    manifest, blobs = load_checkpoint(path)
    assert manifest["arch"] == "toy"
    assert manifest["step"] == 7
    assert set(blobs) == set(m.named_parameters())
    for name, p in m.named_parameters().items():
        assert np.array_equal(blobs[name], p.data.astype("<f4"))


def test_checkpoint_bytes_deterministic(tmp_path):
    m = small_model()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, m.named_parameters(), {"arch": "toy"})
    save_checkpoint(b, m.named_parameters(), {"arch": "toy"})
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_layout(tmp_path):
    m = small_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m.named_parameters(), {})
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        assert "manifest.json" in names
        assert all(n == "manifest.json" or n.startswith("params/") for n in names)
        doc = json.loads(zf.read("manifest.json"))
        assert doc["params"]["lin.weight"] == [3, 4]
        raw = zf.read("params/emb.bin")
        assert len(raw) == 6 * 4


def test_restore_params(tmp_path):
    src = small_model(30)
    dst = small_model(31)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, src.named_parameters(), {})
    _, blobs = load_checkpoint(path)
    restore_params(dst.named_parameters(), blobs)
    for name, p in src.named_parameters().items():
        assert np.allclose(dst.named_parameters()[name].data, p.data, atol=1e-7)


def test_restore_rejects_mismatch():
    m = small_model()
    with pytest.raises(ConfigError):
        restore_params(m.named_parameters(), {"nope": np.zeros(3, dtype="<f4")})
    blobs = {name: p.data.astype("<f4")
             for name, p in m.named_parameters().items()}
    blobs["emb"] = np.zeros((2, 3), dtype="<f4")
    with pytest.raises(ConfigError):
        restore_params(m.named_parameters(), blobs)


def test_params_hash_tracks_values():
    m = small_model()
    h0 = params_hash(m.named_parameters())
    assert h0 == params_hash(m.named_parameters())
    m.emb.data = m.emb.data + 1.0
    assert params_hash(m.named_parameters()) != h0


def test_params_hash_order_independent():
    m = small_model()
    params = m.named_parameters()
    reordered = dict(reversed(list(params.items())))
    assert params_hash(params) == params_hash(reordered)
