"""Model-building blocks on the tensor engine.

Layers (linear, layer norm, rotary multi-head attention, transformer
block), an Adam optimizer, and a zip checkpoint format: manifest.json
plus raw little-endian f32 blobs keyed by parameter path.
"""

import hashlib
import json
import math
import zipfile

import numpy as np

from .errors import ConfigError
from .rope3d import RopeParams, rope_angles
from .tensor import Tensor, apply_rotary, softmax_lastdim

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "MultiHeadAttention",
    "TransformerBlock",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
    "restore_params",
    "params_hash",
]

# checkpoints must be byte-identical across runs
_EPOCH = (1980, 1, 1, 0, 0, 0)


class Module:
    """Base with recursive parameter discovery keyed by attribute path."""

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                for sub, p in val.named_parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for sub, p in item.named_parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, *, bias: bool = True,
                 dtype=np.float32):
        scale = 1.0 / math.sqrt(d_in)
        self.weight = Tensor(
            rng.normal(0.0, scale, size=(d_in, d_out)).astype(dtype),
            requires_grad=True)
        self.bias = (Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
                     if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    """Last-dim normalization composed from differentiable primitives."""

    def __init__(self, width: int, *, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * (var + self.eps) ** -0.5 * self.gamma + self.beta


class MultiHeadAttention(Module):
    """Self-attention with additive 3D rotary angles on queries and keys."""

    def __init__(self, rng, width: int, heads: int, rope: RopeParams | None = None,
                 *, dtype=np.float32):
        if width % heads != 0:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = width // heads
        self.rope = rope if rope is not None else RopeParams(d=self.head_dim)
        if self.rope.d != self.head_dim:
            raise ConfigError(
                f"rope dim {self.rope.d} must equal head dim {self.head_dim}")
        self.q = Linear(rng, width, width, dtype=dtype)
        self.k = Linear(rng, width, width, dtype=dtype)
        self.v = Linear(rng, width, width, dtype=dtype)
        self.proj = Linear(rng, width, width, dtype=dtype)

    def _split(self, x: Tensor, n: int) -> Tensor:
        # (n, width) -> (heads, n, head_dim)
        return x.reshape(n, self.heads, self.head_dim).transpose((1, 0, 2))

    def __call__(self, x: Tensor, positions: np.ndarray) -> Tensor:
        n = x.shape[0]
        if positions.shape != (n, 3):
            raise ConfigError(
                f"positions shape {positions.shape} does not match {n} tokens")
        angles = rope_angles(self.rope, positions)
        q = apply_rotary(self._split(self.q(x), n), angles)
        k = apply_rotary(self._split(self.k(x), n), angles)
        v = self._split(self.v(x), n)
        scores = (q @ k.transpose((0, 2, 1))) * (1.0 / math.sqrt(self.head_dim))
        out = softmax_lastdim(scores) @ v
        return self.proj(out.transpose((1, 0, 2)).reshape(n, self.heads * self.head_dim))


class TransformerBlock(Module):
    """Pre-norm attention + GELU feed-forward."""

    def __init__(self, rng, width: int, heads: int, *, mlp_ratio: int = 2,
                 rope: RopeParams | None = None, dtype=np.float32):
        self.ln1 = LayerNorm(width, dtype=dtype)
        self.attn = MultiHeadAttention(rng, width, heads, rope, dtype=dtype)
        self.ln2 = LayerNorm(width, dtype=dtype)
        self.fc1 = Linear(rng, width, mlp_ratio * width, dtype=dtype)
        self.fc2 = Linear(rng, mlp_ratio * width, width, dtype=dtype)

    def __call__(self, x: Tensor, positions: np.ndarray) -> Tensor:
        x = x + self.attn(self.ln1(x), positions)
        return x + self.fc2(self.fc1(self.ln2(x)).gelu())


class Adam(Module):
    """Adam with bias correction; moments live in the parameter dtype."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        if set(grads) != set(self.params):
            raise ConfigError("gradient keys do not match optimizer parameters")
        rate = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k].astype(p.data.dtype, copy=False)
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - rate * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], manifest: dict) -> None:
    """Zip archive: manifest.json + params/<path>.bin little-endian f32 blobs."""
    doc = dict(manifest)
    doc["params"] = {name: list(params[name].shape) for name in sorted(params)}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _EPOCH),
                    json.dumps(doc, indent=2, sort_keys=True))
        for name in sorted(params):
            zf.writestr(zipfile.ZipInfo(f"params/{name}.bin", _EPOCH),
                        np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if "params" not in manifest:
            raise ConfigError("checkpoint manifest lacks a params table")
        blobs = {}
        for name, shape in manifest["params"].items():
            raw = np.frombuffer(zf.read(f"params/{name}.bin"), dtype="<f4")
            if raw.size != int(np.prod(shape)):
                raise ConfigError(f"parameter {name}: blob size does not match {shape}")
            blobs[name] = raw.reshape(shape).copy()
    return manifest, blobs


def restore_params(params: dict[str, Tensor], blobs: dict[str, np.ndarray]) -> None:
    """Load checkpoint blobs into live parameters in place."""
    if set(params) != set(blobs):
        missing = set(params) ^ set(blobs)
        raise ConfigError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
    for name, p in params.items():
        if tuple(blobs[name].shape) != p.shape:
            raise ConfigError(
                f"parameter {name}: shape {blobs[name].shape} vs model {p.shape}")
        p.data = blobs[name].astype(p.data.dtype)


def params_hash(params: dict[str, Tensor]) -> str:
    """SHA-256 over parameter paths and exact value bytes, order-independent."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
