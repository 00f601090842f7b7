"""Spacing-adaptive soft-token visual tokenizer.

Encoder: four spacing-adapted downsampling stages (each preceded by a
k3s1 block) to 1/16 in-plane and min{2^DA/16, 1} depth resolution, then
a 1x1 head producing a categorical distribution per grid cell. Tokens
stay soft: the decoder consumes the probability-weighted mean of the
codebook rows, so reconstruction is deterministic end to end.

The training objective is w_rec * MAE + L_reg where L_reg is the dual
prior-distribution regularizer
    L_reg = -lambda1 * H(E[q]) + lambda2 * E[H(q)]
(natural-log entropies; expectation over grid positions).
"""

import dataclasses
import math
from typing import Sequence

import numpy as np

from .datapipe import crop_sample, da_bucket_batches
from .errors import ConfigError, DimensionError, TrainingDiverged
from .geometry import Spacing, VolumeGrid, degree_of_anisotropy
from .nn import Adam, Module
from .spadconv import BaseConvSpec, NetworkPlan, plan_network, sum_pool_weights
from .tensor import Tensor, conv3d, conv3d_transposed, grad, softmax_lastdim

__all__ = [
    "PdrConfig",
    "TokenizerConfig",
    "TokenDistributionGrid",
    "SpadTokenizer",
    "soft_quantize",
    "dual_pdr_loss",
    "reconstruction_loss",
    "tokenizer_objective",
    "codebook_utilization",
    "TrainConfig",
    "train_tokenizer_toy",
]

_PROB_FLOOR = 1e-12


@dataclasses.dataclass(frozen=True)
class PdrConfig:
    """Dual PDR weights; zeros disable the corresponding term."""

    lambda1: float = 1.0
    lambda2: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


@dataclasses.dataclass(frozen=True)
class TokenizerConfig:
    vocab: int = 1024
    embed_dim: int = 64
    widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    in_channels: int = 1

    def __post_init__(self):
        if self.vocab < 2:
            raise ConfigError(f"codebook needs at least 2 entries, got {self.vocab}")
        if self.embed_dim < 1 or self.in_channels < 1:
            raise ConfigError("embed_dim and in_channels must be positive")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ConfigError(f"four positive stage widths required, got {self.widths}")


@dataclasses.dataclass(frozen=True)
class TokenDistributionGrid:
    """D' x H' x W' grid of categorical rows over the codebook."""

    probs: Tensor  # (D', H', W', |V|)
    spacing: Spacing

    def __post_init__(self):
        if not isinstance(self.probs, Tensor):
            object.__setattr__(self, "probs", Tensor(np.asarray(self.probs)))
        if self.probs.data.ndim != 4:
            raise DimensionError(
                f"grid must be (D, H, W, vocab), got {self.probs.shape}")
        p = self.probs.data
        if p.min() < -1e-9 or np.abs(p.sum(axis=-1) - 1.0).max() > 1e-6:
            raise ConfigError("grid rows must be probability distributions")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.probs.shape[:3]

    @property
    def vocab(self) -> int:
        return self.probs.shape[3]

    @property
    def n_cells(self) -> int:
        d, h, w = self.extents
        return d * h * w

    def rows(self) -> Tensor:
        return self.probs.reshape(self.n_cells, self.vocab)


class ConvStage(Module):
    """One spacing-adaptive conv with bias, executed from a plan entry."""

    def __init__(self, rng, spec: BaseConvSpec, dtype=np.float32):
        self.spec = spec
        fan_in = spec.channels_in * spec.kernel ** 3
        self.weight = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=spec.weight_shape)
            .astype(dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(spec.channels_out, dtype=dtype),
                           requires_grad=True)

    def __call__(self, x: Tensor, adaptation) -> Tensor:
        w = sum_pool_weights(self.weight, adaptation.depth_pool_window)
        if adaptation.transposed:
            y = conv3d_transposed(x, w, adaptation.effective_stride, adaptation.padding)
        else:
            y = conv3d(x, w, adaptation.effective_stride, adaptation.padding)
        return y + self.bias.reshape(self.spec.channels_out, 1, 1, 1)


class PointwiseConv(Module):
    """1x1x1 conv: channel mixing with no spatial context, never adapted."""

    def __init__(self, rng, c_in: int, c_out: int, dtype=np.float32):
        self.weight = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(c_in), size=(c_out, c_in, 1, 1, 1))
            .astype(dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        c_out = self.weight.shape[0]
        return conv3d(x, self.weight) + self.bias.reshape(c_out, 1, 1, 1)


def _tokenizer_stage_specs(cfg: TokenizerConfig) -> list[BaseConvSpec]:
    enc, prev = [], cfg.in_channels
    for w in cfg.widths:
        enc.append(BaseConvSpec.k3s1_block(prev, w))
        enc.append(BaseConvSpec.downsample(w, w))
        prev = w
    dec = []
    rev = list(cfg.widths)[::-1]  # (128, 64, 32, 16)
    for i, w in enumerate(rev):
        nxt = rev[i + 1] if i + 1 < len(rev) else rev[-1]
        dec.append(BaseConvSpec.upsample(w, w))
        dec.append(BaseConvSpec.k3s1_block(w, nxt))
    return enc + dec


class SpadTokenizer(Module):
    def __init__(self, rng, cfg: TokenizerConfig, dtype=np.float32):
        self.cfg = cfg
        specs = _tokenizer_stage_specs(cfg)
        self.enc = [ConvStage(rng, s, dtype) for s in specs[:8]]
        self.dec = [ConvStage(rng, s, dtype) for s in specs[8:]]
        top = cfg.widths[-1]
        self.head = PointwiseConv(rng, top, cfg.vocab, dtype)
        # symmetric uniform init scaled by 1/sqrt(d)
        self.codebook = Tensor(
            (rng.uniform(-1.0, 1.0, size=(cfg.vocab, cfg.embed_dim))
             / math.sqrt(cfg.embed_dim)).astype(dtype),
            requires_grad=True)
        self.dec_in = PointwiseConv(rng, cfg.embed_dim, top, dtype)
        self.out = PointwiseConv(rng, cfg.widths[0], cfg.in_channels, dtype)

    @property
    def stage_specs(self) -> list[BaseConvSpec]:
        return [s.spec for s in self.enc] + [s.spec for s in self.dec]

    def plan(self, spacing: Spacing) -> NetworkPlan:
        return plan_network(self.stage_specs, spacing)

    def _check_extents(self, shape, da: int) -> None:
        _, d, h, w = shape
        depth_div = 2 ** max(4 - min(da, 4), 0)
        if h % 16 or w % 16:
            raise DimensionError(
                f"in-plane extents must be divisible by 16, got {h}x{w}")
        if d % depth_div:
            raise DimensionError(
                f"depth {d} not divisible by {depth_div} (da={da})")

    def _as_tensor(self, vol: VolumeGrid) -> Tensor:
        x = vol.data if isinstance(vol.data, Tensor) else Tensor(np.asarray(vol.data))
        if x.data.ndim != 4 or x.shape[0] != self.cfg.in_channels:
            raise DimensionError(
                f"expected ({self.cfg.in_channels}, D, H, W), got {x.shape}")
        return x

    def _encode_planned(self, x: Tensor, plan: NetworkPlan) -> Tensor:
        for stage, entry in zip(self.enc, plan.stages[:8]):
            x = stage(x, entry.adaptation).gelu()
        return x

    def encode(self, vol: VolumeGrid, plan: NetworkPlan | None = None) -> TokenDistributionGrid:
        da = degree_of_anisotropy(vol.spacing)
        x = self._as_tensor(vol)
        self._check_extents(x.shape, da)
        if plan is None:
            plan = self.plan(vol.spacing)
        feats = self._encode_planned(x, plan)
        logits = self.head(feats)  # (V, D', H', W')
        probs = softmax_lastdim(logits.transpose((1, 2, 3, 0)))
        return TokenDistributionGrid(probs, plan.stages[7].output_spacing)

    def decode(self, embedding: Tensor, plan: NetworkPlan) -> Tensor:
        """embedding: (embed_dim, D', H', W') -> reconstruction (C, D, H, W)."""
        x = self.dec_in(embedding).gelu()
        for stage, entry in zip(self.dec, plan.stages[8:]):
            x = stage(x, entry.adaptation).gelu()
        return self.out(x)

    def forward(self, vol: VolumeGrid) -> tuple[Tensor, TokenDistributionGrid]:
        plan = self.plan(vol.spacing)
        grid = self.encode(vol, plan)
        emb = soft_quantize(grid, self.codebook)  # (D', H', W', d)
        x_hat = self.decode(emb.transpose((3, 0, 1, 2)), plan)
        return x_hat, grid


def soft_quantize(grid: TokenDistributionGrid, codebook: Tensor) -> Tensor:
    """Expected embedding per cell: rows @ codebook -> (D', H', W', d)."""
    if codebook.shape[0] != grid.vocab:
        raise DimensionError(
            f"codebook rows {codebook.shape[0]} != vocab {grid.vocab}")
    d, h, w = grid.extents
    return (grid.rows() @ codebook).reshape(d, h, w, codebook.shape[1])


def _entropy_terms(rows: Tensor) -> Tensor:
    # -p ln p with the log floored; exact 0 for one-hot rows
    return -(rows * rows.maximum_const(_PROB_FLOOR).log())


def dual_pdr_loss(grid: TokenDistributionGrid, cfg: PdrConfig) -> Tensor:
    rows = grid.rows()
    mean_q = rows.mean(axis=0)
    h_mean = _entropy_terms(mean_q).sum()
    h_per_cell = _entropy_terms(rows).sum() * (1.0 / grid.n_cells)
    return h_mean * (-cfg.lambda1) + h_per_cell * cfg.lambda2


def reconstruction_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean absolute error over voxels."""
    target = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if tuple(target.shape) != tuple(x_hat.shape):
        raise DimensionError(
            f"shape mismatch: {target.shape} vs {x_hat.shape}")
    return (x_hat - target).abs().mean()


def tokenizer_objective(
    vol: VolumeGrid,
    model: SpadTokenizer,
    pdr: PdrConfig,
    w_rec: float = 1.0,
) -> tuple[Tensor, dict]:
    x_hat, grid = model.forward(vol)
    rec = reconstruction_loss(model._as_tensor(vol), x_hat)
    reg = dual_pdr_loss(grid, pdr)
    loss = rec * w_rec + reg
    p = grid.probs.data
    ent = float(-(p * np.log(np.maximum(p, _PROB_FLOOR))).sum(axis=-1).mean())
    return loss, {
        "rec": rec.item(),
        "reg": reg.item(),
        "total": loss.item(),
        "mean_entropy": ent,
    }


def codebook_utilization(grids: Sequence[TokenDistributionGrid]) -> dict:
    """Per-token mean mass and mean KL(q || uniform) = ln|V| - E[H(q)]."""
    if not grids:
        raise ConfigError("utilization needs at least one grid")
    vocab = grids[0].vocab
    rows = np.concatenate([g.rows().data.reshape(-1, vocab) for g in grids])
    mass = rows.mean(axis=0)
    ent = -(rows * np.log(np.maximum(rows, _PROB_FLOOR))).sum(axis=1)
    return {
        "per_token_mass": mass,
        "mean_kl_to_uniform": float(math.log(vocab) - ent.mean()),
        "utilized_tokens": int((mass > 1.0 / (10.0 * vocab)).sum()),
    }


# -- toy training -------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    crop_base: tuple[int, int] = (16, 32)
    w_rec: float = 1.0
    eval_items: int = 32

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not math.isfinite(self.lr) or self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


def train_tokenizer_toy(
    volumes: Sequence[VolumeGrid],
    cfg: TokenizerConfig,
    pdr: PdrConfig,
    train: TrainConfig,
    seed: int,
) -> tuple[SpadTokenizer, dict]:
    """Seeded toy training loop over DA-pure batches of random crops."""
    if not volumes:
        raise ConfigError("empty training set")
    root = np.random.SeedSequence(seed)
    init_rng, crop_rng, eval_rng = (np.random.default_rng(s) for s in root.spawn(3))
    model = SpadTokenizer(init_rng, cfg)
    params = model.named_parameters()
    opt = Adam(params, lr=train.lr)
    das = [degree_of_anisotropy(v.spacing) for v in volumes]

    names = list(params)
    tensors = [params[n] for n in names]
    stats = {"rec": [], "reg": [], "total": [], "mean_kl": []}
    step = 0
    epoch = 0
    while step < train.steps:
        plan = da_bucket_batches(das, train.batch_size, seed=seed + epoch)
        epoch += 1
        for batch in plan.batches:
            if step >= train.steps:
                break
            losses = []
            for item in batch.item_ids:
                crop = crop_sample(volumes[item], batch.da, train.crop_base, crop_rng)
                loss, parts = tokenizer_objective(crop, model, pdr, train.w_rec)
                losses.append((loss, parts))
            total = losses[0][0]
            for l, _ in losses[1:]:
                total = total + l
            total = total * (1.0 / len(losses))
            if not math.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            grads = grad(total, tensors)
            opt.step({n: g for n, g in zip(names, grads)})
            stats["rec"].append(float(np.mean([p["rec"] for _, p in losses])))
            stats["reg"].append(float(np.mean([p["reg"] for _, p in losses])))
            stats["total"].append(total.item())
            ent = float(np.mean([p["mean_entropy"] for _, p in losses]))
            stats["mean_kl"].append(math.log(cfg.vocab) - ent)
            step += 1

    eval_grids = _eval_grids(model, volumes, das, train, eval_rng)
    util = codebook_utilization(eval_grids)
    stats["utilization"] = {
        "per_token_mass": [float(m) for m in util["per_token_mass"]],
        "mean_kl_to_uniform": util["mean_kl_to_uniform"],
        "utilized_tokens": util["utilized_tokens"],
    }
    stats["rec_initial"] = stats["rec"][0]
    stats["rec_final"] = float(np.mean(stats["rec"][-50:]))
    return model, stats


def _eval_grids(model, volumes, das, train, rng):
    n = min(train.eval_items, len(volumes))
    grids = []
    for i in range(n):
        crop = crop_sample(volumes[i], das[i], train.crop_base, rng)
        grids.append(model.encode(crop))
    return grids
