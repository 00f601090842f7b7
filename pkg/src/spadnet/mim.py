"""Masked-token pre-training of a spacing-adaptive ViT.

A generalized 2^4 downsampling conv embeds non-overlapping patches on
exactly the tokenizer's grid, 55% of the cells are replaced by a
learnable mask embedding, transformer blocks with additive 3D rotary
attention process the corrupted sequence, and an MLP head predicts the
frozen tokenizer's soft token distribution at every cell. The loss is
the masked-cell cross entropy

    L = -(1/|G_M|) sum_{s in G_M} sum_i q_i^(s) ln max(q~_i^(s), 1e-12).
"""

import dataclasses
import math
from typing import Sequence

import numpy as np

from .datapipe import crop_sample, da_bucket_batches
from .errors import ConfigError, TrainingDiverged
from .geometry import Spacing, VolumeGrid, degree_of_anisotropy
from .nn import Adam, LayerNorm, Linear, Module, TransformerBlock, params_hash
from .rope3d import RopeParams
from .spadconv import BaseConvSpec, adapt_conv
from .tensor import Tensor, grad, softmax_lastdim
from .tokenizer import ConvStage, SpadTokenizer, TokenDistributionGrid

__all__ = [
    "MaskSpec",
    "sample_mask",
    "MimConfig",
    "SpadVit",
    "mim_loss",
    "MimTrainConfig",
    "train_mim_toy",
]

_PROB_FLOOR = 1e-12


@dataclasses.dataclass(frozen=True)
class MaskSpec:
    """Masked grid cells, sampled without replacement: |G_M| = round(ratio |G|)."""

    ratio: float
    grid_extents: tuple[int, int, int]
    positions: tuple[int, ...]  # flat C-order indices into the grid
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"mask ratio must be in [0, 1], got {self.ratio}")
        n = int(np.prod(self.grid_extents))
        want = round(self.ratio * n)
        if len(self.positions) != want:
            raise ConfigError(
                f"|G_M| = {len(self.positions)} but round({self.ratio} * {n}) = {want}")
        if len(set(self.positions)) != len(self.positions):
            raise ConfigError("masked positions must be unique")
        if self.positions and not (0 <= min(self.positions) <= max(self.positions) < n):
            raise ConfigError("masked positions out of grid range")

    @property
    def n_masked(self) -> int:
        return len(self.positions)


def sample_mask(grid_extents, ratio: float, seed: int) -> MaskSpec:
    n = int(np.prod(grid_extents))
    m = round(ratio * n)
    rng = np.random.default_rng(seed)
    picks = rng.choice(n, size=m, replace=False)
    return MaskSpec(ratio, tuple(int(e) for e in grid_extents),
                    tuple(sorted(int(p) for p in picks)), seed)


@dataclasses.dataclass(frozen=True)
class MimConfig:
    vocab: int = 1024
    width: int = 64
    blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    patch_k: int = 4  # 2^4 = 16-voxel patches, matching the tokenizer grid
    in_channels: int = 1
    rope_bases: tuple[float, float, float] = (10000.0, 10000.0, 2333.0)

    def __post_init__(self):
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.patch_k < 1:
            raise ConfigError("patch_k must be >= 1")
        for f in (self.blocks, self.mlp_ratio, self.in_channels):
            if f < 1:
                raise ConfigError("blocks, mlp_ratio, in_channels must be positive")


def _grid_positions(extents) -> np.ndarray:
    """(n, 3) rows of (t_x, t_y, t_z) for C-order flattened (d, h, w) cells."""
    d, h, w = extents
    iz, iy, ix = np.indices((d, h, w))
    return np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1).astype(np.float64)


class SpadVit(Module):
    def __init__(self, rng, cfg: MimConfig, dtype=np.float32):
        self.cfg = cfg
        self.patch_spec = BaseConvSpec.generalized_down(
            cfg.in_channels, cfg.width, cfg.patch_k)
        self.patch = ConvStage(rng, self.patch_spec, dtype)
        self.e_mask = Tensor(
            (rng.normal(0.0, 0.02, size=cfg.width)).astype(dtype),
            requires_grad=True)
        bx, by, bz = cfg.rope_bases
        rope = RopeParams(d=cfg.width // cfg.heads, b_x=bx, b_y=by, b_z=bz)
        self.blocks = [
            TransformerBlock(rng, cfg.width, cfg.heads,
                             mlp_ratio=cfg.mlp_ratio, rope=rope, dtype=dtype)
            for _ in range(cfg.blocks)
        ]
        self.ln_f = LayerNorm(cfg.width, dtype=dtype)
        self.head_hidden = Linear(rng, cfg.width, cfg.width, dtype=dtype)
        self.head_out = Linear(rng, cfg.width, cfg.vocab, dtype=dtype)

    def _check_extents(self, shape, da: int) -> None:
        _, d, h, w = shape
        plane = 2 ** self.cfg.patch_k
        depth_div = 2 ** max(self.cfg.patch_k - min(da, self.cfg.patch_k), 0)
        if h % plane or w % plane:
            raise ConfigError(
                f"in-plane extents must be divisible by {plane}, got {h}x{w}")
        if d % depth_div:
            raise ConfigError(f"depth {d} not divisible by {depth_div} (da={da})")

    def patch_embed(self, vol: VolumeGrid) -> tuple[Tensor, tuple, Spacing]:
        """-> (tokens (n, width), grid extents, grid spacing)."""
        da = degree_of_anisotropy(vol.spacing)
        x = vol.data if isinstance(vol.data, Tensor) else Tensor(np.asarray(vol.data))
        if x.data.ndim != 4 or x.shape[0] != self.cfg.in_channels:
            raise ConfigError(
                f"expected ({self.cfg.in_channels}, D, H, W), got {x.shape}")
        self._check_extents(x.shape, da)
        adaptation = adapt_conv(self.patch_spec, da, input_spacing=vol.spacing)
        feats = self.patch(x, adaptation)  # (width, D', H', W')
        extents = feats.shape[1:]
        n = extents[0] * extents[1] * extents[2]
        tokens = feats.reshape(self.cfg.width, n).transpose((1, 0))
        return tokens, extents, adaptation.output_spacing

    def forward(self, vol: VolumeGrid, mask: MaskSpec) -> TokenDistributionGrid:
        tokens, extents, spacing = self.patch_embed(vol)
        if mask.grid_extents != tuple(extents):
            raise ConfigError(
                f"mask grid {mask.grid_extents} != patch grid {tuple(extents)}")
        n = tokens.shape[0]
        flags = np.zeros((n, 1), dtype=tokens.data.dtype)
        if mask.positions:
            flags[list(mask.positions)] = 1.0
        x = tokens * (1.0 - flags) + self.e_mask * flags
        positions = _grid_positions(extents)
        for block in self.blocks:
            x = block(x, positions)
        x = self.ln_f(x)
        logits = self.head_out(self.head_hidden(x).gelu())
        probs = softmax_lastdim(logits).reshape(*extents, self.cfg.vocab)
        return TokenDistributionGrid(probs, spacing)


def mim_loss(predicted: TokenDistributionGrid, teacher: TokenDistributionGrid,
             mask: MaskSpec) -> Tensor:
    if predicted.extents != teacher.extents or predicted.vocab != teacher.vocab:
        raise ConfigError(
            f"grid mismatch: {predicted.extents}x{predicted.vocab} "
            f"vs {teacher.extents}x{teacher.vocab}")
    if mask.grid_extents != predicted.extents:
        raise ConfigError(
            f"mask grid {mask.grid_extents} != prediction grid {predicted.extents}")
    if mask.n_masked == 0:
        raise ConfigError("cross entropy undefined for an empty mask")
    idx = np.asarray(mask.positions)
    pred = predicted.rows()[idx]
    target = teacher.rows().data[idx]
    ce = -(pred.maximum_const(_PROB_FLOOR).log() * target).sum()
    return ce * (1.0 / mask.n_masked)


# -- toy training --------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class MimTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    crop_base: tuple[int, int] = (32, 48)
    mask_ratio: float = 0.55

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not math.isfinite(self.lr) or self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must be in (0, 1] for training")


def train_mim_toy(
    volumes: Sequence[VolumeGrid],
    teacher: SpadTokenizer,
    cfg: MimConfig,
    train: MimTrainConfig,
    seed: int,
) -> tuple[SpadVit, dict]:
    """Memorization-style MIM: one fixed crop per volume, teacher grids
    precomputed once; masks are refreshed every step. The teacher is never
    updated (hashes recorded before and after)."""
    if not volumes:
        raise ConfigError("empty training set")
    if teacher.cfg.vocab != cfg.vocab:
        raise ConfigError(
            f"vocab mismatch: teacher {teacher.cfg.vocab} vs model {cfg.vocab}")
    teacher_params = teacher.named_parameters()
    hash_before = params_hash(teacher_params)

    root = np.random.SeedSequence(seed)
    init_rng, crop_rng = (np.random.default_rng(s) for s in root.spawn(2))
    model = SpadVit(init_rng, cfg)
    params = model.named_parameters()
    names = list(params)
    tensors = [params[n] for n in names]
    opt = Adam(params, lr=train.lr)

    # memorized regime: one fixed crop per volume, teacher targets encoded once
    crops, teacher_grids = [], []
    for vol in volumes:
        da = degree_of_anisotropy(vol.spacing)
        crop = crop_sample(vol, da, train.crop_base, crop_rng)
        grid = teacher.encode(crop)
        crops.append(crop)
        teacher_grids.append(
            TokenDistributionGrid(Tensor(grid.probs.data.copy()), grid.spacing))

    das = [degree_of_anisotropy(c.spacing) for c in crops]
    stats = {"ce": [], "mask_sizes": [], "grid_cells": []}
    step = 0
    epoch = 0
    mask_seed = seed * 1_000_003
    while step < train.steps:
        plan = da_bucket_batches(das, train.batch_size, seed=seed + epoch)
        epoch += 1
        for batch in plan.batches:
            if step >= train.steps:
                break
            losses = []
            for item in batch.item_ids:
                extents = teacher_grids[item].extents
                mask = sample_mask(extents, train.mask_ratio, mask_seed)
                mask_seed += 1
                pred = model.forward(crops[item], mask)
                losses.append(mim_loss(pred, teacher_grids[item], mask))
                stats["mask_sizes"].append(mask.n_masked)
                stats["grid_cells"].append(int(np.prod(extents)))
            total = losses[0]
            for l in losses[1:]:
                total = total + l
            total = total * (1.0 / len(losses))
            if not math.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            grads = grad(total, tensors)
            opt.step({n: g for n, g in zip(names, grads)})
            stats["ce"].append(total.item())
            step += 1

    stats["ce_initial"] = stats["ce"][0]
    stats["ce_final"] = float(np.mean(stats["ce"][-50:]))
    stats["teacher_hash_before"] = hash_before
    stats["teacher_hash_after"] = params_hash(teacher_params)
    return model, stats
