"""Spacing-adaptive convolutions.

A base convolution stores one isotropic parameter set. Per input, its depth
kernel and stride are transformed according to the input's degree of
anisotropy: depth resampling is skipped while the depth spacing is at least
twice the in-plane spacing, and the base weights are sum-pooled along depth
so that depth-constant inputs produce unchanged outputs. Upsampling stages
mirror what their symmetric encoder stage actually did, not what the
decoder-side spacing would suggest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import AdaptationError, PlanError
from .geometry import (
    Spacing,
    VolumeGrid,
    degree_of_anisotropy,
    propagate_spacing,
    spacing_to_json,
)
from .tensor import Tensor, conv3d, conv3d_transposed

_DOWN_KINDS = ("downsample", "k3s1", "generalized_down")
_UP_KINDS = ("upsample", "generalized_up")
_ALL_KINDS = _DOWN_KINDS + _UP_KINDS


@dataclass(frozen=True)
class BaseConvSpec:
    """Isotropic base convolution; kernel and stride are per-dim constants."""

    kind: str
    kernel: int
    stride: int
    channels_in: int
    channels_out: int
    k: Optional[int] = None  # resampling exponent for generalized kinds

    def __post_init__(self) -> None:
        if self.kind not in _ALL_KINDS:
            raise PlanError(f"unknown conv kind {self.kind!r}")
        if self.channels_in < 1 or self.channels_out < 1:
            raise PlanError("channel counts must be positive")
        if self.kind == "downsample":
            if self.kernel not in (2, 3) or self.stride != 2:
                raise PlanError(f"downsample must be kernel 2 or 3 with stride 2, got k{self.kernel}s{self.stride}")
        elif self.kind == "k3s1":
            if self.kernel != 3 or self.stride != 1:
                raise PlanError(f"k3s1 must be kernel 3 stride 1, got k{self.kernel}s{self.stride}")
        elif self.kind == "upsample":
            if self.kernel not in (2, 3) or self.stride != 2:
                raise PlanError(f"upsample must be kernel 2 or 3 with stride 2, got k{self.kernel}s{self.stride}")
        else:
            if self.k is None or self.k < 1:
                raise PlanError(f"generalized kinds need integer k >= 1, got {self.k!r}")
            if self.kernel != 2 ** self.k or self.stride != 2 ** self.k:
                raise PlanError(
                    f"generalized kinds need kernel == stride == 2^k == {2 ** self.k}, got k{self.kernel}s{self.stride}"
                )

    @property
    def is_transposed(self) -> bool:
        return self.kind in _UP_KINDS

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        kk = (self.kernel,) * 3
        if self.is_transposed:
            return (self.channels_in, self.channels_out) + kk
        return (self.channels_out, self.channels_in) + kk

    @staticmethod
    def downsample(channels_in: int, channels_out: int, kernel: int = 2) -> "BaseConvSpec":
        return BaseConvSpec("downsample", kernel, 2, channels_in, channels_out)

    @staticmethod
    def k3s1_block(channels_in: int, channels_out: int) -> "BaseConvSpec":
        return BaseConvSpec("k3s1", 3, 1, channels_in, channels_out)

    @staticmethod
    def upsample(channels_in: int, channels_out: int, kernel: int = 2) -> "BaseConvSpec":
        return BaseConvSpec("upsample", kernel, 2, channels_in, channels_out)

    @staticmethod
    def generalized_down(channels_in: int, channels_out: int, k: int) -> "BaseConvSpec":
        return BaseConvSpec("generalized_down", 2 ** k, 2 ** k, channels_in, channels_out, k=k)

    @staticmethod
    def generalized_up(channels_in: int, channels_out: int, k: int) -> "BaseConvSpec":
        return BaseConvSpec("generalized_up", 2 ** k, 2 ** k, channels_in, channels_out, k=k)


@dataclass(frozen=True)
class ConvAdaptation:
    """The per-input transformed view of a base convolution."""

    effective_kernel: tuple[int, int, int]
    effective_stride: tuple[int, int, int]
    depth_pool_window: int
    padding: tuple[int, int, int] = (0, 0, 0)
    transposed: bool = False
    output_spacing: Optional[Spacing] = None

    @property
    def depth_resampled(self) -> bool:
        return self.effective_stride[0] > 1


def sum_pool_weights(weight: Tensor, window: int) -> Tensor:
    """Sum non-overlapping depth windows of a (C?,C?,kd,kh,kw) weight."""
    if window < 1:
        raise AdaptationError(f"pool window must be >= 1, got {window}")
    if window == 1:
        return weight
    a, b, kd, kh, kw = weight.shape
    if kd % window != 0:
        raise AdaptationError(f"window {window} does not divide depth kernel {kd}")
    return weight.reshape(a, b, kd // window, window, kh, kw).sum(axis=3)


def adapt_generalized(
    k: int,
    da: int,
    direction: str,
    encoder_k0: Optional[int] = None,
    input_spacing: Optional[Spacing] = None,
) -> ConvAdaptation:
    """2^k resampling: skip depth resampling for the first min(k, da) halvings."""
    if k < 1:
        raise PlanError(f"generalized resampling needs k >= 1, got {k}")
    plane = 2 ** k
    if direction == "down":
        if encoder_k0 is not None:
            raise PlanError("encoder_k0 applies only to upsampling")
        k0 = max(k - da, 0)
        transposed = False
    elif direction == "up":
        if encoder_k0 is None:
            raise PlanError("generalized upsampling needs the encoder stage's k0")
        if not 0 <= encoder_k0 <= k:
            raise PlanError(f"encoder k0 {encoder_k0} outside [0, {k}]")
        k0 = encoder_k0
        transposed = True
    else:
        raise PlanError(f"direction must be down or up, got {direction!r}")
    depth = 2 ** k0
    window = 2 ** (k - k0)
    out_spacing = None
    if input_spacing is not None:
        out_spacing = propagate_spacing(
            input_spacing, (depth, plane, plane), "upsample" if transposed else "downsample"
        )
    return ConvAdaptation(
        effective_kernel=(depth, plane, plane),
        effective_stride=(depth, plane, plane),
        depth_pool_window=window,
        padding=(0, 0, 0),
        transposed=transposed,
        output_spacing=out_spacing,
    )


def adapt_conv(
    spec: BaseConvSpec,
    da: int,
    encoder_depth_resampled: Optional[bool] = None,
    encoder_k0: Optional[int] = None,
    input_spacing: Optional[Spacing] = None,
) -> ConvAdaptation:
    """Transform a base conv's kernel/stride for an input with anisotropy da."""
    if da < 0:
        raise AdaptationError(f"degree of anisotropy must be >= 0, got {da}")
    if spec.kind == "upsample":
        if encoder_depth_resampled is None:
            raise PlanError("upsample adaptation needs the encoder stage's depth_resampled flag")
    elif encoder_depth_resampled is not None:
        raise PlanError(f"encoder_depth_resampled does not apply to kind {spec.kind!r}")
    if spec.kind == "generalized_up":
        if encoder_k0 is None:
            raise PlanError("generalized upsampling needs the encoder stage's k0")
    elif encoder_k0 is not None:
        raise PlanError(f"encoder_k0 does not apply to kind {spec.kind!r}")

    if spec.kind == "generalized_down":
        return adapt_generalized(spec.k, da, "down", input_spacing=input_spacing)
    if spec.kind == "generalized_up":
        return adapt_generalized(spec.k, da, "up", encoder_k0=encoder_k0, input_spacing=input_spacing)

    kk, ss = spec.kernel, spec.stride
    if spec.kind == "downsample":
        if da >= 1:
            kernel, stride, window = (1, kk, kk), (1, ss, ss), kk
        else:
            kernel, stride, window = (kk,) * 3, (ss,) * 3, 1
        padding = (0, 0, 0)
        transposed = False
    elif spec.kind == "k3s1":
        if da >= 1:
            kernel, stride, window = (1, 3, 3), (1, 1, 1), 3
            padding = (0, 1, 1)
        else:
            kernel, stride, window = (3, 3, 3), (1, 1, 1), 1
            padding = (1, 1, 1)
        transposed = False
    else:  # upsample
        if encoder_depth_resampled:
            kernel, stride, window = (kk,) * 3, (ss,) * 3, 1
        else:
            kernel, stride, window = (1, kk, kk), (1, ss, ss), kk
        padding = (0, 0, 0)
        transposed = True

    out_spacing = None
    if input_spacing is not None:
        out_spacing = propagate_spacing(
            input_spacing, stride, "upsample" if transposed else "downsample"
        )
    return ConvAdaptation(kernel, stride, window, padding, transposed, out_spacing)


def apply_spad_conv(
    vol: VolumeGrid,
    spec: BaseConvSpec,
    weight: Tensor,
    history: Optional[object] = None,
) -> VolumeGrid:
    """Adapt to the input's spacing, pool the base weight, run the conv.

    history carries the mirrored encoder stage's record for upsampling kinds:
    a bool (depth_resampled) for `upsample`, an int (k0) for `generalized_up`.
    """
    if tuple(weight.shape) != spec.weight_shape:
        raise AdaptationError(f"weight shape {weight.shape} != base spec shape {spec.weight_shape}")
    da = degree_of_anisotropy(vol.spacing)
    if spec.kind == "upsample":
        adaptation = adapt_conv(spec, da, encoder_depth_resampled=bool(history), input_spacing=vol.spacing)
    elif spec.kind == "generalized_up":
        adaptation = adapt_conv(spec, da, encoder_k0=history, input_spacing=vol.spacing)
    else:
        if history is not None:
            raise PlanError(f"history does not apply to kind {spec.kind!r}")
        adaptation = adapt_conv(spec, da, input_spacing=vol.spacing)
    pooled = sum_pool_weights(weight, adaptation.depth_pool_window)
    x = vol.data if isinstance(vol.data, Tensor) else Tensor(vol.data)
    if adaptation.transposed:
        out = conv3d_transposed(x, pooled, adaptation.effective_stride, adaptation.padding)
    else:
        out = conv3d(x, pooled, adaptation.effective_stride, adaptation.padding)
    return VolumeGrid(out, adaptation.output_spacing, vol.modality)


@dataclass(frozen=True)
class PlanStage:
    index: int
    spec: BaseConvSpec
    adaptation: ConvAdaptation
    input_spacing: Spacing
    output_spacing: Spacing
    depth_resampled: bool
    da: int
    mirrors: Optional[int] = None  # encoder stage index, for upsampling kinds

    def as_dict(self) -> dict:
        return {
            "index": self.index,
            "kind": self.spec.kind,
            "base_kernel": self.spec.kernel,
            "base_stride": self.spec.stride,
            "channels_in": self.spec.channels_in,
            "channels_out": self.spec.channels_out,
            "da": self.da,
            "effective_kernel": list(self.adaptation.effective_kernel),
            "effective_stride": list(self.adaptation.effective_stride),
            "depth_pool_window": self.adaptation.depth_pool_window,
            "padding": list(self.adaptation.padding),
            "transposed": self.adaptation.transposed,
            "depth_resampled": self.depth_resampled,
            "input_spacing": spacing_to_json(self.input_spacing),
            "output_spacing": spacing_to_json(self.output_spacing),
            "mirrors": self.mirrors,
        }


@dataclass(frozen=True)
class NetworkPlan:
    input_spacing: Spacing
    stages: tuple[PlanStage, ...] = field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {
            "input_spacing": spacing_to_json(self.input_spacing),
            "stages": [s.as_dict() for s in self.stages],
        }

    @property
    def output_spacing(self) -> Spacing:
        return self.stages[-1].output_spacing if self.stages else self.input_spacing


def _mirror_matches(down: BaseConvSpec, up: BaseConvSpec) -> bool:
    if down.kind == "downsample" and up.kind == "upsample":
        return down.kernel == up.kernel
    if down.kind == "generalized_down" and up.kind == "generalized_up":
        return down.k == up.k
    return False


def plan_network(stages: Sequence[BaseConvSpec], input_spacing: Spacing) -> NetworkPlan:
    """Walk stages in order, adapting each to the running spacing.

    Downsampling stages record what they did to the depth axis; upsampling
    stages consume those records in reverse (last encoder stage first) and
    must mirror the encoder's resampling geometry.
    """
    encoder: list[tuple[int, BaseConvSpec, ConvAdaptation]] = []
    n_up_total = sum(1 for s in stages if s.kind in _UP_KINDS)
    seen_up = 0
    plan: list[PlanStage] = []
    spacing = input_spacing
    for idx, spec in enumerate(stages):
        da = degree_of_anisotropy(spacing)
        mirrors = None
        if spec.kind in _UP_KINDS:
            if not encoder:
                raise PlanError(f"stage {idx}: upsampling with no matching encoder stage")
            enc_idx, enc_spec, enc_ad = encoder.pop()
            if not _mirror_matches(enc_spec, spec):
                raise PlanError(
                    f"stage {idx} ({spec.kind} k{spec.kernel}) does not mirror "
                    f"encoder stage {enc_idx} ({enc_spec.kind} k{enc_spec.kernel})"
                )
            mirrors = enc_idx
            if spec.kind == "upsample":
                ad = adapt_conv(spec, da, encoder_depth_resampled=enc_ad.depth_resampled, input_spacing=spacing)
            else:
                ds = enc_ad.effective_stride[0]
                if ds & (ds - 1):
                    raise PlanError(f"encoder stage {enc_idx} has non-power-of-two depth stride")
                ad = adapt_conv(spec, da, encoder_k0=ds.bit_length() - 1, input_spacing=spacing)
            seen_up += 1
        elif spec.kind == "k3s1":
            ad = adapt_conv(spec, da, input_spacing=spacing)
        else:
            if seen_up:
                raise PlanError(f"stage {idx}: downsampling after upsampling began")
            ad = adapt_conv(spec, da, input_spacing=spacing)
            encoder.append((idx, spec, ad))
        plan.append(
            PlanStage(
                index=idx,
                spec=spec,
                adaptation=ad,
                input_spacing=spacing,
                output_spacing=ad.output_spacing,
                depth_resampled=ad.depth_resampled,
                da=da,
                mirrors=mirrors,
            )
        )
        spacing = ad.output_spacing
    if n_up_total and encoder:
        raise PlanError(
            f"decoder is not a full mirror: encoder stages {[e[0] for e in encoder]} unmatched"
        )
    return NetworkPlan(input_spacing=input_spacing, stages=tuple(plan))


def unet4_stages(channels_in: int = 1, widths: Sequence[int] = (16, 32, 64, 128)) -> list[BaseConvSpec]:
    """Four k2s2 downsamplings then the mirrored four upsamplings."""
    downs, prev = [], channels_in
    for w in widths:
        downs.append(BaseConvSpec.downsample(prev, w))
        prev = w
    ups = []
    rev = [channels_in] + list(widths)
    for i in range(len(widths) - 1, -1, -1):
        ups.append(BaseConvSpec.upsample(rev[i + 1], rev[i]))
    return downs + ups
