"""Command-line surface: planning, analysis, training, verification, evaluation.

Every subcommand prints one machine-readable JSON report to stdout (and
optionally writes it to --out); logs go to stderr. Exit codes: 0 success,
1 validation error, 2 runtime failure. Reports carry no timestamps, so a
fixed seed reproduces them byte for byte.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .datapipe import (
    SynthSpec,
    load_dataset_index,
    load_volume,
    preprocess,
    save_volume,
    synth_generate,
    write_dataset_index,
)
from .errors import ConfigError, SpadnetError
from .geometry import Spacing, VolumeGrid, degree_of_anisotropy, spacing_to_json
from .metrics import BinaryMask, assd, dice, hausdorff
from .mim import MimConfig, MimTrainConfig, train_mim_toy
from .nn import (
    MultiHeadAttention,
    load_checkpoint,
    params_hash,
    restore_params,
    save_checkpoint,
)
from .rope3d import RopeParams, rope_report, rope_rotate
from .spadconv import (
    BaseConvSpec,
    conv3d,
    conv3d_transposed,
    plan_network,
    sum_pool_weights,
    unet4_stages,
)
from .tensor import Tensor, check_gradients, parameter, softmax_lastdim
from .tokenizer import (
    PdrConfig,
    SpadTokenizer,
    TokenDistributionGrid,
    TokenizerConfig,
    TrainConfig,
    dual_pdr_loss,
    reconstruction_loss,
    train_tokenizer_toy,
)

log = logging.getLogger("spadnet")


@dataclasses.dataclass(frozen=True)
class CliConfig:
    """Common flags shared by every subcommand."""

    subcommand: str
    config: str | None
    seed: int
    out: str | None
    verbosity: int


# -- flag parsing helpers -------------------------------------------------------


def parse_spacing(text: str) -> Spacing:
    parts = text.split(",")
    if parts[0].strip().lower() == "2d":
        if len(parts) == 1:
            return Spacing.two_d()
        if len(parts) == 3:
            return Spacing.two_d(float(parts[1]), float(parts[2]))
    elif len(parts) == 3:
        return Spacing(*(float(p) for p in parts))
    raise ConfigError(f"spacing must be 's,h,w', '2d' or '2d,h,w', got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(","))


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}")


def load_stage_specs(source: str) -> list[BaseConvSpec]:
    """Built-in spec names or a JSON file with a stage array."""
    if source == "unet4":
        return unet4_stages()
    entries = _load_json(source)
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"stage file {source} must hold a non-empty JSON array")
    stages = []
    for e in entries:
        kind = e.get("kind")
        cin, cout = e.get("channels_in"), e.get("channels_out")
        if kind is None or cin is None or cout is None:
            raise ConfigError(f"stage entry needs kind/channels_in/channels_out: {e}")
        if kind == "downsample":
            stages.append(BaseConvSpec.downsample(cin, cout, e.get("kernel", 2)))
        elif kind == "k3s1":
            stages.append(BaseConvSpec.k3s1_block(cin, cout))
        elif kind == "upsample":
            stages.append(BaseConvSpec.upsample(cin, cout, e.get("kernel", 2)))
        elif kind == "generalized_down":
            stages.append(BaseConvSpec.generalized_down(cin, cout, e.get("k", 1)))
        elif kind == "generalized_up":
            stages.append(BaseConvSpec.generalized_up(cin, cout, e.get("k", 1)))
        else:
            raise ConfigError(f"unknown stage kind {kind!r}")
    return stages


def _emit(report: dict, out: str | None) -> None:
    payload = json.dumps(report, indent=2)
    print(payload)
    if out:
        Path(out).write_text(payload + "\n")


# -- subcommands ----------------------------------------------------------------


def cmd_plan(args) -> dict:
    spacing = parse_spacing(args.spacing)
    stages = load_stage_specs(args.stages)
    plan = plan_network(stages, spacing)
    log.info("planned %d stages from spacing %s", len(plan.stages), args.spacing)
    return plan.as_dict()


def cmd_rope_analyze(args) -> dict:
    bases = _parse_floats(args.bases)
    if len(bases) != 3:
        raise ConfigError(f"--bases needs three values, got {args.bases!r}")
    grid = _parse_ints(args.grid)
    if len(grid) != 2:
        raise ConfigError(f"--grid needs 'z,x', got {args.grid!r}")
    sweep = _parse_ints(args.d_sweep)
    return rope_report(d_sweep=sweep, default_d=args.d, z=grid[0], x=grid[1],
                       b_x=bases[0], b_y=bases[1], b_z=bases[2])


def _load_training_volumes(data_cfg: dict, seed: int) -> list[VolumeGrid]:
    if "index" in data_cfg:
        root = Path(data_cfg.get("root", "."))
        entries = load_dataset_index(root / data_cfg["index"])
        vols = []
        for e in entries:
            vol = load_volume(root / e["path"])
            vols.append(vol if vol.depth_axis_moved else preprocess(vol))
        return vols
    synth = {k: v for k, v in data_cfg.items() if k != "seed"}
    if "spacings" in synth:
        synth["spacings"] = tuple(
            s if s == "2d" else tuple(float(x) for x in s) for s in synth["spacings"])
    try:
        spec = SynthSpec(**synth)
    except TypeError as e:
        raise ConfigError(f"bad synthetic data config: {e}")
    return synth_generate(spec, data_cfg.get("seed", seed))


def _tokenizer_from_config(section: dict) -> TokenizerConfig:
    fields = dict(section)
    if "widths" in fields:
        fields["widths"] = tuple(fields["widths"])
    try:
        return TokenizerConfig(**fields)
    except TypeError as e:
        raise ConfigError(f"bad tokenizer config: {e}")


def _train_config(section: dict, cls):
    fields = dict(section)
    if "crop_base" in fields:
        fields["crop_base"] = tuple(fields["crop_base"])
    try:
        return cls(**fields)
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}")


def cmd_train_tokenizer(args) -> dict:
    cfg = _load_json(args.config)
    for key in ("data", "tokenizer", "train"):
        if key not in cfg:
            raise ConfigError(f"train-tokenizer config needs a {key!r} section")
    volumes = _load_training_volumes(cfg["data"], args.seed)
    tok_cfg = _tokenizer_from_config(cfg["tokenizer"])
    pdr = PdrConfig(**cfg.get("pdr", {}))
    train = _train_config(cfg["train"], TrainConfig)
    log.info("training tokenizer: %d volumes, %d steps", len(volumes), train.steps)
    model, stats = train_tokenizer_toy(volumes, tok_cfg, pdr, train, args.seed)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "tokenizer.zip"
    params = model.named_parameters()
    save_checkpoint(ckpt, params, {"kind": "tokenizer", "config": cfg["tokenizer"],
                                   "seed": args.seed})
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    return {
        "checkpoint": str(ckpt),
        "params_hash": params_hash(params),
        "steps": train.steps,
        "rec_initial": stats["rec_initial"],
        "rec_final": stats["rec_final"],
        "utilized_tokens": stats["utilization"]["utilized_tokens"],
        "mean_kl_to_uniform": stats["utilization"]["mean_kl_to_uniform"],
    }


def cmd_train_mim(args) -> dict:
    cfg = _load_json(args.config)
    for key in ("data", "teacher", "mim", "train"):
        if key not in cfg:
            raise ConfigError(f"train-mim config needs a {key!r} section")
    teacher_cfg = cfg["teacher"]
    if "tokenizer" not in teacher_cfg or "checkpoint" not in teacher_cfg:
        raise ConfigError("teacher section needs 'tokenizer' and 'checkpoint'")
    teacher = SpadTokenizer(np.random.default_rng(0),
                            _tokenizer_from_config(teacher_cfg["tokenizer"]))
    _, blobs = load_checkpoint(teacher_cfg["checkpoint"])
    restore_params(teacher.named_parameters(), blobs)

    volumes = _load_training_volumes(cfg["data"], args.seed)
    try:
        mim_cfg = MimConfig(**cfg["mim"])
    except TypeError as e:
        raise ConfigError(f"bad mim config: {e}")
    train = _train_config(cfg["train"], MimTrainConfig)
    log.info("training mim: %d volumes, %d steps", len(volumes), train.steps)
    model, stats = train_mim_toy(volumes, teacher, mim_cfg, train, args.seed)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "mim.zip"
    params = model.named_parameters()
    save_checkpoint(ckpt, params, {"kind": "mim", "config": cfg["mim"],
                                   "seed": args.seed})
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    return {
        "checkpoint": str(ckpt),
        "params_hash": params_hash(params),
        "steps": train.steps,
        "ce_initial": stats["ce_initial"],
        "ce_final": stats["ce_final"],
        "teacher_frozen": stats["teacher_hash_before"] == stats["teacher_hash_after"],
    }


def cmd_synth_data(args) -> dict:
    spacings = tuple(
        s if s == "2d" else tuple(float(x) for x in s.split(","))
        for s in args.spacings.split(";"))
    spec = SynthSpec(n=args.n, channels=args.channels, depth=args.depth,
                     height=args.height, width=args.width, spacings=spacings)
    volumes = synth_generate(spec, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, rows = [], []
    for i, vol in enumerate(volumes):
        name = f"vol_{i:04d}.vol"
        save_volume(vol, out_dir / name)
        entries.append({"path": name, "modality": vol.modality})
        rows.append({"path": name, "spacing": spacing_to_json(vol.spacing),
                     "da": degree_of_anisotropy(vol.spacing)})
    write_dataset_index(entries, out_dir / "index.json")
    return {"dir": str(out_dir), "index": str(out_dir / "index.json"),
            "n": len(volumes), "volumes": rows}


def cmd_preprocess(args) -> dict:
    vol = load_volume(args.input)
    raw_spacing = (spacing_to_json(vol.spacing) if isinstance(vol.spacing, Spacing)
                   else [float(s) for s in vol.spacing])
    out = preprocess(vol, args.depth_axis_hint)
    save_volume(out, args.output)
    return {
        "input": args.input,
        "output": args.output,
        "input_shape": list(np.asarray(vol.data).shape),
        "input_spacing": raw_spacing,
        "output_shape": list(np.asarray(out.data).shape),
        "output_spacing": spacing_to_json(out.spacing),
        "da": degree_of_anisotropy(out.spacing),
    }


def cmd_eval_metrics(args) -> dict:
    masks = []
    for path in (args.pred, args.ref):
        vol = load_volume(path)
        data = np.asarray(vol.data)
        if data.shape[0] != 1:
            raise ConfigError(f"{path}: mask volumes must be single channel")
        masks.append(BinaryMask(data[0] > args.threshold, vol.spacing))
    pred, ref = masks
    flag = bool(args.index_space)
    return {
        "dice": dice(pred, ref),
        "assd_mm": assd(pred, ref, index_space=flag),
        "hd_mm": hausdorff(pred, ref, index_space=flag),
        "pred": args.pred,
        "ref": args.ref,
        "threshold": args.threshold,
        "index_space": flag,
    }


# -- gradient verification ------------------------------------------------------


def _failing_params(f, params: dict) -> tuple[bool, float, list[str]]:
    """Per-parameter finite-difference check; returns the offending paths."""
    worst = 0.0
    failing = []
    for name in sorted(params):
        ok, rel = check_gradients(f, [params[name]])
        worst = max(worst, rel)
        if not ok:
            failing.append(name)
    return not failing, worst, failing


def _tensor_checks(rng) -> list[tuple[str, dict, object]]:
    x = parameter(rng, (3, 4))
    w = parameter(rng, (4, 5))
    b = parameter(rng, (5,))
    mix = {"x": x, "w": w, "b": b}
    soft = parameter(rng, (6, 8))
    pos = parameter(rng, (2, 3, 3), scale=1.0)
    pos.data += np.sign(pos.data) * 0.2  # keep abs() off its kink
    return [
        ("tensor.affine_gelu", mix,
         lambda: ((x @ w + b).gelu() * 0.5).sum()),
        ("tensor.exp_log_power", {"x": x},
         lambda: ((x * 0.3).exp() + (x * x + 1.2).log()).sum()),
        ("tensor.softmax_entropy", {"soft": soft},
         lambda: -(softmax_lastdim(soft)
                   * softmax_lastdim(soft).maximum_const(1e-12).log()).sum()),
        ("tensor.abs_mean", {"pos": pos}, lambda: pos.abs().mean()),
        ("tensor.reshape_transpose_slice", {"x": x},
         lambda: x.reshape(4, 3).transpose((1, 0))[1:, :].sum()),
    ]


def _conv_checks(rng) -> list[tuple[str, dict, object]]:
    vol = parameter(rng, (2, 4, 6, 6))
    w_down = parameter(rng, (3, 2, 2, 2, 2))
    w_same = parameter(rng, (2, 2, 3, 3, 3))
    w_up = parameter(rng, (2, 3, 2, 2, 2))
    w_pool = parameter(rng, (3, 2, 4, 3, 3))
    return [
        ("conv.k2s2", {"vol": vol, "w": w_down},
         lambda: conv3d(vol, w_down, (2, 2, 2), (0, 0, 0)).sum()),
        ("conv.k3s1_padded", {"vol": vol, "w": w_same},
         lambda: (conv3d(vol, w_same, (1, 1, 1), (1, 1, 1)) * 0.1).sum()),
        ("conv.transposed", {"vol": vol, "w": w_up},
         lambda: conv3d_transposed(vol, w_up, (2, 2, 2), (0, 0, 0)).sum()),
        ("conv.depth_sum_pool", {"w": w_pool},
         lambda: (sum_pool_weights(w_pool, 4) * 0.25).sum()),
    ]


def _rope_property_checks(rng) -> list[dict]:
    """Norm preservation and translation invariance, reported like checks."""
    params = RopeParams(d=16)
    worst_norm = 0.0
    worst_shift = 0.0
    for _ in range(25):
        vec = rng.normal(size=16)
        pos = rng.integers(0, 50, size=3)
        rot = rope_rotate(vec, pos, params)
        worst_norm = max(worst_norm,
                         abs(np.linalg.norm(rot) - np.linalg.norm(vec)))
        a, b = rng.normal(size=(2, 16))
        off = rng.integers(-40, 40, size=3)
        base = np.dot(rope_rotate(a, pos, params), rope_rotate(b, pos + 7, params))
        moved = np.dot(rope_rotate(a, pos + off, params),
                       rope_rotate(b, pos + 7 + off, params))
        worst_shift = max(worst_shift, abs(base - moved))
    return [
        {"name": "rope.norm_preserved", "ok": bool(worst_norm <= 1e-9),
         "worst_rel_err": float(worst_norm), "failing": []},
        {"name": "rope.translation_invariant", "ok": bool(worst_shift <= 1e-9),
         "worst_rel_err": float(worst_shift), "failing": []},
    ]


def _rope_grad_checks(rng) -> list[tuple[str, dict, object]]:
    attn = MultiHeadAttention(np.random.default_rng(int(rng.integers(1 << 31))),
                              16, 2, dtype=np.float64)
    x = parameter(rng, (5, 16))
    positions = rng.integers(0, 12, size=(5, 3)).astype(np.float64)
    params = {"x": x}
    params.update({f"attn.{k}": v for k, v in attn.named_parameters().items()})
    return [("rope.attention_gradients", params,
             lambda: (attn(x, positions) * 0.3).sum())]


def _loss_checks(rng) -> list[tuple[str, dict, object]]:
    x = parameter(rng, (2, 3, 4, 4), scale=1.0)
    x_hat = parameter(rng, (2, 3, 4, 4), scale=1.0)
    x_hat.data += np.sign(x_hat.data - x.data) * 0.2  # keep MAE off its kink
    logits = parameter(rng, (2, 2, 2, 5))
    pdr = PdrConfig(0.7, 0.4)
    teacher_rows = rng.dirichlet(np.ones(5), size=8).reshape(2, 2, 2, 5)
    teacher = TokenDistributionGrid(Tensor(teacher_rows), Spacing(16.0, 16.0, 16.0))
    masked = [0, 2, 5, 7]

    def pdr_loss():
        grid = TokenDistributionGrid(softmax_lastdim(logits), Spacing(16.0, 16.0, 16.0))
        return dual_pdr_loss(grid, pdr)

    def mim_ce():
        probs = softmax_lastdim(logits).reshape(8, 5)[masked]
        return -(probs.maximum_const(1e-12).log()
                 * teacher.rows().data[masked]).sum() * (1.0 / len(masked))

    return [
        ("losses.reconstruction_mae", {"x_hat": x_hat},
         lambda: reconstruction_loss(x, x_hat)),
        ("losses.dual_pdr", {"logits": logits}, pdr_loss),
        ("losses.masked_cross_entropy", {"logits": logits}, mim_ce),
    ]


_GRAD_SCOPES = ("tensor", "conv", "rope", "losses")


def run_grad_checks(scope: str, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    scopes = _GRAD_SCOPES if scope == "all" else (scope,)
    if any(s not in _GRAD_SCOPES for s in scopes):
        raise ConfigError(f"unknown scope {scope!r}; choose all|" + "|".join(_GRAD_SCOPES))
    results = []
    for name in scopes:
        if name == "tensor":
            batches = _tensor_checks(rng)
        elif name == "conv":
            batches = _conv_checks(rng)
        elif name == "rope":
            results.extend(_rope_property_checks(rng))
            batches = _rope_grad_checks(rng)
        else:
            batches = _loss_checks(rng)
        for check_name, params, f in batches:
            ok, worst, failing = _failing_params(f, params)
            results.append({"name": check_name, "ok": ok,
                            "worst_rel_err": worst, "failing": failing})
            log.info("%s: %s (worst rel err %.3g)",
                     check_name, "ok" if ok else "FAIL", worst)
    return {"scope": scope, "seed": seed, "checks": results,
            "all_ok": all(r["ok"] for r in results)}


def run_grad_self_test(seed: int) -> dict:
    """Verify the harness catches a backward pass with the wrong sign."""
    rng = np.random.default_rng(seed)
    good = parameter(rng, (3, 3))
    bad = parameter(rng, (3, 3))

    def broken_square(t: Tensor) -> Tensor:
        def backward(g):
            t._accumulate(-2.0 * g * t.data)  # sign flipped on purpose
        return Tensor._op(t.data ** 2, (t,), backward)

    def f():
        return (good * good).sum() + broken_square(bad).sum()

    ok, worst, failing = _failing_params(f, {"double.good": good, "double.bad": bad})
    detected = (not ok) and failing == ["double.bad"]
    return {"self_test": {"detected": detected, "offending": failing,
                          "worst_rel_err": worst}}


def cmd_grad_check(args) -> dict:
    if args.self_test:
        return run_grad_self_test(args.seed)
    return run_grad_checks(args.scope, args.seed)


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spadnet")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="also write the JSON report here")

    p = sub.add_parser("plan", help="adapt a stage stack to a voxel spacing")
    p.add_argument("--spacing", required=True, help="'s,h,w' or '2d'")
    p.add_argument("--stages", default="unet4", help="built-in name or JSON file")
    common(p)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("rope-analyze", help="rotary angle gap analysis")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--d-sweep", default="32,64,128")
    p.add_argument("--bases", default="10000,10000,2333")
    p.add_argument("--grid", default="8,16", help="'z,x' extents")
    common(p)
    p.set_defaults(fn=cmd_rope_analyze)

    p = sub.add_parser("train-tokenizer", help="toy tokenizer training run")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    common(p)
    p.set_defaults(fn=cmd_train_tokenizer)

    p = sub.add_parser("train-mim", help="toy masked token modeling run")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    common(p)
    p.set_defaults(fn=cmd_train_mim)

    p = sub.add_parser("grad-check", help="finite-difference verification")
    p.add_argument("--scope", default="all")
    p.add_argument("--self-test", action="store_true",
                   help="verify the harness flags an injected sign error")
    common(p)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("eval-metrics", help="Dice/ASSD/HD between two masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--index-space", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_eval_metrics)

    p = sub.add_parser("synth-data", help="write a synthetic volume corpus")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--depth", type=int, default=16)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--spacings", default="4,1,1;1,1,1",
                   help="semicolon-separated 's,h,w' entries or '2d'")
    p.add_argument("--out-dir", required=True)
    common(p)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("preprocess", help="canonicalize one volume file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--depth-axis-hint", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_preprocess)

    return parser


def _thread_cap():
    raw = os.environ.get("SPADNET_THREADS")
    if not raw:
        return None
    try:
        limit = int(raw)
    except ValueError:
        raise ConfigError(f"SPADNET_THREADS must be an integer, got {raw!r}")
    if limit < 1:
        raise ConfigError(f"SPADNET_THREADS must be >= 1, got {limit}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose > 1 else
        logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    cli = CliConfig(args.subcommand, getattr(args, "config", None),
                    args.seed, args.out, args.verbose)
    try:
        cap = _thread_cap()
        try:
            report = args.fn(args)
        finally:
            if cap is not None:
                cap.unregister()
    except SpadnetError as e:
        log.error("%s", e)
        _emit({"error": str(e), "error_type": type(e).__name__}, cli.out)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        log.error("%s: %s", type(e).__name__, e)
        _emit({"error": str(e), "error_type": type(e).__name__}, cli.out)
        return 2
    _emit(report, cli.out)
    if args.subcommand == "grad-check":
        if args.self_test:
            return 0 if report["self_test"]["detected"] else 2
        return 0 if report["all_ok"] else 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
