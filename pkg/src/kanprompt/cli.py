"""Command-line surface: synth, train, eval, ablate, report.

Every command is a thin shell over the library and writes one run manifest
alongside its outputs. Option precedence: flags > config file > environment
seed > defaults.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .data import SplitConfig, load_dataset, load_sample_arrays, split_train_val, synth_generate
from .losses import LossWeights
from .model import ModelConfig, SegmentationModel
from .training import (
    TrainConfig,
    ablate,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    train,
    write_ablation_csv,
    write_history_csv,
)

SEED_ENV_VAR = "KANPROMPT_SEED"


class CliError(Exception):
    """User-facing command-line failure."""


def _read_config_file(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"could not read config file {path}: {e}") from e


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, config file, and explicitly given flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _read_config_file(args.config)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise CliError(f"config file sets unknown option(s): {', '.join(unknown)}")
        resolved.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    if resolved.get("seed") is None:
        env_seed = os.environ.get(SEED_ENV_VAR)
        resolved["seed"] = int(env_seed) if env_seed is not None else 0
    return resolved


def _require(resolved: dict, keys) -> None:
    missing = [k for k in keys if resolved.get(k) is None]
    if missing:
        raise CliError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _write_manifest(path: Path, command: str, config: dict, inputs: dict, outputs, seed, t0, status, error=None):
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": [str(o) for o in outputs],
        "seed": seed,
        "tool_version": __version__,
        "duration_s": round(time.monotonic() - t0, 3),
        "status": status,
    }
    if error is not None:
        manifest["error"] = str(error)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


_MODEL_KEYS = (
    "k",
    "encoder_dim",
    "encoder_depth",
    "decoder_dim",
    "decoder_depth",
    "prompt_kind",
    "prompt_depth",
    "shared_prompt_net",
    "token_self_attention",
)


def _model_config(resolved: dict) -> ModelConfig:
    return ModelConfig(**{k: resolved[k] for k in _MODEL_KEYS if k in resolved})


def _train_config(resolved: dict) -> TrainConfig:
    freeze = resolved.get("freeze", "none")
    if isinstance(freeze, str):
        freeze = {
            "none": (),
            "both": ("sam2_stub", "pathology_stub"),
        }.get(freeze, (freeze,))
    return TrainConfig(
        lr=resolved["lr"],
        weight_decay=resolved["weight_decay"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch"],
        seed=resolved["seed"],
        prompt_kind=resolved["prompt_kind"],
        loss=LossWeights(alpha=resolved["alpha"], beta=resolved["beta"]),
        freeze=tuple(freeze),
    )


_TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "seed": None,
    "k": 2,
    "epochs": 100,
    "batch": 4,
    "lr": 1e-5,
    "weight_decay": 1e-2,
    "alpha": 0.125,
    "beta": 0.01,
    "prompt_kind": "kan",
    "freeze": "none",
    "val_fraction": 0.20,
    "encoder_dim": 64,
    "encoder_depth": 4,
    "decoder_dim": 256,
    "decoder_depth": 2,
    "prompt_depth": 3,
    "shared_prompt_net": False,
    "token_self_attention": False,
}


def cmd_synth(args) -> int:
    defaults = {"seed": None, "n": 20, "k": 2, "size": 64, "out": None}
    resolved = _resolve(args, defaults)
    _require(resolved, ["out"])
    out = Path(resolved["out"])
    t0 = time.monotonic()
    manifest_path = out.parent / f"{out.name}.manifest.json"
    try:
        spec = synth_generate(resolved["seed"], resolved["n"], resolved["k"], resolved["size"], out)
    except Exception as e:
        _write_manifest(manifest_path, "synth", resolved, {}, [out], resolved["seed"], t0, "failed", e)
        raise
    _write_manifest(manifest_path, "synth", resolved, {}, [out], resolved["seed"], t0, "ok")
    print(f"wrote {len(spec)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    resolved = _resolve(args, _TRAIN_DEFAULTS)
    _require(resolved, ["data", "out"])
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    outputs = [out / "checkpoint", out / "history.csv"]
    try:
        spec = load_dataset(resolved["data"], resolved["k"])
        train_spec, val_spec = split_train_val(
            spec, SplitConfig(val_fraction=resolved["val_fraction"], seed=resolved["seed"])
        )
        tcfg = _train_config(resolved)
        model = SegmentationModel(_model_config(resolved), seed=tcfg.seed)
        ckpt = train(model, train_spec, val_spec, tcfg)
        checkpoint_save(ckpt, out / "checkpoint")
        write_history_csv(ckpt.history, out / "history.csv")
    except Exception as e:
        _write_manifest(
            out / "manifest.json", "train", resolved, {"data": resolved["data"]}, outputs,
            resolved["seed"], t0, "failed", e,
        )
        raise
    _write_manifest(
        out / "manifest.json", "train", resolved, {"data": resolved["data"]}, outputs,
        resolved["seed"], t0, "ok",
    )
    last = ckpt.history[-1]
    print(f"trained {last.epoch} epochs; best val mean IOU {max(r.val_mean_iou for r in ckpt.history):.4f}")
    return 0


def cmd_eval(args) -> int:
    defaults = {"ckpt": None, "data": None, "out": None, "seed": None, "k": None, "pooled": False}
    resolved = _resolve(args, defaults)
    _require(resolved, ["ckpt", "data", "out"])
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    try:
        ckpt = checkpoint_load(resolved["ckpt"])
        k = resolved["k"] if resolved["k"] is not None else ckpt.model_config.k
        spec = load_dataset(resolved["data"], k)
        report = evaluate(ckpt, spec, pooled=resolved["pooled"])
        report.to_csv(out / "metrics.csv")
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    except Exception as e:
        _write_manifest(
            out / "manifest.json", "eval", resolved,
            {"ckpt": resolved["ckpt"], "data": resolved["data"]},
            [out / "metrics.csv"], resolved["seed"], t0, "failed", e,
        )
        raise
    _write_manifest(
        out / "manifest.json", "eval", resolved,
        {"ckpt": resolved["ckpt"], "data": resolved["data"]},
        [out / "metrics.csv", out / "metrics.json"], resolved["seed"], t0, "ok",
    )
    print(f"mean DSC {report.mean_dsc:.4f}, mean IOU {report.mean_iou:.4f} over {report.sample_count} samples")
    return 0


def cmd_ablate(args) -> int:
    resolved = _resolve(args, _TRAIN_DEFAULTS)
    _require(resolved, ["data", "out"])
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    try:
        spec = load_dataset(resolved["data"], resolved["k"])
        train_spec, val_spec = split_train_val(
            spec, SplitConfig(val_fraction=resolved["val_fraction"], seed=resolved["seed"])
        )
        rows = ablate(_model_config(resolved), _train_config(resolved), train_spec, val_spec)
        write_ablation_csv(rows, out / "ablation.csv")
    except Exception as e:
        _write_manifest(
            out / "manifest.json", "ablate", resolved, {"data": resolved["data"]},
            [out / "ablation.csv"], resolved["seed"], t0, "failed", e,
        )
        raise
    _write_manifest(
        out / "manifest.json", "ablate", resolved, {"data": resolved["data"]},
        [out / "ablation.csv"], resolved["seed"], t0, "ok",
    )
    for row in rows:
        print(f"{row.prompt_kind}: DSC {row.mean_dsc:.4f}, IOU {row.mean_iou:.4f}")
    return 0


def cmd_report(args) -> int:
    defaults = {"ckpt": None, "data": None, "out": None, "seed": None, "panels": 4}
    resolved = _resolve(args, defaults)
    _require(resolved, ["ckpt", "data", "out"])
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    outputs = [out / "loss_curve.png", out / "iou_bars.png", out / "panels.png"]
    try:
        from . import report as report_mod
        from .decoder import SegmentationOutput, predict_semantic

        ckpt = checkpoint_load(resolved["ckpt"])
        spec = load_dataset(resolved["data"], ckpt.model_config.k)
        model = ckpt.build_model()
        report_mod.plot_loss_curve(ckpt.history, out / "loss_curve.png")
        metrics = evaluate(model, spec)
        report_mod.plot_iou_bars(metrics, out / "iou_bars.png")
        images, labels = load_sample_arrays(spec)
        n = min(resolved["panels"], images.shape[0])
        preds = []
        for i in range(n):
            preds.append(predict_semantic(model.predict(images[i])))
        report_mod.render_panels(
            images[:n].numpy(), [l.numpy() for l in labels[:n]], preds, spec.k, out / "panels.png"
        )
    except Exception as e:
        _write_manifest(
            out / "manifest.json", "report", resolved,
            {"ckpt": resolved["ckpt"], "data": resolved["data"]},
            outputs, resolved["seed"], t0, "failed", e,
        )
        raise
    _write_manifest(
        out / "manifest.json", "report", resolved,
        {"ckpt": resolved["ckpt"], "data": resolved["data"]},
        outputs, resolved["seed"], t0, "ok",
    )
    print(f"wrote {len(outputs)} figures to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kanprompt",
        description="Train and evaluate the dual-encoder prompt-token segmenter.",
    )
    parser.add_argument("--version", action="version", version=f"kanprompt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p_synth = sub.add_parser("synth", help="generate a synthetic blob dataset")
    add_common(p_synth)
    p_synth.add_argument("--n", type=int, help="number of samples")
    p_synth.add_argument("--k", type=int, help="number of classes incl. background")
    p_synth.add_argument("--size", type=int, help="square image size, multiple of 16")
    p_synth.set_defaults(func=cmd_synth)

    def add_train_flags(p):
        add_common(p)
        p.add_argument("--data", help="dataset root with images/ and masks/")
        p.add_argument("--k", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--prompt-kind", dest="prompt_kind", choices=["kan", "mlp"])
        p.add_argument("--freeze", choices=["sam2_stub", "pathology_stub", "none", "both"])
        p.add_argument("--val-fraction", dest="val_fraction", type=float)

    p_train = sub.add_parser("train", help="train on a dataset and write a checkpoint")
    add_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    add_common(p_eval)
    p_eval.add_argument("--ckpt", help="checkpoint directory")
    p_eval.add_argument("--data")
    p_eval.add_argument("--k", type=int)
    p_eval.add_argument("--pooled", action="store_const", const=True, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="train twin models (kan vs mlp prompts) and compare")
    add_train_flags(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="render loss curve, metric bars, and panels")
    add_common(p_report)
    p_report.add_argument("--ckpt")
    p_report.add_argument("--data")
    p_report.add_argument("--panels", type=int)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        parser.print_usage(sys.stderr)
        print(f"kanprompt {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"kanprompt {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
