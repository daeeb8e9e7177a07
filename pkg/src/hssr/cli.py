"""Batch command-line pipeline: prepare, train, sr, eval, uncertainty.

Every command validates its inputs up front, writes outputs atomically
(temp file + rename), and is deterministic given its seeds. Exit codes:
0 success, 1 runtime failure (e.g. divergence), 2 configuration or
validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParameterError, TrainingError
from .evaluate import evaluate_pairs, mc_infer, report_csv, report_text, uncertainty
from .hsdata import (
    DatasetManifest,
    HSCube,
    extract_patches,
    make_lr,
    read_cube,
    read_manifest,
    write_cube,
    write_manifest,
)
from .model import NetConfig
from .tensor import bicubic_resize_array
from .train import TrainConfig, load_checkpoint, train

__all__ = ["main", "read_run_config", "CONFIG_SCHEMA"]

# config-file schema: key -> (type, default or REQUIRED, help)
_REQ = object()
CONFIG_SCHEMA = {
    "manifest": (str, _REQ, "dataset manifest path, relative to the config file"),
    "scale": (int, None, "upscaling factor; default: taken from the manifest"),
    "stages": (int, 4, "refinement stages T"),
    "units_per_stage": (int, 3, "embedding units J per stage"),
    "channels": (int, 32, "feature channels C"),
    "lr0": (float, 5e-4, "initial Adam learning rate"),
    "beta1": (float, 0.9, "Adam first-moment decay"),
    "beta2": (float, 0.999, "Adam second-moment decay"),
    "eps": (float, 1e-8, "Adam epsilon"),
    "halve_every": (int, 25, "halve the learning rate every N main epochs"),
    "warmup_epochs": (int, 50, "gate-open warm-up epochs"),
    "main_epochs": (int, 100, "joint training epochs"),
    "batch": (int, 4, "patches per optimization step"),
    "lambda": (float, 1.0, "weight of the source-consistency loss term"),
    "seed": (int, 0, "training seed"),
    "tau": (float, 2.0 / 3.0, "gate relaxation temperature"),
    "augment": (bool, True, "random rotations/flips during training"),
    "checkpoint_every": (int, 0, "periodic checkpoint interval; 0 = final only"),
}

_BOOL_WORDS = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


def _parse_value(key: str, raw: str):
    typ = CONFIG_SCHEMA[key][0]
    if typ is bool:
        word = raw.strip().lower()
        if word not in _BOOL_WORDS:
            raise ParameterError(f"config key {key!r}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    try:
        return typ(raw.strip())
    except ValueError:
        raise ParameterError(
            f"config key {key!r}: expected {typ.__name__}, got {raw!r}"
        ) from None


def read_run_config(path, overrides=()) -> dict:
    """Parse a key=value config file; unknown keys are rejected."""
    path = Path(path)
    values = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise FormatError(f"{path}:{ln}: expected key=value, got {line!r}")
        if key not in CONFIG_SCHEMA:
            raise FormatError(f"{path}:{ln}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or key not in CONFIG_SCHEMA:
            raise ParameterError(f"--set expects known key=value, got {item!r}")
        values[key] = _parse_value(key, raw)
    for key, (_, default, _help) in CONFIG_SCHEMA.items():
        if key not in values:
            if default is _REQ:
                raise ParameterError(f"config is missing required key {key!r}")
            values[key] = default
    return values


def _atomic_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _cube_files(path: Path) -> list:
    if path.is_dir():
        files = sorted(path.glob("*.hsc"))
        if not files:
            raise ParameterError(f"no .hsc cubes found in {path}")
        return files
    return [path]


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    src = read_manifest(Path(args.manifest))
    if not src.entries:
        raise ParameterError(f"{args.manifest}: manifest lists no cubes")
    src_dir = Path(args.manifest).parent
    out = Path(args.out)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    derived = DatasetManifest(
        scale=args.scale, patch=args.patch, stride=args.stride, seed=args.seed
    )
    for rel, role in src.entries:
        cube = read_cube(src_dir / rel)
        (out / "hr" / role).mkdir(parents=True, exist_ok=True)
        (out / "lr" / role).mkdir(parents=True, exist_ok=True)
        for patch in extract_patches(cube, args.patch, args.stride):
            lr = make_lr(patch, args.scale, args.noise_sigma, rng)
            write_cube(patch, out / "hr" / role / f"{patch.name}.hsc")
            write_cube(lr, out / "lr" / role / f"{patch.name}.hsc")
            derived.entries.append((f"hr/{role}/{patch.name}.hsc", role))
    write_manifest(derived, out / "manifest.txt")
    print(f"prepared {len(derived.entries)} patch pairs under {out}")
    return 0


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    values = read_run_config(cfg_path, args.set or ())
    man_path = (cfg_path.parent / values["manifest"]).resolve()
    man = read_manifest(man_path)
    scale = values["scale"] if values["scale"] is not None else man.scale
    train_rel = man.paths("train")
    if not train_rel:
        raise ParameterError(f"{man_path}: manifest has no train entries")
    bands = read_cube(man_path.parent / train_rel[0]).bands
    net_cfg = NetConfig(
        bands=bands,
        scale=scale,
        stages=values["stages"],
        units_per_stage=values["units_per_stage"],
        channels=values["channels"],
    )
    tcfg = TrainConfig(
        lr0=values["lr0"],
        beta1=values["beta1"],
        beta2=values["beta2"],
        eps=values["eps"],
        halve_every=values["halve_every"],
        warmup_epochs=values["warmup_epochs"],
        main_epochs=values["main_epochs"],
        batch=values["batch"],
        lam=values["lambda"],
        seed=values["seed"],
        tau=values["tau"],
        augment=values["augment"],
        checkpoint_every=values["checkpoint_every"],
    )
    train(man, net_cfg, tcfg, args.out, base_dir=man_path.parent, log_cb=print)
    print(f"checkpoint written to {Path(args.out) / 'checkpoint.pdec'}")
    return 0


def _infer_inputs(args):
    net = load_checkpoint(Path(args.checkpoint))
    in_path = Path(args.input)
    files = _cube_files(in_path)
    out = Path(args.out)
    if in_path.is_dir():
        out.mkdir(parents=True, exist_ok=True)
    elif out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    return net, in_path, files, out


def cmd_sr(args) -> int:
    net, in_path, files, out = _infer_inputs(args)
    if args.save_samples:
        Path(args.save_samples).mkdir(parents=True, exist_ok=True)
    for f in files:
        cube = read_cube(f)
        mean, samples = mc_infer(net, cube, args.n_samples, args.seed)
        target = out / f.name if in_path.is_dir() else out
        write_cube(mean, target)
        if args.save_samples:
            for i, s in enumerate(samples):
                clipped = HSCube(np.clip(s.values, 0.0, 1.0), name=s.name)
                write_cube(clipped, Path(args.save_samples) / f"{f.stem}_s{i}.hsc")
    print(f"super-resolved {len(files)} cube(s) -> {out}")
    return 0


def cmd_uncertainty(args) -> int:
    if args.n_samples < 2:
        raise ParameterError(f"uncertainty needs --n-samples >= 2, got {args.n_samples}")
    net, in_path, files, out = _infer_inputs(args)
    for f in files:
        cube = read_cube(f)
        mean, samples = mc_infer(net, cube, args.n_samples, args.seed)
        umap = uncertainty(samples, mean)
        target = out / f.name if in_path.is_dir() else out
        # HSC1 stores [0,1]; percentages are scaled down by 100
        write_cube(HSCube((umap.values / 100.0).astype(np.float32), name=f.stem), target)
    print(f"wrote {len(files)} uncertainty map(s) -> {out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    pairs = []
    for f in _cube_files(pred_dir):
        gt_file = gt_dir / f.name
        if not gt_file.exists():
            raise ParameterError(f"no ground-truth cube for {f.name} in {gt_dir}")
        pairs.append((f.stem, read_cube(f), read_cube(gt_file)))
    rep = evaluate_pairs(pairs)
    report_path = Path(args.report)
    if report_path.parent:
        report_path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_text(report_path, report_csv(rep))
    sys.stdout.write(report_text(rep))
    if args.baseline_bicubic:
        lr_dir = Path(args.baseline_bicubic)
        base_pairs = []
        for name, _pred, gt in pairs:
            lr_file = lr_dir / f"{name}.hsc"
            if not lr_file.exists():
                raise ParameterError(f"no LR cube for {name} in {lr_dir}")
            lr = read_cube(lr_file)
            if gt.height % lr.height or gt.width % lr.width:
                raise DimensionError(
                    f"{name}: ground truth {gt.height}x{gt.width} is not an integer "
                    f"multiple of LR {lr.height}x{lr.width}"
                )
            up = np.clip(
                bicubic_resize_array(lr.values, gt.height, gt.width), 0.0, 1.0
            )
            base_pairs.append((name, HSCube(up.astype(np.float32)), gt))
        base_rep = evaluate_pairs(base_pairs)
        base_path = report_path.with_name(report_path.stem + "_bicubic" + report_path.suffix)
        _atomic_text(base_path, report_csv(base_rep))
        sys.stdout.write("bicubic baseline:\n" + report_text(base_rep))
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hssr",
        description="Hyperspectral image super-resolution with stochastic channel gating.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    keys = "\n".join(
        f"  {k} ({t.__name__}, default: {'required' if d is _REQ else d}): {h}"
        for k, (t, d, h) in CONFIG_SCHEMA.items()
    )

    sp = sub.add_parser("prepare", help="patch HR cubes and synthesize LR mates")
    sp.add_argument("--manifest", required=True, help="source manifest of raw cubes")
    sp.add_argument("--scale", type=int, default=4, help="downscaling factor (default: 4)")
    sp.add_argument("--patch", type=int, default=32, help="HR patch size (default: 32)")
    sp.add_argument("--stride", type=int, default=32, help="patch stride (default: 32)")
    sp.add_argument("--noise-sigma", type=float, default=0.0,
                    help="additive Gaussian noise on LR patches (default: 0)")
    sp.add_argument("--seed", type=int, default=0, help="noise seed (default: 0)")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.set_defaults(func=cmd_prepare)

    st = sub.add_parser(
        "train",
        help="run warm-up + main training",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config file keys (key=value lines, '#' comments):\n" + keys,
    )
    st.add_argument("--config", required=True, help="key=value run configuration file")
    st.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override a config key (repeatable)")
    st.add_argument("--out", required=True, help="output directory for checkpoint and log")
    st.set_defaults(func=cmd_train)

    ss = sub.add_parser("sr", help="super-resolve LR cubes with MC gate sampling")
    ss.add_argument("--checkpoint", required=True)
    ss.add_argument("--input", required=True, help="LR cube file or directory of .hsc files")
    ss.add_argument("--n-samples", type=int, default=10,
                    help="Monte-Carlo forward passes (default: 10)")
    ss.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    ss.add_argument("--out", required=True, help="output cube file or directory")
    ss.add_argument("--save-samples", default=None,
                    help="also write the individual samples into this directory")
    ss.set_defaults(func=cmd_sr)

    se = sub.add_parser("eval", help="score predictions against ground truth")
    se.add_argument("--pred-dir", required=True)
    se.add_argument("--gt-dir", required=True)
    se.add_argument("--report", required=True, help="CSV report path (cube,mpsnr,mssim,sam)")
    se.add_argument("--baseline-bicubic", default=None, metavar="LR_DIR",
                    help="also score plain bicubic upsampling of these LR cubes")
    se.set_defaults(func=cmd_eval)

    su = sub.add_parser("uncertainty", help="export per-pixel epistemic uncertainty maps")
    su.add_argument("--checkpoint", required=True)
    su.add_argument("--input", required=True, help="LR cube file or directory")
    su.add_argument("--n-samples", type=int, default=10,
                    help="Monte-Carlo forward passes, >= 2 (default: 10)")
    su.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    su.add_argument("--out", required=True,
                    help="output cube file or directory (values are percent/100)")
    su.set_defaults(func=cmd_uncertainty)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, DimensionError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
