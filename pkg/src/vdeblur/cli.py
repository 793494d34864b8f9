"""Command-line surface: synth, train, deblur, eval, bench.

Every command echoes its resolved configuration before doing work, so any
run can be reproduced from its log. Settings resolve as flags over config
file over built-in defaults. Exit codes: 0 success, 2 validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from .corrvol import build_correlation_volume, naive_correlation_volume
from .metrics import MetricReport
from .model import DeblurConfig
from .tensor import Tensor, max_pool2d, no_grad, reshape
from .train import (
    TrainConfig,
    load_training_checkpoint,
    progressive_forward,
    train_loop,
)

__all__ = ["main"]

_DEFAULTS = {
    "synth": {
        "toy": False, "sharp_dir": "", "out": "", "window": 9, "n_range": "9,11",
        "seed": 0, "n_clips": 20, "frames_per_clip": 90, "size": "64x64",
    },
    "train": {
        "data": "", "ckpt_out": "", "metrics_out": "", "stages": 2, "pyramid_l": 2,
        "channels": 16, "align": "off", "alpha": 0.1, "lr": 1e-4,
        "lr_halve_every": 200, "epochs": 10, "patch": 64, "batch": 1, "seed": 0,
        "max_steps": 0,
    },
    "deblur": {"ckpt": "", "in_dir": "", "out": "", "stages": 0},
    "eval": {"pred": "", "gt": "", "out": "", "quantize": False},
    "bench": {
        "size": "8x8", "channels": 4, "pyramid_l": 1, "impl": "both", "reps": 3,
        "seed": 0,
    },
}


def _coerce(raw: str, template):
    if isinstance(template, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return raw


def _read_config_file(path) -> dict:
    out = {}
    text = Path(path).read_text()
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _resolve(args: argparse.Namespace, command: str) -> dict:
    defaults = _DEFAULTS[command]
    file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg = {}
    for key, dflt in defaults.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            cfg[key] = flag_val
        elif key in file_cfg:
            cfg[key] = _coerce(file_cfg[key], dflt)
        else:
            cfg[key] = dflt
    for key in sorted(cfg):
        print(f"config: {key}={cfg[key]}")
    return cfg


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h_s, w_s = text.lower().split("x")
        return int(h_s), int(w_s)
    except Exception:
        raise ValueError(f"bad size {text!r}, expected HxW") from None


def _parse_range(text: str) -> tuple[int, int]:
    try:
        lo_s, hi_s = text.split(",")
        return int(lo_s), int(hi_s)
    except Exception:
        raise ValueError(f"bad range {text!r}, expected lo,hi") from None


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args) -> int:
    cfg = _resolve(args, "synth")
    if bool(cfg["toy"]) == bool(cfg["sharp_dir"]):
        raise ValueError("pass exactly one of --toy / --sharp-dir")
    if not cfg["out"]:
        raise ValueError("--out is required")
    if cfg["window"] % 2 == 0:
        raise ValueError("--window must be odd")
    n_range = _parse_range(cfg["n_range"])
    if n_range[0] < 1 or n_range[1] < n_range[0]:
        raise ValueError(f"bad --n-range {cfg['n_range']}")

    if cfg["toy"]:
        h, w = _parse_size(cfg["size"])
        clips = data_mod.make_toy_dataset(cfg["n_clips"], cfg["frames_per_clip"],
                                          h, w, cfg["seed"])
    else:
        src = Path(cfg["sharp_dir"])
        if not src.is_dir():
            raise FileNotFoundError(f"{src}: not a directory")
        subdirs = sorted(p for p in src.iterdir() if p.is_dir())
        if subdirs:
            clips = [data_mod.load_frames(p) for p in subdirs]
        else:
            clips = [data_mod.load_frames(src)]

    data_mod.write_dataset(cfg["out"], clips, cfg["window"], n_range, cfg["seed"])
    total = sum(len(data_mod.subsample_centers(len(c), n_range,
                np.random.default_rng([cfg["seed"], i, 1]))) for i, c in enumerate(clips))
    print(f"wrote {len(clips)} clips (~{total} frame pairs) to {cfg['out']}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve(args, "train")
    if not cfg["data"]:
        raise ValueError("--data is required")
    if not cfg["ckpt_out"]:
        raise ValueError("--ckpt-out is required")
    tc = TrainConfig(
        lr=cfg["lr"], lr_halve_every=cfg["lr_halve_every"], alpha=cfg["alpha"],
        stages=cfg["stages"], patch=cfg["patch"], batch=cfg["batch"],
        epochs=cfg["epochs"], seed=cfg["seed"], pyramid_L=cfg["pyramid_l"],
        channels=cfg["channels"], align=cfg["align"],
        max_steps=cfg["max_steps"] or None,
    )
    dataset = data_mod.load_dataset(cfg["data"])
    metrics_path = cfg["metrics_out"] or (cfg["ckpt_out"] + ".metrics.csv")
    Path(cfg["ckpt_out"]).parent.mkdir(parents=True, exist_ok=True)
    train_loop(dataset, tc, ckpt_path=cfg["ckpt_out"], metrics_path=metrics_path)
    print(f"checkpoint: {cfg['ckpt_out']}")
    print(f"metrics: {metrics_path}")
    return 0


def _sidecar_model_config(sidecar: dict) -> DeblurConfig:
    try:
        return DeblurConfig(
            pyramid_L=int(sidecar["pyramid_L"]),
            channels=int(sidecar["channels"]),
            align_mode=sidecar["align"],
            use_volumes=sidecar["use_volumes"].lower() in ("1", "true"),
            stages=int(sidecar["stages"]),
        )
    except KeyError as e:
        raise ValueError(f"checkpoint sidecar missing key {e}") from None


def _cmd_deblur(args) -> int:
    cfg = _resolve(args, "deblur")
    for key in ("ckpt", "in_dir", "out"):
        if not cfg[key]:
            raise ValueError(f"--{key.replace('_dir', '')} is required")
    gen, _, sidecar = load_training_checkpoint(cfg["ckpt"])
    if not sidecar:
        raise ValueError(f"{cfg['ckpt']}.cfg: sidecar config not found")
    mcfg = _sidecar_model_config(sidecar)
    if cfg["stages"] and cfg["stages"] != mcfg.stages:
        raise ValueError(f"--stages {cfg['stages']} conflicts with checkpoint "
                         f"stages={mcfg.stages}")

    in_dir = Path(cfg["in_dir"])
    frame_dir = in_dir / "blur" if (in_dir / "blur").is_dir() else in_dir
    clip = data_mod.load_frames(frame_dir)
    s = mcfg.stages
    if len(clip) < 2 * s + 1:
        raise ValueError(f"clip has {len(clip)} frames; stages={s} needs {2 * s + 1}")

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    with no_grad():
        for center in range(s, len(clip) - s):
            window = clip.frames[center - s:center + s + 1]
            outs = progressive_forward(window, mcfg, gen, clamp=True)
            data_mod.save_frame(out_dir / f"{center:05d}.png", outs.final)
            count += 1
    print(f"restored {count} frames to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve(args, "eval")
    if not cfg["pred"] or not cfg["gt"]:
        raise ValueError("--pred and --gt are required")
    pred_clip = data_mod.load_frames(cfg["pred"])
    gt_clip = data_mod.load_frames(cfg["gt"])
    if len(pred_clip) != len(gt_clip):
        raise ValueError(f"frame count mismatch: {len(pred_clip)} predictions vs "
                         f"{len(gt_clip)} ground truths")
    preds = [f.data for f in pred_clip.frames]
    gts = [f.data for f in gt_clip.frames]
    if cfg["quantize"]:
        preds = [np.round(p * 255.0) / 255.0 for p in preds]
        gts = [np.round(g * 255.0) / 255.0 for g in gts]
    ids = [f"{i:05d}" for i in range(len(pred_clip))]
    report = MetricReport.from_pairs(ids, preds, gts)
    csv_text = report.to_csv()
    if cfg["out"]:
        Path(cfg["out"]).write_text(csv_text)
        print(f"report: {cfg['out']}")
    else:
        sys.stdout.write(csv_text)
    print(f"mean_psnr={report.mean_psnr!r} mean_ssim={report.mean_ssim!r}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _resolve(args, "bench")
    if cfg["reps"] < 1:
        raise ValueError("--reps must be >= 1")
    if cfg["impl"] not in ("naive", "optimized", "both"):
        raise ValueError(f"bad --impl {cfg['impl']!r}")
    h, w = _parse_size(cfg["size"])
    L = cfg["pyramid_l"]
    if L < 1 or h % (1 << L) or w % (1 << L):
        raise ValueError(f"size {h}x{w} not divisible by 2^{L}")
    rng = np.random.default_rng(cfg["seed"])
    f_ref = rng.normal(size=(cfg["channels"], h, w)).astype(np.float64)
    f_nbr = rng.normal(size=(cfg["channels"], h, w)).astype(np.float64)

    rows = ["impl,level,reps,mean_ms,max_abs_diff"]
    with no_grad():
        for k in range(1, L + 1):
            stride = 1 << k
            pooled_t = max_pool2d(Tensor(f_nbr.reshape((1,) + f_nbr.shape)), stride, stride)
            pooled = pooled_t.data[0]
            reference = naive_correlation_volume(f_ref, pooled)

            def run_optimized():
                return build_correlation_volume(Tensor(f_ref), Tensor(pooled),
                                                level=k).values.data

            diff = float(np.abs(run_optimized() - reference).max())
            if diff > 1e-5:
                raise FloatingPointError(
                    f"bench equivalence failed at level {k}: max abs diff {diff}")

            impls = []
            if cfg["impl"] in ("naive", "both"):
                impls.append(("naive", lambda: naive_correlation_volume(f_ref, pooled)))
            if cfg["impl"] in ("optimized", "both"):
                impls.append(("optimized", run_optimized))
            for name, fn in impls:
                times = []
                for _ in range(cfg["reps"]):
                    t0 = time.perf_counter()
                    fn()
                    times.append((time.perf_counter() - t0) * 1000.0)
                rows.append(f"{name},{k},{cfg['reps']},{np.mean(times):.4f},{diff:.3e}")
    print("\n".join(rows))
    return 0


# ---------------------------------------------------------------------------
# wiring


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vdeblur",
        description="Multi-frame video deblurring with correlation volume pyramids.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a blurry/sharp dataset")
    p.add_argument("--toy", action="store_const", const=True)
    p.add_argument("--sharp-dir", dest="sharp_dir")
    p.add_argument("--out")
    p.add_argument("--window", type=int)
    p.add_argument("--n-range", dest="n_range")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-clips", dest="n_clips", type=int)
    p.add_argument("--frames-per-clip", dest="frames_per_clip", type=int)
    p.add_argument("--size")
    p.add_argument("--config")

    p = sub.add_parser("train", help="train the restoration model")
    p.add_argument("--data")
    p.add_argument("--ckpt-out", dest="ckpt_out")
    p.add_argument("--metrics-out", dest="metrics_out")
    p.add_argument("--stages", type=int)
    p.add_argument("--pyramid-L", dest="pyramid_l", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--align", choices=("off", "classical", "file"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-halve-every", dest="lr_halve_every", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--config")

    p = sub.add_parser("deblur", help="restore frames with a trained checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--in", dest="in_dir")
    p.add_argument("--out")
    p.add_argument("--stages", type=int)
    p.add_argument("--config")

    p = sub.add_parser("eval", help="PSNR/SSIM report for restored frames")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--out")
    p.add_argument("--quantize", action="store_const", const=True,
                   help="round both sides to 8-bit levels before scoring")
    p.add_argument("--config")

    p = sub.add_parser("bench", help="time the correlation-volume kernel")
    p.add_argument("--size")
    p.add_argument("--channels", type=int)
    p.add_argument("--pyramid-L", dest="pyramid_l", type=int)
    p.add_argument("--impl", choices=("naive", "optimized", "both"))
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")

    return parser


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "deblur": _cmd_deblur,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
