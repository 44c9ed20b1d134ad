"""Command-line entry point: ``salm synth|train|infer|eval|bench``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import torch

from .checkpoint import load_checkpoint
from .config import TrainConfig
from .metrics import DEFAULT_RADII, collect_errors, summarize
from .phantom import PhantomSpec, generate_dataset, load_split
from .training import TrainingError, train_loop
from .volume import LandmarkSet, load_landmarks, load_volume, normalize_intensity, save_landmarks

log = logging.getLogger("salm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


def _radii(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad radius list {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"radii must be non-negative, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salm", description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="intra-op threads (default: $SALM_THREADS, else 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-landmarks", type=int, default=6)
    p.add_argument("--dims", type=int, nargs=3, default=None, metavar=("X", "Y", "Z"))
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.0, 0.2),
                   metavar=("TRAIN", "VAL", "TEST"))

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lc-include-coarse", action="store_true", default=None)
    p.add_argument("--gam-norm", choices=["softmax", "raw-eps"], default=None)

    p = sub.add_parser("infer", help="predict landmarks for volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("volumes", nargs="+", help=".vol.json files")
    p.add_argument("--trace", action="store_true", help="also write per-iteration traces")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted .lmk.json files")
    p.add_argument("--gt", required=True, help="directory of ground-truth .lmk.json files")
    p.add_argument("--out", required=True)
    p.add_argument("--radii", type=_radii, default=list(DEFAULT_RADII))
    p.add_argument("--csv", action="store_true", help="also write report.csv")

    p = sub.add_parser("bench", help="time full inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out", default=None, help="optional JSON output file")
    return parser


def set_threads(requested):
    if requested is None:
        env = os.environ.get("SALM_THREADS")
        try:
            requested = int(env) if env else 1
        except ValueError:
            raise UsageError(f"SALM_THREADS must be an integer, got {env!r}") from None
    if requested < 1:
        raise UsageError(f"thread count must be >= 1, got {requested}")
    torch.set_num_threads(requested)
    return requested


def cmd_synth(args):
    kwargs = {"seed": args.seed, "n_landmarks": args.n_landmarks}
    if args.dims:
        kwargs["dims"] = tuple(args.dims)
    path = generate_dataset(PhantomSpec(**kwargs), args.count, tuple(args.split), args.out)
    print(path)


def load_config(args) -> TrainConfig:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lc_include_coarse:
        overrides["lc_include_coarse"] = True
    if args.gam_norm is not None:
        overrides["gam_norm"] = args.gam_norm
    return config.replace(**overrides)


def cmd_train(args):
    config = load_config(args)
    train = load_split(args.data, "train")
    val = load_split(args.data, "val")
    if not train:
        raise UsageError(f"{args.data}: empty training split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_loop(config, train, out_dir=out, val=val or None)
    result.model.config.to_json(out / "config.json")
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs, final L_o={last['L_o']:.4g}, "
          f"train MRE={last['train_MRE_voxels']:.3f} vox -> {result.checkpoint}")


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".vol.json", ".lmk.json", ".json"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def cmd_infer(args):
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for vpath in map(Path, args.volumes):
        volume = load_volume(vpath)
        stem = _stem(vpath)
        annotation = vpath.with_name(stem + ".lmk.json")
        if annotation.exists():
            names = load_landmarks(annotation).names
            if list(names) != model.names:
                raise UsageError(f"{annotation}: {len(names)} landmarks {names} do not match the "
                                 f"checkpoint's {model.n_landmarks} {model.names}")
        if model.config.normalize:
            volume = normalize_intensity(volume)
        final, _, trace = model.predict(volume)
        save_landmarks(final, out / stem)
        if args.trace:
            (out / f"{stem}.trace.json").write_text(json.dumps(trace.to_json(model.names), indent=2))
        print(out / f"{stem}.lmk.json")


def cmd_eval(args):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
    preds = {_stem(p): p for p in sorted(pred_dir.glob("*.lmk.json"))}
    if not preds:
        raise UsageError(f"no .lmk.json files in {pred_dir}")
    pairs = []
    for stem, p in preds.items():
        g = gt_dir / f"{stem}.lmk.json"
        if not g.exists():
            raise UsageError(f"no ground truth for {stem} in {gt_dir}")
        pred, gt = load_landmarks(p), load_landmarks(g)
        if pred.names != gt.names:
            bad = sorted(set(pred.names) ^ set(gt.names)) or ["(order differs)"]
            raise UsageError(f"{stem}: mismatched landmark names: {', '.join(bad)}")
        spacing = gt.spacing_mm if gt.spacing_mm is not None else pred.spacing_mm
        pairs.append((pred, LandmarkSet(gt.names, gt.points, spacing)))
    report = summarize(collect_errors(pairs), args.radii)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json())
    if args.csv:
        (out / "report.csv").write_text(report.to_csv())
    print(report.to_text(), end="")


def cmd_bench(args):
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    model, _ = load_checkpoint(args.checkpoint)
    volume = load_volume(args.volume)
    if model.config.normalize:
        volume = normalize_intensity(volume)
    model.predict(volume)  # warm-up, excluded
    times = []
    for _ in range(args.repeats):
        start = time.perf_counter()
        model.predict(volume)
        times.append(time.perf_counter() - start)
    stats = {"repeats": args.repeats, "threads": torch.get_num_threads(), "min_s": min(times),
             "median_s": statistics.median(times), "mean_s": statistics.fmean(times),
             "dims": list(volume.dims)}
    if args.out:
        Path(args.out).write_text(json.dumps(stats, indent=2))
    print(f"min {stats['min_s']:.3f} s  median {stats['median_s']:.3f} s  "
          f"mean {stats['mean_s']:.3f} s  ({args.repeats} runs, {stats['threads']} thread(s))")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        COMMANDS[args.command](args)
    except TrainingError as exc:
        print(f"salm {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"salm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"salm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
