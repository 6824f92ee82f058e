"""Command-line interface: ``teethseg <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error. Every
failure prints exactly one line to stderr starting with ``teethseg: error:``
followed by the error kind.
"""

from __future__ import annotations

import argparse
import shutil
from contextlib import nullcontext
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import inject_fault
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .data import SplitManifest, generate_synthetic, load_dataset, make_split, write_dataset
from .gradaudit import run_audit
from .metrics import report_csv
from .model import VARIATIONS, variation_config
from .parallel import parallel_map
from .pgm import PGMError, read_pgm, write_pgm
from .preprocess import DEFAULT_RADII, preprocess_image, resize_nearest
from .trainer import DataError, TrainingError, evaluate, overlay, per_class_csv, predict_mask, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, but not for required or self-documenting options."""

    def _get_help_string(self, action):
        if action.default is None or "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _radii(text: str) -> list[int]:
    if text.strip() == "":
        return []
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} exists and is not empty (use --force)")
    if path.exists() and force:
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.width < 16 or args.height < 8:
        raise UsageError(f"extents must be at least 16x8, got {args.width}x{args.height}")
    out = Path(args.out)
    _prepare_out(out, args.force)
    samples = generate_synthetic(args.count, args.seed, args.width, args.height)
    ids = [s.id for s in samples]
    # too few to split: everything trains, nothing held out
    manifest = make_split(ids, args.seed) if args.count >= 3 else SplitManifest(args.seed, ids, [], [])
    write_dataset(out, samples, manifest)
    print(f"wrote {args.count} samples ({args.width}x{args.height}) to {out}: "
          f"{len(manifest.train)} train / {len(manifest.val)} val / {len(manifest.test)} test")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    src, out = Path(args.inp), Path(args.out)
    width, height, radii = args.width, args.height, args.radii
    if args.config:
        cfg = RunConfig.load(args.config)
        width, height = width or cfg.width, height or cfg.height
        radii = cfg.radii if radii is None else radii
    width, height = width or 128, height or 64
    radii = list(DEFAULT_RADII) if radii is None else radii
    if any(r < 1 for r in radii) or any(b <= a for a, b in zip(radii, radii[1:])):
        raise UsageError(f"--radii must be positive and strictly increasing, got {radii}")
    split = src / "split.json"
    if not split.is_file():
        raise RuntimeFailure(f"{split}: missing split manifest")
    manifest = SplitManifest.from_json(split.read_text())
    ids = manifest.train + manifest.val + manifest.test
    missing = [f"{p}: missing" for i in ids for p in (src / "images" / f"{i}.pgm", src / "masks" / f"{i}.pgm") if not p.is_file()]
    if missing:
        for m in missing:
            print(m, file=sys.stderr)
        raise RuntimeFailure(f"{len(missing)} input file(s) missing under {src}")
    _prepare_out(out, args.force)
    (out / "images").mkdir()
    (out / "masks").mkdir()

    def one(sid):
        img = read_pgm(src / "images" / f"{sid}.pgm")
        mask = read_pgm(src / "masks" / f"{sid}.pgm")
        write_pgm(out / "images" / f"{sid}.pgm", preprocess_image(img, width, height, radii))
        write_pgm(out / "masks" / f"{sid}.pgm", resize_nearest(mask, width, height))

    parallel_map(one, ids)
    shutil.copyfile(split, out / "split.json")
    print(f"preprocessed {len(ids)} samples to {width}x{height} (radii {radii}) in {out}")
    return EXIT_OK


def _load_config(path) -> RunConfig:
    return RunConfig.load(path)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    t0 = time.perf_counter()

    def report(row):
        print(f"epoch {row['epoch']:3d} lr {row['lr']:.3g} train_loss {row['train_loss']:.6f} "
              f"val_loss {row['val_loss']:.6f} val_dsc {row['val_dsc']:.6f} val_ji {row['val_ji']:.6f}", flush=True)

    state = train(cfg, args.data, args.out, resume=args.resume, on_epoch=report)
    print(f"finished epoch {state.epoch} in {time.perf_counter() - t0:.1f}s; checkpoints in {args.out}")
    return EXIT_OK


def _metric_line(name, macro) -> str:
    return report_csv([(name, macro)]).splitlines()[1]


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    samples = ds.split(args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    report = evaluate(state.net, state.run, samples, oracle=args.oracle)
    name = args.name or ("ORACLE" if args.oracle else "PROPOSED")
    csv_path = Path(args.csv)
    csv_path.write_text(report_csv([(name, report.macro())]))
    per_class = Path(args.per_class_csv) if args.per_class_csv else csv_path.with_name(csv_path.stem + "_per_class.csv")
    per_class.write_text(per_class_csv(report, name))
    print(report_csv([(name, report.macro())]), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    state = load_checkpoint(args.checkpoint)
    image = read_pgm(args.image)
    mask = predict_mask(state.net, state.run, image)
    write_pgm(args.out, mask)
    if args.overlay:
        write_pgm(args.overlay, overlay(image, mask, state.run.num_classes))
    present = np.unique(mask)
    print(f"wrote {args.out}: {len(present[present > 0])} tooth classes predicted")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    ctx = inject_fault(args.inject_fault) if args.inject_fault else nullcontext()
    t0 = time.perf_counter()
    worst: dict[str, tuple[float, float, bool]] = {}
    with ctx:
        for s in seeds:
            for r in run_audit(s):
                w, _, ok = worst.get(r.name, (0.0, r.tolerance, True))
                worst[r.name] = (max(w, r.worst), r.tolerance, ok and r.passed)
    failed = [n for n, (_, _, ok) in worst.items() if not ok]
    for name, (w, tol, ok) in worst.items():
        print(f"{name:20s} worst_rel_err {w:.3e} tol {tol:.0e} {'PASS' if ok else 'FAIL'}")
    print(f"{len(worst) - len(failed)}/{len(worst)} passed over seeds {list(seeds)} in {time.perf_counter() - t0:.1f}s")
    if failed:
        raise RuntimeFailure(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    base = _load_config(args.config)
    ds = load_dataset(args.data)
    split = args.split
    if not ds.manifest.ids(split):
        raise UsageError(f"split {split!r} is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    print(f"ablation seed {base.seed}, {base.epochs} epochs, lr {base.lr}")
    for name in VARIATIONS:
        cfg = base.with_model(variation_config(name, base.model))
        run_dir = out / name.lower().replace(" ", "_")
        try:
            state = train(cfg, args.data, run_dir)
            report = evaluate(state.net, cfg, ds.split(split))
        except (DataError, TrainingError, ValueError) as exc:
            raise RuntimeFailure(f"{name}: {exc}") from None
        rows.append((name, report.macro()))
        print(_metric_line(name, report.macro()), flush=True)
    (out / "ablation.csv").write_text(report_csv(rows))
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="teethseg", description="Tooth segmentation on panoramic X-rays.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"teethseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=16, help="number of image/mask pairs")
    p.add_argument("--seed", type=int, default=0, help="generator and split seed")
    p.add_argument("--width", type=int, default=128, help="image width in pixels")
    p.add_argument("--height", type=int, default=64, help="image height in pixels")
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="resize, normalize and enhance a dataset", formatter_class=fmt)
    p.add_argument("--in", dest="inp", required=True, help="input dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--radii", type=_radii, default=None, help="structuring-element radii, e.g. 1,2,3; empty skips enhancement (default: config or 1,2,3)")
    p.add_argument("--width", type=int, default=None, help="output width (default: config or 128)")
    p.add_argument("--height", type=int, default=None, help="output height (default: config or 64)")
    p.add_argument("--config", default=None, help="run config supplying extents and radii")
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--out", required=True, help="directory for checkpoints and log.csv")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to score")
    p.add_argument("--csv", required=True, help="macro metrics CSV path")
    p.add_argument("--per-class-csv", default=None, help="per-class CSV path (default: <csv stem>_per_class.csv)")
    p.add_argument("--name", default=None, help="model column label (default: PROPOSED, or ORACLE)")
    p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="preprocessed input PGM")
    p.add_argument("--out", required=True, help="predicted mask PGM")
    p.add_argument("--overlay", default=None, help="optional overlay PGM")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--inject-fault", default=None, metavar="OP", help="negate OP's backward rule (mutation canary)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablation", help="train and score every ablation variation", formatter_class=fmt)
    p.add_argument("--config", required=True, help="base run config JSON (budget and seed shared by all rows)")
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--out", required=True, help="directory for per-variation runs and ablation.csv")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to score")
    p.set_defaults(func=cmd_ablation)
    return parser


def _fail(kind: str, msg, code: int) -> int:
    line = " ".join(str(msg).split())
    print(f"teethseg: error: {kind}: {line}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gradcheck" and args.inject_fault:
            from .autodiff.ops import __all__ as op_names

            if args.inject_fault not in op_names:
                raise UsageError(f"--inject-fault: unknown op {args.inject_fault!r}")
        if args.command == "gradcheck" and args.seeds < 1:
            raise UsageError(f"--seeds must be >= 1, got {args.seeds}")
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except (CheckpointError, PGMError) as exc:
        return _fail("format", exc, EXIT_RUNTIME)
    except (DataError, FileNotFoundError) as exc:
        return _fail("data", exc, EXIT_RUNTIME)
    except RuntimeFailure as exc:
        return _fail("runtime", exc, EXIT_RUNTIME)
    except TrainingError as exc:
        return _fail("training", exc, EXIT_RUNTIME)
    except (ValueError, OSError) as exc:
        return _fail("runtime", exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
