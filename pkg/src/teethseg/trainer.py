"""Training, validation, evaluation and prediction loops."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tape
from .checkpoint import TrainingState, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import CODEBOOK, NUM_CLASSES, Dataset, Sample, load_dataset, one_hot
from .losses import total_loss
from .metrics import ConfusionCounts, MetricReport, argmax_labels, confusion_counts, metrics_from_counts, report_csv
from .model import Network, build_model, forward
from .optim import AdamState, ScheduleState, adam_step, plateau_schedule
from .parallel import parallel_map

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_dsc", "val_ji")
LAST, BEST, LOG = "last.ckpt", "best.ckpt", "log.csv"


class DataError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class Batch:
    ids: list[str]
    x: np.ndarray  # (N, 1, H, W) in [0, 1]
    y: np.ndarray  # (N, C, H, W) one-hot


def sample_arrays(sample: Sample, run: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Network input and one-hot target for a sample already at the configured extents."""
    if sample.image.shape != (run.height, run.width):
        raise DataError(
            f"sample {sample.id}: extent {sample.image.shape[1]}x{sample.image.shape[0]} "
            f"does not match configured {run.width}x{run.height}"
        )
    if sample.mask.max() >= run.num_classes:
        raise DataError(f"sample {sample.id}: label {int(sample.mask.max())} outside 0..{run.num_classes - 1}")
    return sample.image[None] / 255.0, one_hot(sample.mask, run.num_classes)


def make_batch(samples: list[Sample], run: RunConfig) -> Batch:
    pairs = [sample_arrays(s, run) for s in samples]
    return Batch([s.id for s in samples], np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))


def check_dataset(ds: Dataset, run: RunConfig, splits=("train", "val")) -> None:
    problems = []
    for name in splits:
        if not ds.manifest.ids(name):
            problems.append(f"split {name!r} is empty")
        for s in ds.split(name):
            try:
                sample_arrays(s, run)
            except DataError as exc:
                problems.append(str(exc))
    if problems:
        raise DataError("; ".join(problems))


# ---------------------------------------------------------------------------
# steps


def train_step(
    net: Network,
    opt: AdamState,
    lr: float,
    batch: Batch,
    rng: np.random.Generator,
    eps: float = 1e-6,
    variant: str = "squared-dice",
) -> tuple[float, AdamState]:
    """Forward in train mode, backprop the total loss, apply one Adam update to ``net`` in place."""
    tape = Tape()
    leaves = {k: tape.watch(v) for k, v in net.params.items()}
    out = forward(net, batch.x, mode="train", rng=rng, params=leaves)
    loss = total_loss(out, batch.y, eps, variant)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} on batch {batch.ids}")
    grads = tape.backward(loss)
    net.params, opt = adam_step(net.params, {k: grads[t] for k, t in leaves.items()}, opt, lr)
    return value, opt


def predict_probs(net: Network, x: np.ndarray) -> np.ndarray:
    """Eval-mode class probabilities (N, C, H, W)."""
    return forward(net, x, mode="eval").main.data


def _sample_eval(net: Network, run: RunConfig, sample: Sample) -> tuple[float, ConfusionCounts]:
    b = make_batch([sample], run)
    out = forward(net, b.x, mode="eval")
    loss = total_loss(out, b.y, run.eps, run.loss).item()
    return loss, confusion_counts(argmax_labels(out.main.data)[0], sample.mask, run.num_classes)


def validate(net: Network, run: RunConfig, samples: list[Sample]) -> tuple[float, MetricReport]:
    """Mean per-sample loss and split-level metrics; per-sample work runs on the worker pool."""
    results = parallel_map(lambda s: _sample_eval(net, run, s), samples)
    counts = ConfusionCounts.zeros(run.num_classes)
    total = 0.0
    for loss, c in results:
        total += loss
        counts = counts + c
    return total / len(samples), metrics_from_counts(counts)


# ---------------------------------------------------------------------------
# training


def init_state(run: RunConfig) -> TrainingState:
    net = build_model(run.model, run.seed)
    return TrainingState(
        run=run,
        net=net,
        opt=AdamState.for_params(net.params),
        sched=ScheduleState.starting_at(run.lr),
        # separate stream from the weight init
        rng=np.random.default_rng([run.seed, 1]),
        epoch=0,
    )


def _format_row(row: dict) -> list[str]:
    return [str(row["epoch"])] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]]


def write_log(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in rows:
        w.writerow(_format_row(row))
    path.write_text(buf.getvalue())


def read_log(path: Path) -> list[dict]:
    if not path.is_file():
        return []
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]


def train(
    run: RunConfig,
    data_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    resume: str | os.PathLike | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainingState:
    """Run ``run.epochs`` epochs (continuing from ``resume`` when given).

    Writes ``last.ckpt`` every epoch, ``best.ckpt`` whenever the validation
    loss improves, and one ``log.csv`` row per epoch.
    """
    run.validate()
    ds = load_dataset(data_dir)
    check_dataset(ds, run)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = load_checkpoint(resume)
        if state.run.model != run.model:
            raise DataError(f"checkpoint {resume} was trained with a different model config")
        state.run = run
        rows = [r for r in read_log(out / LOG) if r["epoch"] <= state.epoch]
    else:
        state = init_state(run)
        rows = []
        save_checkpoint(out / LAST, state)
    write_log(out / LOG, rows)

    train_samples, val_samples = ds.split("train"), ds.split("val")
    net = state.net
    while state.epoch < run.epochs:
        epoch = state.epoch + 1
        lr = state.sched.lr
        order = state.rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), run.batch):
            batch = make_batch([train_samples[i] for i in order[start : start + run.batch]], run)
            try:
                loss, state.opt = train_step(net, state.opt, lr, batch, state.rng, run.eps, run.loss)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            losses.append(loss)
        val_loss, report = validate(net, run, val_samples)
        if not math.isfinite(val_loss):
            raise TrainingError(f"epoch {epoch}: non-finite validation loss {val_loss}")
        state.sched, improved = plateau_schedule(state.sched, val_loss)
        state.epoch = epoch
        macro = report.macro()
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_loss": val_loss,
            "val_dsc": macro["dsc"],
            "val_ji": macro["ji"],
        }
        rows.append(row)
        save_checkpoint(out / LAST, state)
        if improved:
            save_checkpoint(out / BEST, state)
        write_log(out / LOG, rows)
        if on_epoch is not None:
            on_epoch(row)
    return state


def fit(
    net: Network,
    batch: Batch,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int = 0,
    eps: float = 1e-6,
    variant: str = "squared-dice",
) -> list[float]:
    """Fixed-lr Adam on an in-memory set, reshuffled every pass; returns per-step losses."""
    rng = np.random.default_rng([seed, 1])
    opt = AdamState.for_params(net.params)
    n = len(batch.ids)
    losses: list[float] = []
    while len(losses) < steps:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if len(losses) == steps:
                break
            idx = order[start : start + batch_size]
            sub = Batch([batch.ids[i] for i in idx], batch.x[idx], batch.y[idx])
            loss, opt = train_step(net, opt, lr, sub, rng, eps, variant)
            losses.append(loss)
    return losses


# ---------------------------------------------------------------------------
# evaluation and prediction


def evaluate(
    net: Network,
    run: RunConfig,
    samples: list[Sample],
    oracle: bool = False,
) -> MetricReport:
    """Split-level metrics; ``oracle`` scores each ground-truth mask against itself."""
    if not samples:
        raise DataError("cannot evaluate an empty split")

    def one(s: Sample) -> ConfusionCounts:
        if oracle:
            sample_arrays(s, run)
            return confusion_counts(s.mask, s.mask, run.num_classes)
        x, _ = sample_arrays(s, run)
        return confusion_counts(argmax_labels(predict_probs(net, x[None]))[0], s.mask, run.num_classes)

    counts = ConfusionCounts.zeros(run.num_classes)
    for c in parallel_map(one, samples):
        counts = counts + c
    return metrics_from_counts(counts)


def evaluate_checkpoint(
    checkpoint: str | os.PathLike,
    data_dir: str | os.PathLike,
    split: str = "test",
    oracle: bool = False,
) -> tuple[TrainingState, MetricReport]:
    state = load_checkpoint(checkpoint)
    ds = load_dataset(data_dir)
    return state, evaluate(state.net, state.run, ds.split(split), oracle)


def per_class_csv(report: MetricReport, model_name: str) -> str:
    """One row per class index, labelled ``<model>:background`` / ``<model>:FDI-11`` ..."""
    n = len(report.present)
    rows = [(f"{model_name}:{CODEBOOK.label(k)}", {m: v[k] for m, v in report.per_class.items()}) for k in range(n)]
    return report_csv(rows)


def predict_mask(net: Network, run: RunConfig, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (run.height, run.width):
        raise DataError(f"image extent {image.shape[1]}x{image.shape[0]} does not match configured {run.width}x{run.height}")
    probs = predict_probs(net, (image / 255.0)[None, None])
    return argmax_labels(probs)[0].astype(np.uint8)


def overlay(image: np.ndarray, mask: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Half-dimmed image with each tooth class blended toward its own gray level."""
    image = np.asarray(image, dtype=np.float64)
    levels = np.concatenate([[0.0], np.linspace(64.0, 255.0, num_classes - 1)])
    out = 0.5 * image + 0.5 * levels[mask]
    out[mask == 0] = 0.5 * image[mask == 0]
    return np.clip(np.round(out), 0, 255).astype(np.uint8)
