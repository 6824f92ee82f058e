"""FDI codebook, synthetic panoramic dataset, splits, and dataset directories."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .pgm import read_pgm, write_pgm


class ClassCodebook:
    """Class index 0 is background; indices 1..32 are FDI 11-18, 21-28, 31-38, 41-48."""

    def __init__(self):
        self.fdi_numbers = [q * 10 + t for q in (1, 2, 3, 4) for t in range(1, 9)]
        self._index = {f: i + 1 for i, f in enumerate(self.fdi_numbers)}

    def __len__(self) -> int:
        return len(self.fdi_numbers) + 1

    def index(self, fdi: int) -> int:
        try:
            return self._index[fdi]
        except KeyError:
            raise ValueError(f"{fdi} is not an FDI permanent-tooth number") from None

    def fdi(self, index: int) -> int | None:
        """FDI number for a class index, ``None`` for background."""
        if index == 0:
            return None
        if not 1 <= index <= len(self.fdi_numbers):
            raise ValueError(f"class index {index} is outside 0..{len(self.fdi_numbers)}")
        return self.fdi_numbers[index - 1]

    def label(self, index: int) -> str:
        f = self.fdi(index)
        return "background" if f is None else f"FDI-{f}"


CODEBOOK = ClassCodebook()
NUM_CLASSES = len(CODEBOOK)


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H, W) float intensities in [0, 255]
    mask: np.ndarray  # (H, W) uint8 class indices

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


# ---------------------------------------------------------------------------
# synthetic panoramic generator

# relative crown widths for tooth positions 1 (central incisor) .. 8 (third molar)
_REL_WIDTH = np.array([0.85, 0.72, 0.8, 0.78, 0.8, 1.2, 1.12, 1.0])
_MISSING_P = 0.04


def _row_order(upper: bool) -> list[int]:
    """FDI numbers left-to-right on the image (patient's right shown on the left)."""
    if upper:
        return [10 + t for t in range(8, 0, -1)] + [20 + t for t in range(1, 9)]
    return [40 + t for t in range(8, 0, -1)] + [30 + t for t in range(1, 9)]


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    img = rng.uniform(35, 65) + 25 * (1 - 4 * (yy - 0.5) ** 2)
    for _ in range(4):
        fy, fx, ph = rng.uniform(0.5, 4), rng.uniform(0.5, 6), rng.uniform(0, 2 * np.pi)
        img += rng.uniform(3, 8) * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    return img + rng.normal(0, 4, size=(h, w))


def _render(rng: np.random.Generator, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    image = _texture(rng, h, w)
    mask = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5

    occlusal = h * (0.5 + rng.uniform(-0.03, 0.03))
    smile = h * rng.uniform(0.04, 0.1)
    gap = h * rng.uniform(0.0, 0.02)
    margin = w * rng.uniform(0.04, 0.07)
    span = w - 2 * margin
    rel = np.concatenate([_REL_WIDTH[::-1], _REL_WIDTH])
    rel = rel * rng.uniform(0.92, 1.08, size=16)
    widths = rel / rel.sum() * span
    lefts = margin + np.concatenate([[0.0], np.cumsum(widths)[:-1]])

    for upper in (True, False):
        tooth_h = h * rng.uniform(0.3, 0.38)
        for slot, fdi in enumerate(_row_order(upper)):
            if rng.random() < _MISSING_P:
                continue
            cx = lefts[slot] + widths[slot] / 2 + rng.normal(0, 0.04) * widths[slot]
            u = (cx - w / 2) / (w / 2)
            bend = -smile * u * u
            th = tooth_h * rng.uniform(0.88, 1.08) * (0.92 if fdi % 10 in (1, 2) else 1.0)
            cy = occlusal + bend + (-(gap + th / 2) if upper else (gap + th / 2))
            a = widths[slot] / 2 * rng.uniform(1.02, 1.12)
            b = th / 2
            ang = np.arctan(-2 * smile * u / (w / 2)) * (1 if upper else -1) * 0.5 + rng.normal(0, 0.06)
            ca, sa = np.cos(ang), np.sin(ang)
            dx, dy = xx - cx, yy - cy
            r2 = ((dx * ca + dy * sa) / a) ** 2 + ((-dx * sa + dy * ca) / b) ** 2
            inside = r2 <= 1.0
            if not inside.any():
                # sub-pixel tooth: claim the nearest pixel so the class stays visible
                inside = np.zeros_like(inside)
                inside[min(h - 1, max(0, int(cy))), min(w - 1, max(0, int(cx)))] = True
            shade = rng.uniform(170, 225)
            image[inside] = (shade * (1.0 - 0.25 * r2) + rng.normal(0, 5, size=r2.shape))[inside]
            mask[inside] = CODEBOOK.index(fdi)
    return np.clip(image, 0.0, 255.0), mask


def generate_sample(seed: int, index: int, w: int, h: int) -> Sample:
    rng = np.random.default_rng([seed, index])
    image, mask = _render(rng, w, h)
    return Sample(f"s{index:04d}", image, mask)


def generate_synthetic(count: int, seed: int, w: int = 128, h: int = 64, multiple: int = 1) -> list[Sample]:
    """Stylised panoramic X-rays: two arcs of ellipse teeth labelled by FDI class.

    Deterministic per ``(seed, index)``. ``multiple`` is the factor both
    extents must divide by (``2**depth`` of the intended model).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if w < 16 or h < 8 or w % multiple or h % multiple:
        raise ValueError(f"invalid extents {w}x{h}: need w >= 16, h >= 8 and both divisible by {multiple}")
    return [generate_sample(seed, i, w, h) for i in range(count)]


# ---------------------------------------------------------------------------
# splits

RATIOS = (0.70, 0.15, 0.15)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class SplitManifest:
    seed: int
    train: list[str]
    val: list[str]
    test: list[str]
    ratios: tuple[float, float, float] = RATIOS

    def ids(self, split: str) -> list[str]:
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        return list(getattr(self, split))

    def to_json(self) -> str:
        doc = {"seed": self.seed, "ratios": list(self.ratios), "train": self.train, "val": self.val, "test": self.test}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> SplitManifest:
        doc = json.loads(text)
        missing = {"seed", "train", "val", "test"} - doc.keys()
        if missing:
            raise ValueError(f"split manifest is missing keys {sorted(missing)}")
        return cls(int(doc["seed"]), list(doc["train"]), list(doc["val"]), list(doc["test"]), tuple(doc.get("ratios", RATIOS)))


def make_split(ids, seed: int) -> SplitManifest:
    """Seeded shuffle of the sorted ids, sliced 70/15/15."""
    ids = sorted(ids)
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 ids to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = _round_half_up(RATIOS[0] * n)
    n_val = _round_half_up(RATIOS[1] * n)
    return SplitManifest(seed, shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :])


# ---------------------------------------------------------------------------
# encoding


def one_hot(mask, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """(H, W) labels -> (num_classes, H, W) float one-hot."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        bad = mask[(mask < 0) | (mask >= num_classes)][0]
        raise ValueError(f"label {bad} is outside 0..{num_classes - 1}")
    return (np.arange(num_classes)[:, None, None] == mask[None]).astype(np.float64)


def encode_one_hot(mask, num_classes: int = NUM_CLASSES) -> Tensor:
    return Tensor(one_hot(mask, num_classes)[None])


# ---------------------------------------------------------------------------
# dataset directories: images/<id>.pgm, masks/<id>.pgm, split.json


@dataclass
class Dataset:
    root: Path
    manifest: SplitManifest
    samples: dict[str, Sample] = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        return [self.samples[i] for i in self.manifest.ids(name)]


def write_dataset(root: str | os.PathLike, samples: list[Sample], manifest: SplitManifest) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_pgm(root / "images" / f"{s.id}.pgm", s.image)
        write_pgm(root / "masks" / f"{s.id}.pgm", s.mask)
    (root / "split.json").write_text(manifest.to_json())


def load_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    split_path = root / "split.json"
    if not split_path.is_file():
        raise FileNotFoundError(f"{split_path} not found")
    manifest = SplitManifest.from_json(split_path.read_text())
    ds = Dataset(root, manifest)
    problems = []
    for sid in manifest.train + manifest.val + manifest.test:
        img_p, mask_p = root / "images" / f"{sid}.pgm", root / "masks" / f"{sid}.pgm"
        if not img_p.is_file() or not mask_p.is_file():
            problems.append(f"{sid}: missing image or mask")
            continue
        image = read_pgm(img_p).astype(np.float64)
        mask = read_pgm(mask_p)
        if image.shape != mask.shape:
            problems.append(f"{sid}: image {image.shape} and mask {mask.shape} differ")
            continue
        if mask.max() >= NUM_CLASSES:
            problems.append(f"{sid}: mask label {int(mask.max())} outside codebook")
            continue
        ds.samples[sid] = Sample(sid, image, mask)
    if problems:
        raise ValueError("invalid dataset: " + "; ".join(problems))
    return ds
