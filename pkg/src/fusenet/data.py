"""Image datasets: binary PGM codec, CSV manifests, seeded splits.

A manifest is a UTF-8 CSV with header ``path,label``; relative paths are
resolved against the manifest's directory and labels are 0 (negative) or
1 (positive). Images are single-channel 8-bit PGM (``P5``).
"""

from __future__ import annotations

import csv
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, FormatError, UsageError
from .rng import Rng, mix_seed

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse a binary PGM into an (H, W) integer matrix in 0..maxval."""
    if data[:2] != b"P5":
        raise FormatError(f"not a binary PGM: magic {data[:2]!r}, expected b'P5'")
    pos = 2
    header = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated PGM header")
        try:
            header.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"bad PGM header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = header
    if width < 1 or height < 1:
        raise FormatError(f"PGM dimensions must be positive, got {width}x{height}")
    if not 0 < maxval <= 255:
        raise FormatError(f"PGM maxval {maxval} unsupported (only 1..255)")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("PGM header must end with a single whitespace byte")
    pos += 1
    payload = data[pos : pos + width * height]
    if len(payload) < width * height:
        raise FormatError(f"truncated PGM payload: {len(payload)} of {width * height} bytes")
    image = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    if image.max(initial=0) > maxval:
        raise FormatError(f"PGM sample exceeds maxval {maxval}")
    return image.copy()


def encode_pgm(image: np.ndarray, maxval: int = 255) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2 or image.min(initial=0) < 0 or image.max(initial=0) > maxval:
        raise FormatError("encode_pgm needs a 2-d array with values in 0..maxval")
    h, w = image.shape
    return b"P5\n%d %d\n%d\n" % (w, h, maxval) + image.astype(np.uint8).tobytes()


def normalize(raw: np.ndarray, standardize: bool = False) -> np.ndarray:
    """Scale 0..255 values to [0, 1]; optionally shift/scale to mean 0, sd 1.

    Returns a (1, H, W) float64 array.
    """
    x = np.asarray(raw, dtype=np.float64) / 255.0
    if standardize:
        sd = x.std()
        x = x - x.mean()
        if sd > 0:
            x = x / sd
    return x[None, :, :]


def resize_bilinear(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resample (align-corners off) of an (H, W) array."""
    h, w = image.shape
    th, tw = size
    if (h, w) == (th, tw):
        return image.astype(np.float64)
    ys = np.clip((np.arange(th) + 0.5) * h / th - 0.5, 0, h - 1)
    xs = np.clip((np.arange(tw) + 0.5) * w / tw - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W)
    label: int
    source_path: str = ""


@dataclass
class Dataset:
    """Images (N, 1, H, W), integer labels (N,) and their source paths, in manifest order."""

    images: np.ndarray
    labels: np.ndarray
    paths: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DataError(f"dataset images must be (N, 1, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if not self.paths:
            self.paths = [""] * len(self.labels)

    def __len__(self):
        return int(self.labels.shape[0])

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.paths[i])

    @property
    def samples(self) -> List[Sample]:
        return [self[i] for i in range(len(self))]

    @property
    def image_size(self) -> Tuple[int, int]:
        return tuple(self.images.shape[2:])

    @property
    def class_counts(self) -> Tuple[int, int]:
        pos = int(np.sum(self.labels == 1))
        return len(self) - pos, pos

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], [self.paths[i] for i in idx.tolist()])


def load_manifest(path, size: Optional[Tuple[int, int]] = None, standardize: bool = False) -> Dataset:
    """Read a ``path,label`` manifest and decode every image.

    With ``size`` every image is resampled to (H, W); without it all images
    must already share one size.
    """
    path = Path(path)
    root = path.parent
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["path", "label"]:
        raise DataError(f"{path}: header must be 'path,label', got {header!r}")
    images, labels, paths = [], [], []
    shape = None
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        where = f"{path}, row {row_no}"
        if len(row) != 2:
            raise DataError(f"{where}: expected 2 fields, got {len(row)}")
        rel, label = row[0].strip(), row[1].strip()
        if label not in ("0", "1"):
            raise DataError(f"{where}: label {label!r} is not 0 or 1")
        file = Path(rel) if os.path.isabs(rel) else root / rel
        try:
            raw = decode_pgm(file.read_bytes())
        except OSError as exc:
            raise DataError(f"{where}: cannot read image {rel!r}: {exc.strerror or exc}") from None
        except FormatError as exc:
            raise FormatError(f"{where}: {rel!r}: {exc}") from None
        if size is not None:
            raw = resize_bilinear(raw, tuple(size))
        elif shape is not None and raw.shape != shape:
            raise DataError(f"{where}: image {rel!r} is {raw.shape[0]}x{raw.shape[1]}, expected {shape[0]}x{shape[1]}")
        shape = raw.shape
        images.append(normalize(raw, standardize))
        labels.append(int(label))
        paths.append(rel)
    if not images:
        raise DataError(f"{path}: manifest lists no images")
    return Dataset(np.stack(images), np.array(labels), paths)


def write_manifest(dataset: Dataset, directory, prefix: str = "img") -> Path:
    """Write every image as PGM plus ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        raw = np.clip(np.rint(dataset.images[i, 0] * 255.0), 0, 255).astype(np.uint8)
        rel = f"images/{prefix}{i:05d}.pgm"
        (directory / rel).write_bytes(encode_pgm(raw))
        rows.append((rel, int(dataset.labels[i])))
    manifest = directory / "manifest.csv"
    with open(manifest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(rows)
    return manifest


# ---------------------------------------------------------------- splits


@dataclass
class SplitPlan:
    seed: int
    n_val: int
    n_test: int
    train: List[int]
    val: List[int]
    test: List[int]

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def section(self, name: str) -> List[int]:
        if name not in ("train", "val", "test"):
            raise UsageError(f"unknown split section {name!r}")
        return getattr(self, name)

    def to_json(self) -> str:
        body = {
            "seed": self.seed,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "train": self.train,
            "val": self.val,
            "test": self.test,
        }
        return json.dumps(body, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        try:
            d = json.loads(text)
            plan = cls(
                int(d["seed"]), int(d["n_val"]), int(d["n_test"]),
                [int(i) for i in d["train"]], [int(i) for i in d["val"]], [int(i) for i in d["test"]],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed split plan: {exc}") from None
        plan.validate()
        return plan

    def validate(self, n: Optional[int] = None) -> None:
        everything = self.train + self.val + self.test
        if len(set(everything)) != len(everything):
            raise DataError("split plan sections overlap")
        if n is not None and sorted(everything) != list(range(n)):
            raise DataError(f"split plan does not partition a dataset of {n} samples")


def split_dataset(dataset, n_val: int = 250, n_test: int = 250, seed: int = 0, stratify: bool = False) -> SplitPlan:
    """Seeded Fisher-Yates split: first ``n_val`` shuffled indices validate, next ``n_test`` test.

    ``dataset`` may be a :class:`Dataset` or a sample count. With
    ``stratify`` each class is shuffled separately and the sections receive
    class shares proportional to the whole set.
    """
    n = dataset if isinstance(dataset, int) else len(dataset)
    if n_val < 0 or n_test < 0 or n_val + n_test >= n:
        raise UsageError(f"n_val + n_test = {n_val + n_test} must be below the dataset size {n}")
    rng = Rng(seed)
    if not stratify:
        order = rng.permutation(n).tolist()
        return SplitPlan(seed, n_val, n_test, order[n_val + n_test :], order[:n_val], order[n_val : n_val + n_test])
    labels = np.asarray(dataset.labels)
    val, test, train = [], [], []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)].tolist()
        k_val = int(round(n_val * len(members) / n))
        k_test = int(round(n_test * len(members) / n))
        val += members[:k_val]
        test += members[k_val : k_val + k_test]
        train += members[k_val + k_test :]
    return SplitPlan(seed, n_val, n_test, sorted(train), sorted(val), sorted(test))


# ---------------------------------------------------------------- synthetic data


def _blob_image(rng: Rng, label: int, size: int) -> np.ndarray:
    # negatives: a few broad smooth blobs; positives: many small sharp blobs
    if label == 0:
        count = 3 + int(rng.integers(3))
        sigma_lo, sigma_hi = 6.0, 10.0
    else:
        count = 14 + int(rng.integers(10))
        sigma_lo, sigma_hi = 1.5, 3.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    centers = rng.uniform(0, size, (count, 2))
    sigmas = rng.uniform(sigma_lo, sigma_hi, count)
    amps = rng.uniform(0.5, 1.0, count)
    for (cy, cx), s, a in zip(centers, sigmas, amps):
        img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    img = img / max(img.max(), 1e-12)
    img = 0.15 + 0.7 * img + 0.05 * rng.normal((size, size))
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def make_blob_dataset(n: int, size: int = 64, seed: int = 0) -> Dataset:
    """Two-class synthetic textures: broad blobs (label 0) versus dense small blobs (label 1).

    Labels alternate after a seeded shuffle, so classes are balanced to
    within one sample. Pixels are quantized to 8 bits like a PGM round trip.
    """
    rng = Rng(seed)
    labels = (rng.permutation(n) % 2).astype(np.int64)
    images = np.stack(
        [normalize(_blob_image(Rng(mix_seed(seed, i)), int(labels[i]), size)) for i in range(n)]
    )
    return Dataset(images, labels, [f"synthetic:{seed}:{i}" for i in range(n)])


def synthetic_splits(seed: int = 0, size: int = 64, n_train: int = 400, n_val: int = 100, n_test: int = 100):
    """The bundled desk-scale benchmark: (train, val, test) blob datasets."""
    full = make_blob_dataset(n_train + n_val + n_test, size=size, seed=seed)
    plan = split_dataset(full, n_val=n_val, n_test=n_test, seed=seed)
    return full.subset(plan.train), full.subset(plan.val), full.subset(plan.test)
