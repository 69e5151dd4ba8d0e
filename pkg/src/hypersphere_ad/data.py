"""Dataset ingestion and protocol construction.

Covers the one-class split, contamination mixing, the time-series to
image-like tiling pipeline (11-step sliding-mean smoothing, then 26
consecutive 26-channel vectors stacked into a 26x26 sample), synthetic
blob tasks for fast experiments, and file ingestion (indexed image
directories, 28-column sensor CSVs, and the binary tensor container).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autodiff import ContractError, DomainError, Rng, ShapeError

SMOOTH_HALF_WIDTH = 5   # mean over t-5 .. t+5
TILE_SIZE = 26          # channels per timestamp == timestamps per sample


@dataclass
class LabeledDataset:
    """Image-like samples in [0,1] with binary anomaly labels."""

    samples: np.ndarray          # (N, c, h, w) float
    labels: np.ndarray           # (N,) int, 0 normal / 1 anomalous
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4:
            raise ShapeError(f"samples must be (N,c,h,w), got {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise ShapeError("one label per sample required")
        if self.samples.size and (
            self.samples.min() < 0.0 or self.samples.max() > 1.0
        ):
            raise DomainError("sample values must lie in [0, 1]")
        if not np.isin(self.labels, (0, 1)).all():
            raise DomainError("labels must be binary")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def anomaly_fraction(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.samples[idx], self.labels[idx],
                              split=self.split, provenance=self.provenance)


@dataclass
class MulticlassDataset:
    """Original multi-class corpus with its native train/test split."""

    train_samples: np.ndarray
    train_classes: np.ndarray
    test_samples: np.ndarray
    test_classes: np.ndarray


@dataclass
class ContaminationConfig:
    rho: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 0.25:
            raise ContractError(f"rho must lie in [0, 0.25], got {self.rho}")


@dataclass
class TimeSeriesTable:
    """T x 26 monitoring matrix plus a per-timestamp anomaly flag."""

    values: np.ndarray
    flags: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.flags = np.asarray(self.flags, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[1] != TILE_SIZE:
            raise ShapeError(
                f"expected T x {TILE_SIZE} measurements, got {self.values.shape}"
            )
        if self.flags.shape != (self.values.shape[0],):
            raise ShapeError("one flag per timestamp required")

    def __len__(self):
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# protocols

def one_class_split(mc: MulticlassDataset, normal_class: int):
    """Train on the designated class only; test on everything, labeling
    all other classes anomalous."""
    classes = np.unique(np.concatenate([mc.train_classes, mc.test_classes]))
    if normal_class not in classes:
        raise ContractError(f"class {normal_class} not present (have {classes})")
    keep = mc.train_classes == normal_class
    train = LabeledDataset(
        mc.train_samples[keep], np.zeros(int(keep.sum()), dtype=np.int64),
        split="train", provenance=f"one-class normal={normal_class}",
    )
    test = LabeledDataset(
        mc.test_samples, (mc.test_classes != normal_class).astype(np.int64),
        split="test", provenance=f"one-class normal={normal_class}",
    )
    return train, test


def contaminate(train: LabeledDataset, pool: LabeledDataset,
                cfg: ContaminationConfig) -> LabeledDataset:
    """Inject anomalies so the result has anomaly fraction ~= rho.

    Adds m = round(rho/(1-rho) * n_normal) pool samples drawn uniformly
    without replacement.  True labels are kept on the returned dataset
    for analysis; the trainer never reads them.
    """
    n_normal = int((train.labels == 0).sum())
    m = int(round(cfg.rho / (1.0 - cfg.rho) * n_normal))
    if m == 0:
        return train
    if len(pool) < m:
        raise ContractError(f"pool has {len(pool)} samples, need {m}")
    pick = Rng(cfg.seed).child("contaminate").choice_without_replacement(len(pool), m)
    pick = np.sort(pick)
    return LabeledDataset(
        np.concatenate([train.samples, pool.samples[pick]]),
        np.concatenate([train.labels, np.ones(m, dtype=np.int64)]),
        split=train.split,
        provenance=f"{train.provenance} +contamination rho={cfg.rho}",
    )


def smooth_window(ts: TimeSeriesTable) -> TimeSeriesTable:
    """Centered 11-step sliding mean, stride 1; only full windows are
    kept (5 rows dropped at each end).  Flags carry over from the
    window's center timestamp."""
    half = SMOOTH_HALF_WIDTH
    T = len(ts)
    width = 2 * half + 1
    if T < width:
        raise DomainError(f"need at least {width} timestamps, got {T}")
    csums = np.cumsum(ts.values, axis=0)
    csums = np.vstack([np.zeros((1, ts.values.shape[1])), csums])
    smoothed = (csums[width:] - csums[:-width]) / width
    return TimeSeriesTable(values=smoothed, flags=ts.flags[half : T - half])


def tile_windows(ts: TimeSeriesTable, scale_rows: int | None = None,
                 scale_bounds=None, split: str = "train") -> LabeledDataset:
    """Stack 26 consecutive rows into 1x26x26 samples, stride 1.

    Columns are min-max scaled to [0,1].  Scaling statistics come from
    the first ``scale_rows`` rows (default: all rows) or from explicit
    ``scale_bounds`` (lo, hi); out-of-range values are clipped.  A
    window is anomalous iff any of its timestamps is flagged.
    """
    T = len(ts)
    if T < TILE_SIZE:
        raise DomainError(f"need at least {TILE_SIZE} timestamps, got {T}")
    if scale_bounds is not None:
        lo, hi = scale_bounds
    else:
        rows = ts.values if scale_rows is None else ts.values[:scale_rows]
        lo, hi = rows.min(axis=0), rows.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    scaled = np.clip((ts.values - lo) / span, 0.0, 1.0)

    n = T - TILE_SIZE + 1
    idx = np.arange(TILE_SIZE)[None, :] + np.arange(n)[:, None]
    samples = scaled[idx][:, None, :, :].astype(np.float32)
    flag_windows = ts.flags[idx]
    labels = (flag_windows.any(axis=1)).astype(np.int64)
    return LabeledDataset(samples, labels, split=split, provenance="tiled time series")


def timeseries_pipeline(ts: TimeSeriesTable, train_frac: float = 0.7):
    """Smooth, tile, and split chronologically: the leading train_frac
    of the normal windows train; the remaining normal windows plus all
    anomalous windows test.  Scaling statistics use only rows covered by
    training windows."""
    sm = smooth_window(ts)
    T = len(sm)
    n = T - TILE_SIZE + 1
    idx = np.arange(TILE_SIZE)[None, :] + np.arange(n)[:, None]
    labels = sm.flags[idx].any(axis=1).astype(np.int64)
    normal_idx = np.flatnonzero(labels == 0)
    if normal_idx.size == 0:
        raise ContractError("no normal windows to train on")
    n_train = int(np.floor(train_frac * normal_idx.size))
    if n_train == 0:
        raise ContractError("train fraction leaves no training windows")
    train_windows = normal_idx[:n_train]
    row_mask = np.zeros(T, dtype=bool)
    for w in train_windows:
        row_mask[w : w + TILE_SIZE] = True
    rows = sm.values[row_mask]
    bounds = (rows.min(axis=0), rows.max(axis=0))

    full = tile_windows(sm, scale_bounds=bounds)
    test_windows = np.setdiff1d(np.arange(n), train_windows)
    train = LabeledDataset(full.samples[train_windows], labels[train_windows],
                           split="train", provenance="tiled time series (train)")
    test = LabeledDataset(full.samples[test_windows], labels[test_windows],
                          split="test", provenance="tiled time series (test)")
    return train, test


# ---------------------------------------------------------------------------
# synthetic blob task

def synth_blob_latents(n: int, d: int, shift: float, rng: Rng) -> np.ndarray:
    """Standard-normal latents; anomalous classes pass shift != 0, which
    offsets the first coordinate by exactly that amount."""
    z = rng.normal(size=(n, d), dtype=np.float64)
    z[:, 0] += shift
    return z


def _render_blobs(latents: np.ndarray, hw, noise: float, rng: Rng,
                  pos_scale: float = 0.8) -> np.ndarray:
    """Render each latent as a Gaussian bump.

    Coord 0 moves the horizontal center at ``pos_scale`` px/unit (kept
    deliberately small so this factor is pixel-quiet), coord 1 moves the
    vertical center at a larger fixed scale, coords 2/3 drive log-width
    and amplitude (pixel-loud nuisance factors).  Absent coords default.
    """
    h, w = hw
    n, d = latents.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cx = w / 2.0 + pos_scale * latents[:, 0]
    cy = h / 2.0 + (1.8 * latents[:, 1] if d > 1 else 0.0)
    sigma = 2.1 * np.exp(0.22 * latents[:, 2]) if d > 2 else np.full(n, 2.1)
    amp = 0.70 + 0.12 * np.tanh(latents[:, 3]) if d > 3 else np.full(n, 0.70)
    img = amp[:, None, None] * np.exp(
        -((xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2)
        / (2.0 * sigma[:, None, None] ** 2)
    )
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)[:, None, :, :].astype(np.float32)


def synth_blobs(
    n_normal: int,
    n_anomalous: int,
    d: int,
    separation: float,
    rng: Rng,
    image_hw=(16, 16),
    noise: float = 0.02,
    pos_scale: float = 1.6,
    split: str = "train",
) -> LabeledDataset:
    """Blob-rendering task: anomalies are the same generator with the
    first latent coordinate shifted by ``separation``."""
    if separation < 0:
        raise ContractError("separation must be nonnegative")
    z_norm = synth_blob_latents(n_normal, d, 0.0, rng.child("normal"))
    z_anom = synth_blob_latents(n_anomalous, d, separation, rng.child("anomalous"))
    latents = np.concatenate([z_norm, z_anom]) if n_anomalous else z_norm
    samples = _render_blobs(latents, image_hw, noise, rng.child("render"), pos_scale)
    labels = np.concatenate(
        [np.zeros(n_normal, dtype=np.int64), np.ones(n_anomalous, dtype=np.int64)]
    )
    return LabeledDataset(samples, labels, split=split,
                          provenance=f"synth blobs d={d} sep={separation}")


def synth_task(
    n_train: int,
    n_test_normal: int,
    n_test_anomalous: int,
    d: int,
    separation: float,
    seed: int,
    image_hw=(16, 16),
    noise: float = 0.02,
    pos_scale: float = 1.6,
    pool_size: int = 0,
):
    """Full one-class task on blobs: clean train set, mixed test set, and
    an optional anomaly pool for contamination experiments."""
    rng = Rng(seed)
    train = synth_blobs(n_train, 0, d, separation, rng.child("train"),
                        image_hw, noise, pos_scale, split="train")
    test_n = synth_blobs(n_test_normal, 0, d, separation, rng.child("test-normal"),
                         image_hw, noise, pos_scale, split="test")
    test_a = synth_blobs(0, n_test_anomalous, d, separation, rng.child("test-anomalous"),
                         image_hw, noise, pos_scale, split="test")
    test = LabeledDataset(
        np.concatenate([test_n.samples, test_a.samples]),
        np.concatenate([test_n.labels, test_a.labels]),
        split="test", provenance=train.provenance,
    )
    pool = None
    if pool_size:
        pool = synth_blobs(0, pool_size, d, separation, rng.child("pool"),
                           image_hw, noise, pos_scale, split="train")
    return train, test, pool


# ---------------------------------------------------------------------------
# ingestion

def pad_images(samples: np.ndarray, target_hw) -> np.ndarray:
    """Symmetric zero-padding up to target_hw (e.g. 28x28 -> 32x32)."""
    _, _, h, w = samples.shape
    th, tw = target_hw
    if th < h or tw < w:
        raise ShapeError(f"cannot pad {h}x{w} down to {th}x{tw}")
    top, left = (th - h) // 2, (tw - w) // 2
    return np.pad(samples, ((0, 0), (0, 0), (top, th - h - top), (left, tw - w - left)))


def load_timeseries_csv(path) -> TimeSeriesTable:
    """28-column CSV: timestamp index, 26 measurements, anomaly flag.
    A non-numeric first row is treated as a header and skipped."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for i, row in enumerate(reader):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue
                raise
    data = np.asarray(rows, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != TILE_SIZE + 2:
        raise ShapeError(
            f"expected {TILE_SIZE + 2} columns (timestamp, {TILE_SIZE} "
            f"measurements, flag), got {data.shape}"
        )
    return TimeSeriesTable(values=data[:, 1:-1], flags=data[:, -1].astype(np.int64))


def load_image_index(index_path, resize_hw=None, pad_hw=None):
    """Directory-of-images ingestion via an index CSV with header
    ``path,label,split``; paths resolve relative to the index file."""
    from PIL import Image

    index_path = Path(index_path)
    root = index_path.parent
    by_split: dict[str, list] = {}
    with open(index_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"path", "label", "split"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ShapeError("index CSV must have a path,label,split header")
        for row in reader:
            img = Image.open(root / row["path"])
            if resize_hw is not None:
                img = img.resize((resize_hw[1], resize_hw[0]), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[None, :, :]
            else:
                arr = arr.transpose(2, 0, 1)[:3]
            by_split.setdefault(row["split"], []).append((arr, int(row["label"])))
    out = {}
    for split, pairs in by_split.items():
        samples = np.stack([p[0] for p in pairs])
        if pad_hw is not None:
            samples = pad_images(samples, pad_hw)
        labels = np.array([p[1] for p in pairs], dtype=np.int64)
        out[split] = LabeledDataset(samples, labels, split=split,
                                    provenance=str(index_path))
    return out


def save_dataset(path, ds: LabeledDataset):
    ckpt.write_tensors(
        path,
        {"samples": ds.samples.astype(np.float32), "labels": ds.labels},
        manifest={"schema": "labeled-dataset", "split": ds.split,
                  "provenance": ds.provenance},
    )


def load_dataset(path) -> LabeledDataset:
    tensors, manifest = ckpt.read_tensors(path)
    if manifest is None or manifest.get("schema") != "labeled-dataset":
        raise ckpt.CheckpointError(f"{path} is not a dataset container")
    return LabeledDataset(tensors["samples"], tensors["labels"],
                          split=manifest["split"], provenance=manifest["provenance"])
