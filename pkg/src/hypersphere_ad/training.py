"""Optimization loop: reconstruction pretraining, hypersphere center
initialization, Adam updates, quantile radius updates, and epoch
scheduling.

The center is frozen after initialization.  The soft-boundary radius is
never a gradient leaf: after the warmup epochs it is reset each epoch to
the (1-nu) quantile of that epoch's squared latent distances.  The decay
term lives inside the loss (lambda3-scaled), so the optimizer's own
decoupled weight decay stays off by default.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from .autodiff import ContractError, Rng, Tape
from .data import LabeledDataset
from .evaluation import auroc, score
from .losses import HypersphereState, LossWeights, rec_loss, total_loss
from .lstm import gate_statistics
from .models import ModelParams, VariantConfig, bind_leaves, build, forward, save_model

METRIC_COLUMNS = ("epoch", "total", "svdd", "kl", "rec", "decay", "R",
                  "mean_gate_s", "mean_gate_o", "val_auroc")


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; names the term that diverged."""

    def __init__(self, term: str, epoch: int, batch: int):
        super().__init__(
            f"non-finite loss in term {term!r} at epoch {epoch}, batch {batch}"
        )
        self.term = term
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    pretrain_epochs: int = 10
    train_epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    nu: float = 0.1
    radius_update: str = "quantile"  # quantile after warmup, or "frozen"
    warmup_epochs: int = 10
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.pretrain_epochs < 0 or self.train_epochs < 0:
            raise ContractError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        if self.radius_update not in ("quantile", "frozen"):
            raise ContractError("radius_update must be 'quantile' or 'frozen'")
        if not 0 < self.nu <= 1:
            raise ContractError(f"nu must lie in (0, 1], got {self.nu}")


class Adam:
    """Per-parameter moment estimates with bias correction.

    ``weight_decay`` is decoupled (applied directly to the parameter,
    not through the gradient) and defaults to 0 because the paper-form
    decay term is part of the loss.
    """

    def __init__(self, arrays: dict[str, np.ndarray], lr=1e-4, beta1=0.9,
                 beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in arrays.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _batch_slices(n: int, batch_size: int, rng: Rng, merge_last_single: bool):
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if merge_last_single and len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def pretrain(model: ModelParams, data: LabeledDataset, cfg: TrainConfig):
    """Minimize reconstruction error alone for pretrain_epochs.

    Variants without a decoder skip pretraining with a warning.
    Returns the per-epoch mean reconstruction losses.
    """
    if cfg.pretrain_epochs == 0:
        return []
    if not model.variant.has_decoder:
        warnings.warn(
            f"variant {model.variant.variant!r} has no decoder; skipping pretraining"
        )
        return []
    rng = Rng(cfg.seed).child("pretrain")
    trainable = model.trainable_names()
    opt = Adam(
        {k: v for k, v in model.named_arrays().items() if k in trainable},
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
    )
    history = []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        total, seen = 0.0, 0
        for bi, idx in enumerate(
            _batch_slices(len(data), cfg.batch_size, rng.child(epoch), False)
        ):
            x = data.samples[idx].astype(model.dtype, copy=False)
            tape = Tape()
            leaves = bind_leaves(model, tape)
            out = forward(x, model, mode="train", tape=tape, leaves=leaves)
            loss = rec_loss(out.x_hat.tape.leaf(x), out.x_hat)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged("rec", epoch, bi)
            tape.backward(loss)
            arrays = model.named_arrays()
            grads = {n: tape.grad(leaves[n]) for n in trainable}
            opt.step({n: arrays[n] for n in trainable}, grads)
            total += value * len(idx)
            seen += len(idx)
        history.append(total / seen)
    return history


def init_center(model: ModelParams, data: LabeledDataset,
                min_coord: float = 0.1) -> np.ndarray:
    """Mean latent over the training set (one eval-mode pass), with
    small coordinates pushed to +/- min_coord to rule out the trivial
    all-zero center (zero coordinates count as positive)."""
    if len(data) == 0:
        raise ContractError("cannot initialize a center from an empty dataset")
    total = np.zeros(model.spec.latent_dim, dtype=np.float64)
    chunk = 256
    for start in range(0, len(data), chunk):
        x = data.samples[start : start + chunk].astype(model.dtype, copy=False)
        out = forward(x, model, mode="eval")
        total += out.z_hat.data.astype(np.float64).sum(axis=0)
    c = total / len(data)
    small = np.abs(c) < min_coord
    c[small] = np.where(c[small] >= 0.0, min_coord, -min_coord)
    return c


def update_radius(distances_sq, nu: float) -> float:
    """Radius from the (1-nu) empirical quantile (linear interpolation)
    of the squared distances."""
    distances_sq = np.asarray(distances_sq, dtype=np.float64)
    if distances_sq.size == 0:
        raise ContractError("no distances collected")
    if not 0 < nu <= 1:
        raise ContractError(f"nu must lie in (0, 1], got {nu}")
    q = float(np.quantile(distances_sq, 1.0 - nu))
    return float(np.sqrt(max(q, 0.0)))


def train_epoch(
    model: ModelParams,
    data: LabeledDataset,
    cfg: TrainConfig,
    hs: HypersphereState | None,
    opt: Adam,
    rng: Rng,
    epoch: int,
    val_data: LabeledDataset | None = None,
):
    """One pass of shuffled mini-batches; returns (model, hs, metrics).

    The center never moves.  For soft boundaries with quantile updates,
    the radius is refreshed from this epoch's distances once the warmup
    is over.  Metrics carry the loss terms, radius, mean input/output
    gate activations, and the validation AUROC when a validation set is
    given.
    """
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    vc = model.variant
    merge_single = vc.has_kl and vc.kl_mode == "batch_moments"
    if merge_single and cfg.batch_size < 2:
        raise ContractError("batch_moments KL needs batch_size >= 2")
    trainable = model.trainable_names()
    decay_names = model.decay_weight_names()
    sums = {"total": 0.0, "svdd": 0.0, "kl": 0.0, "rec": 0.0, "decay": 0.0,
            "mean_gate_s": 0.0, "mean_gate_o": 0.0}
    present = set()
    distances = []
    seen = 0
    for bi, idx in enumerate(
        _batch_slices(len(data), cfg.batch_size, rng, merge_single)
    ):
        x = data.samples[idx].astype(model.dtype, copy=False)
        tape = Tape()
        leaves = bind_leaves(model, tape)
        out = forward(x, model, mode="train", tape=tape, leaves=leaves)
        loss, parts = total_loss(
            vc.variant, vc.boundary, [leaves[n] for n in decay_names],
            cfg.weights, hs,
            x=tape.leaf(x) if out.x_hat is not None else None,
            x_hat=out.x_hat, z_hat=out.z_hat, kl_mode=vc.kl_mode,
        )
        value = float(loss.data)
        if not np.isfinite(value):
            for term, tensor in parts.items():
                if not np.isfinite(float(tensor.data)):
                    raise TrainingDiverged(term, epoch, bi)
            raise TrainingDiverged("total", epoch, bi)
        tape.backward(loss)
        arrays = model.named_arrays()
        grads = {n: tape.grad(leaves[n]) for n in trainable}
        opt.step({n: arrays[n] for n in trainable}, grads)

        w = len(idx)
        sums["total"] += value * w
        for term, tensor in parts.items():
            sums[term] += float(tensor.data) * w
            present.add(term)
        if out.gates is not None:
            stats = gate_statistics(out.gates)
            sums["mean_gate_s"] += stats["mean_gate_s"] * w
            sums["mean_gate_o"] += stats["mean_gate_o"] * w
        if vc.has_svdd and hs is not None:
            diff = out.z_hat.data.astype(np.float64) - hs.center
            distances.append((diff * diff).sum(axis=1))
        seen += w

    if (
        hs is not None
        and vc.has_svdd
        and vc.boundary == "soft"
        and cfg.radius_update == "quantile"
        and epoch > cfg.warmup_epochs
    ):
        hs.radius = update_radius(np.concatenate(distances), hs.nu)

    metrics = {"epoch": epoch, "total": sums["total"] / seen}
    for term in ("svdd", "kl", "rec", "decay"):
        metrics[term] = sums[term] / seen if term in present else None
    metrics["R"] = hs.radius if (hs is not None and vc.has_svdd) else None
    if out.gates is not None:
        metrics["mean_gate_s"] = sums["mean_gate_s"] / seen
        metrics["mean_gate_o"] = sums["mean_gate_o"] / seen
    else:
        metrics["mean_gate_s"] = metrics["mean_gate_o"] = None
    if val_data is not None:
        metrics["val_auroc"] = auroc(score(model, hs, val_data)).auroc
    else:
        metrics["val_auroc"] = None
    return model, hs, metrics


@dataclass
class TrainResult:
    metrics: list
    pretrain_losses: list
    hs: HypersphereState | None


def train_model(
    model: ModelParams,
    train_data: LabeledDataset,
    cfg: TrainConfig,
    val_data: LabeledDataset | None = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Full protocol: pretrain (decoder variants), freeze the center,
    then train_epochs of the variant objective."""
    pre = pretrain(model, train_data, cfg)
    hs = None
    if model.variant.has_svdd:
        hs = HypersphereState(center=init_center(model, train_data),
                              radius=0.0, nu=cfg.nu)
    trainable = model.trainable_names()
    opt = Adam(
        {k: v for k, v in model.named_arrays().items() if k in trainable},
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
    )
    rng = Rng(cfg.seed).child("train")
    rows = []
    for epoch in range(1, cfg.train_epochs + 1):
        _, hs, metrics = train_epoch(
            model, train_data, cfg, hs, opt, rng.child(epoch), epoch, val_data
        )
        rows.append(metrics)
        if checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_model(Path(checkpoint_dir) / f"checkpoint_epoch{epoch:04d}.bin",
                       model, extra=_hs_tensors(hs))
    return TrainResult(metrics=rows, pretrain_losses=pre, hs=hs)


def _hs_tensors(hs: HypersphereState | None) -> dict:
    if hs is None:
        return {}
    return {
        "hypersphere.center": hs.center.astype(np.float64),
        "hypersphere.radius": np.array([hs.radius], dtype=np.float64),
        "hypersphere.nu": np.array([hs.nu], dtype=np.float64),
    }


def hypersphere_from_tensors(extra: dict) -> HypersphereState | None:
    if "hypersphere.center" not in extra:
        return None
    return HypersphereState(
        center=extra["hypersphere.center"],
        radius=float(extra["hypersphere.radius"][0]),
        nu=float(extra["hypersphere.nu"][0]),
    )


def metrics_to_csv(path, rows):
    """One row per epoch; absent terms are empty fields.  Byte-stable
    for identical runs (floats via repr)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([
                "" if row.get(col) is None else
                (row[col] if col == "epoch" else repr(float(row[col])))
                for col in METRIC_COLUMNS
            ])


# ---------------------------------------------------------------------------
# hyperparameter grid

def grid_search(
    grid: dict,
    arch_spec,
    vc: VariantConfig,
    train_data: LabeledDataset,
    val_data: LabeledDataset,
    base_cfg: TrainConfig,
    folds: int = 1,
):
    """Exhaustive deterministic sweep over {lambda1, lambda2, lr} lists.

    Each cell trains ``folds`` replicates (fold i runs with seed+i) and
    is ranked by mean validation AUROC; ties keep the lexicographically
    first cell (sorted key order, values in the given order).  Returns
    (best_config, rows) with rows of (cell_dict, mean_auroc).
    """
    if not grid:
        raise ContractError("empty grid")
    allowed = {"lambda1", "lambda2", "lr"}
    if not set(grid) <= allowed:
        raise ContractError(f"grid keys must be among {sorted(allowed)}")
    keys = sorted(grid)
    rows = []
    best = None
    for values in product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, values))
        fold_scores = []
        for fold in range(folds):
            cfg = replace(
                base_cfg,
                seed=base_cfg.seed + fold,
                lr=cell.get("lr", base_cfg.lr),
                weights=replace(
                    base_cfg.weights,
                    lambda1=cell.get("lambda1", base_cfg.weights.lambda1),
                    lambda2=cell.get("lambda2", base_cfg.weights.lambda2),
                ),
            )
            model = build(arch_spec, vc, Rng(cfg.seed).child("model"),
                          dtype=np.float32)
            result = train_model(model, train_data, cfg)
            fold_scores.append(auroc(score(model, result.hs, val_data)).auroc)
        mean_score = float(np.mean(fold_scores))
        rows.append((cell, mean_score))
        if best is None or mean_score > best[1]:
            best = (cell, mean_score)
    best_cfg = replace(
        base_cfg,
        lr=best[0].get("lr", base_cfg.lr),
        weights=replace(
            base_cfg.weights,
            lambda1=best[0].get("lambda1", base_cfg.weights.lambda1),
            lambda2=best[0].get("lambda2", base_cfg.weights.lambda2),
        ),
    )
    return best_cfg, rows
