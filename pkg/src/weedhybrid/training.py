"""Optimization loop, stratified cross-validation, and the metric suite.

Training minimizes the weighted multi-task loss with bias-corrected Adam.
Every epoch reshuffles with a generator seeded from (run seed, epoch), so
runs are reproducible bit for bit.  Evaluation produces a full
classification report (confusion matrix, per-class precision/recall/F1,
accuracy, macro and weighted averages) plus pooled mean IoU over
segmentation masks, and can emit the curves and tables as CSV files.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import heads as hd
from . import tensor as T
from .errors import ContractError, DivergenceError, NumericError

__all__ = [
    "OptimizerState",
    "init_optimizer",
    "adam_step",
    "FoldPlan",
    "stratified_folds",
    "MetricsReport",
    "classification_metrics",
    "mean_iou",
    "TrainConfig",
    "TrainData",
    "EpochStats",
    "TrainResult",
    "train",
    "evaluate",
    "cross_validate",
    "emit_plot_data",
]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    """Bias-corrected Adam accumulators for an ordered parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_optimizer(params: list, lr: float) -> OptimizerState:
    state = OptimizerState(lr=lr)
    state.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
    state.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
    return state


def adam_step(params: list, state: OptimizerState) -> None:
    """One in-place update; every parameter must carry a gradient."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        g = np.asarray(p.grad, dtype=np.float64)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        update = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2)
                                                 + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# stratified folds


@dataclass(frozen=True)
class FoldPlan:
    """Sample-to-fold assignment; folds partition the index set."""

    assignments: np.ndarray
    k: int

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def split(self, fold: int) -> tuple:
        """(train indices, validation indices) for one held-out fold."""
        return (np.flatnonzero(self.assignments != fold),
                np.flatnonzero(self.assignments == fold))


def stratified_folds(labels, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle each class and deal round-robin with a fold pointer that
    continues across classes, so fold sizes stay balanced even when class
    sizes are not multiples of k."""
    labels = np.asarray(labels)
    if k < 2:
        raise ContractError(f"need at least 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    assignments = np.full(labels.shape[0], -1, dtype=np.int64)
    pointer = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise ContractError(
                f"class {cls} has {idx.size} samples, fewer than {k} folds")
        for i in rng.permutation(idx):
            assignments[i] = pointer % k
            pointer += 1
    return FoldPlan(assignments=assignments, k=k)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    confusion: np.ndarray          # (k, k) counts, rows = truth
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: tuple                   # (precision, recall, f1)
    weighted: tuple
    mean_iou: float = 0.0
    iou_per_class: tuple = ()
    zero_division: bool = False


def classification_metrics(labels, preds, num_classes: int) -> MetricsReport:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.size == 0:
        raise ContractError("cannot compute metrics over an empty sample set")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    tp = np.diag(confusion).astype(np.float64)
    col = confusion.sum(axis=0).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)
    flagged = bool(np.any(col == 0) or np.any(row == 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(col > 0, tp / np.where(col > 0, col, 1), 0.0)
        recall = np.where(row > 0, tp / np.where(row > 0, row, 1), 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2 * precision * recall / np.where(pr > 0, pr, 1), 0.0)
        if np.any(pr == 0):
            flagged = True
    support = confusion.sum(axis=1)
    total = float(labels.size)
    macro = (float(precision.mean()), float(recall.mean()), float(f1.mean()))
    weighted = (float(precision @ support / total),
                float(recall @ support / total),
                float(f1 @ support / total))
    return MetricsReport(confusion=confusion, precision=precision,
                         recall=recall, f1=f1, support=support,
                         accuracy=float(tp.sum() / total), macro=macro,
                         weighted=weighted, zero_division=flagged)


def mean_iou(pred_masks, true_masks, num_classes: int) -> tuple:
    """Pooled IoU per class over all pixels of all pairs; mean over classes.

    Returns (mean, per-class tuple, zero_division flag); classes absent from
    both prediction and truth contribute 0 and raise the flag.
    """
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for pm, tm in zip(pred_masks, true_masks):
        pm = np.asarray(pm, dtype=np.int64)
        tm = np.asarray(tm, dtype=np.int64)
        if pm.shape != tm.shape:
            raise ContractError(f"mask shapes differ: {pm.shape} vs {tm.shape}")
        for k in range(num_classes):
            p = pm == k
            t = tm == k
            inter[k] += np.count_nonzero(p & t)
            union[k] += np.count_nonzero(p | t)
    flagged = bool(np.any(union == 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return float(iou.mean()), tuple(float(x) for x in iou), flagged


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 2e-3
    batch: int = 32
    seed: int = 0
    weights: hd.LossWeights = hd.LossWeights()
    backbone: bb.BackboneConfig = None

    def resolved_backbone(self) -> bb.BackboneConfig:
        return self.backbone if self.backbone is not None else bb.desk_config()


@dataclass
class TrainData:
    """Preprocessed tensors ready for the model: float32 images (N,3,H,W),
    integer labels (N,), integer masks (N,H,W), growth targets (N,)."""

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    growth: np.ndarray

    def __post_init__(self):
        n = self.images.shape[0]
        if not (self.labels.shape[0] == self.masks.shape[0]
                == self.growth.shape[0] == n):
            raise ContractError("dataset arrays disagree on sample count")

    def __len__(self):
        return self.images.shape[0]


@dataclass
class EpochStats:
    epoch: int
    train_acc: float
    val_acc: float
    l_cls: float
    l_seg: float
    l_growth: float
    l_total: float


@dataclass
class TrainResult:
    params: bb.BackboneParams
    heads: hd.HeadParams
    history: list            # EpochStats per epoch
    best_epoch: int
    best_val_loss: float


def _named_model_parameters(params, heads):
    return bb.named_parameters(params) + hd.named_head_parameters(heads)


def _one_hot_masks(masks: np.ndarray, num_classes: int) -> np.ndarray:
    return np.transpose(np.eye(num_classes, dtype=np.float32)[masks],
                        (0, 3, 1, 2))


def _batch_losses(params, heads, x, labels, masks_1h, growth, weights):
    """Forward one batch; isolate which loss component went non-finite."""
    component = "backbone"
    try:
        feats = bb.backbone_forward(T.const(x), params)
        component = "classification"
        probs = hd.classify_head(feats.f_final, heads)
        l_cls = hd.cross_entropy(probs, labels)
        component = "segmentation"
        mask = hd.segment_head(feats.spatial, heads)
        l_seg = hd.dice_loss(mask, T.const(masks_1h))
        component = "growth"
        pred_growth = hd.growth_head(feats.f_final, heads)
        l_growth = hd.mse_loss(pred_growth, growth.astype(np.float64))
    except NumericError as exc:
        raise DivergenceError(component, detail=str(exc)) from exc
    total = hd.total_loss(l_cls, l_seg, l_growth, weights)
    for name, value in (("classification", l_cls), ("segmentation", l_seg),
                        ("growth", l_growth)):
        if not np.isfinite(value.data):
            raise DivergenceError(name)
    preds = np.argmax(probs.data, axis=-1)
    return total, (float(l_cls.data), float(l_seg.data), float(l_growth.data),
                   float(total.data)), preds


def _accuracy(params, heads, images, labels, batch: int) -> float:
    correct = 0
    for start in range(0, images.shape[0], batch):
        x = images[start:start + batch]
        feats = bb.backbone_forward(T.const(x), params)
        probs = hd.classify_head(feats.f_final, heads)
        correct += int(np.sum(np.argmax(probs.data, axis=-1)
                              == labels[start:start + batch]))
    return correct / images.shape[0]


def _snapshot(named):
    return {name: t.data.copy() for name, t in named}


def _restore(named, snap):
    for name, t in named:
        t.data = snap[name].copy()


def train(data: TrainData, cfg: TrainConfig, train_idx=None, val_idx=None,
          params: bb.BackboneParams = None,
          heads: hd.HeadParams = None) -> TrainResult:
    """Adam training of backbone + heads on the weighted multi-task loss.

    Without an explicit split, one stratified fifth is held out for
    validation.  The best-validation-loss parameters (by l_total) are
    restored before returning.  Pretrained parameter collections may be
    passed in to continue from them.
    """
    bcfg = cfg.resolved_backbone()
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = bb.init_backbone(bcfg, rng)
    if heads is None:
        heads = hd.init_heads(bcfg, rng)
    if train_idx is None or val_idx is None:
        plan = stratified_folds(data.labels, k=5, seed=cfg.seed)
        train_idx, val_idx = plan.split(0)
    train_idx = np.asarray(train_idx)
    val_idx = np.asarray(val_idx)

    named = _named_model_parameters(params, heads)
    tensors = [t for _, t in named]
    state = init_optimizer(tensors, cfg.lr)
    num_classes = heads.cls_w.shape[-1]

    history = []
    best_val = float("inf")
    best_epoch = -1
    best = _snapshot(named)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(train_idx)
        sums = np.zeros(4)
        batches = 0
        correct = 0
        for start in range(0, order.size, cfg.batch):
            sel = order[start:start + cfg.batch]
            masks_1h = _one_hot_masks(data.masks[sel], num_classes)
            with T.Tape() as tape:
                total, parts, preds = _batch_losses(
                    params, heads, data.images[sel], data.labels[sel],
                    masks_1h, data.growth[sel], cfg.weights)
                tape.backward(total)
            adam_step(tensors, state)
            T.zero_grads(tensors)
            sums += parts
            batches += 1
            correct += int(np.sum(preds == data.labels[sel]))

        val_parts = np.zeros(4)
        val_batches = 0
        val_correct = 0
        for start in range(0, val_idx.size, cfg.batch):
            sel = val_idx[start:start + cfg.batch]
            masks_1h = _one_hot_masks(data.masks[sel], num_classes)
            _, parts, preds = _batch_losses(
                params, heads, data.images[sel], data.labels[sel],
                masks_1h, data.growth[sel], cfg.weights)
            val_parts += parts
            val_batches += 1
            val_correct += int(np.sum(preds == data.labels[sel]))

        val_total = val_parts[3] / max(val_batches, 1)
        history.append(EpochStats(
            epoch=epoch,
            train_acc=correct / max(order.size, 1),
            val_acc=val_correct / max(val_idx.size, 1),
            l_cls=sums[0] / max(batches, 1),
            l_seg=sums[1] / max(batches, 1),
            l_growth=sums[2] / max(batches, 1),
            l_total=sums[3] / max(batches, 1)))
        if val_total < best_val:
            best_val = val_total
            best_epoch = epoch
            best = _snapshot(named)

    _restore(named, best)
    return TrainResult(params=params, heads=heads, history=history,
                       best_epoch=best_epoch, best_val_loss=best_val)


def evaluate(params: bb.BackboneParams, heads: hd.HeadParams,
             data: TrainData, indices=None, batch: int = 32) -> MetricsReport:
    """Classification report plus pooled mean IoU over the given samples."""
    idx = np.arange(len(data)) if indices is None else np.asarray(indices)
    if idx.size == 0:
        raise ContractError("cannot evaluate an empty sample set")
    num_classes = heads.cls_w.shape[-1]
    preds = np.empty(idx.size, dtype=np.int64)
    pred_masks = []
    for start in range(0, idx.size, batch):
        sel = idx[start:start + batch]
        feats = bb.backbone_forward(T.const(data.images[sel]), params)
        probs = hd.classify_head(feats.f_final, heads)
        preds[start:start + sel.size] = np.argmax(probs.data, axis=-1)
        mask = hd.segment_head(feats.spatial, heads)
        pred_masks.extend(np.argmax(mask.data, axis=1))
    report = classification_metrics(data.labels[idx], preds, num_classes)
    miou, per_class, flagged = mean_iou(pred_masks, data.masks[idx], num_classes)
    report.mean_iou = miou
    report.iou_per_class = per_class
    report.zero_division = report.zero_division or flagged
    return report


def cross_validate(data: TrainData, cfg: TrainConfig, k: int = 5) -> tuple:
    """k-fold stratified CV: per-fold reports plus a pooled report."""
    plan = stratified_folds(data.labels, k=k, seed=cfg.seed)
    fold_reports = []
    all_labels = []
    all_preds = []
    num_classes = 0
    for fold in range(k):
        tr, va = plan.split(fold)
        result = train(data, cfg, train_idx=tr, val_idx=va)
        report = evaluate(result.params, result.heads, data, indices=va)
        fold_reports.append(report)
        num_classes = report.confusion.shape[0]
        all_labels.append(data.labels[va])
        preds = []
        for start in range(0, va.size, cfg.batch):
            sel = va[start:start + cfg.batch]
            feats = bb.backbone_forward(T.const(data.images[sel]), result.params)
            probs = hd.classify_head(feats.f_final, result.heads)
            preds.append(np.argmax(probs.data, axis=-1))
        all_preds.append(np.concatenate(preds))
    pooled = classification_metrics(np.concatenate(all_labels),
                                    np.concatenate(all_preds), num_classes)
    return fold_reports, pooled


# ---------------------------------------------------------------------------
# CSV emission


def emit_plot_data(history: list, report: MetricsReport, outdir) -> dict:
    """Write history.csv, confusion.csv and report.csv; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = {name: os.path.join(outdir, f"{name}.csv")
             for name in ("history", "confusion", "report")}

    with open(paths["history"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_acc", "val_acc", "l_cls", "l_seg",
                    "l_growth", "l_total"])
        for row in history:
            w.writerow([row.epoch, f"{row.train_acc:.6f}", f"{row.val_acc:.6f}",
                        f"{row.l_cls:.6f}", f"{row.l_seg:.6f}",
                        f"{row.l_growth:.6f}", f"{row.l_total:.6f}"])

    k = report.confusion.shape[0]
    with open(paths["confusion"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth\\pred"] + [f"pred_{j}" for j in range(k)])
        for i in range(k):
            w.writerow([f"true_{i}"] + [int(v) for v in report.confusion[i]])

    with open(paths["report"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for i in range(k):
            w.writerow([i, f"{report.precision[i]:.6f}",
                        f"{report.recall[i]:.6f}", f"{report.f1[i]:.6f}",
                        int(report.support[i])])
        w.writerow(["accuracy", f"{report.accuracy:.6f}", "", "",
                    int(report.support.sum())])
        w.writerow(["macro", f"{report.macro[0]:.6f}", f"{report.macro[1]:.6f}",
                    f"{report.macro[2]:.6f}", int(report.support.sum())])
        w.writerow(["weighted", f"{report.weighted[0]:.6f}",
                    f"{report.weighted[1]:.6f}", f"{report.weighted[2]:.6f}",
                    int(report.support.sum())])
        w.writerow(["mean_iou", f"{report.mean_iou:.6f}", "", "", ""])
    return paths
