"""Training objective and segmentation metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .errors import ConfigError, DataError
from .kvconfig import parse_kv

LOSS_WEIGHTS = (0.6, 0.4, 0.6, 0.4)
GROUPS = ("tissue", "small", "large", "background")


def one_hot(labels, num_classes, dtype=np.float64):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label ids outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1.0, axis=1)
    return out


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ConfigError(f"prediction {pred.shape} and target {target.shape} differ")


def bce_loss(logits, targets):
    """Mean binary cross-entropy with logits, softplus(x) - x*t."""
    targets = np.asarray(targets, dtype=logits.dtype)
    _check_shapes(logits, targets)
    return T.mean(T.softplus(logits) - logits * targets)


def dice_loss(probs, targets, smooth=1e-5):
    """1 - (2 sum pt + s) / (sum p + sum t + s) per class, averaged over classes."""
    targets = np.asarray(targets, dtype=probs.dtype)
    _check_shapes(probs, targets)
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = T.tsum(probs * targets, axes)
    denom = T.tsum(probs, axes) + targets.sum(axis=axes) + smooth
    return 1.0 - T.mean((inter * 2.0 + smooth) / denom)


def segmentation_loss(logits, targets, smooth=1e-5):
    bce = bce_loss(logits, targets)
    dice = dice_loss(T.sigmoid(logits), targets, smooth)
    return bce, dice


def combined_objective(y_hat, y_hat_f, y, weights=LOSS_WEIGHTS, smooth=1e-5):
    """0.6 BCE(y_f) + 0.4 Dice(y_f) + 0.6 BCE(y) + 0.4 Dice(y).

    ``y`` is either integer labels (B, H, W) or a one-hot/probability map
    shaped like the logits.  Returns ``(loss, components)``.
    """
    y = np.asarray(y)
    if y.ndim == y_hat.ndim - 1:
        y = one_hot(y, y_hat.shape[1], dtype=y_hat.dtype)
    _check_shapes(y_hat, y)
    _check_shapes(y_hat_f, y)
    bce_f, dice_f = segmentation_loss(y_hat_f, y, smooth)
    bce, dice = segmentation_loss(y_hat, y, smooth)
    w = weights
    loss = bce_f * w[0] + dice_f * w[1] + bce * w[2] + dice * w[3]
    parts = {"bce_f": bce_f.item(), "dice_f": dice_f.item(), "bce": bce.item(),
             "dice": dice.item()}
    return loss, parts


# ---------------------------------------------------------------------------
# metrics on integer masks
# ---------------------------------------------------------------------------

def _validate_masks(pred, truth, num_classes):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    for m in (pred, truth):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise DataError(f"label id outside [0, {num_classes})")
    return pred, truth


def overlap_counts(pred, truth, num_classes):
    """Per-class (|P|, |T|, |P and T|) integer counts."""
    pred, truth = _validate_masks(pred, truth, num_classes)
    p = np.bincount(pred.ravel(), minlength=num_classes)
    t = np.bincount(truth.ravel(), minlength=num_classes)
    inter = np.bincount(pred[pred == truth].ravel(), minlength=num_classes)
    return p, t, inter


def dice_score(pred, truth, num_classes):
    """Per-class 2|P∩T|/(|P|+|T|); NaN where the class is absent from both."""
    p, t, inter = overlap_counts(pred, truth, num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(p + t > 0, 2.0 * inter / (p + t), np.nan)


def iou(pred, truth, num_classes):
    p, t, inter = overlap_counts(pred, truth, num_classes)
    union = p + t - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def boundary(mask):
    """Pixels of ``mask`` with at least one 4-neighbour outside it."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def hausdorff(pred_mask, true_mask, percentile=95):
    """Symmetric Hausdorff distance between boundary pixel sets, in pixels.

    With ``percentile < 100`` each directed distance set is reduced by that
    percentile before taking the max.  Returns NaN when either mask is empty.
    """
    if percentile not in (95, 100):
        raise ConfigError(f"hd percentile must be 95 or 100, got {percentile}")
    a = np.argwhere(boundary(pred_mask))
    b = np.argwhere(boundary(true_mask))
    if len(a) == 0 or len(b) == 0:
        return math.nan
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    if percentile == 100:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def hausdorff_per_class(pred, truth, num_classes, percentile=95):
    pred, truth = _validate_masks(pred, truth, num_classes)
    return np.array([math.nan if k == 0 else hausdorff(pred == k, truth == k, percentile)
                     for k in range(num_classes)])


# ---------------------------------------------------------------------------
# grouping and reports
# ---------------------------------------------------------------------------

@dataclass
class ClassGrouping:
    groups: dict  # class id -> group name
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.groups = {int(k): v for k, v in self.groups.items()}
        for k, g in self.groups.items():
            if g not in GROUPS:
                raise ConfigError(f"class {k}: unknown group {g!r}")

    @property
    def foreground(self):
        return sorted(k for k, g in self.groups.items() if g != "background")

    def members(self, group):
        return sorted(k for k, g in self.groups.items() if g == group)

    def name(self, k):
        return self.names.get(k, f"class{k}")

    def check(self, num_classes):
        missing = [k for k in range(1, num_classes) if k not in self.groups]
        if missing:
            raise ConfigError(f"classes {missing} have no group")
        extra = [k for k in self.groups if k >= num_classes]
        if extra:
            raise ConfigError(f"grouping names classes {extra} beyond num_classes={num_classes}")

    @classmethod
    def from_text(cls, text):
        """Lines ``<id>=<group>[,<name>]``."""
        groups, names = {}, {}
        for key, value in parse_kv(text).items():
            try:
                k = int(key)
            except ValueError as exc:
                raise ConfigError(f"grouping key {key!r} is not a class id") from exc
            group, _, name = value.partition(",")
            groups[k] = group.strip()
            if name.strip():
                names[k] = name.strip()
        groups.setdefault(0, "background")
        return cls(groups, names)

    @classmethod
    def default(cls, num_classes):
        order = ["large", "small", "tissue"]
        groups = {0: "background"}
        for k in range(1, num_classes):
            groups[k] = order[(k - 1) % 3]
        return cls(groups)


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class MetricReport:
    dice: dict
    hd: dict
    iou: dict
    grouping: ClassGrouping
    hd_percentile: int = 95

    def __post_init__(self):
        for k in self.dice:
            for name, v in (("dice", self.dice[k]), ("iou", self.iou[k])):
                if not math.isnan(v) and not 0.0 <= v <= 1.0 + 1e-12:
                    raise DataError(f"{name} for class {k} out of range: {v}")
            if not math.isnan(self.hd[k]) and self.hd[k] < 0:
                raise DataError(f"negative HD for class {k}")

    def group_average(self, group, metric="dice"):
        values = getattr(self, metric)
        return _nanmean(values[k] for k in self.grouping.members(group) if k in values)

    def overall(self, metric="dice"):
        values = getattr(self, metric)
        return _nanmean(values[k] for k in self.grouping.foreground if k in values)

    @property
    def mean_foreground_dice(self):
        return self.overall("dice")

    def rows(self):
        out = []
        for k in sorted(self.dice):
            if k == 0:
                continue
            out.append((self.grouping.name(k), self.dice[k], self.hd[k], self.iou[k]))
        for g in ("tissue", "small", "large"):
            if self.grouping.members(g):
                out.append((f"group:{g}", self.group_average(g, "dice"),
                            self.group_average(g, "hd"), self.group_average(g, "iou")))
        out.append(("overall", self.overall("dice"), self.overall("hd"), self.overall("iou")))
        return out

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# hd_percentile={self.hd_percentile}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dice", "hd", "iou"])
        for name, d, h, i in self.rows():
            w.writerow([name] + ["" if math.isnan(v) else f"{v:.6f}" for v in (d, h, i)])
        return buf.getvalue()


def evaluate_masks(preds, truths, grouping: ClassGrouping, num_classes, hd_percentile=95):
    """Per-class metrics averaged over samples (undefined cases excluded)."""
    grouping.check(num_classes)
    per = {"dice": [], "hd": [], "iou": []}
    for p, t in zip(preds, truths):
        per["dice"].append(dice_score(p, t, num_classes))
        per["iou"].append(iou(p, t, num_classes))
        per["hd"].append(hausdorff_per_class(p, t, num_classes, hd_percentile))
    if not per["dice"]:
        raise DataError("no samples to evaluate")
    out = {}
    for name, rows in per.items():
        arr = np.vstack(rows)
        out[name] = {k: _nanmean(arr[:, k]) for k in range(num_classes)}
    return MetricReport(out["dice"], out["hd"], out["iou"], grouping, hd_percentile)
