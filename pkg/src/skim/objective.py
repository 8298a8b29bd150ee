"""Composite BCE + Dice training loss and confusion-derived metrics.

Loss semantics: BCE is the mean over all pixels of -[y log p + (1-y) log(1-p)]
with p clamped to [1e-7, 1 - 1e-7]; Dice loss is 1 - (2*sum(y*p) + eps) /
(sum(y^2) + sum(p^2) + eps) with sums over all pixels; the composite is
alpha * bce + (1 - alpha) * dice.  Batch losses are the mean of per-image
losses.

Metrics are computed per image from hard-thresholded confusion counts, then
averaged over the dataset.  Any 0/0 metric resolves to 1 when fp == fn == 0
(perfect empty agreement) and 0 otherwise; both conventions are recorded in
every report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputError, ShapeError
from .tensor import Tensor

P_CLAMP = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.5
    eps: float = 1e-6

    def validate(self) -> "LossConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError("alpha must be in [0, 1]")
        if self.eps <= 0:
            raise InputError("eps must be > 0")
        return self


@dataclass
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _as_target(p: Tensor, y) -> Tensor:
    ydata = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=p.data.dtype)
    if tuple(ydata.shape) != p.shape:
        raise ShapeError(f"prediction {p.shape} vs target {tuple(ydata.shape)}")
    if not np.all((ydata == 0) | (ydata == 1)):
        raise InputError("target mask must be binary (0/1)")
    if isinstance(y, Tensor):
        return y
    return Tensor(ydata.astype(p.data.dtype))


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy over all pixels (p clamped to [1e-7, 1-1e-7])."""
    yt = _as_target(p, y)
    pc = T.clamp(p, P_CLAMP, 1.0 - P_CLAMP)
    pos = T.mul(yt, T.log(pc))
    neg = T.mul(T.sub(T.constant(p.shape, 1.0), yt),
                T.log(T.sub(T.constant(p.shape, 1.0), pc)))
    return T.scale(T.reduce_mean(T.add(pos, neg)), -1.0)


def dice_loss(p: Tensor, y, eps: float = 1e-6) -> Tensor:
    """1 - (2 sum(yp) + eps) / (sum(y^2) + sum(p^2) + eps), sums over all pixels."""
    yt = _as_target(p, y)
    inter = T.reduce_sum(T.mul(yt, p))
    denom = T.add(T.reduce_sum(T.mul(yt, yt)), T.reduce_sum(T.mul(p, p)))
    frac = T.div(T.add(T.scale(inter, 2.0), eps), T.add(denom, eps))
    return T.add(T.scale(frac, -1.0), 1.0)


def composite_loss(p: Tensor, y, cfg: LossConfig = LossConfig()) -> Tensor:
    """alpha * bce + (1 - alpha) * dice for a single prediction/target pair."""
    cfg.validate()
    return T.add(T.scale(bce_loss(p, y), cfg.alpha),
                 T.scale(dice_loss(p, y, cfg.eps), 1.0 - cfg.alpha))


def composite_batch(p: Tensor, y, cfg: LossConfig, denom: int) -> Tensor:
    """Sum of per-image composite losses scaled by 1/denom.

    p and y are [b, h, w]; denom is the effective batch size, so micro-batch
    losses summed across a gradient-accumulation group equal the full-batch
    mean of per-image losses.
    """
    cfg.validate()
    if p.data.ndim != 3:
        raise ShapeError(f"expected [b, h, w], got {p.shape}")
    yt = _as_target(p, y)
    axes = (1, 2)
    npix = p.shape[1] * p.shape[2]

    pc = T.clamp(p, P_CLAMP, 1.0 - P_CLAMP)
    ones = T.constant(p.shape, 1.0)
    ll = T.add(T.mul(yt, T.log(pc)), T.mul(T.sub(ones, yt), T.log(T.sub(ones, pc))))
    bce = T.scale(T.reduce_sum(ll, axis=axes), -1.0 / npix)          # [b]

    inter = T.reduce_sum(T.mul(yt, p), axis=axes)
    denom_t = T.add(T.reduce_sum(T.mul(yt, yt), axis=axes),
                    T.reduce_sum(T.mul(p, p), axis=axes))
    frac = T.div(T.add(T.scale(inter, 2.0), cfg.eps), T.add(denom_t, cfg.eps))
    dice = T.add(T.scale(frac, -1.0), 1.0)                           # [b]

    per_image = T.add(T.scale(bce, cfg.alpha), T.scale(dice, 1.0 - cfg.alpha))
    return T.scale(T.reduce_sum(per_image), 1.0 / denom)


# ---------------------------------------------------------------------------
# metrics

def confusion(p, y, threshold: float = 0.5) -> Confusion:
    """Pixel confusion counts with pred = (p >= threshold)."""
    pd = p.data if isinstance(p, Tensor) else np.asarray(p)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    if pd.shape != yd.shape:
        raise ShapeError(f"prediction {pd.shape} vs target {yd.shape}")
    if not 0.0 < threshold < 1.0:
        raise InputError("threshold must be in (0, 1)")
    pred = pd >= threshold
    gt = yd >= 0.5
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    tn = int(np.sum(~pred & ~gt))
    return Confusion(tp, fp, fn, tn)


def _ratio(num: int, den: int, c: Confusion) -> float:
    if den == 0:
        return 1.0 if (c.fp == 0 and c.fn == 0) else 0.0
    return num / den


def metrics_from_confusion(c: Confusion) -> dict:
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total, c),
        "recall": _ratio(c.tp, c.tp + c.fn, c),
        "precision": _ratio(c.tp, c.tp + c.fp, c),
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, c),
    }


METRIC_NAMES = ("accuracy", "recall", "precision", "dice", "iou")


def aggregate_report(per_image: list, params: dict, *, config=None, seed=None,
                     dataset=None, notes=None, elapsed=None) -> dict:
    """Assemble the machine-readable metrics report (unweighted means)."""
    if not per_image:
        raise InputError("cannot aggregate an empty metrics list")
    agg = {k: sum(m[k] for m in per_image) / len(per_image) for k in METRIC_NAMES}
    report = {
        "config": config,
        "seed": seed,
        "dataset": dataset,
        "n_images": len(per_image),
        "per_image": per_image,
        "aggregate": agg,
        "params": params,
        "notes": dict(notes or {},
                      aggregation="per_image_mean",
                      zero_division="1 when fp==fn==0 else 0"),
    }
    if elapsed is not None:
        report["elapsed_seconds"] = elapsed
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
