"""Training loop: decoupled-weight-decay Adam over the trainable subset,
cosine schedule with warm restarts, gradient accumulation over micro-batches,
validation-dice early stopping, and a checksummed binary checkpoint format.
"""

from __future__ import annotations

import hashlib
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Sample, augment, invert_letterbox, letterbox
from .errors import (CheckpointError, ChecksumError, ConfigError, ContractError,
                     FingerprintError, FormatError, InputError, TruncatedError)
from .model import SegmenterModel, config_fingerprint, model_forward_batch
from .objective import (LossConfig, composite_batch, confusion,
                        metrics_from_confusion, METRIC_NAMES)
from .tensor import Rng, Tensor


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    micro_batch: int = 0           # 0 means one chunk per batch
    lr0: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.937
    beta2: float = 0.999
    eps: float = 1e-8
    restart_period: int = 10       # first cosine cycle length, in epochs
    restart_mult: int = 100        # cycle growth factor at each restart
    eta_min_factor: float = 0.01   # floor as a fraction of lr0
    patience: int = 50             # epochs without val-dice improvement
    target_dice: float = 0.0       # stop once val dice reaches this (0 = off)
    seed: int = 0
    use_augment: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.micro_batch < 0 or self.micro_batch > self.batch_size:
            raise ConfigError("micro_batch must be in [0, batch_size]")
        if self.micro_batch and self.batch_size % self.micro_batch:
            raise ConfigError("micro_batch must divide batch_size")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.restart_period < 1 or self.restart_mult < 1:
            raise ConfigError("restart_period and restart_mult must be >= 1")
        if not 0 < self.eta_min_factor <= 1:
            raise ConfigError("eta_min_factor must be in (0, 1]")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if not 0 <= self.target_dice <= 1:
            raise ConfigError("target_dice must be in [0, 1]")
        self.loss.validate()
        return self


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts.

    Cycle k spans restart_period * restart_mult**k epochs; within a cycle,
    lr = eta_min + (lr0 - eta_min) * (1 + cos(pi * t / T)) / 2 with t the
    epochs since the last restart.  Epoch 0 of every cycle is exactly lr0.
    """
    if epoch < 0:
        raise InputError("epoch must be >= 0")
    t, period = epoch, cfg.restart_period
    while t >= period:
        t -= period
        period *= cfg.restart_mult
    eta_min = cfg.lr0 * cfg.eta_min_factor
    return eta_min + (cfg.lr0 - eta_min) * (1.0 + math.cos(math.pi * t / period)) / 2.0


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_init(model: SegmenterModel) -> AdamState:
    state = AdamState()
    for name, entry in model.registry.trainable_items():
        state.m[name] = np.zeros_like(entry.tensor.data)
        state.v[name] = np.zeros_like(entry.tensor.data)
    return state


def adamw_step(model: SegmenterModel, state: AdamState, lr: float,
               cfg: TrainConfig) -> None:
    """Decay is decoupled: parameters shrink multiplicatively by lr * wd
    before the Adam update; the decay never enters the moment estimates.
    Parameters with no gradient this step are left untouched entirely.
    """
    for name, entry in model.registry.items():
        if not entry.trainable and entry.tensor.grad is not None:
            raise ContractError(f"frozen parameter {name!r} received a gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, entry in model.registry.trainable_items():
        g = entry.tensor.grad
        if g is None:
            continue
        p = entry.tensor.data
        p *= 1.0 - lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# batching

def batch_to_tensors(samples):
    """list[Sample] (already letterboxed to the model size) -> (images, targets).

    images: Tensor [B, 3, S, S]; targets: float ndarray [B, S, S].
    """
    dt = T.default_dtype()
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(dt)
    targets = np.stack([s.mask for s in samples]).astype(dt)
    return T.from_array(images), targets


def accumulate_gradients(model: SegmenterModel, samples, cfg: TrainConfig) -> float:
    """Forward/backward over micro-batch chunks; gradients sum into .grad.

    Every chunk's loss is scaled by 1 / len(samples), so the accumulated
    gradient equals the full-batch mean-loss gradient regardless of how the
    batch is chunked.  Returns the batch mean loss.
    """
    if not samples:
        raise InputError("empty batch")
    chunk = cfg.micro_batch or len(samples)
    denom = len(samples)
    total = 0.0
    for lo in range(0, denom, chunk):
        part = samples[lo:lo + chunk]
        T.clear_tape()
        images, targets = batch_to_tensors(part)
        probs = T.sigmoid(model_forward_batch(images, model))
        loss = composite_batch(probs, targets, cfg.loss, denom)
        T.backward(loss)
        total += loss.item()
    T.clear_tape()
    return total


def train_step(model: SegmenterModel, samples, state: AdamState, lr: float,
               cfg: TrainConfig) -> float:
    loss = accumulate_gradients(model, samples, cfg)
    adamw_step(model, state, lr, cfg)
    model.registry.zero_grad()
    return loss


# ---------------------------------------------------------------------------
# inference / evaluation

def predict(model: SegmenterModel, sample: Sample) -> np.ndarray:
    """Probability map in the sample's original frame."""
    boxed, geom = letterbox(sample, model.config.image_size)
    with T.no_grad():
        images, _ = batch_to_tensors([boxed])
        probs = T.sigmoid(model_forward_batch(images, model)).data[0]
    return invert_letterbox(probs, geom)


def evaluate(model: SegmenterModel, samples, batch: int = 8,
             threshold: float = 0.5):
    """(per_image metric dicts, aggregate means) against original-frame masks."""
    if not samples:
        raise InputError("evaluate needs at least one sample")
    per_image = []
    for lo in range(0, len(samples), batch):
        part = samples[lo:lo + batch]
        boxed = [letterbox(s, model.config.image_size) for s in part]
        with T.no_grad():
            images, _ = batch_to_tensors([b for b, _ in boxed])
            probs = T.sigmoid(model_forward_batch(images, model)).data
        for i, (orig, (_, geom)) in enumerate(zip(part, boxed)):
            restored = invert_letterbox(probs[i], geom)
            per_image.append(metrics_from_confusion(
                confusion(restored, orig.mask, threshold)))
    aggregate = {k: float(np.mean([m[k] for m in per_image])) for k in METRIC_NAMES}
    return per_image, aggregate


# ---------------------------------------------------------------------------
# freeze auditing

def take_snapshot(model: SegmenterModel) -> dict:
    return {name: entry.tensor.data.tobytes()
            for name, entry in model.registry.items()}


def verify_freeze(model: SegmenterModel, snapshot: dict) -> int:
    """Raise if any frozen parameter's bytes moved; return the number of
    trainable parameters whose bytes did."""
    changed = 0
    for name, entry in model.registry.items():
        same = entry.tensor.data.tobytes() == snapshot[name]
        if not entry.trainable and not same:
            raise ContractError(f"frozen parameter {name!r} changed during training")
        if entry.trainable and not same:
            changed += 1
    return changed


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SKIM1"


def save_checkpoint(model: SegmenterModel, path) -> None:
    """Binary layout: magic, fingerprint (u32 length + bytes), entry count,
    then per entry name (u32 + bytes), rank u32, extents u32*, float32
    little-endian values; final 8 bytes are sha256 of everything before.
    """
    parts = [MAGIC]
    fp = config_fingerprint(model.config).encode()
    parts.append(struct.pack("<I", len(fp)))
    parts.append(fp)
    items = list(model.registry.items())
    parts.append(struct.pack("<I", len(items)))
    for name, entry in items:
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        shape = entry.tensor.data.shape
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(entry.tensor.data,
                                          dtype="<f4").tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(hashlib.sha256(blob).digest()[:8])


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"{self.path}: checkpoint ends early "
                                 f"(need {self.pos + n} bytes, have {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(model: SegmenterModel, path) -> None:
    """Parse and validate the whole file before touching any parameter."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {path}") from None
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < len(MAGIC) + 8:
        raise TruncatedError(f"{path}: checkpoint ends early (no checksum)")
    body, tail = raw[:-8], raw[-8:]
    rd = _Reader(body, path)
    rd.take(len(MAGIC))
    fp = rd.take(rd.u32()).decode("utf-8", errors="replace")
    count = rd.u32()
    staged = {}
    for _ in range(count):
        name = rd.take(rd.u32()).decode("utf-8", errors="replace")
        rank = rd.u32()
        if rank > 8:
            raise FormatError(f"{path}: implausible rank {rank} for {name!r}")
        extents = struct.unpack(f"<{rank}I", rd.take(4 * rank))
        n = int(np.prod(extents, dtype=np.int64)) if rank else 1
        values = np.frombuffer(rd.take(4 * n), dtype="<f4")
        staged[name] = values.reshape(extents)
    if rd.pos != len(body):
        raise FormatError(f"{path}: {len(body) - rd.pos} trailing bytes after "
                          "the last entry")
    if hashlib.sha256(body).digest()[:8] != tail:
        raise ChecksumError(f"{path}: checksum mismatch; file is corrupt")
    want_fp = config_fingerprint(model.config)
    if fp != want_fp:
        raise FingerprintError(f"{path}: checkpoint was written for a different "
                               f"configuration ({fp[:12]}.. != {want_fp[:12]}..)")
    names = model.registry.names()
    if sorted(staged) != sorted(names):
        missing = sorted(set(names) - set(staged))[:3]
        extra = sorted(set(staged) - set(names))[:3]
        raise CheckpointError(f"{path}: parameter names do not match the model "
                              f"(missing {missing}, unexpected {extra})")
    dt = T.default_dtype()
    for name in names:
        entry = model.registry.get(name)
        if staged[name].shape != entry.tensor.data.shape:
            raise CheckpointError(f"{path}: {name!r} has shape {staged[name].shape}, "
                                  f"model wants {entry.tensor.data.shape}")
    for name in names:
        model.registry.get(name).tensor.data = staged[name].astype(dt)


# ---------------------------------------------------------------------------
# fit

def fit(model: SegmenterModel, cfg: TrainConfig, train_samples, val_samples,
        checkpoint_path=None, log=None):
    """Train and return a summary dict with deterministic history lines.

    Samples are augmented (train only) then letterboxed to the model size
    each epoch.  Validation runs every epoch; the best-val-dice weights are
    written to checkpoint_path when given and restored before returning.
    An empty val list falls back to validating on the train samples.
    """
    cfg.validate()
    if not train_samples:
        raise InputError("fit needs at least one training sample")
    val = list(val_samples) if val_samples else list(train_samples)
    stream = Rng(cfg.seed)
    size = model.config.image_size
    state = adamw_init(model)
    history = []
    best_dice = -1.0
    best_epoch = -1
    since_best = 0
    start = time.time()
    stopped = "epochs"
    # every step sees a full batch: a trailing remainder is dropped unless
    # the whole train set is smaller than one batch
    n = len(train_samples)
    seen = n if n < cfg.batch_size else n - n % cfg.batch_size
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = stream.shuffle(n)
        epoch_loss = 0.0
        for lo in range(0, seen, cfg.batch_size):
            batch = []
            for idx in order[lo:lo + cfg.batch_size]:
                s = train_samples[idx]
                if cfg.use_augment:
                    s = augment(s, stream)
                batch.append(letterbox(s, size)[0])
            epoch_loss += train_step(model, batch, state, lr, cfg) * len(batch)
        epoch_loss /= seen
        _, agg = evaluate(model, val, batch=max(cfg.batch_size, 8))
        vd = agg["dice"]
        line = (f"epoch {epoch:04d} lr {lr:.8e} loss {epoch_loss:.8e} "
                f"val_dice {vd:.6f}")
        history.append(line)
        if log:
            log(line)
        if vd > best_dice:
            best_dice = vd
            best_epoch = epoch
            since_best = 0
            if checkpoint_path:
                save_checkpoint(model, checkpoint_path)
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stopped = "patience"
                break
        if cfg.target_dice and vd >= cfg.target_dice:
            stopped = "target_dice"
            break
    if checkpoint_path and best_epoch >= 0:
        load_checkpoint(model, checkpoint_path)
    return {
        "history": history,
        "best_val_dice": best_dice,
        "best_epoch": best_epoch,
        "epochs_run": len(history),
        "stopped_by": stopped,
        "elapsed_seconds": time.time() - start,
    }
