"""Training loop: Adam with linear warmup and polynomial decay.

Deterministic by construction: parameter inits, shuffles, and the data
all flow from one root seed through tagged child seeds, so the same
config and seed reproduce checkpoints bitwise.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, ops
from .autodiff import backward
from .errors import TrainingDiverged, ValidationError
from .network import LossConfig, SegNet, one_hot, total_loss
from .tensor import Rng, derive_seed


@dataclass
class TrainSchedule:
    base_lr: float = 1e-3
    warmup_epochs: int = 5
    poly_exponent: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


def lr_at(schedule, epoch):
    """base_lr * min(1, (e+1)/warmup) * (1 - e/E)^exponent."""
    e, total = epoch, schedule.epochs
    warm = 1.0
    if schedule.warmup_epochs > 0:
        warm = min(1.0, (e + 1) / schedule.warmup_epochs)
    return schedule.base_lr * warm * (1.0 - e / total) ** schedule.poly_exponent


class Adam:
    """Classic Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, schedule):
        self.params = params
        self.b1 = schedule.beta1
        self.b2 = schedule.beta2
        self.eps = schedule.adam_eps
        self.weight_decay = schedule.weight_decay
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def normalize_image(img):
    """Per-image zero mean, unit variance."""
    img = np.asarray(img, dtype=np.float32)
    std = img.std()
    return (img - img.mean()) / max(float(std), 1e-8)


@dataclass
class TrainResult:
    net: SegNet
    history: list = field(default_factory=list)

    @property
    def final_val_dsc(self):
        return self.history[-1]["val_dsc"] if self.history else None

    @property
    def best_val_dsc(self):
        return max(h["val_dsc"] for h in self.history) if self.history else None


def _batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else order
    for lo in range(0, n, batch_size):
        yield idx[lo:lo + batch_size]


def _stack_inputs(samples):
    images = np.stack([normalize_image(s.image) for s in samples])
    masks = np.stack([np.asarray(s.mask) for s in samples])
    return images, masks


def validation_dsc(net, images, masks, batch_size=8):
    """Mean Dice of argmax predictions over a validation set."""
    scores = []
    for idx in _batches(images.shape[0], batch_size):
        preds = net.predict(images[idx])
        for p, t in zip(preds, masks[idx]):
            scores.append(metrics.dsc(p, t, n_classes=net.cfg.n_classes))
    return float(np.mean(scores))


def train(train_samples, val_samples, schedule, net_cfg, loss_cfg=None,
          dtype="f32", verbose=False):
    """Train a SegNet; returns the net plus a per-epoch log.

    The log records lr, mean train loss, and validation Dice for every
    epoch. A non-finite loss aborts with a diagnostic.
    """
    if not train_samples:
        raise ValidationError("train: empty training set")
    if not val_samples:
        raise ValidationError("train: empty validation set")
    loss_cfg = loss_cfg or LossConfig()
    net = SegNet(net_cfg, seed=schedule.seed, dtype=dtype)
    images, masks = _stack_inputs(train_samples)
    onehots = one_hot(masks, net_cfg.n_classes)
    val_images, val_masks = _stack_inputs(val_samples)
    n = images.shape[0]

    adam = Adam(net.params, schedule)
    history = []
    for epoch in range(schedule.epochs):
        t0 = time.perf_counter()
        lr = lr_at(schedule, epoch)
        order = Rng(derive_seed(schedule.seed, f"shuffle/{epoch}")).permutation(n)
        epoch_losses = []
        for idx in _batches(n, schedule.batch_size, order):
            main_logits, coarse_logits, _ = net.forward(images[idx], training=True)
            main_probs = ops.softmax(main_logits)
            coarse_probs = ops.softmax(ops.upsample_bilinear(coarse_logits, 8))
            loss, _, _ = total_loss(main_probs, coarse_probs, onehots[idx],
                                    loss_cfg, net_cfg.n_classes)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
            grads = backward(loss, params=net.params)
            adam.step(grads, lr)
            epoch_losses.append(value)
        val_dsc = validation_dsc(net, val_images, val_masks, schedule.batch_size)
        history.append({"epoch": epoch, "lr": lr,
                        "train_loss": float(np.mean(epoch_losses)),
                        "val_dsc": val_dsc,
                        "seconds": time.perf_counter() - t0})
        if verbose:
            h = history[-1]
            print(f"epoch {epoch:3d}  lr {h['lr']:.5f}  loss {h['train_loss']:.4f}  "
                  f"val DSC {h['val_dsc']:.4f}  ({h['seconds']:.1f}s)")
    return TrainResult(net=net, history=history)


def evaluate(net, samples, batch_size=8):
    """Per-sample metric reports plus their means over a dataset."""
    images, masks = _stack_inputs(samples)
    reports = []
    for idx in _batches(images.shape[0], batch_size):
        preds = net.predict(images[idx])
        for p, t in zip(preds, masks[idx]):
            reports.append(metrics.evaluate_pair(p, t, n_classes=net.cfg.n_classes))
    summary = metrics.mean_report(reports)
    return reports, summary
