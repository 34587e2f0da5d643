"""Training loop, gradient verification and inference for WeatherNet."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..core import CLASSES, Label, RangeImage, crop_fov, crop_labels
from .layers import softmax_cross_entropy
from .model import WeatherNet, save_checkpoint
from .optim import PUBLISHED_LEARNING_RATE, AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 20
    lr: float = PUBLISHED_LEARNING_RATE
    lr_decay: float = 0.90
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reduction: str = "mean"
    class_weights: tuple | None = None
    seed: int = 0
    checkpoint_dir: str | None = None
    dtype: str = "float64"
    keep_best: bool = True  # with a validation set, return the epoch with the best val IoU
    max_seconds: float | None = None  # wall-clock budget; stops before an epoch that would overrun it

    def __post_init__(self):
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.max_seconds is not None and self.max_seconds <= 0:
            raise ValueError("max_seconds must be positive")


def desk_config(**overrides) -> TrainConfig:
    """Settings for small synthetic datasets on one CPU core.

    A much larger step size than the published one, and single precision to
    halve memory traffic in the convolutions.
    """
    base = TrainConfig(lr=1e-3, dtype="float32")
    return replace(base, **overrides)


def tile_crops(samples, width=100, stride=None):
    """Cut ``(RangeImage, labels)`` frames into column tiles of ``width`` (no wrap-around)."""
    stride = stride or width
    out = []
    for img, lab in samples:
        cols = img.shape[1]
        for s in range(0, cols - width + 1, stride):
            out.append((crop_fov(img, s, width), crop_labels(lab, s, width)))
    return out


@dataclass
class TrainResult:
    net: WeatherNet
    history: list = field(default_factory=list)
    best_epoch: int | None = None


def _batches(dataset, batch_size, rng):
    order = rng.permutation(len(dataset))
    by_shape = {}
    for i in order:
        by_shape.setdefault(dataset[i][0].shape, []).append(i)
    for shape in sorted(by_shape):
        idx = by_shape[shape]
        for a in range(0, len(idx), batch_size):
            yield idx[a:a + batch_size]


def _stack(dataset, idx):
    d = np.stack([dataset[i][0].distance for i in idx])
    it = np.stack([dataset[i][0].intensity for i in idx])
    lab = np.stack([dataset[i][1] for i in idx])
    return d, it, lab


def train(dataset, net: WeatherNet, config: TrainConfig = TrainConfig(), validation=None, callback=None) -> TrainResult:
    """Minimise per-pixel softmax cross-entropy with Adam; no-return pixels carry no loss.

    ``dataset`` is a sequence of ``(RangeImage, labels)`` pairs. The history
    holds one entry per epoch with the mean training loss and, when a
    validation set is given, its class-mean IoU. With a validation set and
    ``keep_best`` the returned network is the epoch with the highest
    validation IoU (earliest on ties). ``max_seconds`` ends training early
    when the next epoch, judged by the slowest one so far, would overrun it.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    if net.dtype != np.dtype(config.dtype):
        net = net.astype(config.dtype)
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps, decay=config.lr_decay)
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    history = []
    best, best_iou, best_epoch = None, -np.inf, None
    start, slowest = time.perf_counter(), 0.0
    for epoch in range(config.epochs):
        if config.max_seconds is not None and epoch > 0:
            if time.perf_counter() - start + slowest > config.max_seconds:
                log.info("time budget reached after %d epochs", epoch)
                break
        epoch_start = time.perf_counter()
        losses, weights = [], []
        for b, idx in enumerate(_batches(dataset, config.batch_size, rng)):
            d, it, lab = _stack(dataset, idx)
            x = net.make_input(d, it)
            logits, cache = net.forward(x, train_mode=True, rng=rng)
            loss, dlogits = softmax_cross_entropy(logits, lab, config.reduction, config.class_weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, b, loss)
            grads = net.backward(cache, dlogits)
            adam_step(net.params, grads, state)
            losses.append(loss)
            weights.append(len(idx))
        entry = {"epoch": epoch + 1, "loss": float(np.average(losses, weights=weights)), "lr": state.lr}
        if validation:
            from ..eval import evaluate_predictions
            entry["val_mean_iou"] = evaluate_predictions(net, validation).mean
            if config.keep_best and entry["val_mean_iou"] > best_iou:
                best_iou, best_epoch = entry["val_mean_iou"], epoch + 1
                best = {k: v.copy() for k, v in net.params.items()}
        history.append(entry)
        log.info("epoch %d loss %.5f", epoch + 1, entry["loss"])
        if callback:
            callback(entry)
        state.end_epoch()
        if ckpt_dir:
            save_checkpoint(ckpt_dir / f"epoch{epoch + 1:03d}.ckpt", net, epoch + 1, config.seed)
        slowest = max(slowest, time.perf_counter() - epoch_start)
    if best is not None:
        net = WeatherNet(net.spec, params=best)
    return TrainResult(net, history, best_epoch)


def predict_logits(net: WeatherNet, images, batch_size=8):
    """Logits ``(3, H, W)`` for each image, batched by shape."""
    out = [None] * len(images)
    by_shape = {}
    for k, im in enumerate(images):
        by_shape.setdefault(im.shape, []).append(k)
    for idx in by_shape.values():
        for a in range(0, len(idx), batch_size):
            chunk = idx[a:a + batch_size]
            x = net.make_input(np.stack([images[k].distance for k in chunk]),
                               np.stack([images[k].intensity for k in chunk]))
            logits, _ = net.forward(x, train_mode=False)
            for j, k in enumerate(chunk):
                out[k] = logits[:, j]
    return out


def logits_to_labels(logits, image: RangeImage):
    labels = np.asarray(CLASSES, dtype=np.uint8)[np.argmax(logits, axis=0)]
    labels[~image.returns] = Label.NO_RETURN
    return labels


def predict_labels(net: WeatherNet, images, batch_size=8):
    return [logits_to_labels(lg, im) for lg, im in zip(predict_logits(net, images, batch_size), images)]


def denoise(image: RangeImage, labels) -> RangeImage:
    """Keep VALID returns, turn RAIN/FOG pixels into no-returns."""
    keep = labels == Label.VALID
    return image.with_arrays(np.where(keep, image.distance, 0), np.where(keep, image.intensity, 0))


def predict_and_denoise(net: WeatherNet, image: RangeImage):
    labels = predict_labels(net, [image])[0]
    return labels, denoise(image, labels)


def _loss(net, x, labels, train_mode, seed, reduction):
    rng = np.random.default_rng(seed)
    logits, cache = net.forward(x, train_mode=train_mode, rng=rng)
    loss, dlogits = softmax_cross_entropy(logits, labels, reduction)
    return loss, cache, dlogits


def gradient_errors(net: WeatherNet, x, labels, epsilon=1e-5, train_mode=True, seed=0, reduction="mean"):
    """Relative error ``|g_a - g_n| / (|g_a| + |g_n|)`` (L2 norms) per parameter tensor.

    ``g_n`` comes from central differences; a fixed seed keeps the dropout
    mask identical across all evaluations.
    """
    if net.dtype != np.float64:
        raise ValueError("gradient checks need float64 parameters")
    loss, cache, dlogits = _loss(net, x, labels, train_mode, seed, reduction)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    analytic = net.backward(cache, dlogits)
    errors = {}
    for name, p in net.params.items():
        numeric = np.empty_like(p)
        flat, nflat = p.reshape(-1), numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            lp = _loss(net, x, labels, train_mode, seed, reduction)[0]
            flat[j] = orig - epsilon
            lm = _loss(net, x, labels, train_mode, seed, reduction)[0]
            flat[j] = orig
            nflat[j] = (lp - lm) / (2 * epsilon)
        a = analytic[name]
        denom = np.linalg.norm(a) + np.linalg.norm(numeric)
        errors[name] = float(np.linalg.norm(a - numeric) / denom) if denom > 0 else 0.0
    return errors, analytic


def gradient_check(net: WeatherNet, x, labels, epsilon=1e-5, train_mode=True, seed=0, reduction="mean"):
    """Largest per-tensor relative error between analytic and finite-difference gradients."""
    errors, _ = gradient_errors(net, x, labels, epsilon, train_mode, seed, reduction)
    return max(errors.values())
