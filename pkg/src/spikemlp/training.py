"""Loss, SGD with momentum, cosine schedule, augmentation and the train/eval loops."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset
from .network import Checkpoint, Network, network_from_checkpoint, save_checkpoint
from .neuron import observe_spikes
from .tensor import Parameter, ShapeError, Tensor, backward, mean, record

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of [B x K] logits."""
    targets = np.asarray(targets, dtype=np.int64)
    b, k = logits.shape
    if targets.shape != (b,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {b}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"target out of range [0, {k})")
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(b), targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), targets] -= 1.0
        return (p * (g / b),)

    return record(np.asarray(loss), (logits,), bw)


def time_averaged_ce(logits: Tensor, targets) -> Tensor:
    """Cross-entropy of the logits averaged over the leading time axis of [T x B x K]."""
    if logits.ndim != 3:
        raise ShapeError(f"expected [T x B x K] logits, got {logits.shape}")
    return cross_entropy(mean(logits, axis=0), targets)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total <= 0:
        raise ValueError("cosine schedule needs total > 0")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 / 2.0 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class SgdState:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    total_steps: int = 1
    step: int = 0
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return cosine_lr(min(self.step, self.total_steps), self.total_steps, self.lr0)


def sgd_step(params: list[Parameter], state: SgdState, lr: float | None = None) -> None:
    """v <- mu v + g ; w <- w - lr v, then advance the step counter."""
    lr = state.lr if lr is None else lr
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {p.name}")
    for p in params:
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(p.name)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[p.name] = v
        p.data -= lr * v
    state.step += 1


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Zero-pad by ``pad``, crop back to the original size at a random offset, flip with p=0.5."""
    images = np.asarray(images)
    n, _, h, w = images.shape
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else images
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, bool)
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def hflip(image: np.ndarray) -> np.ndarray:
    return np.asarray(image)[..., ::-1]


def accuracy(logits: np.ndarray, labels) -> float:
    """Top-1 accuracy of time-averaged logits [B x K] (or [T x B x K])."""
    logits = np.asarray(logits)
    if logits.ndim == 3:
        logits = logits.mean(axis=0)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def evaluate(net: Network, data: Dataset, T: int | None = None, batch_size: int = 64) -> float:
    was_training = [bn.training for bn in net.batchnorms()]
    net.eval()
    try:
        return accuracy(net.predict(data.images, T, batch_size), data.labels)
    finally:
        for bn, t in zip(net.batchnorms(), was_training):
            bn.training = t


class _RateCounter:
    def __init__(self):
        self.spikes = 0.0
        self.elements = 0

    def __call__(self, name, spikes, T):
        self.spikes += float(spikes.sum())
        self.elements += spikes.size

    @property
    def rate(self) -> float:
        return self.spikes / self.elements if self.elements else 0.0


def _canonical(record_: dict) -> str:
    return json.dumps(record_, sort_keys=True, separators=(",", ":"))


def train_epochs(net: Network, run: RunConfig, train_data: Dataset, eval_data: Dataset | None = None,
                 state: SgdState | None = None, metrics_path: str | Path | None = None,
                 start_epoch: int = 0, stop=None) -> SgdState:
    """Run ``run.epochs`` epochs of BPTT training, appending one metric record per epoch.

    ``stop(record) -> bool`` is called after each epoch; returning True ends training early
    (the cosine schedule still spans ``run.epochs``).
    """
    data = train_data
    if run.max_train_samples:
        data = data.subset(np.arange(min(run.max_train_samples, len(data))))
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    steps_per_epoch = math.ceil(len(data) / run.batch_size)
    if state is None:
        state = SgdState(run.lr0, run.momentum, run.weight_decay, total_steps=max(1, steps_per_epoch * run.epochs))
    params = net.parameters()
    metrics = Path(metrics_path) if metrics_path else None
    if metrics is not None and start_epoch == 0:
        metrics.write_text("")
    T = net.config.T
    for epoch in range(start_epoch, start_epoch + run.epochs):
        rng = np.random.default_rng([net.config.seed, epoch])
        order = rng.permutation(len(data))
        net.train()
        lr_epoch = state.lr
        loss_sum, correct, seen = 0.0, 0, 0
        rates = _RateCounter()
        with observe_spikes(rates):
            for i in range(0, len(data), run.batch_size):
                idx = order[i:i + run.batch_size]
                x = data.images[idx]
                y = data.labels[idx]
                if run.augment:
                    x = augment(x, rng, pad=run.crop_pad)
                net.zero_grad()
                logits = net.forward(x, T)
                loss = time_averaged_ce(logits, y)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {state.step}")
                backward(loss)
                sgd_step(params, state)
                loss_sum += loss.item() * len(idx)
                correct += int((logits.data.mean(axis=0).argmax(axis=1) == y).sum())
                seen += len(idx)
        state.epoch = epoch + 1
        rec = {
            "epoch": epoch + 1,
            "lr": lr_epoch,
            "train_loss": loss_sum / seen,
            "train_acc": correct / seen,
            "eval_acc": evaluate(net, eval_data) if eval_data is not None and len(eval_data) else None,
            "mean_spike_rate": rates.rate,
        }
        log.info("epoch %d: %s", epoch + 1, rec)
        if metrics is not None:
            with metrics.open("a") as fh:
                fh.write(_canonical(rec) + "\n")
        if stop is not None and stop(rec):
            break
    return state


def train(run: RunConfig, train_data: Dataset, eval_data: Dataset | None = None,
          net: Network | None = None, out_dir: str | Path | None = None,
          metrics_name: str = "metrics.jsonl", ckpt_name: str = "checkpoint.smlx") -> tuple[Network, Checkpoint]:
    """Train from scratch (or from ``net``), writing metrics and a checkpoint into ``out_dir``."""
    out = Path(out_dir if out_dir is not None else run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = net if net is not None else Network(run.network)
    if train_data.num_classes > net.config.num_classes:
        raise ValueError(f"dataset has {train_data.num_classes} classes, network {net.config.num_classes}")
    state = train_epochs(net, run, train_data, eval_data, metrics_path=out / metrics_name)
    net.eval()
    ckpt = save_checkpoint(net, out / ckpt_name, run, epoch=state.epoch, velocities=state.velocity)
    return net, ckpt


def time_inheritance(ckpt: Checkpoint, T: int, epochs: int, train_data: Dataset,
                     eval_data: Dataset | None = None, out_dir: str | Path | None = None,
                     lr0: float | None = None) -> tuple[Network, Checkpoint]:
    """Reload a checkpoint at a new T and fine-tune it with a fresh cosine schedule."""
    net = network_from_checkpoint(ckpt, T=T)
    run = ckpt.run.replace(network=net.config, epochs=epochs)
    if lr0 is not None:
        run = run.replace(lr0=lr0)
    return train(run, train_data, eval_data, net=net, out_dir=out_dir,
                 metrics_name=f"metrics_T{T}.jsonl", ckpt_name=f"checkpoint_T{T}.smlx")


def evaluate_checkpoint(ckpt: Checkpoint, data: Dataset, T: int | None = None) -> float:
    return evaluate(network_from_checkpoint(ckpt), data, T)

