"""Mini-batch training of the toy model on the teacher-forced answer loss.

Adam (first-moment decay ``momentum``) by default; plain momentum SGD is
kept as an option.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..tensor import Tensor, no_grad
from .mllm import ToyMLLM, answer_loss, greedy_decode_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, epoch):
        super().__init__(f"training loss became non-finite at step {step} (epoch {epoch})")
        self.step = step
        self.epoch = epoch


@dataclass
class TrainLog:
    step_losses: list = field(default_factory=list)
    # loss on the first batch of each epoch, measured before and after that epoch
    epoch_start: list = field(default_factory=list)
    epoch_end: list = field(default_factory=list)


def augment_images(images: np.ndarray, rng: np.random.Generator, shift: int = 8) -> np.ndarray:
    """Random horizontal flips and whole-patch translations of a (B, H, W, 3) batch.

    Every question template is invariant to both, and the corpus keeps an
    8-pixel background frame, so a roll by at most ``shift`` never wraps
    shape pixels around the canvas.
    """
    out = np.empty_like(images)
    for i, img in enumerate(images):
        if rng.random() < 0.5:
            img = img[:, ::-1]
        dy, dx = rng.integers(-1, 2, size=2) * shift
        out[i] = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
    return out


def _batch_loss(model, samples, images=None, smoothing=0.0):
    if images is None:
        images = np.stack([s.image for s in samples])
    images = Tensor(images)
    kv = model.image_stream(images)
    loss, _ = answer_loss(model, kv, [s.question for s in samples], [s.answer for s in samples],
                          smoothing=smoothing)
    return loss


def _probe(model, samples):
    with no_grad():
        return float(_batch_loss(model, samples).data)


def train_toy(
    model: ToyMLLM,
    dataset,
    epochs: int = 40,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 8,
    momentum: float = 0.9,
    clip_norm: float = 1.0,
    warmup_steps: int = 100,
    weight_decay: float = 0.0,
    optimizer: str = "adam",
    augment: bool = True,
    label_smoothing: float = 0.0,
    train_log: TrainLog | None = None,
    callback=None,
) -> ToyMLLM:
    """Fit ``model`` in place on ``dataset`` and return it.

    The learning rate warms up linearly over ``warmup_steps`` and then follows
    a cosine decay to zero; gradients are clipped to global norm ``clip_norm``.
    ``callback(epoch, model)`` runs after every epoch. With ``augment`` each
    batch is randomly flipped and shifted (see ``augment_images``).
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if epochs <= 0:
        return model
    rng = np.random.default_rng(seed)
    aug_rng = np.random.default_rng([seed, 1])
    params = model.parameters()
    model.requires_grad_(True)
    velocity = [np.zeros_like(p.data) for p in params]
    second = [np.zeros_like(p.data) for p in params]
    n = len(dataset)
    per_epoch = max(1, -(-n // batch_size))
    total = epochs * per_epoch
    step = 0
    try:
        for epoch in range(epochs):
            order = rng.permutation(n)
            first = [dataset[i] for i in order[:batch_size]]
            if train_log is not None:
                train_log.epoch_start.append(_probe(model, first))
            for b in range(per_epoch):
                batch = [dataset[i] for i in order[b * batch_size : (b + 1) * batch_size]]
                images = np.stack([s.image for s in batch])
                if augment:
                    images = augment_images(images, aug_rng)
                loss = _batch_loss(model, batch, images, label_smoothing)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(step, epoch)
                grads = T.backward(loss)
                gs = [grads[p] for p in params]
                norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in gs)))
                scale = min(1.0, clip_norm / (norm + 1e-12)) if clip_norm else 1.0
                if step < warmup_steps:
                    cur = lr * (step + 1) / warmup_steps
                else:
                    frac = (step - warmup_steps) / max(1, total - warmup_steps)
                    cur = lr * 0.5 * (1.0 + np.cos(np.pi * frac))
                for p, g, v, s2 in zip(params, gs, velocity, second):
                    g = g * scale
                    if weight_decay and p.ndim == 2:
                        g = g + weight_decay * p.data
                    if optimizer == "adam":
                        v *= momentum
                        v += (1 - momentum) * g
                        s2 *= 0.999
                        s2 += 0.001 * g * g
                        mhat = v / (1 - momentum ** (step + 1))
                        vhat = s2 / (1 - 0.999 ** (step + 1))
                        p.data = (p.data - cur * mhat / (np.sqrt(vhat) + 1e-8)).astype(p.data.dtype)
                    else:
                        v *= momentum
                        v += g
                        p.data = (p.data - cur * v).astype(p.data.dtype)
                if train_log is not None:
                    train_log.step_losses.append(value)
                step += 1
            if train_log is not None:
                train_log.epoch_end.append(_probe(model, first))
            log.info("epoch %d loss %.4f", epoch, value)
            if callback is not None:
                model.requires_grad_(False)
                callback(epoch, model)
                model.requires_grad_(True)
    finally:
        model.requires_grad_(False)
    return model


def exact_match_accuracy(model: ToyMLLM, samples, batch_size: int = 100) -> float:
    hits = 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        outs = greedy_decode_batch(model, np.stack([s.image for s in chunk]), [s.question for s in chunk])
        hits += sum(o == s.answer for o, s in zip(outs, chunk))
    return hits / len(samples)
