"""Patch-mode training (momentum SGD on softmax cross-entropy) and gradient checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .network import FCNN
from .patches import PatchBatch

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingSchedule:
    base_lr: float = 1e-5
    decay_every: int = 20
    decay_factor: float = 10.0
    epochs: int = 60
    batch_size: int = 128
    momentum: float = 0.9
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch size and decay interval must be positive")

    def learning_rate(self, epoch: int) -> float:
        """Rate for a 1-based epoch number."""
        return self.base_lr / self.decay_factor ** ((epoch - 1) // self.decay_every)


def cross_entropy(scores: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over all positions and its gradient w.r.t. scores.

    ``scores`` is (N, K, ...) and ``labels`` (N, ...).
    """
    logp = L.log_softmax(scores, axis=1)
    picked = np.take_along_axis(logp, labels[:, None].astype(np.int64), axis=1)
    count = labels.size
    loss = -picked.sum() / count
    grad = np.exp(logp)
    np.put_along_axis(
        grad, labels[:, None].astype(np.int64),
        np.take_along_axis(grad, labels[:, None].astype(np.int64), axis=1) - 1.0, axis=1,
    )
    return float(loss), grad / count


def patch_loss(net: FCNN, batch: PatchBatch, with_grad: bool = True):
    scores, cache = net.forward(batch.small, batch.large, keep_cache=True)
    loss, grad = cross_entropy(scores[:, :, 0, 0], batch.labels)
    if not with_grad:
        return loss
    return loss, net.backward(cache, grad[:, :, None, None])


class MomentumSGD:
    def __init__(self, params: dict, momentum: float):
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        if lr == 0:
            return
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v -= g * v.dtype.type(lr)
            params[k] += v


def train_step1(net: FCNN, batch: PatchBatch, schedule: TrainingSchedule):
    """Train the FCNN on patches. Returns ``(net, per-epoch mean losses)``.

    ``net`` is updated in place.
    """
    small, large = net.patch_sizes
    if batch.small.shape[-1] != small or batch.large.shape[-1] != large:
        raise TrainingError(
            f"patches are {batch.small.shape[-1]}/{batch.large.shape[-1]}, network "
            f"expects {small}/{large}"
        )
    rng = np.random.default_rng(schedule.seed)
    net.astype(schedule.dtype)
    opt = MomentumSGD(net.params, schedule.momentum)
    trace = []
    for epoch in range(1, schedule.epochs + 1):
        lr = schedule.learning_rate(epoch)
        order = rng.permutation(len(batch))
        total = 0.0
        for b, start in enumerate(range(0, len(order), schedule.batch_size)):
            mini = batch.subset(order[start : start + schedule.batch_size])
            loss, grads = patch_loss(net, mini)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step(net.params, grads, lr)
            total += loss * len(mini)
        trace.append(total / len(batch))
        log.info("epoch %d lr %.3g loss %.5f", epoch, lr, trace[-1])
    net.astype(np.float64)
    return net, trace


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradientCheck:
    max_rel_error: float
    checked: int
    reduced_steps: int  # parameters whose step was shrunk to avoid a kink
    skipped: int  # parameters sitting exactly on a kink

    def __float__(self):
        return self.max_rel_error


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    params: dict,
    grads: dict,
    evaluate,
    epsilon: float,
    sample: int | None = None,
    seed: int = 0,
    max_halvings: int = 20,
) -> GradientCheck:
    """Compare analytic ``grads`` against central differences of ``evaluate``.

    ``evaluate()`` returns ``(loss, pattern)`` where ``pattern`` identifies the
    active piece of a piecewise-smooth function (ReLU signs, pooling winners);
    ``None`` means smooth. When a ``+-epsilon`` step changes the pattern the
    difference quotient straddles a kink, so the step is halved until it no
    longer does.
    """
    if not epsilon > 0:
        raise ValueError("degenerate step")
    _, base = evaluate()
    index = [(k, idx) for k in params for idx in np.ndindex(params[k].shape)]
    if sample is not None and sample < len(index):
        pick = np.random.default_rng(seed).choice(len(index), size=sample, replace=False)
        index = [index[i] for i in np.sort(pick)]

    worst, reduced, skipped = 0.0, 0, 0
    for k, idx in index:
        p = params[k]
        original = p[idx]
        step = epsilon
        for attempt in range(max_halvings + 1):
            p[idx] = original + step
            plus, pat_plus = evaluate()
            p[idx] = original - step
            minus, pat_minus = evaluate()
            p[idx] = original
            if base is None or (_same(pat_plus, base) and _same(pat_minus, base)):
                break
            step /= 2
        else:
            skipped += 1
            continue
        reduced += attempt > 0
        numeric = (plus - minus) / (2 * step)
        worst = max(worst, relative_error(float(grads[k][idx]), numeric))
    return GradientCheck(worst, len(index) - skipped, reduced, skipped)


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def activation_pattern(cache) -> list:
    out = []
    for part in cache:
        for entry in part:
            spec = entry[0]
            if spec["type"] == "conv":
                if spec["relu"]:
                    out.append(entry[2] > 0)
            elif entry[2] is not None:
                out.append(entry[2])
    return out


def gradient_check(net: FCNN, batch: PatchBatch, epsilon: float = 1e-3,
                   sample: int | None = 200, seed: int = 0) -> GradientCheck:
    """Reverse-mode vs central-difference gradients of the patch loss."""
    if not epsilon > 0:
        raise ValueError("degenerate step")
    _, grads = patch_loss(net, batch)

    def evaluate():
        scores, cache = net.forward(batch.small, batch.large, keep_cache=True)
        loss, _ = cross_entropy(scores[:, :, 0, 0], batch.labels)
        return loss, activation_pattern(cache)

    return check_gradients(net.params, grads, evaluate, epsilon, sample, seed)
