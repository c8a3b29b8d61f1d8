"""Slice-level training of the CRF-RNN (FCNN frozen) and joint fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..fcnn.inference import pad_slice
from ..fcnn.network import FCNN
from ..fcnn.training import MomentumSGD, TrainingError, activation_pattern, check_gradients
from .meanfield import (
    CrfParameters,
    KernelOperator,
    PixelFeatures,
    _as_maps,
    _as_matrix,
    crf_backward_matrix,
    crf_forward_matrix,
    cross_entropy_on_logits,
)

log = logging.getLogger(__name__)


@dataclass
class TrainingSlice:
    """One pre-processed slice ``(C, h, w)`` with its labels ``(h, w)``.

    Kernel matrices are built lazily and cached, since they depend only on the
    image and the (fixed) bandwidths.
    """

    image: np.ndarray
    labels: np.ndarray
    _ops: KernelOperator | None = None

    def operator(self, theta) -> KernelOperator:
        if self._ops is None or self._ops.theta != tuple(theta):
            self._ops = KernelOperator(PixelFeatures.from_image(self.image), theta)
        return self._ops

    @property
    def targets(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64).ravel()


@dataclass
class SliceSchedule:
    rate: float = 1e-8
    epochs: int = 5
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.rate < 0 or self.epochs < 0:
            raise ValueError("rate and epochs must be non-negative")


def _fcnn_scores(net: FCNN, image: np.ndarray, keep_cache: bool = False):
    small, large = pad_slice(np.asarray(image, dtype=np.float64), net.n)
    out = net.forward(small[None], large[None], keep_cache=keep_cache)
    if keep_cache:
        return out[0][0].astype(np.float64), out[1]
    return out[0].astype(np.float64)


def crf_loss(scores: np.ndarray, sl: TrainingSlice, params: CrfParameters, with_grad: bool = True):
    """Cross-entropy of the final beliefs given fixed ``(L, h, w)`` scores.

    Returns the loss, or ``(loss, grad_scores_maps, grad_w, grad_mu)``.
    """
    ops = sl.operator(params.theta)
    trace = crf_forward_matrix(_as_matrix(scores), ops, params)
    loss, g = cross_entropy_on_logits(trace.logits, sl.targets)
    if not with_grad:
        return loss
    gs, gw, gm = crf_backward_matrix(trace, params, g)
    return loss, _as_maps(gs, scores.shape[1:]), gw, gm


def _check_finite(loss, grads, epoch, index):
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingError(f"non-finite gradient at epoch {epoch}, slice {index}")


def train_step2(net: FCNN, params: CrfParameters, slices, schedule: SliceSchedule):
    """Learn ``w`` and ``mu`` with the FCNN frozen. Returns ``(params, loss trace)``.

    The FCNN is only read; its class scores are computed once per slice.
    """
    slices = list(slices)
    params = params.copy()
    scores = [_fcnn_scores(net, sl.image) for sl in slices]
    state = {"w": params.w, "mu": params.mu}
    opt = MomentumSGD(state, schedule.momentum)
    rng = np.random.default_rng(schedule.seed)
    trace = []
    for epoch in range(1, schedule.epochs + 1):
        total = 0.0
        for k in rng.permutation(len(slices)):
            loss, _, gw, gm = crf_loss(scores[k], slices[k], params)
            _check_finite(loss, (gw, gm), epoch, int(k))
            opt.step(state, {"w": gw, "mu": gm}, schedule.rate)
            total += loss
        trace.append(total / max(len(slices), 1))
        log.info("crf epoch %d loss %.5f w %s", epoch, trace[-1], np.round(params.w, 4))
    return params, trace


def composed_loss(net: FCNN, params: CrfParameters, sl: TrainingSlice, with_grad: bool = True):
    """FCNN + CRF-RNN loss on one slice; gradients cover every parameter."""
    scores, cache = _fcnn_scores(net, sl.image, keep_cache=True)
    if not with_grad:
        return crf_loss(scores, sl, params, with_grad=False)
    loss, gs, gw, gm = crf_loss(scores, sl, params)
    grads = net.backward(cache, gs[None])
    return loss, grads, gw, gm


def finetune_step3(net: FCNN, params: CrfParameters, slices, schedule: SliceSchedule):
    """Joint update of FCNN weights, ``w`` and ``mu``. Returns ``(net, params, trace)``.

    ``net`` is updated in place; ``params`` is copied.
    """
    slices = list(slices)
    params = params.copy()
    opt_crf = MomentumSGD({"w": params.w, "mu": params.mu}, schedule.momentum)
    opt_net = MomentumSGD(net.params, schedule.momentum)
    rng = np.random.default_rng(schedule.seed)
    trace = []
    for epoch in range(1, schedule.epochs + 1):
        total = 0.0
        for k in rng.permutation(len(slices)):
            loss, grads, gw, gm = composed_loss(net, params, slices[k])
            _check_finite(loss, [gw, gm, *grads.values()], epoch, int(k))
            opt_net.step(net.params, grads, schedule.rate)
            opt_crf.step({"w": params.w, "mu": params.mu}, {"w": gw, "mu": gm}, schedule.rate)
            total += loss
        trace.append(total / max(len(slices), 1))
        log.info("finetune epoch %d loss %.5f", epoch, trace[-1])
    return net, params, trace


# ---------------------------------------------------------------------------
# finite-difference checks


def crf_gradient_check(scores: np.ndarray, sl: TrainingSlice, params: CrfParameters,
                       epsilon: float = 1e-3):
    """Check d(loss)/d(w, mu) of the CRF alone. The map is smooth, so no kinks."""
    params = params.copy()
    _, _, gw, gm = crf_loss(scores, sl, params)
    state = {"w": params.w, "mu": params.mu}

    def evaluate():
        return crf_loss(scores, sl, params, with_grad=False), None

    return check_gradients(state, {"w": gw, "mu": gm}, evaluate, epsilon)


def composed_gradient_check(net: FCNN, params: CrfParameters, sl: TrainingSlice,
                            epsilon: float = 1e-3, sample: int | None = 200, seed: int = 0):
    """Check d(loss)/d(FCNN weights) through the FCNN + CRF composition."""
    _, grads, _, _ = composed_loss(net, params, sl)

    def evaluate():
        scores, cache = _fcnn_scores(net, sl.image, keep_cache=True)
        return crf_loss(scores, sl, params, with_grad=False), activation_pattern(cache)

    return check_gradients(net.params, grads, evaluate, epsilon, sample, seed)
