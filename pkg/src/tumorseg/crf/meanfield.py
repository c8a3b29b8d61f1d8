"""Fully connected 2D CRF with Gaussian edge potentials, solved by mean field.

Mean-field iterations are unrolled as a recurrent computation so that the loss
on the final beliefs can be differentiated with respect to the kernel weights,
the label compatibility matrix and the incoming class scores.

Beliefs and unaries are handled internally as ``(M, L)`` matrices (pixels in
row-major order); the public entry points take ``(L, h, w)`` maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..fcnn.layers import log_softmax, softmax, softmax_backward
from ..volume import NUM_CLASSES

DEFAULT_THETA = (160.0, 3.0, 3.0)  # spatial/appearance, appearance, smoothness
DENSE_LIMIT = 4096  # above this many pixels kernels are evaluated blockwise


class CrfError(RuntimeError):
    pass


def potts(labels: int = NUM_CLASSES) -> np.ndarray:
    return 1.0 - np.eye(labels)


@dataclass
class CrfParameters:
    w: np.ndarray = field(default_factory=lambda: np.ones(2))
    mu: np.ndarray = field(default_factory=potts)
    theta: tuple[float, float, float] = DEFAULT_THETA
    iterations: int = 5

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(2)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.theta = tuple(float(t) for t in self.theta)
        if self.mu.ndim != 2 or self.mu.shape[0] != self.mu.shape[1]:
            raise ValueError("compatibility must be a square matrix")
        if not np.all(np.isfinite(self.mu)) or not np.all(np.isfinite(self.w)):
            raise ValueError("kernel weights and compatibility must be finite")
        if len(self.theta) != 3 or min(self.theta) <= 0:
            raise ValueError("bandwidths must be three positive numbers")
        if int(self.iterations) < 1:
            raise ValueError("at least one mean-field iteration is required")
        self.iterations = int(self.iterations)

    def copy(self) -> "CrfParameters":
        return CrfParameters(self.w.copy(), self.mu.copy(), self.theta, self.iterations)

    def to_json(self) -> dict:
        return {"w": self.w.tolist(), "mu": self.mu.tolist(), "theta": list(self.theta),
                "T": self.iterations}

    @classmethod
    def from_json(cls, doc: dict) -> "CrfParameters":
        return cls(doc["w"], doc["mu"], doc["theta"], doc["T"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "CrfParameters":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class PixelFeatures:
    coords: np.ndarray  # (M, 2) row, column
    intensities: np.ndarray  # (M, C)
    shape: tuple[int, int]

    @classmethod
    def from_image(cls, image: np.ndarray) -> "PixelFeatures":
        image = np.asarray(image, dtype=np.float64)
        c, h, w = image.shape
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        coords = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
        return cls(coords, image.reshape(c, -1).T.copy(), (h, w))

    def __len__(self) -> int:
        return len(self.coords)


def pairwise_kernels(si, ei, sj, ej, theta=DEFAULT_THETA) -> tuple[float, float]:
    """Appearance kernel and smoothness kernel for one pixel pair."""
    ta, tb, tg = theta
    ds = float(np.sum((np.asarray(si, float) - np.asarray(sj, float)) ** 2))
    de = float(np.sum((np.asarray(ei, float) - np.asarray(ej, float)) ** 2))
    return np.exp(-ds / (2 * ta**2) - de / (2 * tb**2)), np.exp(-ds / (2 * tg**2))


class KernelOperator:
    """Applies both Gaussian kernels (diagonal excluded) to an ``(M, L)`` matrix.

    With ``window=True`` each kernel ignores pairs more than ``ceil(3 * theta)``
    pixels apart along either axis (its spatial bandwidth: theta_alpha for the
    appearance kernel, theta_gamma for the smoothness kernel). Both kernels are
    symmetric, so the operator is its own adjoint.
    """

    def __init__(self, features: PixelFeatures, theta=DEFAULT_THETA, window: bool = True,
                 dense_limit: int = DENSE_LIMIT):
        self.features = features
        self.theta = tuple(theta)
        self.window = window
        self.dense = len(features) <= dense_limit
        self._matrices = self._block(slice(None)) if self.dense else None

    def _block(self, rows: slice):
        tb = self.theta[1]
        m = len(self.features)
        start = 0 if rows.start is None else rows.start
        stop = m if rows.stop is None else rows.stop
        spatial, k2 = _geometry(self.features.shape, self.theta, self.window, start, stop)
        e = self.features.intensities
        de = np.zeros(spatial.shape)
        for ch in range(e.shape[1]):
            diff = e[start:stop, None, ch] - e[None, :, ch]
            de += diff * diff
        k1 = np.exp(de * (-1.0 / (2 * tb**2)))
        k1 *= spatial
        return k1, k2

    def matrices(self):
        if self._matrices is None:
            return self._block(slice(0, len(self.features)))
        return self._matrices

    def apply(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.dense:
            k1, k2 = self._matrices
            return k1 @ q, k2 @ q
        m = len(self.features)
        out1, out2 = np.empty_like(q), np.empty_like(q)
        step = max(1, DENSE_LIMIT**2 // (4 * m))
        for start in range(0, m, step):
            rows = slice(start, min(m, start + step))
            k1, k2 = self._block(rows)
            out1[rows], out2[rows] = k1 @ q, k2 @ q
        return out1, out2


@lru_cache(maxsize=8)
def _geometry(shape, theta, window, start, stop):
    """Spatial factor of the appearance kernel and the full smoothness kernel for
    rows ``start:stop`` of an ``h x w`` slice; window and diagonal already applied."""
    ta, _, tg = theta
    h, w = shape
    flat = np.arange(h * w)
    r, c = np.divmod(flat, w)
    dr = np.abs(r[start:stop, None] - r[None, :]).astype(np.float64)
    dc = np.abs(c[start:stop, None] - c[None, :]).astype(np.float64)
    ds = dr * dr + dc * dc
    spatial = np.exp(-ds / (2 * ta**2))
    k2 = np.exp(-ds / (2 * tg**2))
    if window:
        reach = np.maximum(dr, dc)
        spatial[reach > np.ceil(3 * ta)] = 0.0
        k2[reach > np.ceil(3 * tg)] = 0.0
    idx = np.arange(stop - start)
    spatial[idx, idx + start] = 0.0
    k2[idx, idx + start] = 0.0
    spatial.flags.writeable = False
    k2.flags.writeable = False
    return spatial, k2


def _as_matrix(maps: np.ndarray) -> np.ndarray:
    return maps.reshape(maps.shape[0], -1).T


def _as_maps(matrix: np.ndarray, shape) -> np.ndarray:
    return matrix.T.reshape(matrix.shape[1], *shape)


def _messages(q, ops: KernelOperator, params: CrfParameters):
    a1, a2 = ops.apply(q)
    s = params.w[0] * a1 + params.w[1] * a2
    return a1, a2, s, s @ params.mu.T


def _checked_softmax(logits: np.ndarray) -> np.ndarray:
    bad = ~np.isfinite(logits)
    if bad.any():
        pixel = int(np.argwhere(bad)[0][0])
        raise CrfError(f"non-finite mean-field exponent at pixel {pixel}")
    return softmax(logits, axis=1)


def mean_field_step(q_in: np.ndarray, unary: np.ndarray, ops: KernelOperator,
                    params: CrfParameters) -> np.ndarray:
    """One simultaneous mean-field update on ``(M, L)`` matrices."""
    *_, msg = _messages(q_in, ops, params)
    return _checked_softmax(-unary - msg)


def mean_field_iteration(q_in, unary, image, params: CrfParameters, window: bool = True):
    """Map-level single iteration: ``q_in``/``unary`` are ``(L, h, w)``, image ``(C, h, w)``."""
    feats = PixelFeatures.from_image(image)
    ops = KernelOperator(feats, params.theta, window)
    out = mean_field_step(_as_matrix(np.asarray(q_in, float)),
                          _as_matrix(np.asarray(unary, float)), ops, params)
    return _as_maps(out, feats.shape)


@dataclass
class CrfTrace:
    """Everything the backward pass needs from a forward run."""

    beliefs: list  # Q_0 .. Q_T as (M, L)
    kernels: list  # (A1, A2, S) per iteration
    logits: np.ndarray  # pre-softmax input of the last update
    ops: KernelOperator
    shape: tuple[int, int]


def crf_forward_matrix(scores: np.ndarray, ops: KernelOperator, params: CrfParameters,
                       shape=None) -> CrfTrace:
    """Unrolled forward on ``(M, L)`` class scores (the negated unaries)."""
    q = _checked_softmax(scores)
    beliefs, kernels = [q], []
    logits = scores
    for _ in range(params.iterations):
        a1, a2, s, msg = _messages(q, ops, params)
        logits = scores - msg
        q = _checked_softmax(logits)
        beliefs.append(q)
        kernels.append((a1, a2, s))
    return CrfTrace(beliefs, kernels, logits, ops, shape)


def crf_backward_matrix(trace: CrfTrace, params: CrfParameters, grad_logits: np.ndarray):
    """Back-propagate d(loss)/d(last logits) through the unrolled iterations.

    Returns ``(grad_scores, grad_w, grad_mu)``.
    """
    grad_scores = np.zeros_like(grad_logits)
    grad_w = np.zeros(2)
    grad_mu = np.zeros_like(params.mu)
    dz = grad_logits
    for t in range(params.iterations, 0, -1):
        a1, a2, s = trace.kernels[t - 1]
        grad_scores += dz
        dmsg = -dz
        grad_mu += dmsg.T @ s
        ds = dmsg @ params.mu
        grad_w[0] += np.sum(ds * a1)
        grad_w[1] += np.sum(ds * a2)
        b1, b2 = trace.ops.apply(ds)
        dq = params.w[0] * b1 + params.w[1] * b2
        q_prev = trace.beliefs[t - 1]
        if t > 1:
            dz = softmax_backward(q_prev, dq, axis=1)
        else:
            grad_scores += softmax_backward(q_prev, dq, axis=1)
    return grad_scores, grad_w, grad_mu


def crf_rnn_forward(scores: np.ndarray, image: np.ndarray, params: CrfParameters,
                    window: bool = True) -> np.ndarray:
    """Final beliefs ``(L, h, w)`` from FCNN scores ``(L, h, w)`` and the slice ``(C, h, w)``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[1:] != np.shape(image)[1:]:
        raise ValueError(f"scores {scores.shape[1:]} and slice {np.shape(image)[1:]} differ")
    feats = PixelFeatures.from_image(image)
    ops = KernelOperator(feats, params.theta, window)
    trace = crf_forward_matrix(_as_matrix(scores), ops, params)
    return _as_maps(trace.beliefs[-1], feats.shape)


def cross_entropy_on_logits(logits: np.ndarray, labels: np.ndarray):
    """Mean per-pixel cross-entropy of ``softmax(logits)`` and its logit gradient."""
    logp = log_softmax(logits, axis=1)
    idx = np.arange(len(labels))
    loss = -logp[idx, labels].mean()
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    return float(loss), grad / len(labels)


def free_energy(q: np.ndarray, unary: np.ndarray, image: np.ndarray,
                params: CrfParameters) -> float:
    """Mean-field free energy of beliefs ``q`` (exact pairwise sum over i < j).

    ``q`` and ``unary`` are ``(L, h, w)``; ``0 * ln 0`` counts as 0.
    """
    feats = PixelFeatures.from_image(image)
    k1, k2 = KernelOperator(feats, params.theta, window=False).matrices()
    qm, um = _as_matrix(np.asarray(q, float)), _as_matrix(np.asarray(unary, float))
    upper = np.triu(params.w[0] * k1 + params.w[1] * k2, 1)
    pairwise = np.sum(upper * (qm @ params.mu @ qm.T))
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = np.where(qm > 0, qm * np.log(qm), 0.0).sum()
    return float((qm * um).sum() + pairwise + entropy)
