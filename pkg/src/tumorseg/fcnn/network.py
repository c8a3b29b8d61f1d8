"""Two-branch, two-scale fully convolutional network.

The front branch turns a large input into feature maps of the small input's
size; these are concatenated with the small input and fed through the trunk,
which ends in a 1x1 score layer. Every operation is a valid, stride-1 op, so
running the same weights on a padded slice is equivalent to classifying
every pixel's patch pair independently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..volume import NUM_CLASSES
from . import layers as L

MAGIC = "FCNN1"


def context_reduction(n: int) -> int:
    """Spatial shrinkage of one branch: 3 x (2 convs + pool) + 4 convs."""
    return 3 * (2 * 2 + (n - 1)) + 4 * 2


def patch_sizes(n: int) -> tuple[int, int]:
    """Training patch sides ``(small, large)`` for pooling kernel ``n``."""
    small = context_reduction(n) + 1
    return small, 2 * small - 1


def small_padding(n: int) -> tuple[int, int]:
    """Zero padding (before, after) of the small input in slice mode."""
    r = context_reduction(n)
    return r // 2, r - r // 2


def build_layers(n: int, c_in: int, width: int) -> dict:
    def segment(prefix, first_in):
        specs = []
        channels = first_in
        for block in range(3):
            for j in range(2):
                specs.append(
                    {"type": "conv", "name": f"{prefix}.b{block}c{j}", "in": channels,
                     "out": width, "k": 3, "relu": True}
                )
                channels = width
            specs.append({"type": "pool", "n": n})
        for j in range(4):
            specs.append(
                {"type": "conv", "name": f"{prefix}.tail{j}", "in": width, "out": width,
                 "k": 3, "relu": True}
            )
        return specs

    trunk = segment("trunk", width + c_in)
    trunk.append(
        {"type": "conv", "name": "trunk.score", "in": width, "out": NUM_CLASSES, "k": 1,
         "relu": False}
    )
    return {"front": segment("front", c_in), "trunk": trunk}


def _channels_last(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


@dataclass
class FCNN:
    """Network description plus its parameter tensors (float64)."""

    n: int
    c_in: int
    width: int
    layers: dict
    params: dict = field(default_factory=dict)
    seed: int = 0
    # fixed pointwise input map x -> (x - shift) * scale, applied after padding
    input_shift: float = 0.0
    input_scale: float = 1.0

    @classmethod
    def create(cls, n: int = 5, c_in: int = 3, width: int = 64, seed: int = 0,
               input_shift: float = 0.0, input_scale: float = 1.0) -> "FCNN":
        if n < 1:
            raise ValueError(f"pool kernel must be >= 1, got {n}")
        if c_in < 1 or width < 1:
            raise ValueError("channel counts must be positive")
        net = cls(n, c_in, width, build_layers(n, c_in, width), seed=seed,
                  input_shift=input_shift, input_scale=input_scale)
        rng = np.random.default_rng(seed)
        for spec in net.conv_specs():
            fan_in = spec["in"] * spec["k"] ** 2
            shape = (spec["out"], spec["in"], spec["k"], spec["k"])
            net.params[spec["name"] + ".weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
            net.params[spec["name"] + ".bias"] = np.zeros(spec["out"])
        return net

    def conv_specs(self):
        for part in ("front", "trunk"):
            for spec in self.layers[part]:
                if spec["type"] == "conv":
                    yield spec

    @property
    def patch_sizes(self) -> tuple[int, int]:
        return patch_sizes(self.n)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else np.float64

    def astype(self, dtype) -> "FCNN":
        """Cast parameters in place (float32 speeds up training)."""
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return self

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "FCNN":
        return FCNN(self.n, self.c_in, self.width, json.loads(json.dumps(self.layers)),
                    {k: v.copy() for k, v in self.params.items()}, self.seed,
                    self.input_shift, self.input_scale)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    # -- forward / backward ------------------------------------------------

    def _run(self, specs, x, cache):
        for spec in specs:
            if spec["type"] == "conv":
                w = self.params[spec["name"] + ".weight"]
                y = L.conv_forward(x, w, self.params[spec["name"] + ".bias"])
                if spec["relu"]:
                    y = L.relu_forward(y)
                cache.append((spec, x, y))
            else:
                y, arg = L.max_pool_forward(x, spec["n"])
                cache.append((spec, x.shape, arg))
            x = y
        return x

    def _run_backward(self, cache, grad, grads, need_input_grad=True):
        for idx in range(len(cache) - 1, -1, -1):
            entry = cache[idx]
            spec = entry[0]
            if spec["type"] == "conv":
                _, x, y = entry
                if spec["relu"]:
                    grad = L.relu_backward(y, grad)
                w = self.params[spec["name"] + ".weight"]
                grad, gw, gb = L.conv_backward(x, w, grad, need_input=idx > 0 or need_input_grad)
                grads[spec["name"] + ".weight"] = gw
                grads[spec["name"] + ".bias"] = gb
            else:
                _, shape, arg = entry
                grad = L.max_pool_backward(shape, spec["n"], arg, grad)
        return grad

    def forward(self, small: np.ndarray, large: np.ndarray, keep_cache: bool = False):
        """Return raw class scores ``(N, 5, h, w)`` (and a cache for backward).

        ``small`` is ``(N, C, h + r, w + r)`` and ``large`` ``(N, C, h + 2r, w + 2r)``
        with ``r = context_reduction(n)``; patch mode is ``h = w = 1``.
        """
        small = np.asarray(small, dtype=self.dtype)
        large = np.asarray(large, dtype=self.dtype)
        if small.ndim == 3:
            small, large = small[None], large[None]
        if small.shape[1] != self.c_in or large.shape[1] != self.c_in:
            raise ValueError(f"network expects {self.c_in} input channels")
        front_cache, trunk_cache = [], []
        small = (small - self.input_shift) * self.input_scale
        large = (large - self.input_shift) * self.input_scale
        features = self._run(self.layers["front"], _channels_last(large), front_cache)
        if features.shape[1:3] != small.shape[2:]:
            raise ValueError(
                f"front branch output {features.shape[1:3]} does not match small input "
                f"{small.shape[2:]}"
            )
        joined = np.concatenate([features, _channels_last(small)], axis=3)
        scores = self._run(self.layers["trunk"], joined, trunk_cache).transpose(0, 3, 1, 2)
        if keep_cache:
            return scores, (front_cache, trunk_cache)
        return scores

    def backward(self, cache, grad_scores: np.ndarray) -> dict:
        """Parameter gradients given d(loss)/d(scores) shaped like the scores."""
        front_cache, trunk_cache = cache
        grads = {}
        g = self._run_backward(trunk_cache, _channels_last(grad_scores.astype(self.dtype)), grads)
        self._run_backward(front_cache, g[..., : self.width], grads, need_input_grad=False)
        return grads

    def predict_proba(self, small, large) -> np.ndarray:
        return L.softmax(self.forward(small, large), axis=1)

    # -- persistence -------------------------------------------------------

    def tensor_names(self) -> list[str]:
        names = []
        for spec in self.conv_specs():
            names += [spec["name"] + ".weight", spec["name"] + ".bias"]
        return names

    def save(self, path) -> None:
        names = self.tensor_names()
        header = {
            "magic": MAGIC,
            "n": self.n,
            "c_in": self.c_in,
            "width": self.width,
            "seed": self.seed,
            "input_shift": self.input_shift,
            "input_scale": self.input_scale,
            "layers": self.layers,
            "tensors": [{"name": k, "shape": list(self.params[k].shape)} for k in names],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for k in names:
                fh.write(np.ascontiguousarray(self.params[k], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "FCNN":
        raw = Path(path).read_bytes()
        cut = raw.find(b"\n")
        try:
            header = json.loads(raw[:cut].decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise ValueError(f"{path}: malformed model header ({exc})") from None
        if cut < 0 or header.get("magic") != MAGIC:
            raise ValueError(f"{path}: not an FCNN model file")
        net = cls(header["n"], header["c_in"], header["width"], header["layers"],
                  seed=header.get("seed", 0), input_shift=header.get("input_shift", 0.0),
                  input_scale=header.get("input_scale", 1.0))
        offset = cut + 1
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"]))
            chunk = raw[offset : offset + 4 * count]
            if len(chunk) != 4 * count:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            net.params[entry["name"]] = (
                np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(entry["shape"])
            )
            offset += 4 * count
        if offset != len(raw):
            raise ValueError(f"{path}: trailing bytes after tensors")
        return net

    def round_to_float32(self) -> "FCNN":
        """Quantize parameters to the precision stored on disk."""
        return self.astype(np.float32).astype(np.float64)
