"""Volume containers, MMV1 file I/O, slicing and 3D connected components."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_CHANNELS = ("flair", "t1c", "t2")
NUM_CLASSES = 5
AXES = ("axial", "coronal", "sagittal")

# axis name -> array axis of a (Z, Y, X) grid that the slice index runs along
_AXIS_DIM = {"axial": 0, "coronal": 1, "sagittal": 2}

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised for malformed or inconsistent MMV1 files."""


@dataclass(frozen=True)
class MultiModalVolume:
    """Intensity volume stored channel-major as ``data[c, z, y, x]`` (float32)."""

    data: np.ndarray
    channel_names: tuple[str, ...] = DEFAULT_CHANNELS

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"expected a (C, Z, Y, X) array, got shape {data.shape}")
        if len(self.channel_names) != data.shape[0]:
            raise ValueError(
                f"{len(self.channel_names)} channel names for {data.shape[0]} channels"
            )
        bad = np.flatnonzero(~np.isfinite(data.ravel()))
        if bad.size:
            raise ValueError(f"non-finite intensity at offset {bad[0]}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.channel_names.index(name)]


@dataclass(frozen=True)
class LabelVolume:
    """Label grid ``data[z, y, x]`` with values in {0..4}."""

    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ValueError(f"expected a (Z, Y, X) array, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() >= NUM_CLASSES):
            raise ValueError("labels must lie in {0, 1, 2, 3, 4}")
        data = raw.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class ComponentLabeling:
    ids: np.ndarray  # int32 grid, 0 outside the mask
    count: int
    sizes: np.ndarray = field(default=None)  # sizes[k - 1] is the size of component k

    def __post_init__(self):
        if self.sizes is None:
            self.sizes = np.bincount(self.ids.ravel(), minlength=self.count + 1)[1:]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.ids.shape)

    def mask(self, component_id: int) -> np.ndarray:
        return self.ids == component_id


@dataclass
class SliceTensor:
    axis: str
    index: int
    data: np.ndarray  # (C, height, width)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# MMV1 I/O


def _write_mmv(path, payload: np.ndarray, dtype: str, channel_names) -> None:
    header = {
        "magic": "MMV1",
        "dtype": dtype,
        "dims": [int(d) for d in payload.shape[-3:]],
        "channels": int(payload.shape[0]) if payload.ndim == 4 else 1,
        "channel_names": list(channel_names),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(payload, dtype=_DTYPES[dtype]).tobytes())


def read_mmv(path) -> tuple[dict, np.ndarray]:
    """Read an MMV1 file and return ``(header, array[c, z, y, x])``."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise VolumeFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != "MMV1":
        raise VolumeFormatError(f"{path}: bad magic")
    dtype = _DTYPES.get(header.get("dtype"))
    dims = header.get("dims")
    channels = header.get("channels")
    if (
        dtype is None
        or not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and d > 0 for d in dims)
        or not isinstance(channels, int)
        or channels < 1
    ):
        raise VolumeFormatError(f"{path}: malformed header {header}")
    payload = raw[newline + 1 :]
    expected = channels * int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload length mismatch (expected {expected} bytes, got {len(payload)})"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(channels, *dims)
    if dtype.kind == "f":
        bad = np.flatnonzero(~np.isfinite(data.ravel()))
        if bad.size:
            raise VolumeFormatError(f"{path}: non-finite value at offset {bad[0]}")
    return header, data


def save_volume(volume: MultiModalVolume, path) -> None:
    _write_mmv(path, volume.data, "f32le", volume.channel_names)


def load_volume(path) -> MultiModalVolume:
    header, data = read_mmv(path)
    if header["dtype"] != "f32le":
        raise VolumeFormatError(f"{path}: intensity volumes must be f32le")
    names = header.get("channel_names") or DEFAULT_CHANNELS[: data.shape[0]]
    if len(names) != data.shape[0]:
        raise VolumeFormatError(f"{path}: channel_names does not match channels")
    return MultiModalVolume(data.copy(), tuple(names))


def save_labels(labels: LabelVolume, path) -> None:
    _write_mmv(path, labels.data[None], "u8", ["label"])


def load_labels(path) -> LabelVolume:
    header, data = read_mmv(path)
    if header["dtype"] != "u8" or header["channels"] != 1:
        raise VolumeFormatError(f"{path}: label volumes must be u8 with one channel")
    if data.size and data.max() >= NUM_CLASSES:
        offset = int(np.flatnonzero(data.ravel() >= NUM_CLASSES)[0])
        raise VolumeFormatError(f"{path}: label out of range at offset {offset}")
    return LabelVolume(data[0].copy())


# ---------------------------------------------------------------------------
# slices


def axis_dim(axis: str) -> int:
    try:
        return _AXIS_DIM[axis]
    except KeyError:
        raise ValueError(f"unknown axis {axis!r}; expected one of {AXES}") from None


def extract_slice(volume: MultiModalVolume, axis: str, index: int) -> SliceTensor:
    dim = axis_dim(axis)
    extent = volume.dims[dim]
    if not 0 <= index < extent:
        raise IndexError(f"{axis} index {index} outside [0, {extent})")
    data = np.take(volume.data, index, axis=dim + 1).copy()
    return SliceTensor(axis, index, data)


def extract_label_slice(labels: LabelVolume | np.ndarray, axis: str, index: int) -> np.ndarray:
    grid = labels.data if isinstance(labels, LabelVolume) else labels
    return np.take(grid, index, axis=axis_dim(axis)).copy()


def insert_slice(grid: np.ndarray, axis: str, index: int, values: np.ndarray) -> None:
    """Write a slice back into ``grid`` in place.

    ``grid`` is either (C, Z, Y, X) with ``values`` (C, H, W), or (Z, Y, X) with
    ``values`` (H, W).
    """
    dim = axis_dim(axis) + (grid.ndim - 3)
    index_tuple = [slice(None)] * grid.ndim
    index_tuple[dim] = index
    grid[tuple(index_tuple)] = values


def slice_count(dims, axis: str) -> int:
    return dims[axis_dim(axis)]


# ---------------------------------------------------------------------------
# connected components


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components_3d(mask: np.ndarray, connectivity: int = 26) -> ComponentLabeling:
    """Label connected components of a boolean grid.

    Ids are assigned in order of first encounter in a z-major (C-order) scan.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3 or min(mask.shape) < 1:
        raise ValueError(f"mask must be a non-empty 3D grid, got shape {mask.shape}")
    ids, count = ndimage.label(mask, structure=_structure(connectivity))
    ids = ids.astype(np.int32)
    if count > 1:
        # scipy already numbers in scan order; normalise defensively so the
        # contract never depends on that implementation detail
        flat = ids.ravel()
        present, first = np.unique(flat[flat > 0], return_index=True)
        order = present[np.argsort(first)]
        remap = np.zeros(count + 1, dtype=np.int32)
        remap[order] = np.arange(1, len(order) + 1, dtype=np.int32)
        ids = remap[ids]
    return ComponentLabeling(ids, int(count))


def border_connected(mask: np.ndarray, connectivity: int = 6) -> np.ndarray:
    """True where a voxel of ``mask`` is connected to the grid border through ``mask``."""
    labeling = connected_components_3d(mask, connectivity)
    ids = labeling.ids
    border_ids = np.unique(
        np.concatenate(
            [
                ids[0].ravel(), ids[-1].ravel(),
                ids[:, 0].ravel(), ids[:, -1].ravel(),
                ids[:, :, 0].ravel(), ids[:, :, -1].ravel(),
            ]
        )
    )
    border_ids = border_ids[border_ids > 0]
    return np.isin(ids, border_ids)
