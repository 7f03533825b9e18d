"""Complex 3D volumes, per-axis slice extraction and the ``.svol`` container.

Arrays are indexed ``[x, y, z]``. On disk the payload is x-fastest
(Fortran order) interleaved little-endian float32 (re, im) pairs, preceded
by a one-line JSON header.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AXES = {"x": 0, "y": 1, "z": 2}
_HEADER_KEYS = {"shape", "dtype", "order", "voxel_size"}


class VolumeFormatError(ValueError):
    """Raised when a ``.svol`` file cannot be decoded."""


@dataclass(frozen=True)
class Volume:
    """Immutable complex volume with voxel-size metadata (millimetres)."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.complex128)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3D with positive extents, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite samples")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.shape == other.shape and self.voxel_size == other.voxel_size
                and np.array_equal(self.data, other.data))


def as_array(v) -> np.ndarray:
    """Return the complex array behind ``v`` (a Volume or array-like)."""
    if isinstance(v, Volume):
        return v.data
    return np.asarray(v)


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis]
        except KeyError:
            raise ValueError(f"invalid axis {axis!r}; expected one of x, y, z") from None
    if axis in (0, 1, 2):
        return int(axis)
    raise ValueError(f"invalid axis {axis!r}")


def to_two_channel(s: np.ndarray) -> np.ndarray:
    """Complex (h, w) slice -> real (2, h, w) array of real/imaginary planes."""
    s = np.asarray(s)
    return np.stack([s.real, s.imag]).astype(np.float64)


def from_two_channel(s2: np.ndarray) -> np.ndarray:
    s2 = np.asarray(s2)
    if s2.ndim < 3 or s2.shape[-3] != 2:
        raise ValueError(f"expected a (..., 2, h, w) array, got {s2.shape}")
    return s2[..., 0, :, :] + 1j * s2[..., 1, :, :]


def extract_slices(v, axis) -> np.ndarray:
    """Stack of two-channel slices along ``axis``.

    Returns a real array of shape ``(n, 2, h, w)`` where ``n`` is the extent
    along ``axis`` and ``(h, w)`` are the remaining two extents in x, y, z
    order. Slices do not overlap, so scattering them back is exact.
    """
    a = as_array(v)
    ax = _axis_index(axis)
    moved = np.moveaxis(a, ax, 0)
    return np.stack([moved.real, moved.imag], axis=1).astype(np.float64)


def scatter_slices(slices, axis, shape) -> np.ndarray:
    """Adjoint of :func:`extract_slices`: place each slice at its index."""
    ax = _axis_index(axis)
    slices = np.asarray(slices, dtype=np.float64)
    shape = tuple(int(n) for n in shape)
    rest = tuple(n for i, n in enumerate(shape) if i != ax)
    expected = (shape[ax], 2) + rest
    if slices.shape != expected:
        raise ValueError(f"slice stack {slices.shape} inconsistent with volume {shape} "
                         f"along axis {ax} (expected {expected})")
    cplx = slices[:, 0] + 1j * slices[:, 1]
    return np.ascontiguousarray(np.moveaxis(cplx, 0, ax))


def _header(shape, voxel_size) -> bytes:
    hdr = {"shape": [int(n) for n in shape], "dtype": "c64", "order": "x-fastest",
           "voxel_size": [float(d) for d in voxel_size]}
    return json.dumps(hdr, separators=(",", ":")).encode("utf-8") + b"\n"


def encode_volume(v) -> bytes:
    if isinstance(v, Volume):
        data, voxel_size = v.data, v.voxel_size
    else:
        data, voxel_size = np.asarray(v), (1.0, 1.0, 1.0)
    if data.ndim != 3:
        raise ValueError(f"volume must be 3D, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("refusing to write a volume with non-finite samples")
    payload = np.asarray(data, dtype="<c8").ravel(order="F")
    return _header(data.shape, voxel_size) + payload.tobytes()


def write_volume(v, path) -> None:
    """Write ``v`` (Volume or complex array) as a ``.svol`` file."""
    Path(path).write_bytes(encode_volume(v))


def decode_volume(raw: bytes) -> Volume:
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError("missing header line")
    try:
        hdr = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"malformed header: {exc}") from None
    if not isinstance(hdr, dict) or not {"shape", "dtype"} <= hdr.keys():
        raise VolumeFormatError("header must be a JSON object with shape and dtype")
    if set(hdr) - _HEADER_KEYS:
        raise VolumeFormatError(f"unknown header keys {sorted(set(hdr) - _HEADER_KEYS)}")
    if hdr["dtype"] != "c64":
        raise VolumeFormatError(f"unsupported dtype tag {hdr['dtype']!r}")
    if hdr.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"unsupported order {hdr['order']!r}")
    shape = hdr["shape"]
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(n, int) and n > 0 for n in shape)):
        raise VolumeFormatError(f"bad shape {shape!r}")
    payload = raw[nl + 1:]
    count = int(np.prod(shape))
    if len(payload) != 8 * count:
        raise VolumeFormatError(f"payload holds {len(payload) / 8:g} complex samples, "
                                f"header declares {count}")
    data = np.frombuffer(payload, dtype="<c8").reshape(shape, order="F")
    return Volume(data, tuple(hdr.get("voxel_size", (1.0, 1.0, 1.0))))


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())
