"""Isotropic total-variation denoising (Chambolle dual projection).

Two-channel slices are denoised jointly: the TV norm at a pixel couples the
gradients of the real and imaginary planes. Volumes are denoised slice-wise
in the three orthogonal planes and the three results are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import as_array, extract_slices, scatter_slices

TAU = 0.248


@dataclass(frozen=True)
class TvConfig:
    weight: float = 0.05
    inner_iters: int = 30
    mode: str = "three-plane-2d"

    def __post_init__(self):
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ValueError("TV weight must be finite and >= 0")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.mode != "three-plane-2d":
            raise ValueError(f"unsupported TV mode {self.mode!r}")


def grad(u: np.ndarray) -> np.ndarray:
    """Forward differences over the last two axes, zero across the far edge.

    Returns shape ``u.shape[:-2] + (2,) + u.shape[-2:]``.
    """
    g = np.zeros(u.shape[:-2] + (2,) + u.shape[-2:])
    g[..., 0, :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    g[..., 1, :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    return g


def div(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`grad`."""
    px, py = p[..., 0, :, :], p[..., 1, :, :]
    d = np.zeros(px.shape)
    d[..., :-1, :] += px[..., :-1, :]
    d[..., 1:, :] -= px[..., :-1, :]
    d[..., :, :-1] += py[..., :, :-1]
    d[..., :, 1:] -= py[..., :, :-1]
    return d


def tv_norm(s: np.ndarray) -> float:
    """Vectorial isotropic TV of a ``(..., 2, h, w)`` stack."""
    g = grad(np.asarray(s, dtype=np.float64))
    return float(np.sqrt((g ** 2).sum(axis=(-4, -3))).sum())


def tv_objective(u, s, weight) -> float:
    u, s = np.asarray(u), np.asarray(s)
    return 0.5 * float(((u - s) ** 2).sum()) + weight * tv_norm(u)


def tv_denoise_slices(s: np.ndarray, weight: float, inner_iters: int = 30) -> np.ndarray:
    """Approximate ``argmin_u 0.5 |u - s|^2 + weight * TV(u)`` per slice.

    ``s`` is a two-channel slice ``(2, h, w)`` or a stack ``(n, 2, h, w)``.
    """
    s = np.asarray(s, dtype=np.float64)
    if weight == 0:
        return s.copy()
    p = np.zeros(s.shape[:-2] + (2,) + s.shape[-2:])
    ch_axis = -4  # channel axis of p and of grad(...)
    for _ in range(inner_iters):
        g = grad(div(p) - s / weight)
        mag = np.sqrt((g ** 2).sum(axis=(ch_axis, -3), keepdims=True))
        p = (p + TAU * g) / (1.0 + TAU * mag)
    return s - weight * div(p)


def tv_denoise_slice(s, weight: float, inner_iters: int = 30) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 3 or s.shape[0] != 2:
        raise ValueError(f"expected a (2, h, w) slice, got {s.shape}")
    return tv_denoise_slices(s, weight, inner_iters)


def tv_denoise_volume(v, cfg: TvConfig) -> np.ndarray:
    """Average of slice-wise TV denoising along x, y and z."""
    a = np.asarray(as_array(v), dtype=np.complex128)
    if cfg.weight == 0:
        return a.copy()
    out = np.zeros_like(a)
    for axis in (0, 1, 2):
        den = tv_denoise_slices(extract_slices(a, axis), cfg.weight, cfg.inner_iters)
        out += scatter_slices(den, axis, a.shape)
    return out / 3.0
