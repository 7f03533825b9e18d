"""Log-linear diffusion tensor fitting, scalar maps and image-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .phantom import DiffusionProtocol, six_to_tensor
from .volume import as_array


@dataclass
class TensorMaps:
    tensor: np.ndarray          # (..., 6) Dxx, Dyy, Dzz, Dxy, Dxz, Dyz
    fa: np.ndarray
    md: np.ndarray
    principal_dir: np.ndarray   # (..., 3)
    eigenvalues: np.ndarray     # (..., 3), descending, clamped at 0
    mask: np.ndarray

    @property
    def color_fa(self) -> np.ndarray:
        return np.abs(self.principal_dir) * self.fa[..., None]


def design_matrix(proto: DiffusionProtocol) -> np.ndarray:
    """Rows ``-b [gx^2, gy^2, gz^2, 2gxgy, 2gxgz, 2gygz]``."""
    g = proto.gradients
    q = np.stack([g[:, 0] ** 2, g[:, 1] ** 2, g[:, 2] ** 2,
                  2 * g[:, 0] * g[:, 1], 2 * g[:, 0] * g[:, 2], 2 * g[:, 1] * g[:, 2]], axis=1)
    return -proto.b_value * q


def fa_md(eigenvalues: np.ndarray):
    """Fractional anisotropy (clamped to [0, 1]) and mean diffusivity."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    md = lam.mean(axis=-1)
    num = np.sqrt(((lam - md[..., None]) ** 2).sum(axis=-1))
    den = np.sqrt((lam ** 2).sum(axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.where(den > 0, np.sqrt(1.5) * num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(fa, 0.0, 1.0), md


def tensor_maps(tensor6: np.ndarray, mask=None) -> TensorMaps:
    tensor6 = np.asarray(tensor6, dtype=np.float64)
    evals, evecs = np.linalg.eigh(six_to_tensor(tensor6))
    evals, evecs = evals[..., ::-1], evecs[..., :, ::-1]
    evals = np.maximum(evals, 0.0)
    fa, md = fa_md(evals)
    e1 = evecs[..., :, 0]
    if mask is None:
        mask = np.ones(tensor6.shape[:-1], dtype=bool)
    fa, md = np.where(mask, fa, 0.0), np.where(mask, md, 0.0)
    e1 = np.where(mask[..., None], e1, 0.0)
    return TensorMaps(np.where(mask[..., None], tensor6, 0.0), fa, md, e1,
                      np.where(mask[..., None], evals, 0.0), mask)


def fit_tensor(dwis, proto: DiffusionProtocol, mask_threshold: float = 0.05) -> TensorMaps:
    """Log-linear least-squares tensor fit.

    ``dwis`` is ``[b0, dwi_1, ..., dwi_n]`` following ``proto.directions``.
    Magnitudes are used; voxels with ``|S0| <= mask_threshold * max|S0|``
    are zeroed.
    """
    B = design_matrix(proto)
    n = len(proto.directions)
    if n < 6:
        raise ValueError(f"need at least 6 directions, got {n}")
    if np.linalg.matrix_rank(B) < 6:
        raise ValueError("degenerate diffusion design (directions do not span 6 tensor dofs)")
    if not proto.includes_b0:
        raise ValueError("tensor fitting needs a b0 volume")
    if len(dwis) != n + 1:
        raise ValueError(f"expected {n + 1} volumes (b0 + {n}), got {len(dwis)}")
    mags = np.stack([np.abs(as_array(d)) for d in dwis], axis=-1).astype(np.float64)
    s0, sg = mags[..., 0], mags[..., 1:]
    mask = s0 > mask_threshold * s0.max() if s0.max() > 0 else np.zeros(s0.shape, bool)
    tiny = np.finfo(np.float64).tiny
    logratio = np.log(np.maximum(sg, tiny)) - np.log(np.maximum(s0, tiny))[..., None]
    tensor6 = logratio @ np.linalg.pinv(B).T
    return tensor_maps(tensor6, mask)


# -- metrics -----------------------------------------------------------------

PSNR_CAP = 200.0


def _mags(a, b):
    a, b = np.abs(as_array(a)), np.abs(as_array(b))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a, b, peak: float) -> float:
    a, b = _mags(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(peak ** 2 / mse))


def nrmse(a, b) -> float:
    """``||a - b|| / ||b||`` with ``b`` the reference."""
    a, b = _mags(a, b)
    ref = np.linalg.norm(b)
    diff = np.linalg.norm(a - b)
    if ref == 0:
        return 0.0 if diff == 0 else float("inf")
    return float(diff / ref)


def ssim(a, b, peak: float, window: int = 8) -> float:
    """Mean SSIM over sliding ``window``-cube neighbourhoods (fully inside)."""
    a, b = _mags(a, b)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    size = tuple(min(window, n) for n in a.shape)
    mu_a = uniform_filter(a, size, mode="nearest")
    mu_b = uniform_filter(b, size, mode="nearest")
    var_a = uniform_filter(a * a, size, mode="nearest") - mu_a ** 2
    var_b = uniform_filter(b * b, size, mode="nearest") - mu_b ** 2
    cov = uniform_filter(a * b, size, mode="nearest") - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
            / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    # keep only windows lying entirely inside the volume
    lo = [s // 2 for s in size]
    hi = [n - (s - 1 - s // 2) for n, s in zip(a.shape, size)]
    return float(smap[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].mean())
