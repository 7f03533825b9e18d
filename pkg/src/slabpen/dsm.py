"""Denoising score matching for the slice energy model.

Loss per patch: ``|| sigma * grad E(x + sigma n) - n ||^2`` with
``sigma ~ U(sigma_lo, sigma_hi)`` drawn per patch and ``n`` standard normal
on both channels. Minimising it drives ``x - sigma^2 * grad E(x)`` toward
the posterior-mean denoiser.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .energy import Arch, EnergyModel, init_params, padded_network, unflatten

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DsmConfig:
    sigma_range: tuple[float, float] = (0.0, 0.1)
    batch: int = 16
    steps: int = 1500
    learning_rate: float = 0.05
    patch_size: int = 32
    seed: int = 0
    clip_norm: float = 1.0
    momentum: float = 0.0

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"sigma_range must lie within [0, 1], got {self.sigma_range}")
        if self.patch_size < 16 or self.patch_size % 4:
            raise ValueError("patch_size must be >= 16 and divisible by 4")
        if self.batch < 1 or self.steps < 0 or self.learning_rate <= 0:
            raise ValueError("batch >= 1, steps >= 0 and learning_rate > 0 required")


def normalize_slices(slices: np.ndarray) -> np.ndarray:
    """Scale each two-channel slice to unit maximum magnitude (empty ones dropped)."""
    slices = np.asarray(slices, dtype=np.float64)
    peak = np.sqrt((slices ** 2).sum(axis=1)).max(axis=(1, 2))
    keep = peak > 0
    return slices[keep] / peak[keep, None, None, None]


def _sample_batch(data, cfg: DsmConfig, rng: np.random.Generator):
    n, _, h, w = data.shape
    p = cfg.patch_size
    idx = rng.integers(0, n, size=cfg.batch)
    ys = rng.integers(0, h - p + 1, size=cfg.batch)
    xs = rng.integers(0, w - p + 1, size=cfg.batch)
    out = np.empty((cfg.batch, 2, p, p))
    for b in range(cfg.batch):
        patch = data[idx[b], :, ys[b]:ys[b] + p, xs[b]:xs[b] + p]
        # dihedral augmentation plus a global phase rotation
        patch = np.rot90(patch, k=rng.integers(4), axes=(1, 2))
        if rng.integers(2):
            patch = patch[:, :, ::-1]
        c, s = np.cos(t := rng.uniform(0, 2 * np.pi)), np.sin(t)
        out[b, 0] = c * patch[0] - s * patch[1]
        out[b, 1] = s * patch[0] + c * patch[1]
    sigma = rng.uniform(*cfg.sigma_range, size=cfg.batch)
    noise = rng.standard_normal(out.shape)
    return out, sigma, noise


def dsm_loss(flat: torch.Tensor, arch: Arch, clean, sigma, noise) -> torch.Tensor:
    """Mean per-pixel DSM loss; differentiable in ``flat`` (second order)."""
    w = unflatten(arch, flat)
    s = sigma.view(-1, 1, 1, 1)
    noisy = (clean + s * noise).requires_grad_(True)
    r = noisy - padded_network(noisy, w, arch)
    energy = 0.5 * (r * r).sum()
    (score,) = torch.autograd.grad(energy, noisy, create_graph=True)
    return ((s * score - noise) ** 2).mean()


def train_dsm(clean_slices, cfg: DsmConfig, arch: Arch | None = None,
              init: np.ndarray | None = None, callback=None):
    """Train an energy model by denoising score matching.

    Parameters
    ----------
    clean_slices : array (n, 2, h, w)
        Clean two-channel slices; each is rescaled to unit peak magnitude.
    cfg : DsmConfig
    arch : Arch, optional
        Defaults to the miniature three-scale architecture.
    init : array, optional
        Starting parameters; He-normal from ``cfg.seed`` otherwise.
    callback : callable, optional
        Called as ``callback(step, loss)`` after every step.

    Returns
    -------
    model : EnergyModel
    losses : list of float
        Per-step loss (exponential running average, factor 0.98).
    """
    arch = arch or Arch()
    data = normalize_slices(clean_slices)
    if len(data) == 0:
        raise ValueError("training set is empty (or all-zero)")
    if min(data.shape[-2:]) < cfg.patch_size:
        raise ValueError(f"slices {data.shape[-2:]} smaller than patch_size {cfg.patch_size}")
    if data.shape[1] != arch.in_channels:
        raise ValueError("slices must carry two channels (real, imaginary)")

    params = init_params(arch, cfg.seed) if init is None else np.array(init, dtype=np.float64)
    if cfg.steps == 0:
        return EnergyModel(arch, params, sigma_max=cfg.sigma_range[1]), []

    # one intra-op thread keeps the reduction order, hence the result, reproducible
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        losses, flat = _train_loop(data, params, arch, cfg, callback)
    finally:
        torch.set_num_threads(threads)
    out = flat.detach().double().numpy()
    return EnergyModel(arch, out, sigma_max=cfg.sigma_range[1]), losses


def _train_loop(data, params, arch: Arch, cfg: DsmConfig, callback):
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    flat = torch.tensor(params, dtype=torch.float32, requires_grad=True)
    velocity = torch.zeros_like(flat)
    losses, running = [], None
    for step in range(cfg.steps):
        clean, sigma, noise = _sample_batch(data, cfg, rng)
        loss = dsm_loss(flat, arch, torch.tensor(clean, dtype=torch.float32),
                        torch.tensor(sigma, dtype=torch.float32),
                        torch.tensor(noise, dtype=torch.float32))
        (grad,) = torch.autograd.grad(loss, flat)
        loss = loss.detach()
        value = loss.item()
        if not np.isfinite(value) or not torch.isfinite(grad).all():
            raise TrainingDiverged(f"non-finite loss/gradient at step {step} (loss={value})")
        with torch.no_grad():
            norm = float(grad.norm())
            if norm > cfg.clip_norm:
                grad = grad * (cfg.clip_norm / norm)
            velocity = cfg.momentum * velocity + grad
            flat -= cfg.learning_rate * velocity
        running = value if running is None else 0.98 * running + 0.02 * value
        losses.append(running)
        if callback is not None:
            callback(step, running)
        if step % 100 == 0:
            log.info("dsm step %d loss %.5f |grad| %.3g", step, running, norm)
    return losses, flat
