"""Plug-and-play ADMM for regularised slab combination.

Solves ``min_rho ||A rho - y||^2 + lam * E(rho)`` by splitting ``v = rho``
with an unscaled multiplier ``gamma``:

* rho-update: exact per-group solve centred at ``gamma / beta + v``;
* v-update:   prior step on ``r = rho - gamma / beta`` (identity, TV
  denoiser, or steepest descent on the MuSE energy);
* dual ascent: ``gamma += beta * (v - rho)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch

from .energy import EnergyModel, energy_and_score_volume
from .slab import SlabMeasurements, SlabProfileSet, forward_pen, lsq_pen, solve_rho_update
from .tv import TvConfig, tv_denoise_volume, tv_norm
from .volume import as_array, extract_slices

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
STATIONARY_RTOL = 1e-10  # v-update stops once |grad| has dropped by this factor


class CgInfo(NamedTuple):
    iterations: int
    residual: float
    converged: bool


def _dot(a, b) -> float:
    return float(np.vdot(a, b).real)


def cg_solve(apply_normal_op: Callable[[np.ndarray], np.ndarray], rhs, tol: float = 1e-10,
             max_iters: int = 500, x0=None):
    """Conjugate gradients for a Hermitian positive-definite map.

    Stops when ``||M x - rhs|| / ||rhs|| <= tol`` or after ``max_iters``.
    Returns ``(x, CgInfo)``.
    """
    b = np.asarray(as_array(rhs), dtype=np.complex128)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.complex128)
    bnorm = np.sqrt(_dot(b, b))
    if bnorm == 0:
        return np.zeros_like(b), CgInfo(0, 0.0, True)
    r = b - apply_normal_op(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = _dot(r, r)
    for it in range(1, max_iters + 1):
        Mp = apply_normal_op(p)
        pMp = _dot(p, Mp)
        if not np.isfinite(pMp) or pMp <= 0:
            raise FloatingPointError(f"CG breakdown at iteration {it}: p^H M p = {pMp}")
        alpha = rr / pMp
        x += alpha * p
        r -= alpha * Mp
        rr_new = _dot(r, r)
        res = np.sqrt(rr_new) / bnorm
        if res <= tol:
            return x, CgInfo(it, res, True)
        p = r + (rr_new / rr) * p
        rr = rr_new
    log.warning("CG stopped at max_iters=%d with relative residual %.3g", max_iters, res)
    return x, CgInfo(max_iters, res, False)


@dataclass
class AdmmConfig:
    lam: float = 0.5
    beta: float = 1.0
    outer_iters: int = 20
    sd_steps: int = 5
    sd_step_size: float | None = None
    tol: float = 1e-5
    prior: None | TvConfig | EnergyModel = None
    normalize: bool = True
    prior_precision: str = "float32"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.lam < 0 or self.outer_iters < 1 or self.tol < 0 or self.sd_steps < 0:
            raise ValueError("need lam >= 0, outer_iters >= 1, sd_steps >= 0, tol >= 0")
        if self.prior_precision not in _DTYPES:
            raise ValueError(f"prior_precision must be one of {sorted(_DTYPES)}")


@dataclass
class AdmmState:
    rho: np.ndarray
    v: np.ndarray
    gamma: np.ndarray
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    scale: float = 1.0
    converged: bool = False


def lipschitz_probe(v, model: EnergyModel, dtype=torch.float32, seed: int = 0) -> float:
    """Crude score Lipschitz estimate from one random finite-difference probe."""
    a = np.asarray(as_array(v), dtype=np.complex128)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(a.shape) + 1j * rng.standard_normal(a.shape)
    h = 1e-2 * max(np.linalg.norm(a), 1.0) / np.linalg.norm(d)
    _, s0 = energy_and_score_volume(a, model, dtype=dtype)
    _, s1 = energy_and_score_volume(a + h * d, model, dtype=dtype)
    return float(np.linalg.norm(s1 - s0) / (h * np.linalg.norm(d)))


def _muse_descent(r, cfg: AdmmConfig, lipschitz: float | None):
    model = cfg.prior
    dtype = _DTYPES[cfg.prior_precision]
    lam, beta = cfg.lam, cfg.beta
    if cfg.sd_step_size is not None:
        tau = cfg.sd_step_size
    else:
        if lipschitz is None:
            lipschitz = lipschitz_probe(r, model, dtype)
        tau = 1.0 / (lam * lipschitz + beta)

    v = r.copy()
    energy, score = energy_and_score_volume(v, model, dtype=dtype)
    obj = lam * energy
    g0 = None
    for _ in range(cfg.sd_steps):
        g = lam * score + beta * (v - r)
        gnorm = np.linalg.norm(g)
        g0 = gnorm if g0 is None else g0
        if gnorm <= STATIONARY_RTOL * g0:
            break
        for _halving in range(40):
            cand = v - tau * g
            e_c, s_c = energy_and_score_volume(cand, model, dtype=dtype)
            obj_c = lam * e_c + 0.5 * beta * np.vdot(cand - r, cand - r).real
            if not np.isfinite(obj_c):
                raise FloatingPointError("non-finite objective in the v-update")
            if obj_c <= obj:
                break
            tau *= 0.5
        else:
            log.debug("v-update: no decrease after 40 halvings, stopping descent")
            break
        assert obj_c <= obj
        v, energy, score, obj = cand, e_c, s_c, obj_c
    return v, energy


def _v_update(r, cfg: AdmmConfig, lipschitz=None):
    """v-update returning ``(v, prior value at v)``."""
    r = np.asarray(as_array(r), dtype=np.complex128)
    prior = cfg.prior
    if prior is None or cfg.lam == 0:
        return r.copy(), 0.0
    if isinstance(prior, TvConfig):
        tv = TvConfig(cfg.lam / cfg.beta, prior.inner_iters, prior.mode)
        v = tv_denoise_volume(r, tv)
        return v, sum(tv_norm(extract_slices(v, ax)) for ax in "xyz") / 3.0
    if isinstance(prior, EnergyModel):
        return _muse_descent(r, cfg, lipschitz)
    raise TypeError(f"unsupported prior {type(prior).__name__}")


def v_update(r, cfg: AdmmConfig, lipschitz: float | None = None) -> np.ndarray:
    """Approximate ``argmin_v lam * E(v) + beta/2 ||v - r||^2``.

    With a TV prior the TV denoiser of weight ``lam / beta`` is applied. With
    an energy model, up to ``sd_steps`` steepest-descent steps start from
    ``r``; the step is halved until the objective does not increase, and the
    descent ends early once the gradient is numerically zero.
    """
    return _v_update(r, cfg, lipschitz)[0]


def augmented_lagrangian(rho, v, gamma, meas, profiles, cfg: AdmmConfig, prior_value=0.0):
    resid = forward_pen(rho, profiles, meas.acquired).data - meas.data
    diff = v - rho
    return (_dot(resid, resid) + cfg.lam * prior_value + 0.5 * cfg.beta * _dot(diff, diff)
            + _dot(gamma, diff))


def admm_reconstruct(meas: SlabMeasurements, profiles: SlabProfileSet, cfg: AdmmConfig):
    """Plug-and-play ADMM slab combination.

    Stops once both the relative change of ``rho`` and the relative primal
    residual ``||v - rho|| / ||rho||`` drop below ``cfg.tol``.

    Returns ``(rho, state)``. ``state`` holds the final iterates in
    normalised units (``state.scale`` maps them back) and the per-iteration
    history.
    """
    scale = 1.0
    if cfg.normalize:
        peak = float(np.abs(meas.data).max())
        scale = peak if peak > 0 else 1.0
    y = SlabMeasurements(meas.geometry, meas.data / scale, meas.acquired)

    rho = lsq_pen(y, profiles)
    v = rho.copy()
    gamma = np.zeros_like(rho)
    state = AdmmState(rho, v, gamma, scale=scale)
    lipschitz = None
    if isinstance(cfg.prior, EnergyModel) and cfg.lam > 0 and cfg.sd_step_size is None:
        lipschitz = lipschitz_probe(rho, cfg.prior, _DTYPES[cfg.prior_precision])
        log.info("score Lipschitz estimate %.4g", lipschitz)

    for n in range(cfg.outer_iters):
        rho_new = solve_rho_update(y, profiles, cfg.beta, gamma / cfg.beta + v)
        v, prior_value = _v_update(rho_new - gamma / cfg.beta, cfg, lipschitz)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite v at iteration {n}")
        gamma = gamma + cfg.beta * (v - rho_new)

        norm = np.linalg.norm(rho)
        rel = float(np.linalg.norm(rho_new - rho) / norm) if norm > 0 else float(
            np.linalg.norm(rho_new) > 0)
        resid = forward_pen(rho_new, profiles, y.acquired).data - y.data
        state.history.append({
            "iter": n + 1,
            "fidelity": _dot(resid, resid),
            "energy": float(prior_value),
            "primal_residual": float(np.linalg.norm(v - rho_new)),
            "rel_change": rel,
        })
        primal_rel = state.history[-1]["primal_residual"] / max(np.linalg.norm(rho_new), 1e-300)
        rho = rho_new
        state.rho, state.v, state.gamma, state.iteration = rho, v, gamma, n + 1
        log.info("admm %d: fidelity %.4g prior %.4g primal %.3g change %.3g", n + 1,
                 state.history[-1]["fidelity"], prior_value,
                 state.history[-1]["primal_residual"], rel)
        # the first rho-step reproduces the initialiser, so also require v ~ rho
        if rel < cfg.tol and primal_rel < cfg.tol:
            state.converged = True
            break
    return rho * scale, state


HISTORY_FIELDS = ("iter", "fidelity", "energy", "primal_residual", "rel_change")


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["iter"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
