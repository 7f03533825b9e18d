"""Slab geometry, excitation profiles and the slab profile encoding operator.

A volume with ``nz = n_slab * slices_per_slab`` slices is acquired as
``n_slab`` slabs. Each slab sub-volume folds every slice position
``z0 + m * slices_per_slab`` onto in-slab index ``z0`` with weight
``S_k(z0 + m * slices_per_slab)``. Slice positions sharing ``z0`` form an
aliasing group; the operator is block diagonal over groups, so least
squares problems reduce to small dense solves per ``(x, y, z0)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import Volume, as_array, read_volume, write_volume

MAX_GAIN = 1.25
# Tikhonov floor for beta = 0 solves, relative to max_g ||G_g||^2
EPS_REL = 1e-10


@dataclass(frozen=True)
class SlabGeometry:
    n_slab: int
    slices_per_slab: int

    def __post_init__(self):
        if self.n_slab < 1 or self.slices_per_slab < 1:
            raise ValueError("n_slab and slices_per_slab must be >= 1")

    @property
    def nz(self) -> int:
        return self.n_slab * self.slices_per_slab

    def window(self, k: int) -> range:
        d = self.slices_per_slab
        return range(k * d, (k + 1) * d)


@dataclass(frozen=True)
class ProfileSpec:
    model: str = "smooth"
    ripple_amp: float = 0.05
    transition_width: float = 2.0
    sidelobe_amp: float = 0.1
    sidelobe_extent: float = 2.0

    def validate(self, geom: SlabGeometry | None = None):
        if self.model not in ("rect", "smooth"):
            raise ValueError(f"unknown profile model {self.model!r}")
        if not 0.0 <= self.ripple_amp <= 0.25:
            raise ValueError("ripple_amp must lie in [0, 0.25]")
        if not 0.0 <= self.sidelobe_amp <= 0.5:
            raise ValueError("sidelobe_amp must lie in [0, 0.5]")
        if self.transition_width < 0 or self.sidelobe_extent < 0:
            raise ValueError("transition_width and sidelobe_extent must be >= 0")
        if geom is not None and self.model == "smooth" and self.transition_width > 0 \
                and not self.transition_width < geom.slices_per_slab / 2:
            raise ValueError("transition_width must be < slices_per_slab / 2")


@dataclass(frozen=True)
class SlabProfileSet:
    geometry: SlabGeometry
    weights: np.ndarray  # (n_slab, nz)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        g = self.geometry
        if w.shape != (g.n_slab, g.nz):
            raise ValueError(f"weights shape {w.shape} != {(g.n_slab, g.nz)}")
        if not np.all(np.isfinite(w)) or w.min() < 0 or w.max() > MAX_GAIN:
            raise ValueError(f"profile weights must be finite and within [0, {MAX_GAIN}]")
        for k in range(g.n_slab):
            if int(np.argmax(w[k])) not in g.window(k):
                raise ValueError(f"profile {k} peaks outside its own slab window")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


@dataclass
class SlabMeasurements:
    """Aliased slab sub-volumes for the acquired slabs, ``(K_acq, nx, ny, D)``."""

    geometry: SlabGeometry
    data: np.ndarray
    acquired: np.ndarray = field(default=None)

    def __post_init__(self):
        g = self.geometry
        if self.acquired is None:
            self.acquired = np.ones(g.n_slab, dtype=bool)
        self.acquired = np.asarray(self.acquired, dtype=bool)
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.acquired.shape != (g.n_slab,) or not self.acquired.any():
            raise ValueError("acquired mask needs one flag per slab and at least one slab")
        k_acq = int(self.acquired.sum())
        if self.data.ndim != 4 or self.data.shape[0] != k_acq \
                or self.data.shape[3] != g.slices_per_slab:
            raise ValueError(f"measurement array {self.data.shape} inconsistent with "
                             f"{k_acq} acquired slabs of {g.slices_per_slab} slices")

    @property
    def slab_indices(self) -> np.ndarray:
        return np.flatnonzero(self.acquired)


def _mask(mask, n_slab):
    if mask is None:
        return np.ones(n_slab, dtype=bool)
    mask = np.asarray(mask)
    if mask.dtype != bool:
        m = np.zeros(n_slab, dtype=bool)
        m[mask] = True
        mask = m
    if mask.shape != (n_slab,) or not mask.any():
        raise ValueError("slab mask needs one flag per slab and at least one acquired slab")
    return mask


def mask_from_dropped(n_slab: int, dropped=()) -> np.ndarray:
    mask = np.ones(n_slab, dtype=bool)
    for k in dropped:
        if not 0 <= k < n_slab:
            raise ValueError(f"dropped slab index {k} out of range")
        mask[k] = False
    if not mask.any():
        raise ValueError("cannot drop every slab")
    return mask


def make_profiles(geom: SlabGeometry, spec: ProfileSpec, seed: int = 0) -> SlabProfileSet:
    """Simulated slab excitation profiles.

    ``rect`` gives the ideal indicator of each slab window. ``smooth`` builds
    a flat-top main lobe with raised-cosine transitions of total width
    ``transition_width`` centred on the window edges, multiplies it by a
    two-cycle sinusoidal ripple of relative amplitude ``ripple_amp`` (phase
    drawn from ``seed``), and adds Gaussian side lobes of peak
    ``sidelobe_amp`` centred ``sidelobe_extent`` voxels into each
    neighbouring window. With all three imperfections at zero the smooth
    model equals ``rect``.
    """
    spec.validate(geom)
    d, nz = geom.slices_per_slab, geom.nz
    centres = np.arange(nz) + 0.5
    weights = np.zeros((geom.n_slab, nz))
    if spec.model == "rect":
        for k in range(geom.n_slab):
            weights[k, geom.window(k)] = 1.0
        return SlabProfileSet(geom, weights)

    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, size=geom.n_slab)
    tw = spec.transition_width
    for k in range(geom.n_slab):
        c = centres - k * d
        inside = np.minimum(c, d - c)  # signed distance into the window
        if tw > 0:
            main = np.clip(0.5 * (1 + np.sin(np.pi * np.clip(inside / tw, -0.5, 0.5))), 0, 1)
        else:
            main = (inside > 0).astype(float)
        ripple = 1.0 + spec.ripple_amp * np.sin(4 * np.pi * c / d + phases[k])
        prof = main * ripple
        if spec.sidelobe_amp > 0:
            width = max(spec.sidelobe_extent, 1.0) / 2
            for centre in (-spec.sidelobe_extent, d + spec.sidelobe_extent):
                prof = prof + spec.sidelobe_amp * np.exp(-0.5 * ((c - centre) / width) ** 2)
        weights[k] = np.clip(prof, 0.0, MAX_GAIN)
    return SlabProfileSet(geom, weights)


def group_matrix(profiles: SlabProfileSet, z0: int, mask=None) -> np.ndarray:
    """Rows: acquired slabs ascending; columns: alias index m ascending."""
    g = profiles.geometry
    if not 0 <= z0 < g.slices_per_slab:
        raise ValueError(f"in-slab index {z0} outside [0, {g.slices_per_slab})")
    mask = _mask(mask, g.n_slab)
    cols = z0 + g.slices_per_slab * np.arange(g.n_slab)
    return profiles.weights[np.ix_(np.flatnonzero(mask), cols)]


def group_matrices(profiles: SlabProfileSet, mask=None) -> np.ndarray:
    """All group matrices stacked as ``(D, K_acq, n_slab)``."""
    d = profiles.geometry.slices_per_slab
    return np.stack([group_matrix(profiles, z0, mask) for z0 in range(d)])


def _grouped(rho: np.ndarray, geom: SlabGeometry) -> np.ndarray:
    """``(nx, ny, nz)`` -> ``(n_slab, nx, ny, D)`` with entry m holding z0 + m*D."""
    nx, ny, nz = rho.shape
    if nz != geom.nz:
        raise ValueError(f"volume has {nz} slices, geometry needs {geom.nz}")
    return np.moveaxis(rho.reshape(nx, ny, geom.n_slab, geom.slices_per_slab), 2, 0)


def _ungrouped(grp: np.ndarray) -> np.ndarray:
    n, nx, ny, d = grp.shape
    return np.moveaxis(grp, 0, 2).reshape(nx, ny, n * d)


def forward_pen(rho, profiles: SlabProfileSet, mask=None) -> SlabMeasurements:
    """``I_k(x, y, z0) = sum_m S_k(z0 + m D) rho(x, y, z0 + m D)``."""
    geom = profiles.geometry
    mask = _mask(mask, geom.n_slab)
    grp = _grouped(np.asarray(as_array(rho), dtype=np.complex128), geom)
    G = group_matrices(profiles, mask)  # (D, K, M)
    data = np.einsum("zkm,mxyz->kxyz", G, grp)
    return SlabMeasurements(geom, data, mask)


def _check_meas(meas: SlabMeasurements, profiles: SlabProfileSet):
    if meas.geometry != profiles.geometry:
        raise ValueError(f"measurement geometry {meas.geometry} != profile geometry "
                         f"{profiles.geometry}")


def adjoint_pen(meas: SlabMeasurements, profiles: SlabProfileSet) -> np.ndarray:
    _check_meas(meas, profiles)
    G = group_matrices(profiles, meas.acquired)
    return _ungrouped(np.einsum("zkm,kxyz->mxyz", G, meas.data))


def tikhonov_eps(profiles: SlabProfileSet, mask=None) -> float:
    G = group_matrices(profiles, mask)
    return EPS_REL * float(max(np.linalg.norm(g, 2) ** 2 for g in G))


def solve_rho_update(meas: SlabMeasurements, profiles: SlabProfileSet,
                     beta: float = 0.0, u=None) -> np.ndarray:
    """Exact minimiser of ``||A rho - y||^2 + beta/2 ||rho - u||^2``.

    Each aliasing group solves ``(2 G^T G + beta I) rho_g = 2 G^T y_g +
    beta u_g`` directly. With ``beta = 0`` the system is floored with
    ``2 eps I`` (see ``EPS_REL``) so dropped or weakly excited positions
    stay solvable; positions no acquired slab sees come out as zero.
    """
    _check_meas(meas, profiles)
    geom = profiles.geometry
    if beta < 0 or not np.isfinite(beta):
        raise ValueError("beta must be finite and >= 0")
    if beta > 0 and u is None:
        raise ValueError("beta > 0 requires the proximal centre u")
    if not np.all(np.isfinite(meas.data)):
        raise ValueError("non-finite measurements")
    G = group_matrices(profiles, meas.acquired)  # (D, K, M)
    n = geom.n_slab
    k, nx, ny, d = meas.data.shape
    y = np.moveaxis(meas.data, 3, 0).reshape(d, k, nx * ny)
    if beta > 0:
        u = np.asarray(as_array(u), dtype=np.complex128)
        if not np.all(np.isfinite(u)):
            raise ValueError("non-finite proximal centre")
        ug = np.moveaxis(_grouped(u, geom), 3, 0).reshape(d, n, nx * ny)
        M = 2 * np.einsum("zkm,zkn->zmn", G, G) + beta * np.eye(n)
        sol = np.linalg.solve(M, 2 * np.einsum("zkm,zkp->zmp", G, y) + beta * ug)
    else:
        # Tikhonov solution through the SVD: rho = V s / (s^2 + eps) U^T y.
        # Equivalent to (2 G^T G + 2 eps I) rho = 2 G^T y, but stable when
        # G is rank deficient (dropped slabs).
        eps = tikhonov_eps(profiles, meas.acquired)
        U, sv, Vt = np.linalg.svd(G, full_matrices=False)
        filt = sv / (sv ** 2 + eps)
        sol = np.einsum("zrm,zr,zkr,zkp->zmp", Vt, filt, U, y, optimize=True)
    sol = sol.reshape(d, n, nx, ny)
    return _ungrouped(np.moveaxis(sol, 0, 3))


def lsq_pen(meas: SlabMeasurements, profiles: SlabProfileSet) -> np.ndarray:
    """Unregularised slab combination (Tikhonov-floored least squares)."""
    return solve_rho_update(meas, profiles, beta=0.0, u=None)


def condition_numbers(profiles: SlabProfileSet, mask=None) -> np.ndarray:
    """2-norm condition number of every group matrix (inf when rank deficient)."""
    out = []
    for g in group_matrices(profiles, mask):
        s = np.linalg.svd(g, compute_uv=False)
        full = len(s) == g.shape[1] and s[-1] > 0
        out.append(s[0] / s[-1] if full else np.inf)
    return np.array(out)


# -- file I/O ----------------------------------------------------------------

def write_profiles(profiles: SlabProfileSet, path) -> None:
    """``.svol`` of shape (nz, n_slab, 1) plus a ``.json`` geometry sidecar."""
    path = Path(path)
    w = profiles.weights.T[:, :, None].astype(np.complex128)
    write_volume(w, path)
    g = profiles.geometry
    path.with_suffix(".json").write_text(
        json.dumps({"n_slab": g.n_slab, "slices_per_slab": g.slices_per_slab}) + "\n")


def read_profiles(path) -> SlabProfileSet:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    geom = SlabGeometry(int(side["n_slab"]), int(side["slices_per_slab"]))
    vol = read_volume(path).data
    if vol.shape != (geom.nz, geom.n_slab, 1):
        raise ValueError(f"profile volume {vol.shape} inconsistent with sidecar {side}")
    return SlabProfileSet(geom, vol[:, :, 0].real.T)


def write_measurements(meas: SlabMeasurements, path, voxel_size=(1.0, 1.0, 1.0)) -> None:
    """Acquired slabs stacked along z as one ``.svol`` plus a ``.json`` sidecar."""
    path = Path(path)
    stacked = _ungrouped(meas.data)
    write_volume(Volume(stacked, voxel_size), path)
    g = meas.geometry
    path.with_suffix(".json").write_text(json.dumps({
        "n_slab": g.n_slab, "slices_per_slab": g.slices_per_slab,
        "acquired": [int(k) for k in meas.slab_indices]}) + "\n")


def read_measurements(path) -> SlabMeasurements:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    geom = SlabGeometry(int(side["n_slab"]), int(side["slices_per_slab"]))
    mask = np.zeros(geom.n_slab, dtype=bool)
    mask[list(side["acquired"])] = True
    vol = read_volume(path).data
    k = int(mask.sum())
    if vol.shape[2] != k * geom.slices_per_slab:
        raise ValueError(f"measurement volume has {vol.shape[2]} slices, sidecar "
                         f"expects {k} x {geom.slices_per_slab}")
    nx, ny = vol.shape[:2]
    data = np.moveaxis(vol.reshape(nx, ny, k, geom.slices_per_slab), 2, 0)
    return SlabMeasurements(geom, data, mask)
