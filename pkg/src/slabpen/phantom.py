"""Synthetic ground truth: 3D phantoms, tensor fields, DWI synthesis, noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

# Modified 3D Shepp-Logan table:
# value, semi-axes (a, b, c), centre (x0, y0, z0), Euler angles zxz (deg)
SHEPP_LOGAN_3D = np.array([
    [1.0, .6900, .920, .810, 0.00, 0.0000, 0.00, 0, 0, 0],
    [-.8, .6624, .874, .780, 0.00, -.0184, 0.00, 0, 0, 0],
    [-.2, .1100, .310, .220, 0.22, 0.0000, 0.00, -18, 0, 10],
    [-.2, .1600, .410, .280, -.22, 0.0000, 0.00, 18, 0, 10],
    [0.1, .2100, .250, .410, 0.00, 0.3500, -.15, 0, 0, 0],
    [0.1, .0460, .046, .050, 0.00, 0.1000, 0.25, 0, 0, 0],
    [0.1, .0460, .046, .050, 0.00, -.1000, 0.25, 0, 0, 0],
    [0.1, .0460, .023, .050, -.08, -.6050, 0.00, 0, 0, 0],
    [0.1, .0230, .023, .020, 0.00, -.6060, 0.00, 0, 0, 0],
    [0.1, .0230, .046, .020, 0.06, -.6050, 0.00, 0, 0, 0],
])

KINDS = ("shepp-logan-3d", "nested-ellipsoids")
PHASES = ("zero", "smooth-polynomial")


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    kind: str = "shepp-logan-3d"
    phase: str = "smooth-polynomial"
    seed: int = 0
    n_ellipsoids: int = 8

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"bad phantom shape {self.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase model {self.phase!r}")
        if self.n_ellipsoids < 0:
            raise ValueError("n_ellipsoids must be >= 0")


def grid(shape):
    """Voxel-centre coordinates in [-1, 1); index n//2 sits exactly on 0."""
    axes = [(np.arange(n) - n // 2) * (2.0 / n) for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def ellipsoid_sum(table, x, y, z):
    """Sum of constant-valued ellipsoids evaluated at points ``(x, y, z)``."""
    x, y, z = (np.asarray(c, dtype=np.float64) for c in (x, y, z))
    out = np.zeros(np.broadcast(x, y, z).shape)
    pts = np.stack(np.broadcast_arrays(x, y, z), axis=-1)
    for row in table:
        value, axes, centre, angles = row[0], row[1:4], row[4:7], row[7:10]
        rot = Rotation.from_euler("zxz", angles, degrees=True).as_matrix()
        local = (pts - centre) @ rot
        inside = np.sum((local / axes) ** 2, axis=-1) <= 1.0
        out[inside] += value
    return out


def _nested_table(n, rng):
    rows = []
    outer = rng.uniform(0.6, 0.9, size=3)
    for i in range(n):
        if i == 0:
            axes, centre, value = outer, np.zeros(3), rng.uniform(0.6, 1.0)
        else:
            axes = outer * rng.uniform(0.08, 0.45, size=3)
            centre = rng.uniform(-1, 1, size=3) * (outer - axes) * 0.8
            value = rng.uniform(-0.4, 0.4)
        angles = rng.uniform(-90, 90, size=3) if i else np.zeros(3)
        rows.append(np.concatenate([[value], axes, centre, angles]))
    return np.array(rows).reshape(-1, 10)


def smooth_phase(shape, rng):
    """Random second-order polynomial phase, bounded by pi in magnitude."""
    x, y, z = grid(shape)
    terms = [x, y, z, x * y, x * z, y * z, x * x, y * y, z * z]
    coef = rng.uniform(-1.0, 1.0, size=len(terms) + 1)
    coef *= 0.9 * np.pi / np.abs(coef).sum()
    phi = coef[0] + sum(c * t for c, t in zip(coef[1:], terms))
    return np.clip(phi, -np.pi, np.pi)


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Complex phantom with magnitude in [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    x, y, z = grid(spec.shape)
    if spec.kind == "shepp-logan-3d":
        mag = ellipsoid_sum(SHEPP_LOGAN_3D, x, y, z)
    else:
        mag = ellipsoid_sum(_nested_table(spec.n_ellipsoids, rng), x, y, z)
        mag = np.abs(mag)
        if mag.max() > 0:
            mag /= mag.max()
    mag = np.clip(mag, 0.0, 1.0)
    if spec.phase == "zero":
        return mag.astype(np.complex128)
    return mag * np.exp(1j * smooth_phase(spec.shape, rng))


# -- diffusion ---------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionProtocol:
    b_value: float = 1000.0
    directions: tuple = ()
    includes_b0: bool = True

    def __post_init__(self):
        g = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "directions", tuple(map(tuple, g)))
        if len(g) < 6:
            raise ValueError(f"need at least 6 diffusion directions, got {len(g)}")
        if np.any(np.abs(np.linalg.norm(g, axis=1) - 1.0) > 1e-12):
            raise ValueError("diffusion directions must be unit vectors")
        for i in range(len(g)):
            for j in range(i):
                if np.allclose(g[i], g[j], atol=1e-9):
                    raise ValueError(f"directions {j} and {i} coincide")

    @property
    def gradients(self) -> np.ndarray:
        return np.array(self.directions)


def electrostatic_directions(n: int, seed: int = 0) -> np.ndarray:
    """``n`` unit vectors spread by antipodal electrostatic repulsion."""
    rng = np.random.default_rng(seed)
    start = rng.normal(size=(n, 3))
    start /= np.linalg.norm(start, axis=1, keepdims=True)

    def energy(flat):
        p = flat.reshape(n, 3)
        p = p / np.linalg.norm(p, axis=1, keepdims=True)
        iu = np.triu_indices(n, 1)
        d = p[:, None] - p[None]
        s = p[:, None] + p[None]
        return np.sum(1 / np.linalg.norm(d, axis=-1)[iu] + 1 / np.linalg.norm(s, axis=-1)[iu])

    res = minimize(energy, start.ravel(), method="BFGS", options={"gtol": 1e-10, "maxiter": 2000})
    p = res.x.reshape(n, 3)
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    # canonical hemisphere so the set is reproducible in sign
    p *= np.where(p[:, 2:3] < 0, -1.0, 1.0)
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def default_protocol(n_dirs: int = 10, b_value: float = 1000.0, seed: int = 0) -> DiffusionProtocol:
    return DiffusionProtocol(b_value, tuple(map(tuple, electrostatic_directions(n_dirs, seed))))


# tensor components are stored in the order Dxx, Dyy, Dzz, Dxy, Dxz, Dyz
COMPONENTS = ("Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz")


def tensor_to_six(d: np.ndarray) -> np.ndarray:
    return np.stack([d[..., 0, 0], d[..., 1, 1], d[..., 2, 2],
                     d[..., 0, 1], d[..., 0, 2], d[..., 1, 2]], axis=-1)


def six_to_tensor(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    d = np.empty(t.shape[:-1] + (3, 3))
    d[..., 0, 0], d[..., 1, 1], d[..., 2, 2] = t[..., 0], t[..., 1], t[..., 2]
    d[..., 0, 1] = d[..., 1, 0] = t[..., 3]
    d[..., 0, 2] = d[..., 2, 0] = t[..., 4]
    d[..., 1, 2] = d[..., 2, 1] = t[..., 5]
    return d


def make_tensor_field(shape, seed: int = 0, background: float = 0.8e-3,
                      bundle_eigs=(1.7e-3, 0.3e-3)) -> np.ndarray:
    """Six-component tensor field (mm^2/s), shape ``shape + (6,)``.

    Isotropic ``background * I`` everywhere except a toroidal bundle around
    the z axis whose principal direction follows the ring tangent, so it
    rotates smoothly through the x-y plane. The seed sets the ring radius
    and tilt.
    """
    rng = np.random.default_rng(seed)
    x, y, z = grid(shape)
    radius = rng.uniform(0.35, 0.5)
    tilt = rng.uniform(-0.3, 0.3)
    r_xy = np.hypot(x, y)
    inside = (r_xy - radius) ** 2 + z ** 2 <= 0.15 ** 2

    field = np.zeros(tuple(shape) + (3, 3))
    field[...] = background * np.eye(3)
    tangent = np.stack([-y, x, tilt * np.ones_like(x)], axis=-1)[inside]
    tangent /= np.linalg.norm(tangent, axis=-1, keepdims=True)
    l1, l2 = bundle_eigs
    # lambda2 * I + (lambda1 - lambda2) e e^T has eigenvalues (l1, l2, l2)
    field[inside] = l2 * np.eye(3) + (l1 - l2) * tangent[:, :, None] * tangent[:, None, :]
    return tensor_to_six(field)


def synth_dwi(s0, field: np.ndarray, proto: DiffusionProtocol) -> list[np.ndarray]:
    """Stejskal-Tanner signals; b0 first when the protocol includes it."""
    s0 = np.asarray(s0)
    field = np.asarray(field)
    if field.shape != s0.shape + (6,):
        raise ValueError(f"tensor field {field.shape} does not match volume {s0.shape}")
    mag, phase = np.abs(s0), np.exp(1j * np.angle(s0))
    out = [mag * phase] if proto.includes_b0 else []
    for g in proto.gradients:
        q = np.array([g[0] ** 2, g[1] ** 2, g[2] ** 2,
                      2 * g[0] * g[1], 2 * g[0] * g[2], 2 * g[1] * g[2]])
        out.append(mag * np.exp(-proto.b_value * (field @ q)) * phase)
    return out


def add_noise(v, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. complex Gaussian noise, std ``sigma`` per real channel."""
    v = np.asarray(v, dtype=np.complex128)
    if sigma == 0:
        return v.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=v.shape + (2,))
    return v + noise[..., 0] + 1j * noise[..., 1]
