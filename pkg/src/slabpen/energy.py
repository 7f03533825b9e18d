"""Multi-scale energy prior built on a miniature DRUNet-style denoiser.

The energy of a two-channel slice ``s`` is ``0.5 * ||s - psi(s)||^2`` where
``psi`` is a bias-free U-Net with residual blocks. Its gradient (the score)
is obtained by reverse-mode differentiation through the network. Volume
energies average the slice energies over the three orthogonal slice stacks.

Every layer is bias-free and the only nonlinearity is ReLU, so ``psi`` is
positively homogeneous: ``psi(c * s) = c * psi(s)`` for ``c > 0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .volume import as_array, extract_slices, scatter_slices

_MODEL_KEYS = {"arch", "sigma_max", "param_count", "dtype"}


@dataclass(frozen=True)
class Arch:
    """Channel widths per scale, residual blocks per scale, conv kernel size."""

    channels: tuple[int, ...] = (16, 32, 64)
    blocks: int = 2
    kernel: int = 3
    in_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 1 or min(self.channels) < 1:
            raise ValueError(f"bad channel widths {self.channels}")
        if self.blocks < 0 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("blocks must be >= 0 and kernel a positive odd size")

    @property
    def factor(self) -> int:
        """Spatial size divisor imposed by the downscaling stages."""
        return 2 ** (len(self.channels) - 1)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) list; the flat parameter vector follows it."""
        k, c, cin = self.kernel, self.channels, self.in_channels
        shapes = [("head", (c[0], cin, k, k))]

        def res(prefix, ch):
            for b in range(self.blocks):
                shapes.append((f"{prefix}.res{b}.conv0", (ch, ch, k, k)))
                shapes.append((f"{prefix}.res{b}.conv1", (ch, ch, k, k)))

        for i in range(len(c) - 1):
            res(f"down{i}", c[i])
            shapes.append((f"down{i}.pool", (c[i + 1], c[i], 2, 2)))
        res("body", c[-1])
        for i in reversed(range(len(c) - 1)):
            # conv_transpose2d weights are (in, out, kh, kw)
            shapes.append((f"up{i}.unpool", (c[i + 1], c[i], 2, 2)))
            res(f"up{i}", c[i])
        shapes.append(("tail", (cin, c[0], k, k)))
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def to_json(self) -> dict:
        return {"channels": list(self.channels), "blocks": self.blocks,
                "kernel": self.kernel, "in_channels": self.in_channels}


@dataclass
class EnergyModel:
    arch: Arch
    params: np.ndarray
    sigma_max: float = 0.1
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.params = np.array(self.params, dtype=np.float64).ravel()
        if self.params.size != self.arch.param_count():
            raise ValueError(f"arch needs {self.arch.param_count()} parameters, "
                             f"got {self.params.size}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("model parameters contain non-finite values")
        self.params.setflags(write=False)

    def weights(self, dtype=torch.float64) -> dict[str, torch.Tensor]:
        """Parameter tensors keyed by layer name (cached per dtype)."""
        key = (dtype, self.params.ctypes.data, self.params.size)
        if key not in self._cache:
            if len(self._cache) > 2:
                self._cache.clear()
            self._cache[key] = unflatten(self.arch, torch.tensor(self.params, dtype=dtype))
        return self._cache[key]


def unflatten(arch: Arch, flat: torch.Tensor) -> dict[str, torch.Tensor]:
    out, pos = {}, 0
    for name, shape in arch.param_shapes():
        n = int(np.prod(shape))
        out[name] = flat[pos:pos + n].view(shape)
        pos += n
    return out


def init_params(arch: Arch, seed: int = 0, zero: bool = False) -> np.ndarray:
    """He-normal initialisation with damped residual branches and output layer."""
    if zero:
        return np.zeros(arch.param_count())
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in arch.param_shapes():
        if name.endswith("unpool"):
            fan_in = shape[0] * shape[2] * shape[3] / 4
        else:
            fan_in = shape[1] * shape[2] * shape[3]
        std = np.sqrt(2.0 / fan_in)
        if name.endswith("conv1"):
            std *= 0.5
        if name == "tail":
            # start near psi = 0, i.e. E(s) ~ 0.5 |s|^2
            std = 0.1 * np.sqrt(1.0 / fan_in)
        chunks.append(rng.normal(0.0, std, size=int(np.prod(shape))))
    return np.concatenate(chunks)


def random_model(arch: Arch | None = None, seed: int = 0) -> EnergyModel:
    arch = arch or Arch()
    return EnergyModel(arch, init_params(arch, seed))


def _res(x, w, prefix, blocks, pad):
    for b in range(blocks):
        h = F.relu(F.conv2d(x, w[f"{prefix}.res{b}.conv0"], padding=pad))
        x = x + F.conv2d(h, w[f"{prefix}.res{b}.conv1"], padding=pad)
    return x


def network(x: torch.Tensor, w: dict[str, torch.Tensor], arch: Arch) -> torch.Tensor:
    """psi applied to a batch ``(n, 2, h, w)``; h and w divisible by ``arch.factor``."""
    pad = arch.kernel // 2
    levels = len(arch.channels)
    x = F.conv2d(x, w["head"], padding=pad)
    skips = [x]
    for i in range(levels - 1):
        x = _res(x, w, f"down{i}", arch.blocks, pad)
        x = F.conv2d(x, w[f"down{i}.pool"], stride=2)
        skips.append(x)
    x = _res(x, w, "body", arch.blocks, pad)
    for i in reversed(range(levels - 1)):
        x = F.conv_transpose2d(x + skips[i + 1], w[f"up{i}.unpool"], stride=2)
        x = _res(x, w, f"up{i}", arch.blocks, pad)
    return F.conv2d(x + skips[0], w["tail"], padding=pad)


def _padding(h, w, factor):
    ph, pw = (-h) % factor, (-w) % factor
    return (0, pw, 0, ph)


def padded_network(x: torch.Tensor, w, arch: Arch) -> torch.Tensor:
    """psi with reflect padding up to the size divisor; output cropped back."""
    h, wd = x.shape[-2:]
    pads = _padding(h, wd, arch.factor)
    if any(pads):
        if pads[1] >= wd or pads[3] >= h:
            xp = F.pad(x, pads, mode="replicate")
        else:
            xp = F.pad(x, pads, mode="reflect")
        return network(xp, w, arch)[..., :h, :wd]
    return network(x, w, arch)


def _check(s, arch: Arch, strict: bool):
    if s.shape[-3] != arch.in_channels:
        raise ValueError(f"expected {arch.in_channels} channels, got shape {tuple(s.shape)}")
    if strict and (s.shape[-2] % arch.factor or s.shape[-1] % arch.factor):
        raise ValueError(f"slice size {tuple(s.shape[-2:])} not divisible by {arch.factor}")


def psi_forward(s, model: EnergyModel) -> np.ndarray:
    """Denoiser output for a slice ``(2, h, w)`` or a batch ``(n, 2, h, w)``."""
    s = np.asarray(s, dtype=np.float64)
    _check(s, model.arch, strict=True)
    with torch.no_grad():
        x = torch.as_tensor(s)
        single = x.ndim == 3
        out = network(x[None] if single else x, model.weights(), model.arch)
    out = out.numpy()
    return out[0] if single else out


def _energy_and_score_batch(x: np.ndarray, model: EnergyModel, need_score: bool,
                            dtype=torch.float64):
    """Per-slice energies and scores for a batch ``(n, 2, h, w)``."""
    w = model.weights(dtype)
    xt = torch.tensor(x, dtype=dtype).requires_grad_(need_score)
    with torch.set_grad_enabled(need_score):
        r = xt - padded_network(xt, w, model.arch)
        e = 0.5 * (r * r).sum(dim=(1, 2, 3))
        if not need_score:
            return e.detach().double().numpy(), None
        (g,) = torch.autograd.grad(e.sum(), xt)
    return e.detach().double().numpy(), g.double().numpy()


def energy_slice(s, model: EnergyModel) -> float:
    s = np.asarray(s, dtype=np.float64)
    _check(s, model.arch, strict=True)
    e, _ = _energy_and_score_batch(s[None], model, need_score=False)
    return float(e[0])


def score_slice(s, model: EnergyModel) -> np.ndarray:
    """Gradient of :func:`energy_slice` with respect to the slice."""
    s = np.asarray(s, dtype=np.float64)
    _check(s, model.arch, strict=True)
    _, g = _energy_and_score_batch(s[None], model, need_score=True)
    return g[0]


def energy_and_score_volume(v, model: EnergyModel, need_score: bool = True,
                            chunk: int = 16, dtype=torch.float64):
    """Three-plane volume energy and (optionally) its exact gradient.

    The volume energy is the sum of slice energies over the x, y and z slice
    stacks divided by three; the score scatters each per-slice score back
    with the adjoint of the slice extraction and applies the same average.
    ``dtype`` selects the precision of the network evaluation only;
    accumulation is always double precision.
    """
    a = np.asarray(as_array(v), dtype=np.complex128)
    total = 0.0
    grad = np.zeros(a.shape, dtype=np.complex128) if need_score else None
    for axis in (0, 1, 2):
        slices = extract_slices(a, axis)
        _check(slices, model.arch, strict=False)
        scores = np.empty_like(slices) if need_score else None
        for lo in range(0, len(slices), chunk):
            e, g = _energy_and_score_batch(slices[lo:lo + chunk], model, need_score, dtype)
            total += float(e.sum())
            if need_score:
                scores[lo:lo + chunk] = g
        if need_score:
            grad += scatter_slices(scores, axis, a.shape)
    if need_score:
        grad /= 3.0
    return total / 3.0, grad


def energy_volume(v, model: EnergyModel) -> float:
    return energy_and_score_volume(v, model, need_score=False)[0]


def score_volume(v, model: EnergyModel) -> np.ndarray:
    return energy_and_score_volume(v, model)[1]


def save_model(model: EnergyModel, path) -> None:
    """Write ``.emdl``: JSON header line then little-endian float32 parameters."""
    hdr = {"arch": model.arch.to_json(), "sigma_max": float(model.sigma_max),
           "param_count": int(model.params.size), "dtype": "f32"}
    raw = json.dumps(hdr, separators=(",", ":")).encode("utf-8") + b"\n"
    Path(path).write_bytes(raw + model.params.astype("<f4").tobytes())


def load_model(path) -> EnergyModel:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing model header")
    try:
        hdr = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed model header: {exc}") from None
    if not isinstance(hdr, dict) or set(hdr) != _MODEL_KEYS or hdr["dtype"] != "f32":
        raise ValueError(f"{path}: unexpected model header {hdr!r}")
    arch = Arch(**hdr["arch"])
    params = np.frombuffer(raw[nl + 1:], dtype="<f4")
    if params.size != hdr["param_count"] or params.size != arch.param_count():
        raise ValueError(f"{path}: parameter payload size mismatch")
    return EnergyModel(arch, params.astype(np.float64), float(hdr["sigma_max"]))
