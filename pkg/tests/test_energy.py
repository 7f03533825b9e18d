import numpy as np
import pytest
import torch

from slabpen.energy import (Arch, EnergyModel, energy_and_score_volume, energy_slice,
                            energy_volume, init_params, load_model, psi_forward, random_model,
                            save_model, score_slice, score_volume)

SMALL = Arch(channels=(4, 8, 8), blocks=1)


def fd_gradient(f, x, h=1e-4, coords=None):
    """Central differences of scalar ``f`` at ``x`` (real array) on ``coords``.

    Returns the differences at step ``h`` and a mask of coordinates whose stencil
    straddles a ReLU kink, detected as disagreement with the step ``h / 2`` estimate.
    """
    flat = x.ravel()
    coords = range(flat.size) if coords is None else coords
    out, smooth = [], []
    for i in coords:
        d = []
        for step in (h, h / 2):
            e = np.zeros_like(flat)
            e[i] = step
            d.append((f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2 * step))
        out.append(d[0])
        smooth.append(abs(d[0] - d[1]) <= 1e-5 * (1 + abs(d[0])))
    return np.array(out), np.array(smooth)


def check_fd(analytic, fd, smooth):
    # kink flags compare two difference quotients, never the analytic score,
    # so excluding them cannot hide a gradient error
    assert smooth.mean() >= 0.9
    assert rel_err(analytic[smooth], fd[smooth]) < 1e-4


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.fixture(scope="module")
def small_model():
    return random_model(SMALL, seed=1)


def test_param_count_default():
    arch = Arch()
    assert arch.param_count() == 260672
    assert EnergyModel(arch, np.zeros(arch.param_count())).params.size == 260672
    with pytest.raises(ValueError):
        EnergyModel(arch, np.zeros(10))


def test_zero_params():
    arch = Arch()
    zero = EnergyModel(arch, init_params(arch, zero=True))
    rng = np.random.default_rng(0)
    s = rng.normal(size=(2, 32, 32))
    assert not psi_forward(s, zero).any()
    s *= np.sqrt(2.0 / np.sum(s ** 2))
    assert energy_slice(s, zero) == pytest.approx(1.0, rel=1e-14)
    np.testing.assert_array_equal(score_slice(s, zero), s)
    assert energy_slice(np.zeros((2, 16, 16)), zero) == 0.0
    v = rng.normal(size=(8, 12, 16)) + 1j * rng.normal(size=(8, 12, 16))
    e, g = energy_and_score_volume(v, zero)
    assert e == pytest.approx(0.5 * np.vdot(v, v).real, rel=1e-13)
    np.testing.assert_allclose(g, v, rtol=1e-14)


def test_shape_checks(small_model):
    with pytest.raises(ValueError):
        psi_forward(np.zeros((2, 10, 16)), small_model)
    with pytest.raises(ValueError):
        score_slice(np.zeros((3, 16, 16)), small_model)


def test_deterministic_and_golden():
    model = random_model(Arch(), seed=42)
    s = np.random.default_rng(42).normal(size=(2, 32, 32))
    a, b = psi_forward(s, model), psi_forward(s, model)
    np.testing.assert_array_equal(a, b)
    # pinned once from this construction (float64 CPU)
    assert a.sum() == pytest.approx(GOLDEN_SUM, rel=1e-9)
    assert np.abs(a).sum() == pytest.approx(GOLDEN_ABS, rel=1e-9)


GOLDEN_SUM = 4886.300168826962
GOLDEN_ABS = 10850.88996207097


def test_score_slice_finite_differences(small_model):
    s = np.random.default_rng(3).normal(size=(2, 16, 16))
    check_fd(score_slice(s, small_model).ravel(),
             *fd_gradient(lambda x: energy_slice(x, small_model), s))


def test_score_slice_fd_default_arch():
    model = random_model(Arch(), seed=5)
    s = np.random.default_rng(5).normal(size=(2, 16, 16))
    coords = np.random.default_rng(0).choice(s.size, 64, replace=False)
    check_fd(score_slice(s, model).ravel()[coords],
             *fd_gradient(lambda x: energy_slice(x, model), s, coords=coords))


def _volume_fd(model, v, coords):
    real = np.stack([v.real, v.imag], axis=-1)

    def f(x):
        return energy_volume(x[..., 0] + 1j * x[..., 1], model)

    return fd_gradient(f, real, coords=coords)


def test_score_volume_finite_differences(small_model):
    rng = np.random.default_rng(6)
    v = rng.normal(size=(16, 16, 16)) + 1j * rng.normal(size=(16, 16, 16))
    coords = rng.choice(2 * v.size, 200, replace=False)
    g = score_volume(v, small_model)
    g_real = np.stack([g.real, g.imag], axis=-1).ravel()
    check_fd(g_real[coords], *_volume_fd(small_model, v, coords))


def test_padding_non_divisible(small_model):
    # 10 x 12 x 6 needs reflect padding on every stack
    rng = np.random.default_rng(7)
    v = rng.normal(size=(10, 12, 6)) + 1j * rng.normal(size=(10, 12, 6))
    coords = rng.choice(2 * v.size, 100, replace=False)
    e, g = energy_and_score_volume(v, small_model)
    assert e > 0 and g.shape == v.shape
    g_real = np.stack([g.real, g.imag], axis=-1).ravel()
    check_fd(g_real[coords], *_volume_fd(small_model, v, coords))


def test_energy_nonnegative_and_homogeneous(small_model):
    rng = np.random.default_rng(8)
    s = rng.normal(size=(2, 16, 16))
    assert energy_slice(s, small_model) > 0
    # bias-free ReLU network: psi(c s) = c psi(s) for c > 0
    assert energy_slice(2 * s, small_model) == pytest.approx(4 * energy_slice(s, small_model),
                                                             rel=1e-12)
    np.testing.assert_allclose(score_slice(2 * s, small_model), 2 * score_slice(s, small_model),
                               rtol=1e-10, atol=1e-12)


def test_score_is_nonlinear(small_model):
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 2, 16, 16))
    sa, sb = score_slice(a, small_model), score_slice(b, small_model)
    assert rel_err(score_slice(a + b, small_model), sa + sb) > 1e-3
    assert rel_err(score_slice(-a, small_model), -sa) > 1e-3


def _transpose_symmetric(model):
    """Copy of ``model`` with every kernel symmetrised under spatial transpose."""
    arch, chunks, pos = model.arch, [], 0
    for _, shape in arch.param_shapes():
        n = int(np.prod(shape))
        w = model.params[pos:pos + n].reshape(shape)
        chunks.append((0.5 * (w + np.swapaxes(w, 2, 3))).ravel())
        pos += n
    return EnergyModel(arch, np.concatenate(chunks))


@pytest.mark.parametrize("perm", [(1, 0, 2), (2, 0, 1), (0, 2, 1)])
def test_volume_energy_axis_permutation(small_model, perm):
    sym = _transpose_symmetric(small_model)
    rng = np.random.default_rng(10)
    v = rng.normal(size=(16, 16, 16)) + 1j * rng.normal(size=(16, 16, 16))
    assert energy_volume(np.transpose(v, perm), sym) == pytest.approx(energy_volume(v, sym),
                                                                      rel=1e-12)


def test_float32_evaluation_close(small_model):
    v = np.random.default_rng(11).normal(size=(16, 16, 16)) + 0j
    e64, g64 = energy_and_score_volume(v, small_model)
    e32, g32 = energy_and_score_volume(v, small_model, dtype=torch.float32)
    assert e32 == pytest.approx(e64, rel=1e-5)
    assert rel_err(g32, g64) < 1e-5


def test_model_file_round_trip(tmp_path, small_model):
    path = tmp_path / "m.emdl"
    save_model(small_model, path)
    back = load_model(path)
    assert back.arch == small_model.arch and back.sigma_max == small_model.sigma_max
    np.testing.assert_array_equal(back.params, small_model.params.astype(np.float32))
    save_model(back, tmp_path / "m2.emdl")
    assert (tmp_path / "m2.emdl").read_bytes() == path.read_bytes()
    raw = path.read_bytes()
    (tmp_path / "bad.emdl").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad.emdl")
