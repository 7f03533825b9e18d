import numpy as np
import pytest
import torch

from slabpen.dsm import DsmConfig, dsm_loss, normalize_slices, train_dsm
from slabpen.energy import Arch, init_params

SMALL = Arch(channels=(4, 8, 8), blocks=1)


def slices(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = np.zeros((n, 2, size, size))
    for s in out:
        a, b = sorted(rng.integers(2, size - 2, 2))
        s[0, a:b, a:b] = rng.uniform(0.3, 1.0)
        s[1, a:b, :b] = rng.uniform(-0.3, 0.3)
    return out


def small_cfg(**kw):
    base = dict(batch=2, steps=3, patch_size=16, seed=0)
    base.update(kw)
    return DsmConfig(**base)


def test_zero_steps_returns_init():
    model, losses = train_dsm(slices(), small_cfg(steps=0), arch=SMALL)
    assert losses == []
    np.testing.assert_array_equal(model.params, init_params(SMALL, 0))
    init = np.random.default_rng(1).normal(size=SMALL.param_count())
    model, _ = train_dsm(slices(), small_cfg(steps=0), arch=SMALL, init=init)
    np.testing.assert_array_equal(model.params, init)


def test_errors():
    with pytest.raises(ValueError):
        train_dsm(np.zeros((3, 2, 16, 16)), small_cfg(), arch=SMALL)
    with pytest.raises(ValueError):
        train_dsm(slices(size=12), small_cfg(), arch=SMALL)
    with pytest.raises(ValueError):
        DsmConfig(sigma_range=(0.2, 0.1))
    with pytest.raises(ValueError):
        DsmConfig(patch_size=18)


def test_reproducible_and_threads_restored():
    before = torch.get_num_threads()
    a, la = train_dsm(slices(), small_cfg(), arch=SMALL)
    b, lb = train_dsm(slices(), small_cfg(), arch=SMALL)
    assert torch.get_num_threads() == before
    np.testing.assert_array_equal(a.params, b.params)
    assert la == lb and len(la) == 3
    c, _ = train_dsm(slices(), small_cfg(seed=1), arch=SMALL)
    assert not np.array_equal(a.params, c.params)


def test_pure_noise_loss_bounded():
    noise = np.random.default_rng(2).normal(size=(6, 2, 16, 16))
    _, losses = train_dsm(noise, small_cfg(steps=20), arch=SMALL)
    assert all(np.isfinite(losses)) and min(losses) > 0 and max(losses) < 1e3


def test_loss_oracle_zero_sigma():
    # with sigma = 0 the residual is just -noise, whatever the network
    flat = torch.tensor(init_params(SMALL, 3), dtype=torch.float32)
    clean = torch.tensor(slices(2), dtype=torch.float32)
    noise = torch.randn(clean.shape, generator=torch.Generator().manual_seed(0))
    loss = dsm_loss(flat, SMALL, clean, torch.zeros(2), noise)
    assert float(loss.detach()) == pytest.approx(float((noise ** 2).mean()), rel=1e-6)


def test_normalize_slices():
    s = slices(3)
    s[1] = 0
    out = normalize_slices(s)
    assert len(out) == 2
    mags = np.hypot(out[:, 0], out[:, 1]).reshape(2, -1).max(axis=1)
    np.testing.assert_allclose(mags, 1.0)
