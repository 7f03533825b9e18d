import csv
import json

import numpy as np
import pytest
from PIL import Image

from slabpen.cli import main
from slabpen.admm import AdmmConfig, admm_reconstruct
from slabpen.slab import lsq_pen, read_measurements, read_profiles
from slabpen.volume import read_volume, write_volume

SMALL = {
    "seed": 1,
    "simulate": {"shape": [16, 16, 16], "n_slab": 4, "slices_per_slab": 4,
                 "profile": {"transition_width": 1.5}, "noise_sigma": 0.02, "dropped": [2],
                 "dwi": {"enabled": True, "n_dirs": 6}},
    "train": {"n_phantoms": 1, "shape": [32, 32, 32], "steps": 2, "batch": 2, "patch_size": 16},
    "reconstruct": {"outer_iters": 2, "muse": {"sd_steps": 1}, "tv": {"inner_iters": 5}},
}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(cfg_path, out, *args):
    return main([*args, "--config", cfg_path, "--out", str(out)])


def pipeline(cfg_path, out):
    stages = [["simulate"], ["train"], ["reconstruct", "--method", "lsq"],
              ["reconstruct", "--method", "tv"], ["reconstruct", "--method", "muse"],
              ["evaluate"]]
    for stage in stages:
        assert run(cfg_path, out, *stage) == 0, stage


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_config(base, SMALL)
    pipeline(cfg, base / "a")
    return cfg, base


def test_pipeline_outputs(small_run):
    _, base = small_run
    out = base / "a"
    for name in ["phantom.svol", "profiles.svol", "measurements.svol", "conditioning.csv",
                 "model.emdl", "model.loss.csv", "recon_lsq.svol", "recon_tv.svol",
                 "recon_muse.svol", "history_tv.csv", "triptych_muse.png", "metrics.csv",
                 "fa_truth.svol", "md_tv.svol", "colorfa_lsq.png", "tensor.svol"]:
        assert (out / name).exists(), name
    rows = read_csv(out / "metrics.csv")
    # one row per method per volume: phantom, b0 + 6 DWIs, and the FA map
    assert len(rows) == 3 * (1 + 7 + 1)
    assert {r["method"] for r in rows} == {"lsq", "tv", "muse"}
    assert len(read_csv(out / "model.loss.csv")) == 2
    assert len(read_csv(out / "history_tv.csv")) == 2
    assert json.loads((out / "tensor.json").read_text())["components"][0] == "Dxx"
    img = Image.open(out / "triptych_lsq.png")
    assert img.mode == "L" and img.size[1] == 16
    assert Image.open(out / "colorfa_truth.png").mode == "RGB"


def test_every_stage_is_byte_deterministic(small_run):
    cfg, base = small_run
    pipeline(cfg, base / "b")
    a, b = base / "a", base / "b"
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_changes_outputs(small_run, tmp_path):
    cfg, base = small_run
    assert run(cfg, tmp_path, "simulate", "--seed", "2") == 0
    assert (tmp_path / "measurements.svol").read_bytes() != \
        (base / "a" / "measurements.svol").read_bytes()


def test_lsq_matches_library_bit_for_bit(small_run):
    _, base = small_run
    out = base / "a"
    meas = read_measurements(out / "measurements.svol")
    prof = read_profiles(out / "profiles.svol")
    expected = tmp = out / "expected.svol"
    write_volume(lsq_pen(meas, prof), tmp)
    assert (out / "recon_lsq.svol").read_bytes() == expected.read_bytes()
    tmp.unlink()


def test_admm_lambda_zero_matches_lsq(tmp_path):
    cfg = json.loads(json.dumps(SMALL))
    cfg["reconstruct"] = {"outer_iters": 20, "tol": 0.0, "tv": {"lam": 0.0}}
    cfg["simulate"]["dwi"]["enabled"] = False
    path = write_config(tmp_path, cfg)
    assert run(path, tmp_path, "simulate") == 0
    assert run(path, tmp_path, "reconstruct", "--method", "lsq") == 0
    assert run(path, tmp_path, "reconstruct", "--method", "tv") == 0
    a = read_volume(tmp_path / "recon_tv.svol").data
    b = read_volume(tmp_path / "recon_lsq.svol").data
    # both pass through the single-precision file format
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-7
    meas = read_measurements(tmp_path / "measurements.svol")
    prof = read_profiles(tmp_path / "profiles.svol")
    rho, _ = admm_reconstruct(meas, prof, AdmmConfig(lam=0.0, outer_iters=20, tol=0.0))
    ref = lsq_pen(meas, prof)
    assert np.linalg.norm(rho - ref) / np.linalg.norm(ref) < 1e-8


def test_rect_self_check_and_slabs(tmp_path, capsys):
    cfg = {"simulate": {"shape": [8, 8, 16], "n_slab": 4, "slices_per_slab": 4,
                        "profile": {"model": "rect"}, "self_check": True}}
    assert run(write_config(tmp_path, cfg), tmp_path / "o", "simulate") == 0
    assert "self-check: ok" in capsys.readouterr().out
    phantom = read_volume(tmp_path / "o" / "phantom.svol").data
    stacked = read_volume(tmp_path / "o" / "measurements.svol").data
    np.testing.assert_array_equal(stacked, phantom.astype(np.complex64))


def test_conditioning_report(tmp_path, capsys):
    cfg = {"simulate": {"shape": [8, 8, 64]}}
    assert run(write_config(tmp_path, cfg), tmp_path, "simulate") == 0
    report = capsys.readouterr().out
    assert "conditioning:" in report
    kappa = np.array([float(r["condition_number"]) for r in read_csv(tmp_path / "conditioning.csv")])
    assert len(kappa) == 8 and np.all(np.isfinite(kappa)) and kappa.max() > 1


def test_dropped_slab_bookkeeping(tmp_path):
    cfg = {"simulate": {"shape": [8, 8, 64], "dropped": [3]}}
    assert run(write_config(tmp_path, cfg), tmp_path, "simulate") == 0
    side = json.loads((tmp_path / "measurements.json").read_text())
    assert side["acquired"] == [0, 1, 2, 4, 5, 6, 7]
    assert read_volume(tmp_path / "measurements.svol").shape == (8, 8, 7 * 8)


def test_truth_as_recon_scores_cap(tmp_path):
    cfg = {"simulate": {"shape": [8, 8, 16], "n_slab": 2}}
    path = write_config(tmp_path, cfg)
    assert run(path, tmp_path, "simulate") == 0
    (tmp_path / "recon_lsq.svol").write_bytes((tmp_path / "phantom.svol").read_bytes())
    assert run(path, tmp_path, "evaluate") == 0
    (row,) = read_csv(tmp_path / "metrics.csv")
    assert row["method"] == "lsq" and float(row["psnr"]) == 200.0
    assert float(row["nrmse"]) == 0.0 and float(row["ssim"]) == pytest.approx(1.0)


def test_isotropic_fa_is_zero(tmp_path):
    cfg = {"simulate": {"shape": [8, 8, 16], "n_slab": 2, "profile": {"model": "rect"},
                        "dwi": {"enabled": True, "n_dirs": 6, "field": "isotropic"}},
           "evaluate": {"png": False}}
    path = write_config(tmp_path, cfg)
    assert run(path, tmp_path, "simulate") == 0
    assert run(path, tmp_path, "reconstruct", "--method", "lsq") == 0
    assert run(path, tmp_path, "evaluate") == 0
    for tag in ("truth", "lsq"):
        fa = read_volume(tmp_path / f"fa_{tag}.svol").data.real
        md = read_volume(tmp_path / f"md_{tag}.svol").data.real
        mask = md > 0
        assert mask.any() and np.abs(fa[mask]).max() < 1e-3


def test_train_zero_steps_is_init(tmp_path):
    from slabpen.energy import Arch, init_params, load_model
    cfg = {"train": {"steps": 0, "n_phantoms": 1, "shape": [32, 32, 32], "patch_size": 16}}
    assert run(write_config(tmp_path, cfg), tmp_path, "train", "--seed", "4") == 0
    model = load_model(tmp_path / "model.emdl")
    np.testing.assert_array_equal(model.params,
                                  init_params(Arch(), 4).astype(np.float32))
    assert read_csv(tmp_path / "model.loss.csv") == []


@pytest.mark.parametrize("cfg", [{"simulate": {"bogus": 1}}, {"extra": {}},
                                 {"simulate": {"profile": {"ripple_amp": 0.5}}},
                                 {"simulate": {"shape": [8, 8, 10]}},
                                 {"reconstruct": {"method": "sense"}},
                                 {"simulate": {"dropped": [0, 1, 2, 3, 4, 5, 6, 7]}}])
def test_config_errors_exit_2(tmp_path, cfg):
    assert run(write_config(tmp_path, cfg), tmp_path / "o", "simulate") == 2
    assert not (tmp_path / "o").exists()


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["reconstruct", "--method", "sense", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["simulate", "--config", str(tmp_path / "bad.json")]) == 2


def test_collisions_need_force(tmp_path):
    path = write_config(tmp_path, {"simulate": {"shape": [8, 8, 16], "n_slab": 2}})
    assert run(path, tmp_path, "simulate") == 0
    assert run(path, tmp_path, "simulate") == 2
    assert run(path, tmp_path, "simulate", "--force") == 0


def test_data_errors_exit_3(tmp_path):
    path = write_config(tmp_path, {"simulate": {"shape": [8, 8, 16], "n_slab": 2}})
    assert run(path, tmp_path, "reconstruct") == 3  # nothing simulated yet
    assert run(path, tmp_path, "simulate") == 0
    assert run(path, tmp_path, "reconstruct", "--method", "muse") == 3  # no model
    assert run(path, tmp_path, "evaluate") == 3  # no reconstructions
    (tmp_path / "recon_lsq.svol").write_bytes(b'{"shape":[2,2,2]}\n')
    assert run(path, tmp_path, "evaluate") == 3
    write_volume(np.zeros((4, 4, 4)), tmp_path / "recon_lsq.svol")
    assert run(path, tmp_path, "evaluate", "--force") == 3  # shape mismatch
