"""Command-line pipeline: simulate -> train -> reconstruct -> evaluate.

Every stage reads and writes files in one output directory, so stages
compose through files only. Exit codes: 0 success, 2 configuration or
usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .admm import AdmmConfig, admm_reconstruct, write_history
from .dsm import DsmConfig, TrainingDiverged, train_dsm
from .dti import fit_tensor, nrmse, psnr, ssim
from .energy import load_model, save_model
from .phantom import (COMPONENTS, DiffusionProtocol, PhantomSpec, add_noise, default_protocol,
                      make_phantom, make_tensor_field, synth_dwi)
from .slab import (ProfileSpec, SlabGeometry, SlabMeasurements, condition_numbers, forward_pen,
                   lsq_pen, make_profiles, mask_from_dropped, read_measurements, read_profiles,
                   write_measurements, write_profiles)
from .tv import TvConfig
from .volume import Volume, VolumeFormatError, extract_slices, read_volume, write_volume

log = logging.getLogger("slabpen")

METHODS = ("lsq", "tv", "muse")
ISOTROPIC_DIFFUSIVITY = 0.8e-3  # mm^2/s, free-water-like background

DEFAULTS = {
    "seed": 0,
    "simulate": {
        "shape": [64, 64, 64],
        "phantom": "shepp-logan-3d",
        "phase": "smooth-polynomial",
        "n_ellipsoids": 8,
        "voxel_size": [1.0, 1.0, 1.0],
        "n_slab": 8,
        "slices_per_slab": 8,
        "profile": {"model": "smooth", "ripple_amp": 0.05, "transition_width": 2.0,
                    "sidelobe_amp": 0.1, "sidelobe_extent": 2.0},
        "noise_sigma": 0.0,
        "dropped": [],
        "dwi": {"enabled": False, "b_value": 1000.0, "n_dirs": 10, "field": "bundle"},
        "self_check": False,
    },
    "train": {
        "n_phantoms": 6,
        "shape": [64, 64, 64],
        "slice_margin": 8,
        "slice_stride": 2,
        "steps": 1000,
        "batch": 16,
        "learning_rate": 0.05,
        "patch_size": 32,
        "sigma_range": [0.0, 0.1],
        "clip_norm": 1.0,
        "momentum": 0.0,
        "model": "model.emdl",
    },
    "reconstruct": {
        "method": "lsq",
        "beta": 1.0,
        "outer_iters": 20,
        "tol": 1e-5,
        "png": True,
        "tv": {"lam": 0.05, "inner_iters": 30},
        "muse": {"lam": 0.5, "sd_steps": 5, "sd_step_size": None, "model": "model.emdl",
                 "prior_precision": "float32"},
    },
    "evaluate": {
        "methods": None,
        "mask_threshold": 0.05,
        "ssim_window": 8,
        "png": True,
    },
}


class ConfigError(Exception):
    """Invalid configuration or invocation (exit code 2)."""


class DataError(Exception):
    """Missing, malformed or inconsistent input data (exit code 3)."""


# --------------------------------------------------------------------- config

def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key '{where}{key}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}{key}' must be an object")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Read a JSON config and fill in defaults; unknown keys are rejected."""
    given = {}
    if path is not None:
        try:
            given = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(given, dict):
            raise ConfigError("config must be a JSON object")
    return _merge(DEFAULTS, given, "")


def _build(factory, what, *args, **kwargs):
    try:
        return factory(*args, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def _shape(value, what):
    if (not isinstance(value, list) or len(value) != 3
            or not all(isinstance(n, int) and n > 0 for n in value)):
        raise ConfigError(f"{what} must be three positive integers")
    return tuple(value)


def simulate_plan(cfg: dict) -> dict:
    c = cfg["simulate"]
    shape = _shape(c["shape"], "simulate.shape")
    geom = _build(SlabGeometry, "slab geometry", c["n_slab"], c["slices_per_slab"])
    if geom.nz != shape[2]:
        raise ConfigError(f"n_slab * slices_per_slab = {geom.nz} must equal shape[2] = {shape[2]}")
    spec = _build(ProfileSpec, "profile", **c["profile"])
    _build(spec.validate, "profile", geom)
    mask = _build(mask_from_dropped, "dropped slab list", geom.n_slab, c["dropped"])
    if not mask.any():
        raise ConfigError("every slab is dropped")
    if not c["noise_sigma"] >= 0:
        raise ConfigError("noise_sigma must be >= 0")
    phantom = _build(PhantomSpec, "phantom", shape, c["phantom"], c["phase"], cfg["seed"],
                     c["n_ellipsoids"])
    proto = None
    if c["dwi"]["field"] not in ("bundle", "isotropic"):
        raise ConfigError("simulate.dwi.field must be 'bundle' or 'isotropic'")
    if c["dwi"]["enabled"]:
        proto = _build(default_protocol, "diffusion protocol", c["dwi"]["n_dirs"],
                       c["dwi"]["b_value"], cfg["seed"])
    return {"geom": geom, "spec": spec, "mask": mask, "phantom": phantom, "proto": proto}


def train_plan(cfg: dict) -> dict:
    c = cfg["train"]
    _shape(c["shape"], "train.shape")
    if c["n_phantoms"] < 1 or c["slice_stride"] < 1 or c["slice_margin"] < 0:
        raise ConfigError("need n_phantoms >= 1, slice_stride >= 1, slice_margin >= 0")
    if 2 * c["slice_margin"] >= c["shape"][2]:
        raise ConfigError("slice_margin leaves no training slices")
    dsm = _build(DsmConfig, "training", sigma_range=tuple(c["sigma_range"]), batch=c["batch"],
                 steps=c["steps"], learning_rate=c["learning_rate"],
                 patch_size=c["patch_size"], seed=cfg["seed"], clip_norm=c["clip_norm"],
                 momentum=c["momentum"])
    return {"dsm": dsm}


def reconstruct_plan(cfg: dict) -> dict:
    c = cfg["reconstruct"]
    method = c["method"]
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    common = {"beta": c["beta"], "outer_iters": c["outer_iters"], "tol": c["tol"]}
    admm = None
    if method == "tv":
        tv = _build(TvConfig, "tv prior", inner_iters=c["tv"]["inner_iters"])
        admm = _build(AdmmConfig, "admm", lam=c["tv"]["lam"], prior=tv, **common)
    elif method == "muse":
        m = c["muse"]
        # the model itself is loaded later; the config is validated with no prior
        admm = _build(AdmmConfig, "admm", lam=m["lam"], sd_steps=m["sd_steps"],
                      sd_step_size=m["sd_step_size"], prior_precision=m["prior_precision"],
                      **common)
    return {"method": method, "admm": admm}


def evaluate_plan(cfg: dict) -> dict:
    c = cfg["evaluate"]
    methods = c["methods"]
    if methods is not None and (not isinstance(methods, list)
                                or any(m not in METHODS for m in methods)):
        raise ConfigError(f"evaluate.methods must be a list drawn from {METHODS}")
    if not 0 <= c["mask_threshold"] < 1 or c["ssim_window"] < 1:
        raise ConfigError("need 0 <= mask_threshold < 1 and ssim_window >= 1")
    return {"methods": methods}


PLANS = {"simulate": simulate_plan, "train": train_plan, "reconstruct": reconstruct_plan,
         "evaluate": evaluate_plan}


# ------------------------------------------------------------------ file I/O

def _claim(paths, force: bool):
    taken = [str(p) for p in paths if p.exists()]
    if taken and not force:
        raise ConfigError(f"refusing to overwrite {', '.join(taken)} (use --force)")


def _read(path: Path):
    if not path.exists():
        raise DataError(f"missing input {path}")
    try:
        return read_volume(path).data
    except VolumeFormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _write_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _window(img: np.ndarray) -> np.ndarray:
    """Magnitude windowed to [0, 99.5th percentile] as 8-bit."""
    mag = np.abs(img)
    top = float(np.percentile(mag, 99.5))
    if top <= 0:
        return np.zeros(mag.shape, np.uint8)
    return np.round(np.clip(mag / top, 0, 1) * 255).astype(np.uint8)


def save_png(img: np.ndarray, path: Path):
    """Grayscale (2D) or RGB (h, w, 3 in [0, 1]) image, first axis as rows."""
    if img.ndim == 3:
        data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(data, "RGB").save(path)
    else:
        Image.fromarray(_window(img), "L").save(path)


def uncorrected(meas: SlabMeasurements) -> np.ndarray:
    """Naive slab combination: each acquired slab placed in its own window."""
    geom = meas.geometry
    nx, ny = meas.data.shape[1:3]
    out = np.zeros((nx, ny, geom.nz), dtype=np.complex128)
    for i, k in enumerate(meas.slab_indices):
        out[:, :, geom.window(k)] = meas.data[i]
    return out


def _sagittal(v: np.ndarray) -> np.ndarray:
    # y-z plane through the middle of x, z running down the rows
    return v[v.shape[0] // 2].T


def triptych(panels) -> np.ndarray:
    gap = np.zeros((panels[0].shape[0], 2), np.uint8)
    parts = []
    for p in panels:
        parts += [_window(p), gap]
    return np.concatenate(parts[:-1], axis=1)


def _dwi_names(out: Path, prefix: str):
    return sorted(out.glob(f"{prefix}_[0-9][0-9].svol"))


# ------------------------------------------------------------------ commands

def cmd_simulate(cfg: dict, out: Path, force: bool = False) -> None:
    plan = simulate_plan(cfg)
    c = cfg["simulate"]
    geom, mask, seed = plan["geom"], plan["mask"], cfg["seed"]
    voxel = tuple(float(x) for x in c["voxel_size"])
    targets = [out / n for n in ("phantom.svol", "profiles.svol", "profiles.json",
                                 "measurements.svol", "measurements.json", "conditioning.csv")]
    proto = plan["proto"]
    if proto is not None:
        n_vol = len(proto.directions) + 1
        targets += [out / "tensor.svol", out / "tensor.json", out / "protocol.json"]
        targets += [out / f"dwi_truth_{i:02d}.svol" for i in range(n_vol)]
        targets += [out / f"dwi_meas_{i:02d}.{e}" for i in range(n_vol) for e in ("svol", "json")]
    _claim(targets, force)

    truth = make_phantom(plan["phantom"])
    profiles = make_profiles(geom, plan["spec"], seed=seed)

    def write_volume_at(v, name):
        write_volume(Volume(v, voxel), out / name)

    write_volume_at(truth, "phantom.svol")
    write_profiles(profiles, out / "profiles.svol")

    def measure(rho, noise_seed):
        clean = forward_pen(rho, profiles, mask)
        data = add_noise(clean.data, c["noise_sigma"], noise_seed)
        return SlabMeasurements(geom, data, mask)

    meas = measure(truth, seed + 1)
    write_measurements(meas, out / "measurements.svol", voxel)

    kappa = condition_numbers(profiles, mask)
    _write_csv(out / "conditioning.csv", ["z0", "condition_number"],
               [[z, repr(float(k))] for z, k in enumerate(kappa)])
    print(f"conditioning: {len(kappa)} groups, min {kappa.min():.6g}, max {kappa.max():.6g}")
    print(f"acquired slabs: {int(mask.sum())} of {geom.n_slab}"
          + (f" (dropped {sorted(c['dropped'])})" if c["dropped"] else ""))

    if proto is not None:
        field = make_tensor_field(plan["phantom"].shape, seed=seed)
        if c["dwi"]["field"] == "isotropic":
            field = np.zeros_like(field)
            field[..., :3] = ISOTROPIC_DIFFUSIVITY
        stacked = np.concatenate([field[..., i] for i in range(6)], axis=2)
        write_volume_at(stacked, "tensor.svol")
        _write_json({"components": list(COMPONENTS), "stacked_axis": "z"}, out / "tensor.json")
        _write_json({"b_value": proto.b_value, "includes_b0": True,
                     "directions": np.asarray(proto.directions).tolist()}, out / "protocol.json")
        for i, vol in enumerate(synth_dwi(truth, field, proto)):
            write_volume_at(vol, f"dwi_truth_{i:02d}.svol")
            write_measurements(measure(vol, seed + 2 + i), out / f"dwi_meas_{i:02d}.svol", voxel)
        print(f"diffusion series: {len(proto.directions)} directions + b0")

    if c["self_check"]:
        _self_check(out, truth, profiles, meas, c["noise_sigma"])


def _self_check(out: Path, truth, profiles, meas, sigma):
    back = read_measurements(out / "measurements.svol")
    geom = meas.geometry
    if sigma == 0:
        expected = forward_pen(truth, profiles, meas.acquired).data
        if np.abs(back.data - expected).max() > 1e-6 * max(np.abs(expected).max(), 1.0):
            raise DataError("self-check failed: measurements disagree with the forward model")
        if profiles.weights.max() == 1.0 and np.all(np.isin(profiles.weights, (0.0, 1.0))):
            for i, k in enumerate(back.slab_indices):
                slab = truth[:, :, geom.window(k)].astype(np.complex64)
                if not np.array_equal(back.data[i], slab):
                    raise DataError(f"self-check failed: slab {k} differs from the phantom")
    print("self-check: ok")


def _training_slices(cfg: dict) -> np.ndarray:
    c = cfg["train"]
    lo, hi = c["slice_margin"], c["shape"][2] - c["slice_margin"]
    out = []
    for i in range(c["n_phantoms"]):
        spec = PhantomSpec(tuple(c["shape"]), "nested-ellipsoids", "smooth-polynomial",
                           seed=cfg["seed"] + 100 + i)
        out.append(extract_slices(make_phantom(spec), "z")[lo:hi:c["slice_stride"]])
    return np.concatenate(out)


def cmd_train(cfg: dict, out: Path, force: bool = False) -> None:
    plan = train_plan(cfg)
    model_path = out / cfg["train"]["model"]
    loss_path = model_path.with_suffix(".loss.csv")
    _claim([model_path, loss_path], force)
    try:
        model, losses = train_dsm(_training_slices(cfg), plan["dsm"])
    except ValueError as exc:
        raise ConfigError(f"training setup: {exc}") from exc
    except TrainingDiverged as exc:
        raise DataError(str(exc)) from exc
    save_model(model, model_path)
    _write_csv(loss_path, ["step", "loss"], [[i, repr(v)] for i, v in enumerate(losses)])
    print(f"trained {len(losses)} steps -> {model_path}"
          + (f", final running loss {losses[-1]:.6g}" if losses else ""))


def _load_inputs(out: Path):
    try:
        profiles = read_profiles(out / "profiles.svol")
        meas = read_measurements(out / "measurements.svol")
    except (OSError, VolumeFormatError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load simulation outputs from {out}: {exc}") from exc
    if meas.geometry != profiles.geometry:
        raise DataError(f"measurement geometry {meas.geometry} does not match the profiles "
                        f"{profiles.geometry}")
    return profiles, meas


def _run_method(method, meas, profiles, admm):
    if method == "lsq":
        rho = lsq_pen(meas, profiles)
        scale = float(np.abs(meas.data).max()) or 1.0
        resid = forward_pen(rho / scale, profiles, meas.acquired).data - meas.data / scale
        fid = float(np.vdot(resid, resid).real)
        return rho, [{"iter": 0, "fidelity": fid, "energy": 0.0, "primal_residual": 0.0,
                      "rel_change": 0.0}]
    rho, state = admm_reconstruct(meas, profiles, admm)
    return rho, state.history


def cmd_reconstruct(cfg: dict, out: Path, force: bool = False) -> None:
    plan = reconstruct_plan(cfg)
    c = cfg["reconstruct"]
    method, admm = plan["method"], plan["admm"]
    dwi_inputs = _dwi_names(out, "dwi_meas")
    targets = [out / f"recon_{method}.svol", out / f"history_{method}.csv"]
    targets += [out / f"dwi_{method}_{p.stem[-2:]}.svol" for p in dwi_inputs]
    if c["png"]:
        targets.append(out / f"triptych_{method}.png")
    _claim(targets, force)

    profiles, meas = _load_inputs(out)
    if method == "muse":
        model_path = out / c["muse"]["model"]
        if not model_path.exists():
            raise DataError(f"muse reconstruction needs a trained model at {model_path}")
        try:
            admm.prior = load_model(model_path)
        except (OSError, ValueError) as exc:
            raise DataError(f"{model_path}: {exc}") from exc

    voxel = read_volume(out / "measurements.svol").voxel_size
    rho, history = _run_method(method, meas, profiles, admm)
    write_volume(Volume(rho, voxel), out / f"recon_{method}.svol")
    write_history(history, out / f"history_{method}.csv")
    print(f"{method}: {len(history)} iteration(s) -> recon_{method}.svol")

    for path in dwi_inputs:
        try:
            dmeas = read_measurements(path)
        except (OSError, VolumeFormatError, KeyError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from exc
        drho, _ = _run_method(method, dmeas, profiles, admm)
        write_volume(Volume(drho, voxel), out / f"dwi_{method}_{path.stem[-2:]}.svol")

    if c["png"]:
        panels = [_sagittal(uncorrected(meas)), _sagittal(rho)]
        truth_path = out / "phantom.svol"
        panels.append(_sagittal(rho - _read(truth_path)) if truth_path.exists()
                      else _sagittal(rho - uncorrected(meas)))
        Image.fromarray(triptych(panels), "L").save(out / f"triptych_{method}.png")


def cmd_evaluate(cfg: dict, out: Path, force: bool = False) -> None:
    plan = evaluate_plan(cfg)
    c = cfg["evaluate"]
    methods = plan["methods"]
    if methods is None:
        methods = [m for m in METHODS if (out / f"recon_{m}.svol").exists()]
    if not methods:
        raise DataError(f"no reconstructions found in {out}")
    truth_dwis = _dwi_names(out, "dwi_truth")
    dti = bool(truth_dwis)
    targets = [out / "metrics.csv"]
    if dti:
        for tag in ["truth", *methods]:
            targets += [out / f"fa_{tag}.svol", out / f"md_{tag}.svol"]
            if c["png"]:
                targets.append(out / f"colorfa_{tag}.png")
    _claim(targets, force)

    truth = _read(out / "phantom.svol")
    peak = float(np.abs(truth).max()) or 1.0
    win = c["ssim_window"]

    def scores(a, b, pk):
        if a.shape != b.shape:
            raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
        return [repr(float(psnr(a, b, pk))), repr(float(ssim(a, b, pk, window=win))),
                repr(float(nrmse(a, b)))]

    rows = []
    for m in methods:
        rows.append([m, "phantom", *scores(_read(out / f"recon_{m}.svol"), truth, peak)])

    if dti:
        try:
            pj = _read_json(out / "protocol.json")
            proto = DiffusionProtocol(pj["b_value"], np.array(pj["directions"]))
        except (KeyError, ValueError) as exc:
            raise DataError(f"protocol.json: {exc}") from exc
        truth_series = [_read(p) for p in truth_dwis]
        ref = fit_tensor(truth_series, proto, c["mask_threshold"])
        _write_maps(out, "truth", ref, c["png"])
        for m in methods:
            series = [_read(out / f"dwi_{m}_{p.stem[-2:]}.svol") for p in truth_dwis]
            for p, vol, tv in zip(truth_dwis, series, truth_series):
                pk = float(np.abs(tv).max()) or 1.0
                rows.append([m, p.stem.replace("_truth", ""), *scores(vol, tv, pk)])
            maps = fit_tensor(series, proto, c["mask_threshold"])
            _write_maps(out, m, maps, c["png"])
            rows.append([m, "fa", *scores(maps.fa, ref.fa, 1.0)])

    _write_csv(out / "metrics.csv", ["method", "volume", "psnr", "ssim", "nrmse"], rows)
    for r in rows:
        print(f"{r[0]:>5s} {r[1]:>10s}  psnr {float(r[2]):8.3f}  ssim {float(r[3]):.4f}  "
              f"nrmse {float(r[4]):.4g}")


def _write_maps(out: Path, tag: str, maps, png: bool):
    write_volume(maps.fa, out / f"fa_{tag}.svol")
    write_volume(maps.md, out / f"md_{tag}.svol")
    if png:
        mid = maps.fa.shape[2] // 2
        save_png(np.swapaxes(maps.color_fa[:, :, mid], 0, 1), out / f"colorfa_{tag}.png")


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate}


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slabpen", description="Multislab slab-profile encoding simulation and correction")
    parser.add_argument("command", choices=sorted(COMMANDS), help="pipeline stage to run")
    parser.add_argument("--config", type=str, default=None, help="JSON config document")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--method", choices=METHODS, default=None,
                        help="reconstruction method (reconstruct, evaluate)")
    parser.add_argument("--out", type=str, default=".", help="working/output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if args.method is not None:
            cfg["reconstruct"]["method"] = args.method
            cfg["evaluate"]["methods"] = [args.method]
        for plan in PLANS.values():  # validate the whole document before any work
            plan(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args.force)
    except ConfigError as exc:
        print(f"slabpen {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"slabpen {args.command}: data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
