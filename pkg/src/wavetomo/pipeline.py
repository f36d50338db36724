"""End-to-end runs: phantom, simulation, reconstruction, metrics, provenance.

Artifacts are written under one output directory and contain no
timestamps or wall-clock figures, so repeating a run with the same
configuration and seeds reproduces the tree byte for byte.
"""
from __future__ import annotations

import logging
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .acquisition import Transducers, ring_array, simulate_measurements
from .conventional import (Pulse, ToftConfig, das_beamform, synth_fmc_traces, toft_invert,
                           traveltimes)
from .errors import DivergedError, StructuralError
from .fwi import FwiConfig, frequency_march
from .grid import Grid2D
from .helmholtz import CbsForward, SolverConfig
from .io import dump_json, read_wtm1, sha256_file, sidecar_path, write_field, write_wtm1
from .metrics import rrmse, ssim
from .phantom import PhantomSpec, TissueTable, assign_sound_speed, generate_phantom

log = logging.getLogger(__name__)

TOOL = "wavetomo"


def tool_version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _fwi_config(section):
    keys = ("frequencies", "iterations", "blur_sigma", "c_min", "c_max", "estimate_source", "step_scale",
            "rounds", "mask_radius", "illumination_water", "line_search")
    return FwiConfig(**{k: section[k] for k in keys if k in section})


def _toft_config(section):
    keys = ("iterations", "smooth_sigma", "c_min", "c_max", "step_scale", "mask_radius", "converged_ratio",
            "line_search")
    return ToftConfig(**{k: section[k] for k in keys if k in section})


def _solver(base, override=None):
    d = dict(base)
    d.update(override or {})
    return SolverConfig(**d)


def build_phantom(full, seed=None):
    """Labels and sound-speed map described by a resolved config."""
    grid = Grid2D.centered(full["grid"]["nx"], full["grid"]["ny"], full["grid"]["dx"])
    ph_cfg = dict(full["phantom"])
    per_pixel = ph_cfg.pop("per_pixel", False)
    seeds = full["seeds"]
    spec = PhantomSpec(**ph_cfg, seed=seeds["phantom"] if seed is None else seed)
    phantom = generate_phantom(spec, grid)
    table = TissueTable.from_dict(full["tissue_table"]) if full["tissue_table"] else None
    c = assign_sound_speed(phantom, table, seed=seeds["speed"], per_pixel=per_pixel)
    return grid, phantom, c


def _plot(path, field, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(field, origin="lower", cmap="viridis")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def run_pipeline(config, out, seed=None, workers=None, plots=None):
    """Run phantom -> simulate -> reconstruct -> metrics under ``out``.

    ``config`` is a path or a dict. ``seed`` overrides the phantom seed and
    ``workers``/``plots`` override the config. Returns a summary dict.
    Configuration problems raise :class:`StructuralError` before anything
    is written; solver failures raise :class:`DivergedError`.
    """
    raw = cfgmod.load_config(config) if not isinstance(config, dict) else config
    full = cfgmod.resolve(raw)
    if seed is not None:
        full["seeds"]["phantom"] = int(seed)
    if workers is not None:
        full["workers"] = int(workers)
    if plots is not None:
        full["plots"] = bool(plots)
    out = Path(out)
    geo = full["geometry"]
    geom = ring_array(geo["n_elements"], geo["diameter"], source_stride=geo["source_stride"])
    grid, phantom, c_true = build_phantom(full)
    Transducers(geom, grid)  # binding check before writing anything

    out.mkdir(parents=True, exist_ok=True)
    artifacts = []

    def put(rel, data):
        p = write_field(out / rel, data, grid)
        artifacts.append(rel)
        return p

    def put_json(rel, obj):
        dump_json(obj, out / rel)
        artifacts.append(rel)

    put("phantom/labels.wtm1", phantom.labels)
    put("phantom/c_true.wtm1", c_true)
    put_json("phantom/spec.json", phantom.spec.to_dict())
    c_true = read_wtm1(out / "phantom/c_true.wtm1").data.astype(float)

    t0 = time.perf_counter()
    solver = _solver(full["solver"])
    meas = simulate_measurements(c_true, grid, geom, full["frequencies"], solver, workers=full["workers"])
    meas.meta["phantom_sha256"] = sha256_file(out / "phantom/c_true.wtm1")
    meas.save(out / "data/measurements.wtm1")
    artifacts += ["data/measurements.wtm1", "data/measurements.json"]
    log.info("simulated %d frequencies in %.1fs", len(full["frequencies"]), time.perf_counter() - t0)

    metrics = {}
    if full["fwi"]["enabled"]:
        t0 = time.perf_counter()
        fcfg = _fwi_config(full["fwi"])
        fwd = CbsForward(grid, _solver(full["solver"], full["fwi"]["solver"]), warm_start=True)
        c0 = np.full(grid.shape, full["fwi"]["c_init"])
        c_fwi, reports = frequency_march(meas, c0, fcfg, fwd, Transducers(geom, grid))
        put("fwi/c_fwi.wtm1", c_fwi)
        stages = []
        for r in reports:
            d = r.to_dict()
            d.pop("wall_time")
            stages.append(d)
        put_json("fwi/report.json", {"config": fcfg.to_dict(), "stages": stages})
        c_fwi = read_wtm1(out / "fwi/c_fwi.wtm1").data.astype(float)
        metrics["fwi"] = {"ssim": ssim(c_true, c_fwi), "rrmse": rrmse(c_true, c_fwi).mean}
        log.info("FWI done in %.1fs, SSIM %.3f", time.perf_counter() - t0, metrics["fwi"]["ssim"])
        aborted = [r for r in reports if r.aborted]
        if aborted:
            raise DivergedError(aborted[0].message)

    if full["toft"]["enabled"]:
        tcfg = _toft_config(full["toft"])
        t_obs, _ = traveltimes(c_true, geom, grid)
        write_wtm1(out / "data/times.wtm1", t_obs, grid.dx, grid.origin)
        dump_json({"geometry": geom.to_dict(), "grid": grid.to_dict()}, out / "data/times.json")
        artifacts += ["data/times.wtm1", "data/times.json"]
        t_obs = read_wtm1(out / "data/times.wtm1").data.astype(float)
        res = toft_invert(t_obs, geom, grid, np.full(grid.shape, full["toft"]["c_init"]), tcfg)
        put("toft/c_toft.wtm1", res.c)
        put_json("toft/report.json", {"config": tcfg.to_dict(), **res.to_dict()})
        c_toft = read_wtm1(out / "toft/c_toft.wtm1").data.astype(float)
        metrics["toft"] = {"ssim": ssim(c_true, c_toft), "rrmse": rrmse(c_true, c_toft).mean,
                           "converged": res.converged}

    if full["das"]["enabled"]:
        d = full["das"]
        pulse = Pulse(d["pulse_frequency"], d["sigma_cycles"])
        traces = synth_fmc_traces([tuple(s) for s in d["scatterers"]], geom, pulse, d["c0"], d["duration"], d["rate"])
        write_wtm1(out / "data/traces.wtm1", traces.data, 1.0 / traces.rate)
        dump_json({**traces.meta(), "geometry": geom.to_dict(), "grid": grid.to_dict(), "c0": d["c0"]},
                  out / "data/traces.json")
        artifacts += ["data/traces.wtm1", "data/traces.json"]
        put("das/image.wtm1", das_beamform(traces, geom, d["c0"], grid, envelope=d["envelope"]))

    put_json("metrics.json", metrics)

    if full["plots"]:
        (out / "plots").mkdir(exist_ok=True)
        for rel in [a for a in artifacts if a.endswith(".wtm1") and not a.startswith("data/")]:
            png = "plots/" + rel.replace("/", "_").replace(".wtm1", ".png")
            _plot(out / png, read_wtm1(out / rel).data, rel)
            artifacts.append(png)

    prov = {
        "tool": TOOL,
        "version": tool_version(),
        # worker count changes scheduling only, so it is left out to keep reruns byte-identical
        "config": {k: v for k, v in full.items() if k != "workers"},
        "config_hash": cfgmod.config_hash(full),
        "seeds": full["seeds"],
        "artifacts": {rel: sha256_file(out / rel) for rel in sorted(artifacts)},
    }
    dump_json(prov, out / "provenance.json")
    return {"metrics": metrics, "artifacts": sorted(artifacts), "config_hash": prov["config_hash"]}


def stack_slices(slice_files, spacing, out):
    """Stack 2D WTM1 slices into one 3-tensor; spacing goes to the sidecar."""
    if not slice_files:
        raise StructuralError("need at least one slice")
    if not spacing > 0:
        raise StructuralError("slice spacing must be positive")
    conts = [read_wtm1(f) for f in slice_files]
    first = conts[0]
    for f, c in zip(slice_files, conts):
        if c.data.ndim != 2 or c.data.shape != first.data.shape or c.dx != first.dx or c.origin != first.origin:
            raise StructuralError(f"slice {f} does not match the grid of {slice_files[0]}")
    vol = np.stack([c.data for c in conts])
    path = write_wtm1(out, vol, first.dx, first.origin)
    dump_json({"spacing": float(spacing), "slices": [Path(f).name for f in slice_files]}, sidecar_path(path))
    return path
