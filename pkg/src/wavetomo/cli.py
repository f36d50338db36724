"""``wavetomo`` command line: one binary, one subcommand per stage.

Exit status is 0 on success, 2 for configuration or input errors and 3
when an iterative solver diverges.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .acquisition import ArrayGeometry, MeasurementSet, Transducers, ring_array, simulate_measurements
from .conventional import FmcTraces, Pulse, das_beamform, toft_invert
from .errors import DivergedError, StructuralError
from .fwi import frequency_march
from .grid import Grid2D
from .helmholtz import CbsForward, SolverConfig
from .io import dump_json, load_json, read_wtm1, sha256_file, sidecar_path, write_field
from .metrics import MetricReport, rrmse, ssim
from .pipeline import _fwi_config, _toft_config, build_phantom, run_pipeline, stack_slices

log = logging.getLogger("wavetomo")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _section(path, name):
    """Resolved ``name`` section from a full run config or a bare section file."""
    raw = cfgmod.load_config(path) if path else {}
    if "grid" in raw:
        return cfgmod.resolve(raw)[name]
    cfgmod.validate_section(name, raw)
    return cfgmod._merge(cfgmod.DEFAULTS[name], raw)


def _sidecar(path):
    side = sidecar_path(path)
    if not side.exists():
        raise StructuralError(f"missing sidecar {side}")
    return load_json(side)


def _default_mask(section, geom, grid):
    if "mask_radius" not in section:
        section["mask_radius"] = 0.5 * geom.diameter - 3 * grid.dx
    return section


def cmd_phantom(args):
    full = cfgmod.resolve(cfgmod.load_config(args.config))
    grid, phantom, c = build_phantom(full, args.seed)
    out = Path(args.out)
    write_field(out / "labels.wtm1", phantom.labels, grid)
    write_field(out / "c.wtm1", c, grid)
    dump_json({"spec": phantom.spec.to_dict(), "grid": grid.to_dict(), "seeds": full["seeds"]},
              out / "spec.json")


def cmd_simulate(args):
    full = cfgmod.resolve(cfgmod.load_config(args.config))
    geo = full["geometry"]
    geom = ring_array(geo["n_elements"], geo["diameter"], source_stride=geo["source_stride"])
    if args.speed:
        cont = read_wtm1(args.speed)
        grid, c = cont.grid(), cont.data.astype(float)
        phantom_sha = sha256_file(args.speed)
    else:
        grid, _, c = build_phantom(full, args.seed)
        phantom_sha = None
    Transducers(geom, grid)
    workers = args.workers or full["workers"]
    meas = simulate_measurements(c, grid, geom, full["frequencies"], SolverConfig(**full["solver"]), workers)
    meas.meta["phantom_sha256"] = phantom_sha
    meas.save(Path(args.out) / "measurements.wtm1")


def cmd_fwi(args):
    meas = MeasurementSet.load(args.obs)
    if "grid" not in meas.meta:
        raise StructuralError("measurement sidecar has no grid")
    grid = Grid2D.from_dict(meas.meta["grid"])
    section = _section(args.config, "fwi")
    if "frequencies" not in section:
        section["frequencies"] = list(meas.frequencies)
    _default_mask(section, meas.geometry, grid)
    fcfg = _fwi_config(section)
    solver = SolverConfig(**{**meas.meta.get("solver", {}), **section.get("solver", {})})
    c0 = read_wtm1(args.c_init).data.astype(float) if args.c_init else np.full(grid.shape, section["c_init"])
    t0 = time.perf_counter()
    c, reports = frequency_march(meas, c0, fcfg, CbsForward(grid, solver, warm_start=True),
                                 Transducers(meas.geometry, grid))
    write_field(args.out, c, grid)
    if args.report:
        dump_json({"config": fcfg.to_dict(), "solver": solver.to_dict(),
                   "stages": [r.to_dict() for r in reports], "wall_time": time.perf_counter() - t0},
                  args.report)
    aborted = [r for r in reports if r.aborted]
    if aborted:
        raise DivergedError(aborted[0].message)


def cmd_toft(args):
    cont = read_wtm1(args.times)
    side = _sidecar(args.times)
    geom, grid = ArrayGeometry.from_dict(side["geometry"]), Grid2D.from_dict(side["grid"])
    section = _default_mask(_section(args.config, "toft"), geom, grid)
    tcfg = _toft_config(section)
    res = toft_invert(cont.data.astype(float), geom, grid, np.full(grid.shape, section["c_init"]), tcfg)
    write_field(args.out, res.c, grid)
    if args.report:
        dump_json({"config": tcfg.to_dict(), **res.to_dict()}, args.report)


def cmd_das(args):
    cont = read_wtm1(args.traces)
    side = _sidecar(args.traces)
    geom, grid = ArrayGeometry.from_dict(side["geometry"]), Grid2D.from_dict(side["grid"])
    traces = FmcTraces(cont.data.astype(float), side["rate"], Pulse(**side["pulse"]), tuple(side["sources"]))
    c0 = args.c0 or side.get("c0", 1500.0)
    img = das_beamform(traces, geom, c0, grid, envelope=args.envelope)
    write_field(args.out, img, grid)


def cmd_metrics(args):
    a, b = read_wtm1(args.truth).data, read_wtm1(args.pred).data
    if args.metric == "ssim":
        if a.ndim == 2:
            a, b = a[None], b[None]
        vals = [ssim(x, y) for x, y in zip(a, b)]
        rep = MetricReport("ssim", vals)
    else:
        rep = rrmse(a, b)
    text = dump_json(rep.to_dict(), args.out)
    if not args.out:
        sys.stdout.write(text)


def cmd_stack(args):
    stack_slices(args.slices, args.spacing, args.out)


def cmd_run(args):
    res = run_pipeline(args.config, args.out, seed=args.seed, workers=args.workers,
                       plots=True if args.plots else None)
    for stage, vals in res["metrics"].items():
        log.info("%s: %s", stage, ", ".join(f"{k}={v}" for k, v in vals.items()))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the phantom seed")
    common.add_argument("--workers", type=int, default=None, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="wavetomo", description="Frequency-domain ultrasound tomography.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="generate a phantom and its sound-speed map")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("simulate", parents=[common], help="simulate ring-array measurements")
    s.add_argument("--config", required=True)
    s.add_argument("--speed", help="sound-speed WTM1 map (default: phantom from the config)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fwi", parents=[common], help="full waveform inversion")
    s.add_argument("--obs", required=True, help="measurement WTM1 file")
    s.add_argument("--config", help="run config or bare fwi section")
    s.add_argument("--c-init", help="starting model WTM1 (default: constant c_init)")
    s.add_argument("--out", required=True, help="output model WTM1")
    s.add_argument("--report", help="stage report JSON")
    s.set_defaults(func=cmd_fwi)

    s = sub.add_parser("toft", parents=[common], help="traveltime tomography")
    s.add_argument("--times", required=True, help="traveltime WTM1 file with sidecar")
    s.add_argument("--config", help="run config or bare toft section")
    s.add_argument("--out", required=True, help="output model WTM1")
    s.add_argument("--report")
    s.set_defaults(func=cmd_toft)

    s = sub.add_parser("das", parents=[common], help="delay-and-sum beamforming")
    s.add_argument("--traces", required=True, help="FMC traces WTM1 file with sidecar")
    s.add_argument("--c0", type=float, default=None)
    s.add_argument("--envelope", action="store_true")
    s.add_argument("--out", required=True, help="output image WTM1")
    s.set_defaults(func=cmd_das)

    s = sub.add_parser("metrics", parents=[common], help="compare reconstructions with the truth")
    s.add_argument("--truth", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--metric", choices=["ssim", "rrmse"], default="ssim")
    s.add_argument("--out", default=None, help="report JSON (default: stdout)")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("stack", parents=[common], help="stack 2D slices into a volume")
    s.add_argument("slices", nargs="+")
    s.add_argument("--spacing", type=float, required=True, help="slice spacing in metres")
    s.add_argument("--out", required=True, help="output volume WTM1")
    s.set_defaults(func=cmd_stack)

    s = sub.add_parser("run", parents=[common], help="full pipeline from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--plots", action="store_true", help="also write PNG previews")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DivergedError as err:
        log.error("solver diverged: %s", err)
        return EXIT_DIVERGED
    except (StructuralError, FileNotFoundError, KeyError) as err:
        log.error("%s", err)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
