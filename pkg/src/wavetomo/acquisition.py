"""Ring-array acquisition: geometry, point sources, receiver sampling, datasets.

Receivers sample the wavefield by bilinear interpolation. Point sources are
injected with the transpose of that interpolation stencil scaled by
``1 / dx**2``, so an element sitting on a grid node becomes a single-cell
discrete delta and source/receiver exchange is exactly reciprocal.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DivergedError, StructuralError
from .grid import Grid2D, bilinear_weights, nearest_weights
from .helmholtz import CbsForward, SolverConfig
from .io import dump_json, load_json, read_wtm1, sha256_file, sidecar_path, write_wtm1

log = logging.getLogger(__name__)

# Eight-stage schedule for limb data (the breast default drops 0.25 MHz), Hz.
LIMB_FREQUENCIES = (0.25e6, 0.30e6, 0.35e6, 0.40e6, 0.45e6, 0.50e6, 0.55e6, 0.60e6)


@dataclass
class ArrayGeometry:
    n_elements: int
    diameter: float
    center: tuple = (0.0, 0.0)
    source_indices: tuple = ()
    positions: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.positions is None:
            ang = 2 * np.pi * np.arange(self.n_elements) / self.n_elements
            r = 0.5 * self.diameter
            self.positions = np.stack([self.center[0] + r * np.cos(ang),
                                       self.center[1] + r * np.sin(ang)], axis=1)
        self.source_indices = tuple(int(i) for i in self.source_indices)
        if any(i < 0 or i >= self.n_elements for i in self.source_indices):
            raise StructuralError("source index outside [0, n_elements)")

    @property
    def n_sources(self):
        return len(self.source_indices)

    def check_grid(self, grid, margin=0):
        """Raise unless every element lies inside ``grid`` with ``margin`` nodes to spare."""
        if not grid.contains(self.positions[:, 0], self.positions[:, 1], margin):
            raise StructuralError("array geometry does not fit inside the grid")

    def to_dict(self):
        return {"n_elements": self.n_elements, "diameter": self.diameter,
                "center": list(self.center), "source_indices": list(self.source_indices)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n_elements"]), float(d["diameter"]), tuple(d["center"]),
                   tuple(d["source_indices"]))


def ring_array(n_elements, diameter, center=(0.0, 0.0), source_stride=1):
    """Uniform ring; element ``j`` at angle ``2 pi j / n``; every ``stride``-th element transmits."""
    if n_elements < 3:
        raise StructuralError("a ring needs at least 3 elements")
    if source_stride < 1:
        raise StructuralError("source_stride must be >= 1")
    if diameter <= 0:
        raise StructuralError("diameter must be positive")
    return ArrayGeometry(n_elements, float(diameter), tuple(center),
                         tuple(range(0, n_elements, source_stride)))


def sampling_matrix(geom, grid, mode="bilinear"):
    """Sparse ``(n_elements, ny*nx)`` operator mapping a field to element values."""
    stencil = {"bilinear": bilinear_weights, "nearest": nearest_weights}[mode]
    rows, cols, w = stencil(grid, geom.positions[:, 0], geom.positions[:, 1])
    flat = rows * grid.nx + cols
    r = np.repeat(np.arange(geom.n_elements), flat.shape[1])
    return sp.csr_matrix((w.ravel(), (r, flat.ravel())), shape=(geom.n_elements, grid.size))


class Transducers:
    """Sampling and injection operators of ``geom`` bound to ``grid``."""

    def __init__(self, geom, grid, mode="bilinear", margin=1):
        geom.check_grid(grid, margin)
        self.geom = geom
        self.grid = grid
        self.R = sampling_matrix(geom, grid, mode)
        self.RT = self.R.T.tocsr()

    def sample(self, u):
        """Element values of one field or a batch, shape ``batch + (n_elements,)``."""
        u = np.asarray(u)
        flat = u.reshape(-1, self.grid.size)
        return (self.R @ flat.T).T.reshape(u.shape[:-2] + (self.geom.n_elements,))

    def inject(self, weights):
        """Sum of discrete deltas ``sum_i weights[..., i] delta(x - x_i)``."""
        weights = np.asarray(weights)
        flat = weights.reshape(-1, self.geom.n_elements)
        out = (self.RT @ flat.T).T / self.grid.dx ** 2
        return out.reshape(weights.shape[:-1] + self.grid.shape)

    def sources(self, indices=None):
        idx = self.geom.source_indices if indices is None else indices
        return self.inject(np.eye(self.geom.n_elements)[list(idx)])


def point_source_field(geom, element_index, grid, mode="nearest"):
    """Unit-intensity discrete delta at one element.

    The default puts ``1 / dx**2`` on the node nearest the element. With
    ``mode="bilinear"`` the mass is spread over the four surrounding nodes,
    which is the injection used by the simulators.
    """
    if not 0 <= element_index < geom.n_elements:
        raise StructuralError("element index out of range")
    t = Transducers(geom, grid, mode, margin=0)
    return t.sources([element_index])[0]


@dataclass
class MeasurementSet:
    frequencies: tuple
    sources: tuple
    data: np.ndarray  # (n_freq, n_src, n_elements) complex
    geometry: ArrayGeometry
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frequencies = tuple(float(f) for f in self.frequencies)
        self.sources = tuple(int(s) for s in self.sources)
        expect = (len(self.frequencies), len(self.sources), self.geometry.n_elements)
        if self.data.shape != expect:
            raise StructuralError(f"measurement shape {self.data.shape} != {expect}")
        if not np.all(np.isfinite(self.data)):
            raise StructuralError("measurements contain non-finite values")

    def at(self, frequency):
        try:
            k = self.frequencies.index(float(frequency))
        except ValueError:
            raise StructuralError(f"frequency {frequency} not in measurement set") from None
        return self.data[k]

    def save(self, path):
        path = Path(path)
        write_wtm1(path, self.data, 0.0)
        side = {"frequencies": list(self.frequencies), "sources": list(self.sources),
                "geometry": self.geometry.to_dict(), **self.meta}
        dump_json(side, sidecar_path(path))
        return path

    @classmethod
    def load(cls, path):
        cont = read_wtm1(path)
        side = load_json(sidecar_path(path))
        meta = {k: v for k, v in side.items() if k not in ("frequencies", "sources", "geometry")}
        return cls(tuple(side["frequencies"]), tuple(side["sources"]), cont.data,
                   ArrayGeometry.from_dict(side["geometry"]), meta)


def simulate_frequency(c, grid, geom, frequency, solver=None, fwd=None):
    """Element data ``(n_src, n_elements)`` for every source at one frequency."""
    trans = Transducers(geom, grid)
    fwd = fwd or CbsForward(grid, solver)
    try:
        u = fwd(c, trans.sources(), 2 * np.pi * frequency)
    except DivergedError as err:
        raise DivergedError(f"solve failed at f={frequency} Hz: {err}", err.iteration, err.report) from err
    return trans.sample(u)


def _harness_task(args):
    c, grid_d, geom_d, f, solver_d = args
    grid = Grid2D.from_dict(grid_d)
    return simulate_frequency(c, grid, ArrayGeometry.from_dict(geom_d), f, SolverConfig.from_dict(solver_d))


def _run_tasks(tasks, workers):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_harness_task, tasks))
    return [_harness_task(t) for t in tasks]


def simulate_measurements(c, grid, geom, frequencies, solver=None, workers=1):
    """Frequency-major stack of element data for all sources.

    Frequencies are independent tasks; with ``workers > 1`` they run in
    separate processes and are gathered in schedule order.
    """
    solver = solver or SolverConfig()
    c = np.asarray(c, dtype=float)
    tasks = [(c, grid.to_dict(), geom.to_dict(), float(f), solver.to_dict()) for f in frequencies]
    data = np.stack(_run_tasks(tasks, workers))
    return MeasurementSet(tuple(frequencies), geom.source_indices, data, geom,
                          {"solver": solver.to_dict(), "grid": grid.to_dict()})


def _complete(out_path):
    if not out_path.exists() or not sidecar_path(out_path).exists():
        return False
    try:
        MeasurementSet.load(out_path)
    except Exception:
        return False
    return True


def dataset_harness(phantom_dir, geom, frequencies, out_dir, workers=1, solver=None):
    """Simulate every ``*.wtm1`` sound-speed map in ``phantom_dir``.

    Writes one measurement file per phantom plus ``manifest.json`` with
    checksums. Complete outputs are skipped; partial or corrupt ones are
    re-simulated; unreadable phantoms are logged and skipped. Tasks are one
    (phantom, frequency) pair each and results are assembled in a fixed
    order, so output bytes do not depend on ``workers``.
    """
    solver = solver or SolverConfig()
    phantom_dir, out_dir = Path(phantom_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs, entries, errors = [], {}, {}
    for path in sorted(phantom_dir.glob("*.wtm1")):
        out_path = out_dir / f"{path.stem}_meas.wtm1"
        try:
            cont = read_wtm1(path)
            grid = cont.grid()
            c = np.asarray(cont.data, dtype=float)
            if c.ndim != 2 or np.any(c <= 0):
                raise StructuralError("not a positive 2D sound-speed map")
            geom.check_grid(grid, 1)
        except Exception as err:  # noqa: BLE001 - any unreadable input is skipped
            log.error("skipping phantom %s: %s", path.name, err)
            errors[path.name] = str(err)
            continue
        if _complete(out_path):
            entries[path.name] = out_path
            continue
        jobs.append((path, out_path, c, grid))

    tasks = [(c, grid.to_dict(), geom.to_dict(), f, solver.to_dict())
             for _, _, c, grid in jobs for f in frequencies]
    results = _run_tasks(tasks, workers)

    nf = len(frequencies)
    for j, (path, out_path, c, grid) in enumerate(jobs):
        data = np.stack(results[j * nf:(j + 1) * nf])
        meas = MeasurementSet(tuple(frequencies), geom.source_indices, data, geom,
                              {"solver": solver.to_dict(), "grid": grid.to_dict(),
                               "phantom": path.name, "phantom_sha256": sha256_file(path)})
        meas.save(out_path)
        entries[path.name] = out_path

    manifest = {
        "entries": [{"phantom": name, "output": p.name, "sha256": sha256_file(p)}
                    for name, p in sorted(entries.items())],
        "errors": errors,
        "frequencies": list(frequencies),
    }
    dump_json(manifest, out_dir / "manifest.json")
    manifest["solves"] = len(tasks) * geom.n_sources
    return manifest
