"""Baseline reconstructions: traveltime tomography and delay-and-sum imaging.

Traveltimes come from a first-order Godunov fast-sweeping eikonal solver
``|grad T| = 1 / c``. Rays are traced by descending ``grad T`` from the
receiver, and their per-node lengths (bilinear deposition) give the
sensitivity ``dt/dc = -length / c**2`` used by the tomography gradient.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from scipy import ndimage

from .errors import StructuralError
from .fwi import InversionState, LineSearch, disc_mask, ncg_step

log = logging.getLogger(__name__)


class TrappedRayError(RuntimeError):
    pass


@dataclass
class TraveltimeMap:
    T: np.ndarray
    source: tuple  # physical (x, y)
    element: int | None = None


@numba.njit(cache=True)
def _godunov(a, b, f):
    if abs(a - b) >= f:
        return min(a, b) + f
    return 0.5 * (a + b + np.sqrt(2 * f * f - (a - b) ** 2))


@numba.njit(cache=True)
def _sweep(T, fixed, h_slow, tol, max_sweeps):
    ny, nx = T.shape
    big = np.inf
    for it in range(max_sweeps):
        change = 0.0
        for d in range(4):
            di = 1 if d < 2 else -1
            dj = 1 if d % 2 == 0 else -1
            i0 = 0 if di > 0 else ny - 1
            j0 = 0 if dj > 0 else nx - 1
            for ii in range(ny):
                i = i0 + di * ii
                for jj in range(nx):
                    j = j0 + dj * jj
                    if fixed[i, j]:
                        continue
                    a = big
                    if i > 0:
                        a = T[i - 1, j]
                    if i < ny - 1 and T[i + 1, j] < a:
                        a = T[i + 1, j]
                    b = big
                    if j > 0:
                        b = T[i, j - 1]
                    if j < nx - 1 and T[i, j + 1] < b:
                        b = T[i, j + 1]
                    if a == big and b == big:
                        continue
                    t = _godunov(a, b, h_slow[i, j])
                    if t < T[i, j]:
                        if T[i, j] < big:
                            dt = T[i, j] - t
                            if dt > change:
                                change = dt
                        else:
                            change = big
                        T[i, j] = t
        if change <= tol:
            return it + 1
    return max_sweeps


def eikonal_solve(c, source, grid, init_radius=3.0, tol=1e-12, max_sweeps=200):
    """First-arrival traveltimes from a point ``source = (x, y)``.

    Nodes within ``init_radius`` cells of the source are initialised with
    the straight-ray time using the local slowness and held fixed; the rest
    follows from Godunov upwind fast sweeping in four alternating orders
    until the largest change in a full pass is at most ``tol`` seconds.
    """
    c = np.asarray(c, dtype=float)
    grid.check(c)
    if np.any(c <= 0):
        raise StructuralError("sound speed must be positive")
    if not grid.contains(*source):
        raise StructuralError("source outside grid")
    X, Y = grid.mesh()
    dist = np.hypot(X - source[0], Y - source[1])
    slow = 1.0 / c
    row, col = grid.to_index(*source)
    s0 = float(ndimage.map_coordinates(slow, [[row], [col]], order=1, mode="nearest")[0])
    fixed = dist <= init_radius * grid.dx
    T = np.full(grid.shape, np.inf)
    # straight-ray time with slowness averaged between source and node
    T[fixed] = dist[fixed] * 0.5 * (s0 + slow[fixed])
    _sweep(T, fixed, slow * grid.dx, tol, max_sweeps)
    return TraveltimeMap(T, (float(source[0]), float(source[1])))


@numba.njit(cache=True)
def _bilinear(f, r, c):
    ny, nx = f.shape
    r0 = min(max(int(np.floor(r)), 0), ny - 2)
    c0 = min(max(int(np.floor(c)), 0), nx - 2)
    fr = r - r0
    fc = c - c0
    return ((1 - fr) * (1 - fc) * f[r0, c0] + (1 - fr) * fc * f[r0, c0 + 1]
            + fr * (1 - fc) * f[r0 + 1, c0] + fr * fc * f[r0 + 1, c0 + 1])


@numba.njit(cache=True)
def _deposit(L, r, c, length):
    ny, nx = L.shape
    r0 = min(max(int(np.floor(r)), 0), ny - 2)
    c0 = min(max(int(np.floor(c)), 0), nx - 2)
    fr = r - r0
    fc = c - c0
    L[r0, c0] += (1 - fr) * (1 - fc) * length
    L[r0, c0 + 1] += (1 - fr) * fc * length
    L[r0 + 1, c0] += fr * (1 - fc) * length
    L[r0 + 1, c0 + 1] += fr * fc * length


@numba.njit(cache=True)
def _trace(gy, gx, r, c, sr, sc, h, max_steps, L, path):
    ny, nx = gy.shape
    n = 0
    path[0, 0] = r
    path[0, 1] = c
    while (r - sr) ** 2 + (c - sc) ** 2 > 1.0:
        if n >= max_steps:
            return -1
        vy = _bilinear(gy, r, c)
        vx = _bilinear(gx, r, c)
        norm = np.sqrt(vy * vy + vx * vx)
        if norm == 0:
            return -1
        r1 = min(max(r - h * vy / norm, 0.0), ny - 1.0)
        c1 = min(max(c - h * vx / norm, 0.0), nx - 1.0)
        seg = np.sqrt((r1 - r) ** 2 + (c1 - c) ** 2)
        _deposit(L, 0.5 * (r + r1), 0.5 * (c + c1), seg)
        r, c = r1, c1
        n += 1
        path[n, 0] = r
        path[n, 1] = c
    seg = np.sqrt((sr - r) ** 2 + (sc - c) ** 2)
    _deposit(L, 0.5 * (r + sr), 0.5 * (c + sc), seg)
    n += 1
    path[n, 0] = sr
    path[n, 1] = sc
    return n + 1


def trace_ray(tmap, receiver, grid):
    """Ray from ``receiver`` back to the source of ``tmap``.

    Steps of ``0.5 dx`` follow ``-grad T`` until within one cell of the
    source, then a final segment closes the path. Returns the polyline as
    physical ``(x, y)`` points and the per-node length field (metres).
    Raises :class:`TrappedRayError` after ``10 (nx + ny)`` steps.
    """
    if not grid.contains(*receiver):
        raise StructuralError("receiver outside grid")
    gy, gx = np.gradient(tmap.T)
    max_steps = 10 * (grid.nx + grid.ny)
    L = np.zeros(grid.shape)
    path = np.empty((max_steps + 2, 2))
    r, c = grid.to_index(*receiver)
    sr, sc = grid.to_index(*tmap.source)
    n = _trace(gy, gx, float(r), float(c), float(sr), float(sc), 0.5, max_steps, L, path)
    if n < 0:
        raise TrappedRayError(f"ray from {receiver} did not reach the source in {max_steps} steps")
    pts = path[:n]
    xy = np.stack([grid.origin[0] + pts[:, 1] * grid.dx, grid.origin[1] + pts[:, 0] * grid.dx], axis=1)
    return xy, L * grid.dx


def traveltimes(c, geom, grid):
    """``(n_src, n_elements)`` first-arrival times and the traveltime maps."""
    maps, rows = [], []
    rr, cc = grid.to_index(geom.positions[:, 0], geom.positions[:, 1])
    for k in geom.source_indices:
        m = eikonal_solve(c, tuple(geom.positions[k]), grid)
        m.element = k
        maps.append(m)
        rows.append(ndimage.map_coordinates(m.T, [rr, cc], order=1, mode="nearest"))
    return np.array(rows), maps


@dataclass
class ToftConfig:
    iterations: int = 30
    smooth_sigma: float = 2.0
    c_min: float = 1300.0
    c_max: float = 3500.0
    step_scale: float = 20.0
    mask_radius: float | None = None
    converged_ratio: float = 1e-3  # J/J0 at or below this counts as converged
    line_search: LineSearch = field(default_factory=LineSearch)

    def __post_init__(self):
        if isinstance(self.line_search, dict):
            self.line_search = LineSearch(**self.line_search)
        if self.iterations < 0 or self.smooth_sigma < 0 or self.step_scale <= 0:
            raise StructuralError(f"invalid ToFT config {self}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ToftResult:
    c: np.ndarray
    misfit: list
    converged: bool
    dropped: list

    def to_dict(self):
        return {"misfit": self.misfit, "converged": self.converged, "dropped_rays": self.dropped}


class ToftProblem:
    """Traveltime misfit ``0.5 sum (t_cal - t_obs)**2`` over pairs ``s != r``."""

    def __init__(self, t_obs, geom, grid, smooth_sigma=0.0):
        self.t_obs = np.asarray(t_obs, dtype=float)
        self.geom = geom
        self.grid = grid
        self.sigma = smooth_sigma
        self.pairs = np.array([[k != r for r in range(geom.n_elements)] for k in geom.source_indices])
        self.dropped = []

    def value(self, c):
        t, _ = traveltimes(c, self.geom, self.grid)
        return 0.5 * float(np.sum((t - self.t_obs)[self.pairs] ** 2))

    def value_and_grad(self, c):
        t, maps = traveltimes(c, self.geom, self.grid)
        res = np.where(self.pairs, t - self.t_obs, 0.0)
        J = 0.5 * float(np.sum(res ** 2))
        sens = np.zeros(self.grid.shape)
        dropped = 0
        for k, m in enumerate(maps):
            for r in range(self.geom.n_elements):
                if not self.pairs[k, r] or res[k, r] == 0:
                    continue
                try:
                    _, L = trace_ray(m, tuple(self.geom.positions[r]), self.grid)
                except TrappedRayError:
                    dropped += 1
                    continue
                sens += res[k, r] * L
        if dropped:
            log.warning("ToFT: %d trapped rays dropped this iteration", dropped)
        self.dropped.append(dropped)
        # dJ/dc per node; convert to a density so it pairs with dx**2 weights
        g = -sens / np.asarray(c) ** 2 / self.grid.dx ** 2
        if self.sigma > 0:
            g = ndimage.gaussian_filter(g, self.sigma, mode="nearest")
        return J, g


def toft_invert(t_obs, geom, grid, c_init, cfg=None):
    """Traveltime tomography by NCG on the ray-linearised misfit."""
    cfg = cfg or ToftConfig()
    prob = ToftProblem(t_obs, geom, grid, cfg.smooth_sigma)
    mask = disc_mask(grid, cfg.mask_radius) if cfg.mask_radius else None
    bounds = (cfg.c_min, cfg.c_max)
    c0 = np.clip(np.asarray(c_init, dtype=float), *bounds)
    J, g = prob.value_and_grad(c0)
    state = InversionState(c0, J, g)
    for _ in range(cfg.iterations):
        if state.value == 0:
            break
        state, _info = ncg_step(state, prob.value_and_grad, cfg.line_search, cfg.step_scale,
                                bounds, mask, grid.dx ** 2)
    ratio = state.value / state.J0 if state.value > 0 else 0.0
    converged = bool(ratio <= cfg.converged_ratio)
    if not converged:
        log.warning("ToFT did not converge: J/J0 = %.3g", ratio)
    return ToftResult(state.x, [float(h) for h in state.history], converged, prob.dropped)


@dataclass
class Pulse:
    frequency: float
    sigma_cycles: float = 1.0

    @property
    def sigma(self):
        return self.sigma_cycles / self.frequency

    def __call__(self, t):
        return np.exp(-0.5 * (t / self.sigma) ** 2) * np.cos(2 * np.pi * self.frequency * t)


@dataclass
class FmcTraces:
    data: np.ndarray  # (n_src, n_rcv, n_t)
    rate: float
    pulse: Pulse
    sources: tuple

    def __post_init__(self):
        if self.rate <= 2 * self.pulse.frequency:
            raise StructuralError("sample rate must exceed twice the pulse frequency")
        if self.data.shape[0] != len(self.sources):
            raise StructuralError("trace count does not match sources")

    @property
    def times(self):
        return np.arange(self.data.shape[-1]) / self.rate

    def meta(self):
        return {"rate": self.rate, "pulse": asdict(self.pulse), "sources": list(self.sources)}


def _delays(geom, x, y, c0):
    """Straight-ray delays ``(n_src, n_elements, *x.shape)``."""
    pos = geom.positions
    d = np.hypot(x[None] - pos[:, 0].reshape((-1,) + (1,) * x.ndim),
                 y[None] - pos[:, 1].reshape((-1,) + (1,) * x.ndim))
    src = d[list(geom.source_indices)]
    return (src[:, None] + d[None]) / c0


def synth_fmc_traces(scatterers, geom, pulse, c0, duration, rate):
    """Single-scattering full-matrix-capture traces.

    ``scatterers`` is a sequence of ``(x, y, amplitude)``.
    """
    n_t = int(round(duration * rate))
    t = np.arange(n_t) / rate
    data = np.zeros((geom.n_sources, geom.n_elements, n_t))
    for x, y, amp in scatterers:
        tau = _delays(geom, np.array(x, dtype=float), np.array(y, dtype=float), c0)
        if tau.max() > duration:
            raise StructuralError("trace duration does not cover every echo")
        data += amp * pulse(t[None, None, :] - tau[..., None])
    return FmcTraces(data, float(rate), pulse, geom.source_indices)


def das_beamform(traces, geom, c0, grid, envelope=False):
    """Delay-and-sum image ``I(x) = sum_s sum_r d_sr(tau_sr(x))``.

    Samples are linearly interpolated; delays past the end of a trace
    contribute zero. With ``envelope`` the magnitude of the pair formed by
    this sum and the sum delayed by a quarter period is returned.
    """
    X, Y = grid.mesh()
    n_t = traces.data.shape[-1]

    def delayed_sum(shift):
        img = np.zeros(grid.size)
        for k, s in enumerate(traces.sources):
            ds = np.hypot(X - geom.positions[s, 0], Y - geom.positions[s, 1]).ravel()
            for r in range(geom.n_elements):
                dr = np.hypot(X - geom.positions[r, 0], Y - geom.positions[r, 1]).ravel()
                idx = ((ds + dr) / c0 + shift) * traces.rate
                img += np.interp(idx, np.arange(n_t), traces.data[k, r], left=0.0, right=0.0)
        return img.reshape(grid.shape)

    img = delayed_sum(0.0)
    if envelope:
        q = delayed_sum(0.25 / traces.pulse.frequency)
        return np.hypot(img, q)
    return img
