"""Adjoint-state full waveform inversion.

Conventions
-----------
Forward fields solve ``[lap + k2] u_k = -s_k`` with ``s_k`` the discrete
delta of source ``k``. Receiver data are ``d_k = R u_k`` (bilinear sampling)
and the misfit is ``J = sum_k ||d_k - y_k||**2``.

With residual ``r_k = d_k - y_k`` the adjoint source is
``2 R^T conj(r_k) / dx**2`` and ``psi_k`` is its forward solve. The adjoint
field is ``lam_k = conj(psi_k)``, so that

    dJ/dc = -2 omega**2 sum_k Re(conj(lam_k) u_k) / c**3

is a density: ``dJ = sum(grad * dc) * dx**2``. Because the operator is
complex symmetric, ``psi_k = sum_i 2 conj(r_ki) U_i`` where ``U_i`` is the
forward field of element ``i`` used as a source; when every element
transmits, no extra solves are needed.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DivergedError, StructuralError

log = logging.getLogger(__name__)


def misfit(y_sim, y_obs):
    """``sum |y_sim - y_obs|**2`` over all sources and receivers."""
    y_sim, y_obs = np.asarray(y_sim), np.asarray(y_obs)
    if y_sim.shape != y_obs.shape:
        raise StructuralError(f"shape mismatch {y_sim.shape} vs {y_obs.shape}")
    return float(np.sum(np.abs(y_sim - y_obs) ** 2))


def adjoint_source(u_rcv, y_obs, trans):
    """``2 sum_i conj(u_i - y_i) delta(x - x_i)`` per source, shape ``(n_src, ny, nx)``."""
    r = np.asarray(u_rcv) - np.asarray(y_obs)
    return 2 * trans.inject(np.conj(r))


def adjoint_via_reciprocity(U, residual, fwd=None, c=None, omega=None, trans=None):
    """Adjoint fields ``lam_k`` as combinations of forward fields.

    ``U`` holds the forward field of every element acting as a source, in
    element order (shape ``(n_elements, ny, nx)``), and ``residual`` has
    shape ``(n_src, n_elements)``. If ``U`` is missing or incomplete the
    adjoint sources are solved directly with ``fwd`` instead.
    """
    residual = np.asarray(residual)
    n_el = residual.shape[-1]
    if U is not None and len(U) == n_el:
        psi = 2 * np.tensordot(np.conj(residual), U, axes=(1, 0))
        return np.conj(psi)
    if fwd is None or trans is None or c is None or omega is None:
        raise StructuralError("forward fields for every element are missing and no solver was given")
    psi = fwd(c, 2 * trans.inject(np.conj(residual)), omega)
    return np.conj(psi)


def gradient(c, u, lam, omega):
    """``-2 omega**2 sum_k Re(conj(lam_k) u_k) / c**3``."""
    c = np.asarray(c, dtype=float)
    if np.any(c <= 0):
        raise StructuralError("sound speed must be positive")
    prod = np.sum(np.conj(lam) * u, axis=0) if np.ndim(u) == 3 else np.conj(lam) * u
    return -2 * omega ** 2 * prod.real / c ** 3


def estimate_source_scale(u_rcv, y):
    """Least-squares complex scale ``s`` minimising ``||y - s u||`` (per source if batched)."""
    u_rcv, y = np.asarray(u_rcv), np.asarray(y)
    den = np.sum(np.abs(u_rcv) ** 2, axis=-1)
    if np.any(den == 0):
        raise StructuralError("zero simulated data: source scale undefined")
    return np.sum(y * np.conj(u_rcv), axis=-1) / den


class FwiProblem:
    """Misfit and gradient at one frequency for a fixed acquisition."""

    def __init__(self, y_obs, omega, fwd, trans, estimate_source=True, key=None):
        self.y_obs = np.asarray(y_obs)
        self.omega = float(omega)
        self.fwd = fwd
        self.trans = trans
        self.estimate_source = estimate_source
        self.key = key
        geom = trans.geom
        self.full = tuple(geom.source_indices) == tuple(range(geom.n_elements))
        self.solves = 0
        self.illumination = None

    def value_and_grad(self, c):
        """Misfit and gradient density at model ``c``; also returns the source scales."""
        src = self.trans.sources()
        u = self.fwd(c, src, self.omega, key=self.key)
        self.solves += 1
        d = self.trans.sample(u)
        scale = estimate_source_scale(d, self.y_obs) if self.estimate_source else np.ones(len(d), complex)
        d = scale[:, None] * d
        u = scale[:, None, None] * u
        self.illumination = np.sum(np.abs(u) ** 2, axis=0)
        r = d - self.y_obs
        J = misfit(d, self.y_obs)
        if self.full:
            # forward field of element i is u_i / scale_i
            lam = adjoint_via_reciprocity(u / scale[:, None, None], r)
        else:
            lam = adjoint_via_reciprocity(None, r, self._fwd_plain, c, self.omega, self.trans)
            self.solves += 1
        return J, gradient(c, u, lam, self.omega), scale

    def _fwd_plain(self, c, rho, omega):
        return self.fwd(c, rho, omega)


@dataclass
class LineSearch:
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 6
    interpolate: bool = True

    def __post_init__(self):
        if not (0 < self.c1 < 1 and 0 < self.shrink < 1 and self.max_backtracks >= 0):
            raise StructuralError(f"invalid line search {self}")


@dataclass
class InversionState:
    """Model plus NCG memory and the stage normalisation constants."""
    x: np.ndarray
    value: float
    grad: np.ndarray
    J0: float = None
    g0: float = None
    g_prev: np.ndarray = None
    d_prev: np.ndarray = None
    alpha: float = 1.0
    stage: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.J0 is None:
            self.J0 = self.value if self.value > 0 else 1.0
        if self.g0 is None:
            gmax = float(np.max(np.abs(self.grad)))
            self.g0 = gmax if gmax > 0 else 1.0
        self.history.append(self.value / self.J0)

    def reset_memory(self):
        self.g_prev = None
        self.d_prev = None


def pr_plus_beta(g, g_prev, weight=1.0, precond=None):
    """Polak-Ribiere+ coefficient, in the ``precond``-weighted inner product if given."""
    if g_prev is None:
        return 0.0
    m = 1.0 if precond is None else precond
    den = np.sum(m * g_prev * g_prev) * weight
    if den == 0:
        return 0.0
    return max(0.0, float(np.sum(m * g * (g - g_prev)) * weight / den))


def illumination_preconditioner(illumination, water, mask=None):
    """Diagonal inverse pseudo-Hessian ``water / (P / max(P) + water)``.

    ``P`` is the summed forward-field energy. Values lie in (0, 1]: weakly
    illuminated nodes keep their gradient, strongly illuminated ones (near
    the transducers) are damped.
    """
    P = illumination if mask is None else illumination * mask
    pmax = float(P.max())
    if pmax <= 0:
        return np.ones_like(P)
    return water / (P / pmax + water)


def ncg_step(state, value_and_grad, ls=None, step_scale=1.0, bounds=None, mask=None, weight=1.0,
             precond=None):
    """One Polak-Ribiere+ NCG iteration with Armijo backtracking.

    The objective and gradient are normalised by ``state.J0`` and
    ``state.g0`` (max-norm). The search direction is
    ``d = -g / g0 + beta d_prev`` and the trial model is
    ``x + alpha * step_scale * d``, projected onto ``bounds``. The first
    trial uses ``alpha = state.alpha`` (1 at a cold start). With
    ``interpolate`` the minimiser of the parabola through ``phi(0)``,
    ``phi'(0)`` and the last trial is tried as well, and the lowest
    Armijo-acceptable point wins. ``weight`` is the quadrature weight of
    the inner product (``dx**2`` for gradient densities). A diagonal
    ``precond`` turns the direction into ``-precond * g / g0 + beta d_prev``;
    the Armijo slope always uses the true gradient.

    Returns ``(state, info)``; a failed search leaves the model untouched
    and clears the NCG memory.
    """
    ls = ls or LineSearch()
    g = state.grad / state.g0
    if not np.all(np.isfinite(g)):
        raise StructuralError("non-finite gradient")
    if mask is not None:
        g = g * mask
    beta = pr_plus_beta(g, state.g_prev, weight, precond)
    z = g if precond is None else precond * g
    d = -z if state.d_prev is None else -z + beta * state.d_prev
    slope = float(np.sum(state.grad * d) * weight) * step_scale / state.J0
    if slope >= 0:
        d, beta = -z, 0.0
        slope = float(np.sum(state.grad * d) * weight) * step_scale / state.J0
    phi0 = state.value / state.J0

    def trial(a):
        x = state.x + a * step_scale * d
        if bounds is not None:
            x = np.clip(x, *bounds)
        J, gr = value_and_grad(x)[:2]
        return x, J / state.J0, J, gr

    best = None
    evals = 0
    a = state.alpha
    for _ in range(ls.max_backtracks + 1):
        x, phi, J, gr = trial(a)
        evals += 1
        ok = np.isfinite(phi) and phi <= phi0 + ls.c1 * a * slope
        curv = phi - phi0 - slope * a
        a_star = -slope * a * a / (2 * curv) if (np.isfinite(phi) and curv > 0) else None
        if ok:
            best = (phi, a, x, J, gr)
            if ls.interpolate and a_star is not None and abs(a_star - a) > 1e-3 * a:
                a2 = float(np.clip(a_star, 0.1 * a, 4 * a))
                x2, phi2, J2, gr2 = trial(a2)
                evals += 1
                if np.isfinite(phi2) and phi2 < phi and phi2 <= phi0 + ls.c1 * a2 * slope:
                    best = (phi2, a2, x2, J2, gr2)
            break
        if a_star is not None and ls.interpolate:
            a = float(np.clip(a_star, 0.1 * a, ls.shrink * a))
        else:
            a *= ls.shrink

    info = {"evaluations": evals, "beta": beta}
    if best is None:
        state.reset_memory()
        state.alpha = 1.0
        info.update(accepted=False, alpha=0.0)
        state.history.append(state.value / state.J0)
        return state, info
    phi, a, x, J, gr = best
    state.g_prev = g
    state.d_prev = d
    state.x, state.value, state.grad = x, J, gr
    state.alpha = float(np.clip(a, 0.05, 10.0))
    state.history.append(phi)
    info.update(accepted=True, alpha=a)
    return state, info


@dataclass
class FwiConfig:
    frequencies: tuple = (0.3e6, 0.35e6, 0.4e6, 0.45e6, 0.5e6, 0.55e6, 0.6e6)
    iterations: int = 20
    blur_sigma: float = 2.0
    c_min: float = 1300.0
    c_max: float = 3500.0
    estimate_source: bool = True
    step_scale: float = 20.0
    rounds: int = 1
    mask_radius: float | None = None
    illumination_water: float | None = None
    line_search: LineSearch = field(default_factory=LineSearch)

    def __post_init__(self):
        self.frequencies = tuple(float(f) for f in self.frequencies)
        if isinstance(self.line_search, dict):
            self.line_search = LineSearch(**self.line_search)
        if not self.frequencies or any(b <= a for a, b in zip(self.frequencies, self.frequencies[1:])):
            raise StructuralError("frequency schedule must be non-empty and strictly ascending")
        if self.blur_sigma < 0 or self.iterations < 0 or self.rounds < 1:
            raise StructuralError("blur_sigma, iterations must be >= 0 and rounds >= 1")
        if not 0 < self.c_min < self.c_max:
            raise StructuralError("need 0 < c_min < c_max")
        if self.step_scale <= 0:
            raise StructuralError("step_scale must be positive")
        if self.illumination_water is not None and self.illumination_water <= 0:
            raise StructuralError("illumination_water must be positive or None")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class StageReport:
    round: int
    frequency: float
    misfit: list
    iterations: int
    accepted: int
    solves: int
    wall_time: float
    aborted: bool = False
    message: str = ""

    def to_dict(self):
        return asdict(self)


def disc_mask(grid, radius):
    X, Y = grid.mesh()
    return (np.hypot(X, Y) <= radius).astype(float)


def frequency_march(y_obs, c_init, cfg, fwd, trans):
    """Frequency-marching inversion.

    Each stage resets the NCG memory and normalisation, runs
    ``cfg.iterations`` NCG steps at one frequency, then blurs the result to
    initialise the next stage (outside the mask the model is held at
    ``c_init``). With ``rounds > 1`` the whole schedule is repeated.
    With ``illumination_water`` set, each stage fixes an illumination
    preconditioner from its starting model.
    A diverging forward solve aborts the run and returns the model of the
    last completed stage. Returns the final unblurred model and the
    per-stage reports.
    """
    missing = [f for f in cfg.frequencies if f not in y_obs.frequencies]
    if missing:
        raise StructuralError(f"frequencies {missing} are not in the measurements")
    grid = trans.grid
    c_init = np.asarray(c_init, dtype=float)
    mask = disc_mask(grid, cfg.mask_radius) if cfg.mask_radius else None
    bounds = (cfg.c_min, cfg.c_max)
    weight = grid.dx ** 2
    c = np.clip(c_init, *bounds)
    reports = []
    first = True
    for rnd in range(cfg.rounds):
        for f in cfg.frequencies:
            if not first and cfg.blur_sigma > 0:
                blurred = ndimage.gaussian_filter(c, cfg.blur_sigma, mode="nearest")
                c_start = blurred if mask is None else mask * blurred + (1 - mask) * c_init
            else:
                c_start = c
            first = False
            t0 = time.perf_counter()
            prob = FwiProblem(y_obs.at(f), 2 * np.pi * f, fwd, trans, cfg.estimate_source, key="fwi")
            try:
                J, g, _ = prob.value_and_grad(c_start)
                state = InversionState(c_start, J, g)
                precond = None
                if cfg.illumination_water:
                    precond = illumination_preconditioner(prob.illumination, cfg.illumination_water, mask)
                accepted = 0
                for _ in range(cfg.iterations):
                    if state.value == 0:
                        break
                    state, info = ncg_step(state, prob.value_and_grad, cfg.line_search,
                                           cfg.step_scale, bounds, mask, weight, precond)
                    accepted += info["accepted"]
            except DivergedError as err:
                log.error("stage at %.4g Hz aborted: %s", f, err)
                reports.append(StageReport(rnd, f, [], 0, 0, prob.solves,
                                           time.perf_counter() - t0, True, str(err)))
                return c, reports
            c = state.x
            rep = StageReport(rnd, f, [float(h) for h in state.history], len(state.history) - 1,
                              accepted, prob.solves, time.perf_counter() - t0)
            log.info("round %d stage %.4g Hz: J/J0 %.3g after %d its (%d solves, %.1fs)",
                     rnd, f, rep.misfit[-1], rep.iterations, rep.solves, rep.wall_time)
            reports.append(rep)
    return c, reports
