"""Frequency-domain Helmholtz solvers.

The equation solved is ``[lap + k2(x)] u = -rho`` on a periodic padded grid,
with ``k2 = (omega / c)**2 + 1j * absorption``. The absorption term is zero
in the physical interior and ramps up inside the padding, where it acts as
the absorbing boundary. The Laplacian is spectral, so the discrete operator
is complex symmetric and point-to-point transfer is exactly reciprocal.

Two fixed-point schemes are provided, both built on the damped Green operator
``G = F^-1 (p2 - kappa2 - i eps)^-1 F``:

* :func:`born_solve`, the plain Born iteration ``u <- G rho + G v u``;
* :func:`cbs_solve`, the convergent Born series with preconditioner
  ``q = 1 - i v / eps``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergedError, StructuralError
from .grid import Grid2D, crop, fft2, ifft2, laplacian, pad_extend, spectral_p2

log = logging.getLogger(__name__)


@dataclass
class SolveReport:
    iterations: int
    update_norms: list = field(default_factory=list)
    converged: bool = False

    @property
    def final_update(self):
        return self.update_norms[-1] if self.update_norms else 0.0

    def to_dict(self):
        return {"iterations": self.iterations, "converged": self.converged,
                "final_update": float(np.max(self.final_update))}


@dataclass
class HelmholtzProblem:
    """A Helmholtz problem on an already padded grid.

    ``rho`` may carry leading batch axes; each slice is an independent source.
    ``pad`` records how many padding nodes surround the physical interior so
    solutions can be cropped back.
    """
    c: np.ndarray
    rho: np.ndarray
    omega: float
    kappa2: float
    eps: float
    grid: Grid2D
    absorption: np.ndarray | None = None
    pad: int = 0

    def __post_init__(self):
        self.grid.check(self.c)
        self.grid.check(self.rho)
        if not (self.eps > 0 and self.kappa2 > 0 and self.omega > 0):
            raise StructuralError("omega, kappa2 and eps must be positive")
        if np.any(self.c <= 0):
            raise StructuralError("sound speed must be positive")

    @property
    def k2(self):
        return wavenumber_squared(self.c, self.omega, self.absorption)

    @property
    def v(self):
        return scattering_potential(self.c, self.omega, self.kappa2, self.eps, self.absorption)

    @classmethod
    def build(cls, c, rho, omega, grid, pad=16, margin=1.05, absorb_strength=0.5,
              kappa2=None, eps=None, c_ref=None):
        """Pad interior fields and pick ``kappa2``/``eps`` for a convergent solve.

        ``c`` and ``rho`` live on the interior ``grid``. Without ``c_ref``
        the padding replicates the edge of ``c`` and the absorbing layer
        peaks at ``absorb_strength`` times the mid-range squared wavenumber.
        With ``c_ref`` the padding is filled with ``c_ref`` and the peak is
        ``absorb_strength * (omega / c_ref)**2``; the padded operator then
        depends on ``c`` only through its interior values, which is what
        gradient computations need.
        """
        grid.check(c)
        grid.check(rho)
        pgrid = grid.padded(pad)
        if c_ref is None:
            cp = pad_extend(c, pad, "edge")
        else:
            cp = pad_extend(np.asarray(c, dtype=float) - c_ref, pad, "zero") + c_ref
        rp = pad_extend(rho, pad, "zero")
        absorption = None
        if pad > 0 and absorb_strength > 0:
            if c_ref is None:
                k2_ref, _ = choose_kappa_eps(cp, omega, margin)
            else:
                k2_ref = (omega / c_ref) ** 2
            absorption = boundary_absorption(grid, pad, absorb_strength * k2_ref)
        k2_auto, eps_auto = choose_kappa_eps(cp, omega, margin, absorption)
        return cls(cp, rp, omega, kappa2 if kappa2 is not None else k2_auto,
                   eps if eps is not None else eps_auto, pgrid, absorption, pad)

    def crop(self, u):
        return crop(u, self.pad)


def boundary_absorption(grid, pad, peak):
    """Smoothstep absorption ramp occupying the padding around ``grid``.

    The profile is a function of the periodic distance from the padded-grid
    centre node, so it is symmetric under the grid's 90-degree rotations and
    reflections about that node.
    """
    n_y, n_x = grid.ny + 2 * pad, grid.nx + 2 * pad

    def ramp(n, n_int):
        d = np.abs(np.arange(n) - n // 2)
        x = np.clip(np.clip(d - n_int // 2, 0, None) / max(pad, 1), 0, 1)
        return x * x * (3 - 2 * x)

    return peak * (ramp(n_y, grid.ny)[:, None] + ramp(n_x, grid.nx)[None, :])


def wavenumber_squared(c, omega, absorption=None):
    k2 = (omega / np.asarray(c, dtype=float)) ** 2
    if absorption is None:
        return k2.astype(complex)
    return k2 + 1j * absorption


def scattering_potential(c, omega, kappa2, eps, absorption=None):
    """``v = (omega / c)**2 - kappa2 - i eps`` (plus ``i * absorption``)."""
    c = np.asarray(c, dtype=float)
    if np.any(c <= 0):
        raise StructuralError("sound speed must be positive")
    return wavenumber_squared(c, omega, absorption) - kappa2 - 1j * eps


def preconditioner(v, eps):
    return 1 - 1j * v / eps


def choose_kappa_eps(c, omega, margin=1.05, absorption=None):
    """Background wavenumber and damping for a convergent series.

    ``kappa2`` is the midpoint of the squared-wavenumber range, which
    minimises the largest deviation; ``eps`` is ``margin`` times that
    deviation, floored at ``1e-3 * kappa2``.
    """
    if margin < 1:
        raise StructuralError("margin must be >= 1")
    k2 = (omega / np.asarray(c, dtype=float)) ** 2
    kappa2 = 0.5 * (k2.min() + k2.max())
    dev = np.abs(wavenumber_squared(c, omega, absorption) - kappa2).max()
    eps = max(margin * dev, 1e-3 * kappa2)
    return float(kappa2), float(eps)


def green_symbol(grid, kappa2, eps, dtype=np.complex128):
    if eps == 0:
        raise StructuralError("eps = 0 makes the Green symbol singular")
    return (1.0 / (spectral_p2(grid) - kappa2 - 1j * eps)).astype(dtype)


def green_apply(f, grid, kappa2, eps, symbol=None):
    """Apply ``F^-1 (p2 - kappa2 - i eps)^-1 F`` over the last two axes."""
    if symbol is None:
        symbol = green_symbol(grid, kappa2, eps)
    return ifft2(symbol * fft2(f, grid))


def _rel_norms(du, u):
    axes = (-2, -1)
    num = np.sqrt(np.sum(np.abs(du) ** 2, axis=axes))
    den = np.sqrt(np.sum(np.abs(u) ** 2, axis=axes))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.where(num > 0, np.inf, 0.0))


def born_solve(problem, n_max, blowup=1e8):
    """Plain Born iteration ``u_{n+1} = G rho + G v u_n`` started at ``G rho``.

    Update norms are measured against the fixed first iterate ``G rho`` so
    that geometric growth of a diverging series shows up directly.
    Runs exactly ``n_max`` iterations unless the iterate becomes non-finite
    or its update grows beyond ``blowup`` times the first update, in which
    case :class:`DivergedError` is raised with the history attached.
    No convergence guarantee: strong scatterers make the series diverge.
    """
    if n_max < 1:
        raise StructuralError("n_max must be >= 1")
    g, v = problem.grid, problem.v
    u0 = green_apply(problem.rho, g, problem.kappa2, problem.eps)
    u = u0
    report = SolveReport(0)
    for n in range(1, n_max + 1):
        u_new = u0 + green_apply(v * u, g, problem.kappa2, problem.eps)
        rel = _rel_norms(u_new - u, u0)
        report.iterations = n
        report.update_norms.append(float(np.max(rel)))
        if not np.all(np.isfinite(u_new)) or not np.all(np.isfinite(rel)):
            raise DivergedError(f"Born iteration produced non-finite values at iteration {n}", n, report)
        if report.update_norms[0] > 0 and report.update_norms[-1] > blowup * report.update_norms[0]:
            raise DivergedError(f"Born iteration diverged at iteration {n}", n, report)
        u = u_new
    return u, report


def cbs_solve(problem, tol=1e-6, n_max=1000, u_init=None, raise_on_fail=True, check_residual=True,
              dtype=np.complex128):
    """Convergent Born series.

    Iterates ``u_{n+1} = u_0 + M u_n`` with ``M = (1 - q) G v + q`` and
    ``u_0 = (1 - q) G rho``, written in the equivalent update form
    ``u <- u + (i v / eps) (G (rho + v u) - u)``. Batched sources are
    frozen individually once their relative update falls below ``tol``,
    so each slice sees exactly the iterates it would see if solved alone.

    ``u_init`` warm-starts the iteration (the fixed point does not depend
    on it). With ``check_residual`` a slice is only frozen once its
    relative Helmholtz residual is also at most ``10 * tol``; the update
    equals ``(i v / eps) G r`` for residual ``r``, and ``G`` damps the
    high-wavenumber part of ``r``, so a small update alone does not bound
    the residual. ``dtype=np.complex64`` runs the iteration in single
    precision, which is about twice as fast and adequate for ``tol``
    down to roughly ``1e-5``.
    """
    if tol <= 0:
        raise StructuralError("tol must be positive")
    g, v, eps, kappa2 = problem.grid, problem.v, problem.eps, problem.kappa2
    symbol = green_symbol(g, kappa2, eps, dtype)
    v = v.astype(dtype)
    gamma = (1j * v / eps).astype(dtype)
    rho = np.asarray(problem.rho)
    batch_shape = rho.shape[:-2]
    rho_b = rho.reshape((-1,) + g.shape).astype(dtype)
    if u_init is None:
        u = gamma * green_apply(rho_b, g, kappa2, eps, symbol)
    else:
        u = np.array(np.broadcast_to(u_init, rho.shape), dtype=dtype).reshape(rho_b.shape)
    active = np.arange(rho_b.shape[0])
    last = np.zeros(rho_b.shape[0])
    report = SolveReport(0)
    for n in range(1, n_max + 1):
        ua = u[active]
        du = gamma * (green_apply(rho_b[active] + v * ua, g, kappa2, eps, symbol) - ua)
        ua = ua + du
        rel = _rel_norms(du, ua)
        if not np.all(np.isfinite(rel)):
            raise DivergedError(f"CBS produced non-finite values at iteration {n}", n, report)
        u[active] = ua
        last[active] = rel
        report.iterations = n
        report.update_norms.append(float(rel.max()))
        done = rel <= tol
        if check_residual and done.any():
            idx = active[done]
            done[done] = _slice_residuals(problem, u[idx], rho_b[idx]) <= 10 * tol
        active = active[~done]
        if active.size == 0:
            report.converged = True
            break
    if not report.converged:
        log.debug("CBS stopped after %d iterations, update %.3g", n_max, last.max())
        if raise_on_fail:
            raise DivergedError(f"CBS did not reach tol {tol} in {n_max} iterations", n_max, report)
    return u.astype(np.complex128).reshape(batch_shape + g.shape), report


def _slice_residuals(problem, u, rho):
    r = laplacian(u, problem.grid) + problem.k2 * u + rho
    num = np.sqrt(np.sum(np.abs(r) ** 2, axis=(-2, -1)))
    den = np.sqrt(np.sum(np.abs(rho) ** 2, axis=(-2, -1)))
    return np.where(den > 0, num / np.where(den > 0, den, 1), num)


def residual(c, u, rho, omega, grid, absorption=None):
    """``||[lap + k2] u + rho|| / ||rho||`` with a spectral Laplacian."""
    grid.check(c)
    r = laplacian(u, grid) + wavenumber_squared(c, omega, absorption) * u + rho
    return float(np.linalg.norm(r) / np.linalg.norm(rho))


@dataclass
class SolverConfig:
    pad: int = 16
    tol: float = 1e-6
    n_max: int = 1000
    margin: float = 1.05
    absorb_strength: float = 0.5
    c_ref: float | None = 1500.0
    check_residual: bool = True
    single: bool = False

    def __post_init__(self):
        if self.pad < 0 or self.tol <= 0 or self.n_max < 1 or self.margin < 1 or self.absorb_strength < 0:
            raise StructuralError(f"invalid solver config {self}")
        if self.c_ref is not None and self.c_ref <= 0:
            raise StructuralError("c_ref must be positive")

    def to_dict(self):
        return {"pad": self.pad, "tol": self.tol, "n_max": self.n_max, "margin": self.margin,
                "absorb_strength": self.absorb_strength, "c_ref": self.c_ref,
                "check_residual": self.check_residual, "single": self.single}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class CbsForward:
    """Forward operator ``(c, rho, omega) -> u`` backed by :func:`cbs_solve`.

    Fields live on the interior ``grid``; padding is handled internally.
    When ``warm_start`` is on, the padded solution of the previous call with
    the same ``key``, frequency and batch shape seeds the next solve, which
    shortens runs where the model changes little between calls.
    """

    def __init__(self, grid, config=None, warm_start=False):
        self.grid = grid
        self.config = config or SolverConfig()
        self.warm_start = warm_start
        self.reports = []
        self._cache = {}

    def problem(self, c, rho, omega):
        cfg = self.config
        return HelmholtzProblem.build(c, rho, omega, self.grid, pad=cfg.pad, margin=cfg.margin,
                                      absorb_strength=cfg.absorb_strength, c_ref=cfg.c_ref)

    def __call__(self, c, rho, omega, key=None):
        prob = self.problem(c, rho, omega)
        cache_key = (key, float(omega), np.shape(rho))
        u_init = self._cache.get(cache_key) if (self.warm_start and key is not None) else None
        u, rep = cbs_solve(prob, self.config.tol, self.config.n_max, u_init=u_init,
                           check_residual=self.config.check_residual,
                           dtype=np.complex64 if self.config.single else np.complex128)
        self.reports.append(rep)
        if self.warm_start and key is not None:
            self._cache[cache_key] = u
        return prob.crop(u)

    def clear(self):
        self._cache.clear()
