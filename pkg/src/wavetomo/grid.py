"""Uniform 2D grids, spectral transforms and padding.

Arrays are stored row-major with shape ``(ny, nx)``: row index ``i`` runs
along ``y`` and column index ``j`` along ``x``. Node ``(i, j)`` sits at
``(origin[0] + j * dx, origin[1] + i * dx)``. Batched fields carry extra
leading axes; every transform acts on the last two axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import StructuralError

# Threads handed to pocketfft. Each 1D line is transformed by a single
# thread, so results do not depend on this value.
FFT_WORKERS = 1


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    dx: float
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise StructuralError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if not self.dx > 0:
            raise StructuralError(f"dx must be positive, got {self.dx}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def centered(cls, nx, ny, dx):
        """Grid whose node ``(ny // 2, nx // 2)`` sits at the physical origin."""
        return cls(nx, ny, dx, (-(nx // 2) * dx, -(ny // 2) * dx))

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def extent(self):
        return (self.nx * self.dx, self.ny * self.dx)

    @property
    def size(self):
        return self.nx * self.ny

    def axes(self):
        x = self.origin[0] + self.dx * np.arange(self.nx)
        y = self.origin[1] + self.dx * np.arange(self.ny)
        return x, y

    def mesh(self):
        """Physical coordinates ``(X, Y)`` of every node, each of shape ``(ny, nx)``."""
        x, y = self.axes()
        return np.meshgrid(x, y)

    def to_index(self, x, y):
        """Fractional ``(row, col)`` index of physical points."""
        col = (np.asarray(x, dtype=float) - self.origin[0]) / self.dx
        row = (np.asarray(y, dtype=float) - self.origin[1]) / self.dx
        return row, col

    def contains(self, x, y, margin=0):
        row, col = self.to_index(x, y)
        return bool(np.all((row >= margin) & (row <= self.ny - 1 - margin)
                           & (col >= margin) & (col <= self.nx - 1 - margin)))

    def padded(self, pad):
        return Grid2D(self.nx + 2 * pad, self.ny + 2 * pad, self.dx,
                      (self.origin[0] - pad * self.dx, self.origin[1] - pad * self.dx))

    def check(self, f):
        """Raise unless the trailing axes of ``f`` match this grid."""
        f = np.asarray(f)
        if f.ndim < 2 or f.shape[-2:] != self.shape:
            raise StructuralError(f"field shape {f.shape} does not match grid {self.shape}")
        return f

    def to_dict(self):
        return {"nx": self.nx, "ny": self.ny, "dx": self.dx, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["nx"]), int(d["ny"]), float(d["dx"]), tuple(d.get("origin", (0.0, 0.0))))


def fft2(f, grid=None):
    """Unnormalised forward DFT over the last two axes."""
    f = np.asarray(f)
    if grid is not None:
        grid.check(f)
    elif f.ndim < 2:
        raise StructuralError("fft2 needs at least a 2D array")
    return scipy.fft.fft2(f, axes=(-2, -1), workers=FFT_WORKERS)


def ifft2(F, grid=None):
    """Inverse DFT over the last two axes, dividing by ``nx * ny``."""
    F = np.asarray(F)
    if grid is not None:
        grid.check(F)
    elif F.ndim < 2:
        raise StructuralError("ifft2 needs at least a 2D array")
    return scipy.fft.ifft2(F, axes=(-2, -1), workers=FFT_WORKERS)


def spectral_p2(grid):
    """Squared angular wavenumber ``px**2 + py**2`` on the DFT index lattice."""
    px = 2 * np.pi * np.fft.fftfreq(grid.nx, d=grid.dx)
    py = 2 * np.pi * np.fft.fftfreq(grid.ny, d=grid.dx)
    return py[:, None] ** 2 + px[None, :] ** 2


def laplacian(u, grid):
    """Spectral Laplacian on the periodic grid."""
    return ifft2(-spectral_p2(grid) * fft2(u, grid))


def pad_extend(f, pad, mode="edge"):
    """Pad the last two axes by ``pad`` nodes on each side.

    ``mode="edge"`` replicates border values (sound speed), ``mode="zero"``
    fills with zeros (sources).
    """
    if pad < 0:
        raise StructuralError("pad must be non-negative")
    f = np.asarray(f)
    if pad == 0:
        return f.copy()
    width = [(0, 0)] * (f.ndim - 2) + [(pad, pad), (pad, pad)]
    if mode == "edge":
        return np.pad(f, width, mode="edge")
    if mode == "zero":
        return np.pad(f, width, mode="constant")
    raise StructuralError(f"unknown pad mode {mode!r}")


def crop(f, pad):
    """Inverse of :func:`pad_extend`."""
    if pad == 0:
        return f
    return f[..., pad:-pad, pad:-pad]


def bilinear_weights(grid, x, y):
    """Sparse-ish bilinear interpolation stencil for points ``(x, y)``.

    Returns ``(rows, cols, weights)`` each of shape ``(n_points, 4)``.
    Points must lie inside the grid.
    """
    row, col = grid.to_index(np.atleast_1d(x), np.atleast_1d(y))
    if np.any(row < 0) or np.any(col < 0) or np.any(row > grid.ny - 1) or np.any(col > grid.nx - 1):
        raise StructuralError("interpolation point outside grid")
    r0 = np.minimum(np.floor(row).astype(int), grid.ny - 2)
    c0 = np.minimum(np.floor(col).astype(int), grid.nx - 2)
    fr = row - r0
    fc = col - c0
    rows = np.stack([r0, r0, r0 + 1, r0 + 1], axis=1)
    cols = np.stack([c0, c0 + 1, c0, c0 + 1], axis=1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return rows, cols, w


def nearest_weights(grid, x, y):
    """Nearest-node stencil in the same format as :func:`bilinear_weights`."""
    row, col = grid.to_index(np.atleast_1d(x), np.atleast_1d(y))
    r = np.rint(row).astype(int)
    c = np.rint(col).astype(int)
    if np.any(r < 0) or np.any(c < 0) or np.any(r > grid.ny - 1) or np.any(c > grid.nx - 1):
        raise StructuralError("point outside grid")
    return r[:, None], c[:, None], np.ones((r.size, 1))
