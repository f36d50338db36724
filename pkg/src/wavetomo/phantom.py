"""Procedural tissue phantoms and their sound-speed maps.

Bodies are jittered ellipses (low-order Fourier perturbation of the radius)
wrapped in a skin ring and immersed in water. A random in-plane rotation is
applied to the whole geometry. Labels are converted to sound speed with one
random offset per connected tissue region.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import IntEnum

import numpy as np
from scipy import ndimage

from .errors import StructuralError


class Tissue(IntEnum):
    WATER = 0
    SKIN = 1
    FAT = 2
    MUSCLE = 3
    BONE_CORTICAL = 4
    BONE_MARROW = 5
    GLAND = 6
    LESION_BENIGN = 7
    LESION_MALIGNANT = 8


ORGANS = ("breast", "arm", "leg", "disc")

# (mean m/s, perturbation half-width m/s)
DEFAULT_TABLE = {
    "water": (1500.0, 0.0),
    "skin": (1610.0, 10.0),
    "fat": (1450.0, 10.0),
    "muscle": (1580.0, 10.0),
    "bone_cortical": (2800.0, 50.0),
    "bone_marrow": (1450.0, 10.0),
    "gland": (1520.0, 10.0),
    "lesion_benign": (1560.0, 5.0),
    "lesion_malignant": (1590.0, 5.0),
}


@dataclass
class TissueTable:
    entries: dict = field(default_factory=lambda: dict(DEFAULT_TABLE))

    def __post_init__(self):
        clean = {}
        for name, (mean, hw) in self.entries.items():
            if name.upper() not in Tissue.__members__:
                raise StructuralError(f"unknown tissue {name!r}")
            if not 1300 <= mean <= 3500:
                raise StructuralError(f"{name}: mean {mean} outside [1300, 3500] m/s")
            if not 0 <= hw < 0.1 * mean:
                raise StructuralError(f"{name}: half-width {hw} must be in [0, 10% of mean)")
            clean[name.lower()] = (float(mean), float(hw))
        self.entries = clean

    def lookup(self, tissue):
        key = Tissue(tissue).name.lower()
        if key not in self.entries:
            raise StructuralError(f"tissue table has no entry for {key}")
        return self.entries[key]

    def to_dict(self):
        return {k: list(v) for k, v in self.entries.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({k: tuple(v) for k, v in d.items()})


@dataclass
class PhantomSpec:
    organ: str = "breast"
    body_radius: float = 0.05
    bone_count: int | None = None
    bone_radii: tuple | None = None  # (outer, inner) metres
    lesion_count: int = 0
    lesion_kind: str = "malignant"
    skin_thickness: float | None = None
    fill: str = "fat"  # interior tissue of the "disc" organ
    rotate: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.organ not in ORGANS:
            raise StructuralError(f"organ must be one of {ORGANS}")
        if self.body_radius <= 0:
            raise StructuralError("body_radius must be positive")
        if self.lesion_kind not in ("malignant", "benign"):
            raise StructuralError("lesion_kind must be 'malignant' or 'benign'")
        if self.bone_count is None:
            self.bone_count = 1 if self.organ in ("arm", "leg") else 0
        if self.bone_radii is None:
            frac = {"arm": (0.28, 0.16), "leg": (0.38, 0.24)}.get(self.organ, (0.3, 0.18))
            self.bone_radii = (frac[0] * self.body_radius, frac[1] * self.body_radius)
        self.bone_radii = tuple(float(r) for r in self.bone_radii)
        if not 0 < self.bone_radii[1] < self.bone_radii[0]:
            raise StructuralError("bone_radii must satisfy 0 < inner < outer")
        if self.bone_count < 0 or self.lesion_count < 0:
            raise StructuralError("counts must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["bone_radii"] = list(self.bone_radii)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("bone_radii") is not None:
            d["bone_radii"] = tuple(d["bone_radii"])
        return cls(**d)


@dataclass
class TissuePhantom:
    grid: object
    labels: np.ndarray
    spec: PhantomSpec | None = None


def _polar(grid, center, angle):
    X, Y = grid.mesh()
    x, y = X - center[0], Y - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    xr, yr = ca * x + sa * y, -sa * x + ca * y
    return xr, yr


def _blob(xr, yr, a, b, harmonics):
    """Mask of a jittered ellipse with semi-axes ``a``, ``b``."""
    theta = np.arctan2(yr, xr)
    scale = 1.0 + sum(amp * np.cos(m * theta + ph) for m, amp, ph in harmonics)
    r_ell = np.hypot(xr / a, yr / b)
    return r_ell <= scale


def _harmonics(rng, strength, orders=(2, 3, 4, 5)):
    return [(m, rng.uniform(0, strength) / m, rng.uniform(0, 2 * np.pi)) for m in orders]


def generate_phantom(spec, grid):
    """Label map for ``spec`` on ``grid``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    dx = grid.dx
    angle = rng.uniform(0, 2 * np.pi) if spec.rotate else 0.0
    labels = np.full(grid.shape, Tissue.WATER, dtype=np.int16)
    half = 0.5 * min(grid.extent)
    R = spec.body_radius

    if spec.organ == "disc":
        if R > half - 2 * dx:
            raise StructuralError("disc does not fit inside the grid")
        xr, yr = _polar(grid, (0.0, 0.0), 0.0)
        labels[np.hypot(xr, yr) <= R] = Tissue[spec.fill.upper()]
        return TissuePhantom(grid, labels, spec)

    jitter = {"breast": 0.08, "arm": 0.05, "leg": 0.05}[spec.organ]
    aspect = rng.uniform(0.85, 1.0)
    harm = _harmonics(rng, jitter)
    reach = R * (1 + sum(h[1] for h in harm))
    if reach > half - 2 * dx:
        raise StructuralError(f"body of radius {R} m does not fit in a {grid.extent} m grid")
    xr, yr = _polar(grid, (0.0, 0.0), angle)
    body = _blob(xr, yr, R, aspect * R, harm)
    skin_cells = max(2, int(round((spec.skin_thickness or 2 * dx) / dx)))
    inner = ndimage.binary_erosion(body, iterations=skin_cells)
    if not inner.any():
        raise StructuralError("body too small for its skin layer")
    labels[body] = Tissue.SKIN
    labels[inner] = Tissue.FAT

    if spec.organ == "breast":
        _breast_interior(labels, inner, xr, yr, R, rng, spec, dx)
    else:
        _limb_interior(labels, inner, xr, yr, R, aspect, rng, spec, dx)
    return TissuePhantom(grid, labels, spec)


def _breast_interior(labels, inner, xr, yr, R, rng, spec, dx):
    # glandular texture: smoothed noise thresholded inside a central lobe
    noise = ndimage.gaussian_filter(rng.standard_normal(labels.shape), sigma=max(1.5, 0.08 * R / dx))
    lobe = _blob(xr, yr, 0.72 * R, 0.6 * R, _harmonics(rng, 0.15))
    gland = lobe & inner & (noise > np.quantile(noise[lobe], rng.uniform(0.35, 0.6)))
    labels[gland] = Tissue.GLAND
    kind = Tissue.LESION_MALIGNANT if spec.lesion_kind == "malignant" else Tissue.LESION_BENIGN
    for _ in range(spec.lesion_count):
        rl = rng.uniform(0.08, 0.13) * R
        for _attempt in range(100):
            r0, t0 = rng.uniform(0, 0.5 * R), rng.uniform(0, 2 * np.pi)
            cx, cy = r0 * np.cos(t0), r0 * np.sin(t0)
            strength = 0.35 if kind == Tissue.LESION_MALIGNANT else 0.04
            les = _blob(xr - cx, yr - cy, rl, rl * rng.uniform(0.7, 1.0), _harmonics(rng, strength, (3, 5, 7)))
            les &= ndimage.binary_erosion(inner, iterations=2)
            if les.sum() >= 4:
                labels[les] = kind
                break
        else:
            raise StructuralError("could not place lesion")


def _limb_interior(labels, inner, xr, yr, R, aspect, rng, spec, dx):
    fat_cells = max(2, int(round(rng.uniform(0.08, 0.14) * R / dx)))
    muscle = ndimage.binary_erosion(inner, iterations=fat_cells)
    labels[muscle] = Tissue.MUSCLE
    r_out, r_in = spec.bone_radii
    if r_out - r_in < 2 * dx:
        raise StructuralError("cortical shell thinner than two grid cells")
    keep_out = np.zeros_like(muscle)
    room = ndimage.binary_erosion(muscle, iterations=2)
    placed = 0
    for _attempt in range(200):
        if placed == spec.bone_count:
            break
        r0, t0 = rng.uniform(0, 0.3 * R), rng.uniform(0, 2 * np.pi)
        cx, cy = r0 * np.cos(t0), aspect * r0 * np.sin(t0)
        harm = _harmonics(rng, 0.05)
        bone = _blob(xr - cx, yr - cy, r_out, r_out * rng.uniform(0.85, 1.0), harm)
        if not np.all(room[bone]) or np.any(keep_out[bone]):
            continue
        marrow = ndimage.binary_erosion(bone, iterations=max(2, int(round((r_out - r_in) / dx))))
        labels[bone] = Tissue.BONE_CORTICAL
        labels[marrow] = Tissue.BONE_MARROW
        keep_out |= ndimage.binary_dilation(bone, iterations=2)
        placed += 1
    if placed < spec.bone_count:
        raise StructuralError(f"could not fit {spec.bone_count} bone(s) of radius {r_out} m")


def generate_batch(spec, grid, count, base_seed=None):
    """Independent phantoms with seeds ``base_seed + index``."""
    base = spec.seed if base_seed is None else base_seed
    out = []
    for i in range(count):
        d = spec.to_dict()
        d["seed"] = base + i
        out.append(generate_phantom(PhantomSpec.from_dict(d), grid))
    return out


def assign_sound_speed(phantom, table=None, seed=0, per_pixel=False):
    """Sound-speed map: table mean plus one uniform offset per connected region.

    Water is never perturbed. With ``per_pixel`` each non-water pixel gets
    its own offset instead.
    """
    table = table or TissueTable()
    rng = np.random.default_rng(seed)
    labels = phantom.labels
    c = np.empty(labels.shape, dtype=float)
    for t in sorted(int(x) for x in np.unique(labels)):
        mean, hw = table.lookup(t)
        mask = labels == t
        if t == Tissue.WATER:
            c[mask] = mean
            continue
        if per_pixel:
            c[mask] = mean + rng.uniform(-hw, hw, size=int(mask.sum()))
            continue
        regions, n = ndimage.label(mask)
        offsets = rng.uniform(-hw, hw, size=n)
        c[mask] = mean + offsets[regions[mask] - 1]
    return c
