"""Run configuration: JSON schema, defaults and validation.

Every section is optional except ``grid``; missing keys take the defaults
below. Unknown keys anywhere are rejected before any computation starts.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .errors import StructuralError

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}
_bool = {"type": "boolean"}
_opt_pos = {"type": ["number", "null"], "exclusiveMinimum": 0}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_line_search = _obj({"c1": _pos, "shrink": _pos, "max_backtracks": _int, "interpolate": _bool})

_solver = _obj({
    "pad": _int, "tol": _pos, "n_max": _posint, "margin": {"type": "number", "minimum": 1},
    "absorb_strength": {"type": "number", "minimum": 0}, "c_ref": {"type": ["number", "null"]},
    "check_residual": _bool, "single": _bool,
})

SCHEMA = _obj({
    "grid": _obj({"nx": {"type": "integer", "minimum": 8}, "ny": {"type": "integer", "minimum": 8},
                  "dx": _pos}, ["nx", "ny", "dx"]),
    "geometry": _obj({"n_elements": {"type": "integer", "minimum": 3}, "diameter": _opt_pos,
                      "source_stride": _posint}),
    "phantom": _obj({
        "organ": {"enum": ["breast", "arm", "leg", "disc"]}, "body_radius": _opt_pos,
        "bone_count": {"type": ["integer", "null"], "minimum": 0},
        "bone_radii": {"type": ["array", "null"], "items": _pos, "minItems": 2, "maxItems": 2},
        "lesion_count": _int, "lesion_kind": {"enum": ["malignant", "benign"]},
        "skin_thickness": {"type": ["number", "null"]},
        "fill": {"enum": ["water", "skin", "fat", "muscle", "bone_cortical", "bone_marrow", "gland",
                          "lesion_benign", "lesion_malignant"]},
        "rotate": _bool, "per_pixel": _bool,
    }),
    "tissue_table": {"type": ["object", "null"], "additionalProperties": {
        "type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
    "frequencies": {"type": "array", "items": _pos, "minItems": 1},
    "solver": _solver,
    "fwi": _obj({
        "enabled": _bool, "frequencies": {"type": "array", "items": _pos, "minItems": 1},
        "iterations": _int, "blur_sigma": {"type": "number", "minimum": 0}, "c_min": _pos, "c_max": _pos,
        "estimate_source": _bool, "step_scale": _pos, "rounds": _posint,
        "mask_radius": {"type": ["number", "null"]}, "line_search": _line_search,
        "illumination_water": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "c_init": _pos, "solver": _solver,
    }),
    "toft": _obj({
        "enabled": _bool, "iterations": _int, "smooth_sigma": {"type": "number", "minimum": 0},
        "c_min": _pos, "c_max": _pos, "step_scale": _pos, "mask_radius": {"type": ["number", "null"]},
        "converged_ratio": _pos, "line_search": _line_search, "c_init": _pos,
    }),
    "das": _obj({
        "enabled": _bool, "c0": _pos, "pulse_frequency": _pos, "sigma_cycles": _pos, "rate": _pos,
        "duration": _opt_pos, "envelope": _bool,
        "scatterers": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}},
    }),
    "seeds": _obj({"phantom": _int, "speed": _int}),
    "workers": _posint,
    "plots": _bool,
}, ["grid"])

DEFAULTS = {
    "geometry": {"n_elements": 64, "diameter": None, "source_stride": 1},
    "phantom": {"organ": "breast", "body_radius": None, "lesion_count": 1, "per_pixel": False},
    "tissue_table": None,
    "frequencies": [0.3e6, 0.35e6, 0.4e6, 0.45e6, 0.5e6, 0.55e6, 0.6e6],
    "solver": {},
    "fwi": {"enabled": True, "c_init": 1500.0, "solver": {"tol": 1e-4, "single": True}},
    "toft": {"enabled": False, "c_init": 1500.0},
    "das": {"enabled": False, "c0": 1500.0, "pulse_frequency": 0.5e6, "sigma_cycles": 1.0,
            "rate": 10e6, "duration": None, "envelope": True, "scatterers": []},
    "seeds": {"phantom": 0, "speed": 0},
    "workers": 1,
    "plots": False,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path):
    """Parse a JSON config file; syntax errors become :class:`StructuralError`."""
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise StructuralError(f"{path}: not valid JSON ({err})") from None


def validate(cfg):
    """Raise :class:`StructuralError` if ``cfg`` violates the schema."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise StructuralError(f"config error at {where}: {err.message}") from None
    return cfg


def validate_section(name, section):
    """Validate one top-level section (e.g. a standalone ``fwi`` config)."""
    try:
        jsonschema.validate(section, SCHEMA["properties"][name])
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise StructuralError(f"{name} config error at {where}: {err.message}") from None
    return section


def resolve(cfg):
    """Validated config with defaults filled in and derived sizes computed."""
    validate(cfg)
    full = _merge(DEFAULTS, cfg)
    g = full["grid"]
    extent = min(g["nx"], g["ny"]) * g["dx"]
    if full["geometry"]["diameter"] is None:
        full["geometry"]["diameter"] = extent - 6 * g["dx"]
    if full["phantom"]["body_radius"] is None:
        full["phantom"]["body_radius"] = 0.3 * extent
    ring_r = 0.5 * full["geometry"]["diameter"]
    for key in ("fwi", "toft"):
        if full[key].get("mask_radius", "unset") == "unset":
            full[key]["mask_radius"] = ring_r - 3 * g["dx"]
    if "frequencies" not in cfg.get("fwi", {}):
        full["fwi"]["frequencies"] = list(full["frequencies"])
    missing = set(full["fwi"]["frequencies"]) - set(full["frequencies"])
    if full["fwi"]["enabled"] and missing:
        raise StructuralError(f"fwi frequencies {sorted(missing)} are not simulated")
    if full["das"]["enabled"] and full["das"]["duration"] is None:
        full["das"]["duration"] = 2.5 * full["geometry"]["diameter"] / full["das"]["c0"]
    return full


def config_hash(cfg):
    """Digest of everything that determines the outputs (``workers`` excluded)."""
    cfg = {k: v for k, v in cfg.items() if k != "workers"}
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()
