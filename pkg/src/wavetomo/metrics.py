"""Evaluation metrics: relative RMSE for wavefields and SSIM for models."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import StructuralError

log = logging.getLogger(__name__)


@dataclass
class MetricReport:
    name: str
    values: list
    excluded: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.values)

    @property
    def mean(self):
        return float(np.mean(self.values)) if self.values else float("nan")

    @property
    def std(self):
        return float(np.std(self.values)) if self.values else float("nan")

    def summary(self, digits=3):
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"

    def to_dict(self):
        return {"metric": self.name, "values": [float(v) for v in self.values], "count": self.count,
                "mean": self.mean, "std": self.std, "excluded": list(self.excluded),
                "summary": self.summary()}


def rrmse(u_true, u_pred):
    """Per-item ``||u - u_hat|| / ||u||`` over the leading axis.

    A single 2D field counts as one item. Items whose truth has zero norm
    are excluded and their indices recorded in ``excluded``.
    """
    u_true, u_pred = np.asarray(u_true), np.asarray(u_pred)
    if u_true.shape != u_pred.shape:
        raise StructuralError(f"shape mismatch {u_true.shape} vs {u_pred.shape}")
    if u_true.ndim <= 2:
        u_true, u_pred = u_true[None], u_pred[None]
    values, excluded = [], []
    for i, (a, b) in enumerate(zip(u_true, u_pred)):
        na = np.linalg.norm(a)
        if na == 0:
            log.warning("rrmse: item %d has zero-norm truth, excluded", i)
            excluded.append(i)
            continue
        values.append(float(np.linalg.norm(a - b) / na))
    return MetricReport("rrmse", values, excluded)


def ssim(c_true, c_pred, dynamic_range=None, window=None):
    """Structural similarity from global image statistics.

    ``dynamic_range`` defaults to ``max - min`` of ``c_true``. Passing a
    Gaussian ``window`` sigma (pixels) gives the locally windowed variant,
    averaged over the image.
    """
    a, b = np.asarray(c_true, dtype=float), np.asarray(c_pred, dtype=float)
    if a.shape != b.shape:
        raise StructuralError(f"shape mismatch {a.shape} vs {b.shape}")
    L = float(a.max() - a.min()) if dynamic_range is None else float(dynamic_range)
    if not L > 0:
        raise StructuralError("dynamic range must be positive")
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    if window is None:
        ma, mb = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = np.mean((a - ma) * (b - mb))
        return float((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    blur = lambda f: ndimage.gaussian_filter(f, window, mode="reflect")  # noqa: E731
    ma, mb = blur(a), blur(b)
    va = blur(a * a) - ma ** 2
    vb = blur(b * b) - mb ** 2
    cov = blur(a * b) - ma * mb
    s = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


def ssim_report(truths, preds, dynamic_range=None):
    return MetricReport("ssim", [ssim(a, b, dynamic_range) for a, b in zip(truths, preds)])
