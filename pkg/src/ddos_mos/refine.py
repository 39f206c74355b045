"""Post-hoc affine rescaling of predicted MOS, fitted in closed form."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class DegeneratePredictor(ValueError):
    pass


@dataclass(frozen=True)
class RefinementLayer:
    a: float = 1.0
    b: float = 0.0

    def tensors(self) -> dict:
        return {"refine.a": np.float32(self.a), "refine.b": np.float32(self.b)}

    @classmethod
    def from_tensors(cls, tensors) -> "RefinementLayer | None":
        if "refine.a" not in tensors:
            return None
        return cls(float(tensors["refine.a"]), float(tensors["refine.b"]))


def fit_refinement(preds, targets) -> RefinementLayer:
    """Least-squares slope and intercept over all pairs at once (normal equations)."""
    x = np.asarray(preds, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length vectors of at least 2 points")
    n = x.size
    sx, sy = math.fsum(x), math.fsum(y)
    sxx, sxy = math.fsum(x * x), math.fsum(x * y)
    det = n * sxx - sx * sx
    if np.var(x) < 1e-12:
        raise DegeneratePredictor("degenerate predictor: predictions have no variance")
    a = (n * sxy - sx * sy) / det
    b = (sy - a * sx) / n
    if not math.isfinite(a) or not math.isfinite(b):
        raise DegeneratePredictor("degenerate predictor: non-finite fit")
    if a <= 0:
        warnings.warn(f"refinement slope {a:.4g} is not positive; rankings will not be preserved",
                      RuntimeWarning, stacklevel=2)
    return RefinementLayer(a, b)


def apply_refinement(layer: RefinementLayer, s_hat):
    if np.ndim(s_hat) == 0:
        return layer.a * float(s_hat) + layer.b
    return layer.a * np.asarray(s_hat, dtype=np.float64) + layer.b
