"""Depth scale/shift alignment and back-projection.

Depth maps are ``(H, W)`` float arrays in which values ``<= 0`` mark invalid
pixels; masks are ``(H, W)`` boolean arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateDepth, EmptyResult, TooFewPixels
from .geom import CameraIntrinsics

DEFAULT_POINT_BUDGET = 2048


@dataclass(frozen=True)
class DepthAlignment:
    scale: float
    shift: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale != 0.0 and np.isfinite(self.shift)):
            raise ConfigError(f"invalid depth alignment ({self.scale}, {self.shift})")

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "shift": float(self.shift)}

    @classmethod
    def from_dict(cls, d: dict) -> "DepthAlignment":
        return cls(float(d["scale"]), float(d["shift"]))


def valid_pixels(depth: np.ndarray) -> np.ndarray:
    d = np.asarray(depth)
    return np.isfinite(d) & (d > 0.0)


def _check_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape):
        raise ConfigError(f"mask shape {m.shape} does not match depth shape {tuple(shape)}")
    return m


def solve_scale_shift(pred: np.ndarray, reference: np.ndarray, valid=None) -> DepthAlignment:
    """Closed-form least squares for ``h * pred + q ~= reference``.

    Only pixels valid in both maps (and inside ``valid`` if given) take part.
    The 2x2 normal equations are solved in centred form, which is the same
    solution with better conditioning.
    """
    pred = np.asarray(pred, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if pred.shape != reference.shape:
        raise ConfigError("predicted and reference depth must share a shape")
    sel = valid_pixels(pred) & valid_pixels(reference)
    if valid is not None:
        sel &= _check_mask(valid, pred.shape)
    x = pred[sel]
    y = reference[sel]
    n = x.size
    if n < 2:
        raise TooFewPixels(f"need at least 2 valid pixels, got {n}")
    x_mean = x.mean()
    y_mean = y.mean()
    xc = x - x_mean
    sxx = float(xc @ xc)
    if sxx <= (np.finfo(float).eps * n * max(abs(x_mean), 1.0)) ** 2:
        raise DegenerateDepth("predicted depth is constant over the valid pixels")
    h = float(xc @ (y - y_mean)) / sxx
    q = float(y_mean - h * x_mean)
    if h == 0.0:
        raise DegenerateDepth("fitted depth scale is zero")
    return DepthAlignment(h, q)


def alignment_residual(pred, reference, alignment: DepthAlignment, valid=None) -> float:
    """Sum of squared residuals of an alignment over the jointly valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    sel = valid_pixels(pred) & valid_pixels(reference)
    if valid is not None:
        sel &= _check_mask(valid, pred.shape)
    r = alignment.scale * pred[sel] + alignment.shift - reference[sel]
    return float(r @ r)


def apply_alignment(depth: np.ndarray, alignment: DepthAlignment) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    ok = valid_pixels(d)
    out = np.zeros_like(d)
    out[ok] = alignment.scale * d[ok] + alignment.shift
    out[out <= 0.0] = 0.0
    return out


def backproject(intr: CameraIntrinsics, depth: np.ndarray, mask=None) -> np.ndarray:
    """Lift valid (and masked-in) pixels to camera-frame points, row-major order.

    Pixel ``(u, v)`` is taken at its centre ``(u + 0.5, v + 0.5)``.
    """
    d = np.asarray(depth, dtype=np.float64)
    if d.shape != (intr.height, intr.width):
        raise ConfigError(f"depth shape {d.shape} does not match intrinsics "
                          f"({intr.height}, {intr.width})")
    sel = valid_pixels(d)
    if mask is not None:
        sel &= _check_mask(mask, d.shape)
    vs, us = np.nonzero(sel)
    if us.size == 0:
        raise EmptyResult("no valid pixel selected for back-projection")
    z = d[vs, us]
    x = (us + 0.5 - intr.cx) * z / intr.fx
    y = (vs + 0.5 - intr.cy) * z / intr.fy
    return np.stack([x, y, z], axis=1)


def instance_depth_points(intr: CameraIntrinsics, depth: np.ndarray, mask,
                          budget: int | None = DEFAULT_POINT_BUDGET, seed: int = 0) -> np.ndarray:
    """Back-project one instance's masked depth, uniformly subsampled to ``budget`` points."""
    pts = backproject(intr, depth, mask)
    if budget is not None and len(pts) > budget:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(pts), size=budget, replace=False))
        pts = pts[keep]
    return pts
