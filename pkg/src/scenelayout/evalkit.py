"""Reconstruction metrics (Chamfer L1 variants, F-score), point-to-point ICP
pre-alignment and RANSAC plane fitting for background geometry."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DegenerateGeometry, EmptyCloud, TooFewPoints
from .geom import NNIndex, TriangleMesh, chamfer3, sample_mesh

DEFAULT_TAU = 0.1
DEFAULT_SAMPLES = 10000
CSV_COLUMNS = ("scene_id", "cdl1_s", "cdl1", "fscore")


def _cloud(points, what: str) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(arr) == 0:
        raise EmptyCloud(f"{what} cloud is empty")
    return arr


def cdl1_single(pred, gt) -> float:
    """Mean distance from each predicted point to the ground truth (one direction)."""
    return chamfer3(_cloud(pred, "pred"), _cloud(gt, "gt")).forward


def f_score(pred, gt, tau: float = DEFAULT_TAU) -> float:
    """F-score in percent; a point counts when its nearest neighbour is strictly closer than ``tau``."""
    if not tau > 0:
        raise ConfigError("F-score threshold must be positive")
    pred = _cloud(pred, "pred")
    gt = _cloud(gt, "gt")
    precision = float(np.mean(NNIndex(gt).query(pred)[1] < tau))
    recall = float(np.mean(NNIndex(pred).query(gt)[1] < tau))
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# ICP


class RigidTransform(NamedTuple):
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


@dataclass
class IcpResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    history: list = field(default_factory=list)


def _check_spread(points: np.ndarray, what: str):
    if len(points) < 3:
        raise DegenerateGeometry(f"{what} needs at least 3 points")
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateGeometry(f"{what} points are coincident or collinear")


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rotation and translation mapping ``src`` rows onto ``dst`` rows."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def icp_align(src, dst, max_iters: int = 50, tol: float = 1e-10) -> IcpResult:
    """Point-to-point ICP. The returned transform maps ``src`` toward ``dst``.

    Iteration stops once the RMSE improves by less than ``tol`` or after
    ``max_iters`` rigid fits.
    """
    src = _cloud(src, "source")
    dst = _cloud(dst, "target")
    _check_spread(src, "source")
    _check_spread(dst, "target")
    index = NNIndex(dst)
    R, t = np.eye(3), np.zeros(3)
    moved = src.copy()
    _, dist = index.query(moved)
    rmse = float(np.sqrt(np.mean(dist ** 2)))
    history = [rmse]
    it = 0
    for it in range(1, max_iters + 1):
        idx, _ = index.query(moved)
        step = rigid_fit(moved, dst[idx])
        R = step.rotation @ R
        t = step.rotation @ t + step.translation
        moved = src @ R.T + t
        _, dist = index.query(moved)
        new = float(np.sqrt(np.mean(dist ** 2)))
        history.append(new)
        done = rmse - new < tol
        rmse = new
        if done:
            break
    return IcpResult(RigidTransform(R, t), rmse, it, history)


# ---------------------------------------------------------------------------
# planes


@dataclass(frozen=True)
class Plane:
    """The plane ``normal . x = offset`` with a unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(n))
        if not norm > 0:
            raise DegenerateGeometry("plane normal is zero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def distance(self, points) -> np.ndarray:
        return np.abs(np.asarray(points, dtype=np.float64) @ self.normal - self.offset)

    def to_dict(self) -> dict:
        return {"normal": [float(x) for x in self.normal], "offset": self.offset}


class PlaneFit(NamedTuple):
    plane: Plane
    inliers: np.ndarray
    sample_plane: Plane


def tls_plane(points: np.ndarray) -> Plane:
    """Total-least-squares plane through ``points``."""
    c = points.mean(axis=0)
    _, _, Vt = np.linalg.svd(points - c, full_matrices=False)
    n = Vt[-1]
    return Plane(n, float(n @ c))


def fit_plane(points, ransac_iters: int = 200, inlier_tol: float = 0.01, seed: int = 0) -> PlaneFit:
    """RANSAC over 3-point samples, then a total-least-squares refit on the inliers.

    ``inliers`` are the indices found by the best sample; ``sample_plane`` is
    that sample's plane.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise TooFewPoints("plane fit needs at least 3 points")
    if not inlier_tol > 0:
        raise ConfigError("inlier tolerance must be positive")
    rng = np.random.default_rng(seed)
    scale = float(np.ptp(pts, axis=0).max()) or 1.0
    best_count, best_plane, best_inliers = -1, None, None
    for _ in range(max(1, ransac_iters)):
        a, b, c = pts[rng.choice(len(pts), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = float(np.linalg.norm(n))
        if norm <= 1e-12 * scale * scale:
            continue
        plane = Plane(n / norm, float(n @ a) / norm)
        inl = np.flatnonzero(plane.distance(pts) < inlier_tol)
        if len(inl) > best_count:
            best_count, best_plane, best_inliers = len(inl), plane, inl
    if best_plane is None:
        # every sample was degenerate; fall back to the whole set if it spans a plane
        _check_spread(pts, "plane")
        best_plane = tls_plane(pts)
        best_inliers = np.flatnonzero(best_plane.distance(pts) < inlier_tol)
    refit = tls_plane(pts[best_inliers]) if len(best_inliers) >= 3 else best_plane
    return PlaneFit(refit, best_inliers, best_plane)


def fit_background_planes(points, max_planes: int = 3, inlier_tol: float = 0.02,
                          min_inliers: int = 50, ransac_iters: int = 200, seed: int = 0) -> list[PlaneFit]:
    """Peel off up to ``max_planes`` dominant planes, largest first.

    Inlier indices refer to the original ``points`` array.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    remaining = np.arange(len(pts))
    fits = []
    for k in range(max_planes):
        if len(remaining) < max(3, min_inliers):
            break
        try:
            fit = fit_plane(pts[remaining], ransac_iters, inlier_tol, seed + k)
        except DegenerateGeometry:
            break
        if len(fit.inliers) < min_inliers:
            break
        fits.append(PlaneFit(fit.plane, remaining[fit.inliers], fit.sample_plane))
        remaining = np.delete(remaining, fit.inliers)
    return fits


# ---------------------------------------------------------------------------
# scene-level report


@dataclass(frozen=True)
class MetricsReport:
    cdl1: float
    cdl1_s: float
    fscore: float
    sample_count: int
    threshold: float

    def __post_init__(self):
        if not 0.0 <= self.fscore <= 100.0:
            raise ConfigError("F-score outside [0, 100]")
        if self.sample_count <= 0:
            raise ConfigError("sample count must be positive")

    def to_dict(self) -> dict:
        return {"cdl1": self.cdl1, "cdl1_s": self.cdl1_s, "fscore": self.fscore,
                "sample_count": self.sample_count, "threshold": self.threshold}

    def to_text(self) -> str:
        """Flat ``key=value`` lines."""
        return "".join(f"{k}={v!r}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        vals = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(float(vals["cdl1"]), float(vals["cdl1_s"]), float(vals["fscore"]),
                   int(vals["sample_count"]), float(vals["threshold"]))


def _points_of(geometry, n: int, seed: int) -> tuple[np.ndarray, bool]:
    if isinstance(geometry, TriangleMesh):
        return sample_mesh(geometry, n, seed), True
    return _cloud(geometry, "input"), False


def evaluate_scene(pred, gt, n: int = DEFAULT_SAMPLES, tau: float = DEFAULT_TAU, seed: int = 0,
                   icp: bool = False, icp_iters: int = 50) -> MetricsReport:
    """Sample ``n`` points on each mesh (clouds pass through) and score ``pred`` against ``gt``.

    With ``icp`` the predicted samples are first rigidly aligned to the ground truth.
    """
    if n <= 0:
        raise ConfigError("sample count must be positive")
    p, p_mesh = _points_of(pred, n, seed)
    g, g_mesh = _points_of(gt, n, seed)
    if len(p) == 0 or len(g) == 0:
        raise EmptyCloud("nothing to evaluate")
    if icp:
        p = icp_align(p, g, icp_iters).transform.apply(p)
    ch = chamfer3(p, g)
    count = n if (p_mesh or g_mesh) else len(p)
    return MetricsReport(ch.symmetric, ch.forward, f_score(p, g, tau), count, tau)


def metrics_csv(rows: Sequence[tuple[str, MetricsReport]], aggregate: bool = True) -> str:
    """CSV with one row per scene and, optionally, a final ``mean`` row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for scene_id, rep in rows:
        w.writerow([scene_id, repr(rep.cdl1_s), repr(rep.cdl1), repr(rep.fscore)])
    if aggregate and rows:
        means = [float(np.mean([getattr(r, key) for _, r in rows])) for key in ("cdl1_s", "cdl1", "fscore")]
        w.writerow(["mean"] + [repr(m) for m in means])
    return buf.getvalue()
