"""7-DoF registration of shape proposals to depth and mask evidence.

The loss for one proposal is

    total = w3 * l3d(depth_points, X) + w2 * chamfer2(pi(X) / S, mask_points / S)

with ``X = v * R(r) @ p + t`` the posed proposal samples, ``pi`` the pinhole
projection and ``S = max(width, height)``. The mask term is a symmetric
Chamfer distance (average of the two mean nearest-neighbour distances). The
depth term defaults to the one-sided mean distance from each depth point to
the proposal, since a single view only sees the front of an object; the
symmetric form is available as ``depth_term="symmetric"``. The pose is found by
Adam descent with nearest-neighbour correspondences re-evaluated every step,
repeated from several random initial rotations.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import BehindCamera, ConfigError, EmptyCloud, EmptyMask, NoProposals
from .geom import (
    CameraIntrinsics,
    Pose7,
    TriangleMesh,
    rotation_matrix,
    rotvec_from_quaternion,
    sample_mesh,
)
from .gridnn import GridIndex
from .regkernel import GRID_PER_CELL_2D, loss_and_grad, rodrigues
from .priorsel import select_best_proposal

FD_STEP = 1e-5
MIN_SCALE = 1e-4
DEFAULT_PROPOSAL_SAMPLES = 2048
DEPTH_TERMS = ("evidence", "symmetric")


@dataclass(frozen=True)
class SolverConfig:
    iterations: int = 1000
    restarts: int = 10
    step_size: float = 0.01
    step_decay: float = 1.0
    weight_3d: float = 1.0
    weight_2d: float = 1.0
    seed: int = 0
    mask_sample_count: int = 1024
    gradient_mode: str = "analytic"
    proposal_sample_count: int = DEFAULT_PROPOSAL_SAMPLES
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    jobs: int = 1
    depth_term: str = "evidence"
    projection_sample_count: int | None = 512

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if not self.step_size > 0:
            raise ConfigError("step size must be positive")
        if not self.step_decay > 0:
            raise ConfigError("step decay must be positive")
        if self.weight_3d < 0 or self.weight_2d < 0 or (self.weight_3d == 0 and self.weight_2d == 0):
            raise ConfigError("loss weights must be >= 0 and not both zero")
        if self.mask_sample_count < 1 or self.proposal_sample_count < 1:
            raise ConfigError("sample counts must be >= 1")
        if self.gradient_mode not in ("analytic", "finite-difference"):
            raise ConfigError(f"unknown gradient mode {self.gradient_mode!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.depth_term not in DEPTH_TERMS:
            raise ConfigError(f"unknown depth term {self.depth_term!r}")
        if self.projection_sample_count is not None and self.projection_sample_count < 1:
            raise ConfigError("projection sample count must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class LossBreakdown(NamedTuple):
    l3d: float
    l2d: float
    total: float

    def to_dict(self) -> dict:
        return {"l3d": self.l3d, "l2d": self.l2d, "total": self.total}


@dataclass(frozen=True)
class SolveResult:
    pose: Pose7
    loss: LossBreakdown
    iterations_run: int
    restart_index: int = 0

    @property
    def matching_error(self) -> float:
        return self.loss.total

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "loss": self.loss.to_dict(),
            "matching_error": self.matching_error,
            "iterations_run": self.iterations_run,
            "restart_index": self.restart_index,
        }


@dataclass(frozen=True)
class InstanceEvidence:
    depth_points: np.ndarray
    mask: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        d = np.asarray(self.depth_points, dtype=np.float64).reshape(-1, 3)
        m = np.asarray(self.mask, dtype=bool)
        if len(d) == 0:
            raise EmptyCloud("instance has no depth points")
        if not m.any():
            raise EmptyMask("instance mask is empty")
        if m.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ConfigError("mask shape does not match the intrinsics")
        object.__setattr__(self, "depth_points", d)
        object.__setattr__(self, "mask", m)


def mask_to_points(mask, n: int, seed: int = 0) -> np.ndarray:
    """``n`` occupied pixel centres ``(u + 0.5, v + 0.5)``, drawn uniformly with replacement."""
    m = np.asarray(mask, dtype=bool)
    vs, us = np.nonzero(m)
    if us.size == 0:
        raise EmptyMask("mask has no occupied pixel")
    if n < 1:
        raise ConfigError("need at least one mask sample")
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, us.size, size=n)
    return np.stack([us[pick] + 0.5, vs[pick] + 0.5], axis=1).astype(np.float64)


class Correspondences(NamedTuple):
    depth_to_prop: np.ndarray
    prop_to_depth: np.ndarray
    proj_to_mask: np.ndarray
    mask_to_proj: np.ndarray


GRID_SHELLS_3D = 2
KD_LEAF_SIZE = 64


class RegistrationProblem:
    """Loss and gradient of one proposal against one instance's evidence.

    The depth term is either ``"evidence"`` (mean distance from each depth
    point to the posed proposal) or ``"symmetric"`` (average with the reverse
    direction). Only the first ``projection_count`` proposal samples are
    projected for the mask term.

    Static clouds are indexed once. Depth points are matched in the
    proposal's own frame (``(d - t) R / v``), which is equivalent for a
    similarity transform, so the only per-step index is over the projected
    2D points.
    """

    def __init__(self, proposal_points, evidence: InstanceEvidence, mask_points,
                 weight_3d: float = 1.0, weight_2d: float = 1.0, depth_term: str = "evidence",
                 projection_count: int | None = None):
        self.P = np.ascontiguousarray(proposal_points, dtype=np.float64).reshape(-1, 3)
        if len(self.P) == 0:
            raise EmptyCloud("proposal has no points")
        if depth_term not in DEPTH_TERMS:
            raise ConfigError(f"unknown depth term {depth_term!r}")
        n2 = len(self.P) if projection_count is None else max(1, min(int(projection_count), len(self.P)))
        self.P2 = np.ascontiguousarray(self.P[:n2])
        self.D = np.ascontiguousarray(evidence.depth_points)
        self.intr = evidence.intrinsics
        self.S = float(self.intr.max_side)
        mk = np.asarray(mask_points, dtype=np.float64).reshape(-1, 2)
        if len(mk) == 0:
            raise EmptyCloud("no mask points")
        self.M = np.ascontiguousarray(mk / self.S)
        self.w3 = float(weight_3d)
        self.w2 = float(weight_2d)
        self.symmetric = depth_term == "symmetric"
        # depth points near the surface resolve in a few grid shells; the rest
        # (deep inside or far outside the proposal) fall back to the kd-tree,
        # whose large leaves suit those far-from-surface queries
        self._grid_P = GridIndex(self.P, per_cell=1.0, surface=True)
        self._tree_P = cKDTree(self.P, leafsize=KD_LEAF_SIZE, balanced_tree=False, compact_nodes=False)
        self._tree_D = cKDTree(self.D) if self.symmetric else None
        self._grid_M = GridIndex(self.M, per_cell=GRID_PER_CELL_2D)
        self._no_match = np.zeros(0, dtype=np.int64)

    def _match_proposal(self, q: np.ndarray) -> np.ndarray:
        idx = self._grid_P.query(q, max_shells=GRID_SHELLS_3D)
        miss = idx < 0
        if miss.any():
            idx[miss] = self._tree_P.query(q[miss])[1]
        return idx

    def correspondences(self, params) -> Correspondences:
        return self.evaluate(params)[2]

    def evaluate(self, params, want_grad: bool = False, corr: Correspondences | None = None):
        """Return ``(LossBreakdown, gradient or None, correspondences)``.

        With ``corr`` given those matches are reused instead of searched, and
        the loss is smooth in ``params``.

        Raises:
            BehindCamera: a projected proposal point has ``z <= 0``.
        """
        params = np.ascontiguousarray(params, dtype=np.float64)
        match = corr is None
        if match:
            R = rodrigues(params[0:3])
            t, v = params[3:6], params[6]
            d2p = self._match_proposal(((self.D - t) @ R) / v)
            p2d = self._no_match
            if self.symmetric:
                _, p2d = self._tree_D.query(v * (self.P @ R.T) + t)
            corr = Correspondences(d2p, p2d, np.empty(len(self.P2), dtype=np.int64),
                                   np.empty(len(self.M), dtype=np.int64))
        g = self._grid_M
        status, l3d, l2d, grad = loss_and_grad(
            params, self.P, self.P2, self.D, self.M,
            corr.depth_to_prop, corr.prop_to_depth if self.symmetric else self._no_match,
            corr.proj_to_mask, corr.mask_to_proj, match,
            g.order, g.starts, g.lo, g.h, g.dims,
            self.intr.fx, self.intr.fy, self.intr.cx, self.intr.cy, self.S,
            self.w3, self.w2, self.symmetric, want_grad)
        if status:
            raise BehindCamera("posed proposal has points at or behind the camera plane")
        loss = LossBreakdown(float(l3d), float(l2d), float(self.w3 * l3d + self.w2 * l2d))
        return loss, (grad if want_grad else None), corr

    def fd_gradient(self, params, corr: Correspondences | None = None, step: float = FD_STEP) -> np.ndarray:
        """Central differences of the loss with correspondences frozen at ``params``."""
        params = np.asarray(params, dtype=np.float64)
        if corr is None:
            corr = self.correspondences(params)
        grad = np.empty(7)
        for i in range(7):
            hi = params.copy()
            lo = params.copy()
            hi[i] += step
            lo[i] -= step
            grad[i] = (self.evaluate(hi, corr=corr)[0].total
                       - self.evaluate(lo, corr=corr)[0].total) / (2.0 * step)
        return grad

    def gradient(self, params, mode: str = "analytic"):
        if mode == "analytic":
            loss, g, _ = self.evaluate(params, want_grad=True)
            return loss, g
        loss, _, corr = self.evaluate(params)
        return loss, self.fd_gradient(params, corr)


def _problem(proposal_points, ev: InstanceEvidence, mask_points, cfg: SolverConfig) -> RegistrationProblem:
    return RegistrationProblem(proposal_points, ev, mask_points, cfg.weight_3d, cfg.weight_2d,
                               cfg.depth_term, cfg.projection_sample_count)


def _evidence_mask_points(ev: InstanceEvidence, cfg: SolverConfig) -> np.ndarray:
    return mask_to_points(ev.mask, cfg.mask_sample_count, cfg.seed)


def evaluate_loss(pose: Pose7, proposal_points, ev: InstanceEvidence, mask_points,
                  cfg: SolverConfig | None = None) -> LossBreakdown:
    cfg = cfg or SolverConfig()
    return _problem(proposal_points, ev, mask_points, cfg).evaluate(pose.params())[0]


def loss_gradient(pose: Pose7, proposal_points, ev: InstanceEvidence, mask_points,
                  cfg: SolverConfig | None = None) -> np.ndarray:
    """Gradient w.r.t. ``(rx, ry, rz, tx, ty, tz, v)`` with matches held fixed."""
    cfg = cfg or SolverConfig()
    prob = _problem(proposal_points, ev, mask_points, cfg)
    return prob.gradient(pose.params(), cfg.gradient_mode)[1]


def _adam(prob: RegistrationProblem, init: Pose7, cfg: SolverConfig, restart_index: int) -> SolveResult:
    params = init.params()
    try:
        best_loss = prob.evaluate(params)[0]
    except BehindCamera:
        inf = float("inf")
        return SolveResult(init, LossBreakdown(inf, inf, inf), 0, restart_index)
    best_params = params.copy()
    m = np.zeros(7)
    s = np.zeros(7)
    b1, b2 = cfg.beta1, cfg.beta2
    lr = cfg.step_size
    it = 0
    for it in range(1, cfg.iterations + 1):
        try:
            loss, g = prob.gradient(params, cfg.gradient_mode)
        except BehindCamera:
            it -= 1
            break
        if loss.total < best_loss.total:
            best_loss, best_params = loss, params.copy()
        m = b1 * m + (1.0 - b1) * g
        s = b2 * s + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** it)
        s_hat = s / (1.0 - b2 ** it)
        params = params - lr * m_hat / (np.sqrt(s_hat) + cfg.eps)
        params[6] = max(params[6], MIN_SCALE)
        lr *= cfg.step_decay
    else:
        if cfg.iterations:
            try:
                loss = prob.evaluate(params)[0]
                if loss.total < best_loss.total:
                    best_loss, best_params = loss, params.copy()
            except BehindCamera:
                pass
    return SolveResult(Pose7.from_params(best_params), best_loss, it, restart_index)


def optimize_pose(init: Pose7, proposal_points, ev: InstanceEvidence, cfg: SolverConfig | None = None,
                  mask_points=None) -> SolveResult:
    """Adam descent from ``init``; returns the lowest-loss iterate seen."""
    cfg = cfg or SolverConfig()
    if mask_points is None:
        mask_points = _evidence_mask_points(ev, cfg)
    return _adam(_problem(proposal_points, ev, mask_points, cfg), init, cfg, 0)


def random_rotation(seed) -> np.ndarray:
    """Uniformly distributed rotation (as an axis-angle vector, angle <= pi)."""
    rng = np.random.default_rng(seed)
    return rotvec_from_quaternion(rng.standard_normal(4))


def _bounding_radius(pts: np.ndarray, center: np.ndarray) -> float:
    return float(np.sqrt(((pts - center) ** 2).sum(axis=1)).max())


def canonical_init(proposal_points, ev: InstanceEvidence, rotation=None) -> Pose7:
    """Centroid-matching translation and radius-ratio scale for a given rotation."""
    P = np.asarray(proposal_points, dtype=np.float64)
    D = ev.depth_points
    cp, cd = P.mean(axis=0), D.mean(axis=0)
    rp, rd = _bounding_radius(P, cp), _bounding_radius(D, cd)
    scale = rd / rp if rp > 0 and rd > 0 else 1.0
    scale = max(scale, MIN_SCALE)
    rv = np.zeros(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    t = cd - scale * (rotation_matrix(rv) @ cp)
    return Pose7(rv, t, scale)


def restart_seed(seed: int, restart: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(restart)])


def restart_inits(proposal_points, ev: InstanceEvidence, cfg: SolverConfig) -> list[Pose7]:
    inits = [canonical_init(proposal_points, ev)]
    for k in range(1, cfg.restarts):
        inits.append(canonical_init(proposal_points, ev, random_rotation(restart_seed(cfg.seed, k))))
    return inits


def _min_result(results: Sequence[SolveResult]) -> SolveResult:
    best = results[0]
    for r in results[1:]:
        if r.loss.total < best.loss.total:
            best = r
    return best


def run_restarts(proposal_points, ev: InstanceEvidence, cfg: SolverConfig | None = None,
                 mask_points=None) -> list[SolveResult]:
    """Every restart's result, in restart order.

    Restart 0 starts at identity rotation; the others at random rotations drawn
    from ``cfg.seed``. Every restart shares the data-driven translation/scale
    init, and restart ``k`` does not depend on how many restarts run, so the
    first ``n`` entries equal a run with ``restarts=n``.
    """
    cfg = cfg or SolverConfig()
    if mask_points is None:
        mask_points = _evidence_mask_points(ev, cfg)
    prob = _problem(proposal_points, ev, mask_points, cfg)
    inits = restart_inits(proposal_points, ev, cfg)
    if cfg.jobs > 1 and len(inits) > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(lambda ki: _adam(prob, ki[1], cfg, ki[0]), enumerate(inits)))
    return [_adam(prob, init, cfg, k) for k, init in enumerate(inits)]


def solve_with_restarts(proposal_points, ev: InstanceEvidence, cfg: SolverConfig | None = None,
                        mask_points=None) -> SolveResult:
    """Run the descent from ``cfg.restarts`` initial rotations and keep the best."""
    return _min_result(run_restarts(proposal_points, ev, cfg, mask_points))


class InstanceSolution(NamedTuple):
    proposal_index: int
    result: SolveResult
    per_proposal: list


def solve_instance(proposals: Sequence, ev: InstanceEvidence, cfg: SolverConfig | None = None) -> InstanceSolution:
    """Register every proposal and keep the one with the lowest matching error.

    ``proposals`` holds meshes (or objects with a ``mesh`` attribute, or
    ready-made ``(N, 3)`` point arrays).
    """
    cfg = cfg or SolverConfig()
    if len(proposals) == 0:
        raise NoProposals("instance has no shape proposals")
    mask_points = _evidence_mask_points(ev, cfg)
    results = []
    solved = {}
    for k, prop in enumerate(proposals):
        mesh = getattr(prop, "mesh", prop)
        if isinstance(mesh, TriangleMesh):
            pts = sample_mesh(mesh, cfg.proposal_sample_count, cfg.seed)
        else:
            pts = np.asarray(mesh, dtype=np.float64)
        # the solve is a pure function of the samples, so duplicates are reused
        key = (pts.shape, pts.tobytes())
        if key not in solved:
            solved[key] = solve_with_restarts(pts, ev, cfg, mask_points)
        results.append(solved[key])
    best = select_best_proposal([r.matching_error for r in results])
    return InstanceSolution(best, results[best], results)


def rotation_error_deg(R_est: np.ndarray, R_true: np.ndarray, symmetries: Sequence[np.ndarray] = ()) -> float:
    """Geodesic angle between two rotations, minimised over object symmetries
    ``S`` (the estimate is compared with ``R_true @ S``)."""
    cands = [np.eye(3)] + list(symmetries)
    best = math.pi
    for S in cands:
        c = (np.trace(R_est.T @ (R_true @ S)) - 1.0) / 2.0
        best = min(best, math.acos(max(-1.0, min(1.0, c))))
    return math.degrees(best)


def with_overrides(cfg: SolverConfig, **kw) -> SolverConfig:
    return replace(cfg, **kw)
