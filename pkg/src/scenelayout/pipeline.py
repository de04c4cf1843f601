"""End-to-end orchestration: priors -> selection -> depth alignment -> registration
-> assembled scene layout, plus the solver-only and evaluation flows.

Stage failures for one instance are recorded and the instance skipped; they
never abort the run.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import depthfit, evalkit, meshio
from .adapters import AdapterSet, ImageBuffer, ShapeProposal, build_adapters, crop_fraction, normalize_crop
from .depthfit import DepthAlignment
from .errors import ConfigError, ManifestError, SceneLayoutError
from .geom import CameraIntrinsics, TriangleMesh, cull_to_frustum
from .layout import InstanceEvidence, SolverConfig, solve_instance
from .manifest import SceneManifest
from .priorsel import DEFAULT_SIGMA, build_prompt, filter_detections, select_top_k

log = logging.getLogger(__name__)

LAYOUT_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    sigma: float = DEFAULT_SIGMA
    enhance_count: int = 6
    top_k: int = 3
    crop_fraction: float = 0.6
    scale_knob: float | None = None
    depth_budget: int = depthfit.DEFAULT_POINT_BUDGET
    eval_samples: int = evalkit.DEFAULT_SAMPLES
    fscore_tau: float = evalkit.DEFAULT_TAU
    icp: bool = False
    no_enhance: bool = False
    no_clip_filter: bool = False
    background: bool = True
    cull_frustum: bool = False
    shape_jitter: float = 0.0
    seed: int = 0
    jobs: int = 1
    backends: dict = field(default_factory=dict)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError("sigma must lie in [0, 1]")
        if self.enhance_count < 1 or self.top_k < 1:
            raise ConfigError("enhance count and top-k must be >= 1")
        if self.top_k > self.enhance_count:
            raise ConfigError(f"top-k ({self.top_k}) exceeds the enhance count ({self.enhance_count})")
        if self.depth_budget < 1 or self.eval_samples < 1:
            raise ConfigError("depth budget and evaluation samples must be >= 1")
        if not self.fscore_tau > 0:
            raise ConfigError("F-score threshold must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        crop_fraction(self.crop_fraction, self.scale_knob)

    @property
    def fraction(self) -> float:
        return crop_fraction(self.crop_fraction, self.scale_knob)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "solver"}
        d["backends"] = dict(sorted(self.backends.items()))
        d["solver"] = self.solver.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        solver = d.pop("solver", {}) or {}
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        bad_solver = set(solver) - set(SolverConfig.__dataclass_fields__)
        if unknown or bad_solver:
            raise ConfigError(f"unknown config keys: {sorted(unknown | {'solver.' + k for k in bad_solver})}")
        try:
            return cls(solver=SolverConfig(**solver), **d)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def merge_config(file_doc: dict | None, overrides: dict) -> PipelineConfig:
    """Defaults, then the config file, then command-line overrides.

    ``overrides`` may use ``"solver.<field>"`` keys for solver settings.
    """
    base = PipelineConfig().to_dict()
    for src in (file_doc or {}, overrides):
        for key, val in src.items():
            if key == "solver":
                if not isinstance(val, dict):
                    raise ConfigError("'solver' must be an object")
                base["solver"].update(val)
            elif key.startswith("solver."):
                base["solver"][key[7:]] = val
            else:
                base[key] = val
    return PipelineConfig.from_dict(base)


# ---------------------------------------------------------------------------
# per-instance records


@dataclass
class InstanceOutcome:
    instance_id: str
    category: str
    confidence: float
    proposal_index: int | None = None
    proposal_count: int = 0
    result: object = None
    mesh: TriangleMesh | None = None
    candidate_indices: list = field(default_factory=list)
    stage: str | None = None
    error: SceneLayoutError | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        d = {"id": self.instance_id, "category": self.category, "confidence": self.confidence}
        if not self.ok:
            d.update(stage=self.stage, error=self.error.code, message=str(self.error))
            return d
        r = self.result
        d.update(proposal_index=self.proposal_index, proposal_count=self.proposal_count,
                 candidate_indices=self.candidate_indices, pose=r.pose.to_dict(), loss=r.loss.to_dict(),
                 matching_error=r.matching_error, restart_index=r.restart_index,
                 iterations_run=r.iterations_run)
        return d


def _run_instance(outcome: InstanceOutcome, body: Callable[[Callable[[str], None]], None]) -> InstanceOutcome:
    """Run ``body(stage)``; ``stage(name)`` marks progress so a failure can be attributed."""

    def stage(name: str) -> None:
        outcome.stage = name

    try:
        body(stage)
        outcome.stage = None
    except SceneLayoutError as exc:
        outcome.error = exc
        log.warning("instance %s skipped at %s: %s: %s", outcome.instance_id, outcome.stage, exc.code, exc)
    return outcome


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _solver_cfg(cfg: PipelineConfig) -> SolverConfig:
    return replace(cfg.solver, seed=cfg.seed)


def _evidence(intr: CameraIntrinsics, depth, mask, cfg: PipelineConfig) -> InstanceEvidence:
    pts = depthfit.instance_depth_points(intr, depth, mask, cfg.depth_budget, cfg.seed)
    return InstanceEvidence(pts, mask, intr)


# ---------------------------------------------------------------------------
# layouts


@dataclass
class SceneLayout:
    outcomes: list[InstanceOutcome]
    config: PipelineConfig
    intrinsics: CameraIntrinsics
    alignment: DepthAlignment | None = None
    planes: list = field(default_factory=list)
    plane_meshes: list = field(default_factory=list)
    filtered_out: list = field(default_factory=list)

    @property
    def solved(self) -> list[InstanceOutcome]:
        return [o for o in self.outcomes if o.ok]

    def to_dict(self) -> dict:
        ordered = sorted(self.outcomes, key=lambda o: o.instance_id)
        return {
            "version": LAYOUT_VERSION,
            "units": "meters",
            "seed": self.config.seed,
            "config_hash": self.config.config_hash(),
            "config": self.config.to_dict(),
            "intrinsics": self.intrinsics.to_dict(),
            "depth_alignment": self.alignment.to_dict() if self.alignment else None,
            "instances": [o.to_dict() for o in ordered if o.ok],
            "skipped": [o.to_dict() for o in ordered if not o.ok],
            "filtered_out": sorted(self.filtered_out),
            "background_planes": [p.to_dict() | {"inliers": int(n)} for p, n in self.planes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def scene_mesh(self) -> tuple[TriangleMesh, list[tuple[str, int]]]:
        """Posed chosen proposals (and background patches) with OBJ group runs."""
        parts, groups = [], []
        for o in sorted(self.solved, key=lambda o: o.instance_id):
            posed = o.mesh.transformed(o.result.pose)
            if self.config.cull_frustum:
                posed = cull_to_frustum(posed, self.intrinsics)
            parts.append(posed)
            groups.append((o.instance_id, len(posed.faces)))
        for k, quad in enumerate(self.plane_meshes):
            parts.append(quad)
            groups.append((f"background_{k}", len(quad.faces)))
        return TriangleMesh.concatenate(parts), groups

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "layout.json").write_text(self.to_json(), encoding="utf-8")
        mesh, groups = self.scene_mesh()
        meshio.write_obj(out / "scene.obj", mesh, groups)
        return {"layout": str(out / "layout.json"), "scene": str(out / "scene.obj")}


def _plane_patch(plane: evalkit.Plane, pts: np.ndarray) -> TriangleMesh:
    """Rectangle on ``plane`` spanning the projected extent of ``pts``."""
    n = plane.normal
    a = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    origin = n * plane.offset
    ca = (pts - origin) @ a
    cb = (pts - origin) @ b
    corners = [origin + x * a + y * b for x, y in
               ((ca.min(), cb.min()), (ca.max(), cb.min()), (ca.max(), cb.max()), (ca.min(), cb.max()))]
    return TriangleMesh(np.array(corners), np.array([[0, 1, 2], [0, 2, 3]]))


def _background(layout: SceneLayout, depth: np.ndarray, masks: list) -> None:
    valid = depthfit.valid_pixels(depth)
    for m in masks:
        valid &= ~m
    if valid.sum() < 50:
        return
    pts = depthfit.backproject(layout.intrinsics, depth, valid)
    if len(pts) > 20000:
        rng = np.random.default_rng(layout.config.seed)
        pts = pts[np.sort(rng.choice(len(pts), 20000, replace=False))]
    for fit in evalkit.fit_background_planes(pts, seed=layout.config.seed):
        layout.planes.append((fit.plane, len(fit.inliers)))
        layout.plane_meshes.append(_plane_patch(fit.plane, pts[fit.inliers]))


# ---------------------------------------------------------------------------
# flows


def run_pipeline(manifest: SceneManifest, cfg: PipelineConfig, adapters: AdapterSet | None = None) -> SceneLayout:
    """Full flow from the input image through the priors to the solved layout."""
    adapters = adapters or build_adapters(manifest, cfg.backends, cfg.seed, cfg.shape_jitter)
    pix = manifest.load_image()
    if pix is None:
        raise ManifestError("the pipeline needs an input image")
    image = ImageBuffer.from_array(pix)
    intr = manifest.intrinsics
    solver = _solver_cfg(cfg)

    dets = adapters.segmenter.segment(image)
    kept = filter_detections(dets, cfg.sigma)
    dropped = [d.instance_id for d in dets if d.confidence <= cfg.sigma]
    if not kept:
        log.warning("no detection above sigma=%s; layout is empty", cfg.sigma)

    pred = adapters.depth.estimate_depth(image)
    if pred.shape != (intr.height, intr.width):
        raise ManifestError("estimated depth does not match the image size")
    alignment = _alignment(manifest, pred)
    metric = depthfit.apply_alignment(pred, alignment)

    def one(det):
        outcome = InstanceOutcome(det.instance_id, det.category, det.confidence)

        def body(stage):
            stage("normalize")
            crop = normalize_crop(image, det.mask, cfg.fraction)
            if cfg.no_enhance:
                candidates, chosen = [crop], [0]
            else:
                stage("enhance")
                prompt = build_prompt(det.category)
                candidates = adapters.enhancer.enhance(crop, prompt, cfg.enhance_count)
                if cfg.no_clip_filter:
                    chosen = list(range(cfg.top_k))
                else:
                    stage("embed")
                    ref = adapters.embedder.embed(crop)
                    embs = [adapters.embedder.embed(c) for c in candidates]
                    chosen = [r.candidate_index for r in select_top_k(ref, embs, cfg.top_k)]
            outcome.candidate_indices = chosen
            stage("shape")
            proposals = [ShapeProposal(det.instance_id, k,
                                       adapters.shaper.generate_shape(candidates[j], det.instance_id),
                                       "mock" if adapters.sources["shape"] == "mock" else "remote")
                         for k, j in enumerate(chosen)]
            stage("depth")
            ev = _evidence(intr, metric, det.mask, cfg)
            stage("solve")
            sol = solve_instance(proposals, ev, solver)
            outcome.proposal_index = sol.proposal_index
            outcome.proposal_count = len(proposals)
            outcome.result = sol.result
            outcome.mesh = proposals[sol.proposal_index].mesh

        return _run_instance(outcome, body)

    outcomes = _map(one, kept, cfg.jobs)
    layout = SceneLayout(outcomes, cfg, intr, alignment, filtered_out=dropped)
    if cfg.background:
        _background(layout, metric, [d.mask for d in dets])
    return layout


def _alignment(manifest: SceneManifest, pred: np.ndarray) -> DepthAlignment | None:
    """Fit (h, q) against the manifest's reference depth when one is given,
    else use a stored alignment, else leave the depth as is."""
    ref = manifest.load_reference_depth()
    if ref is not None:
        valid = depthfit.valid_pixels(pred) & depthfit.valid_pixels(ref)
        return depthfit.solve_scale_shift(pred, ref, valid)
    return manifest.depth_alignment


def run_solve(manifest: SceneManifest, cfg: PipelineConfig) -> SceneLayout:
    """Registration only: proposals, masks and (metric) depth come from the manifest."""
    intr = manifest.intrinsics
    depth = manifest.load_depth()
    if manifest.depth_alignment is not None:
        depth = depthfit.apply_alignment(depth, manifest.depth_alignment)
    solver = _solver_cfg(cfg)
    kept = [i for i in manifest.instances if i.confidence > cfg.sigma]
    dropped = [i.instance_id for i in manifest.instances if i.confidence <= cfg.sigma]
    masks = {}

    def one(inst):
        outcome = InstanceOutcome(inst.instance_id, inst.category, inst.confidence)

        def body(stage):
            stage("load")
            mask = manifest.load_mask(inst)
            masks[inst.instance_id] = mask
            meshes = manifest.load_proposals(inst)
            stage("depth")
            ev = _evidence(intr, depth, mask, cfg)
            stage("solve")
            sol = solve_instance(meshes, ev, solver)
            outcome.proposal_index = sol.proposal_index
            outcome.proposal_count = len(meshes)
            outcome.candidate_indices = list(range(len(meshes)))
            outcome.result = sol.result
            outcome.mesh = meshes[sol.proposal_index]

        return _run_instance(outcome, body)

    outcomes = _map(one, kept, cfg.jobs)
    layout = SceneLayout(outcomes, cfg, intr, manifest.depth_alignment, filtered_out=dropped)
    if cfg.background:
        _background(layout, depth, [manifest.load_mask(i) for i in manifest.instances])
    return layout


def evaluate_pairs(pairs: list[tuple[str, object, object]], cfg: PipelineConfig) -> list[tuple[str, evalkit.MetricsReport]]:
    """Score ``(scene_id, pred, gt)`` triples; geometries are meshes or clouds."""
    return [(sid, evalkit.evaluate_scene(p, g, cfg.eval_samples, cfg.fscore_tau, cfg.seed, cfg.icp))
            for sid, p, g in pairs]


def evaluate_layout(layout: SceneLayout, manifest: SceneManifest) -> evalkit.MetricsReport | None:
    """Metrics of the solved objects against the manifest's ground-truth scene, if any."""
    if manifest.gt_scene is None or not layout.solved:
        return None
    gt = meshio.read_mesh(manifest.gt_scene)
    preds = [o.mesh.transformed(o.result.pose) for o in sorted(layout.solved, key=lambda o: o.instance_id)]
    c = layout.config
    return evalkit.evaluate_scene(TriangleMesh.concatenate(preds), gt, c.eval_samples, c.fscore_tau,
                                  c.seed, c.icp)
