"""Synthetic test scenes with exact ground truth.

Primitives are placed with known poses in the camera frame (x right, y down,
z forward), ray-cast into depth maps and occlusion-correct instance masks, and
written to disk together with a manifest the pipeline can consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import meshio
from .errors import ConfigError, InvalidSpec, IoFailure
from .geom import CameraIntrinsics, Pose7, TriangleMesh, apply_pose, rotvec_from_quaternion

MT_EPS = 1e-9
DEFAULT_RESOLUTION = 64
MAX_SUBDIVISION = 5


@dataclass(frozen=True)
class PrimitiveSpec:
    """``kind`` is box (sizes = x, y, z extents), icosphere (sizes = radius,)
    or cylinder (sizes = radius, height; axis along y)."""

    kind: str
    sizes: tuple = (1.0, 1.0, 1.0)
    subdivision: int = 2

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(float(s) for s in self.sizes))
        expected = {"box": 3, "icosphere": 1, "cylinder": 2}
        if self.kind not in expected:
            raise InvalidSpec(f"unknown primitive kind {self.kind!r}")
        if len(self.sizes) != expected[self.kind]:
            raise InvalidSpec(f"{self.kind} takes {expected[self.kind]} size parameter(s)")
        if not all(np.isfinite(s) and s > 0 for s in self.sizes):
            raise InvalidSpec(f"{self.kind} sizes must be positive, got {self.sizes}")
        if not 0 <= self.subdivision <= MAX_SUBDIVISION:
            raise InvalidSpec(f"subdivision must be in [0, {MAX_SUBDIVISION}]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sizes": list(self.sizes), "subdivision": self.subdivision}

    @classmethod
    def from_dict(cls, d: dict) -> "PrimitiveSpec":
        try:
            return cls(d["kind"], tuple(d["sizes"]), int(d.get("subdivision", 2)))
        except (KeyError, TypeError) as exc:
            raise InvalidSpec(f"malformed primitive spec: {exc}") from None


def _box(sx, sy, sz) -> TriangleMesh:
    h = np.array([sx, sy, sz]) / 2.0
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float) * h
    # vertex index = 4*ix + 2*iy + iz ; faces wound counter-clockwise seen from outside
    faces = [
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ]
    return TriangleMesh(corners, np.array(faces))


def _icosphere(radius, subdivision) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
             [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
             [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [list(np.asarray(v, dtype=float) / np.linalg.norm(v)) for v in verts]
    for _ in range(subdivision):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
                verts.append(list(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    v = np.asarray(verts)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    return TriangleMesh(v, np.asarray(faces))


def _cylinder(radius, height, subdivision) -> TriangleMesh:
    n = 8 * 2 ** max(subdivision, 0) if subdivision < 3 else 64
    ang = 2.0 * np.pi * np.arange(n) / n
    ring = np.stack([radius * np.cos(ang), np.zeros(n), radius * np.sin(ang)], axis=1)
    top = ring + [0.0, -height / 2.0, 0.0]
    bottom = ring + [0.0, height / 2.0, 0.0]
    verts = np.concatenate([top, bottom, [[0.0, -height / 2.0, 0.0], [0.0, height / 2.0, 0.0]]])
    ct, cb = 2 * n, 2 * n + 1
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [[i, j, n + j], [i, n + j, n + i]]
        faces.append([ct, j, i])
        faces.append([cb, n + i, n + j])
    return TriangleMesh(verts, np.asarray(faces))


def make_primitive(spec: PrimitiveSpec) -> TriangleMesh:
    """Origin-centred primitive mesh in canonical orientation."""
    if spec.kind == "box":
        return _box(*spec.sizes)
    if spec.kind == "icosphere":
        return _icosphere(spec.sizes[0], spec.subdivision)
    return _cylinder(spec.sizes[0], spec.sizes[1], spec.subdivision)


@dataclass
class SceneInstance:
    instance_id: str
    category: str
    spec: PrimitiveSpec
    pose: Pose7

    def mesh(self) -> TriangleMesh:
        return make_primitive(self.spec).transformed(self.pose)


@dataclass
class SyntheticScene:
    instances: list[SceneInstance]
    intrinsics: CameraIntrinsics
    seed: int = 0

    def __post_init__(self):
        ids = [inst.instance_id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise ConfigError("instance ids must be unique")
        for inst in self.instances:
            if np.any(inst.mesh().vertices[:, 2] <= 0.0):
                raise ConfigError(f"instance {inst.instance_id} is not fully in front of the camera")


def default_intrinsics(size: int = DEFAULT_RESOLUTION, fov_deg: float = 60.0) -> CameraIntrinsics:
    f = (size / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    return CameraIntrinsics(f, f, size / 2.0, size / 2.0, size, size)


# ---------------------------------------------------------------------------
# ray casting


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """Per-pixel ray directions with unit z, shape ``(H*W, 3)`` row-major."""
    vs, us = np.mgrid[0:intr.height, 0:intr.width]
    x = (us.ravel() + 0.5 - intr.cx) / intr.fx
    y = (vs.ravel() + 0.5 - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=1)


def raycast(triangles: np.ndarray, dirs: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Moller-Trumbore nearest hit for rays from the origin.

    Returns ``(t, face)`` per ray; ``t = inf`` and ``face = -1`` where nothing is hit.
    With unit-z directions ``t`` equals the hit's camera depth.
    """
    n_rays = len(dirs)
    best_t = np.full(n_rays, np.inf)
    best_f = np.full(n_rays, -1, dtype=np.int64)
    if len(triangles) == 0:
        return best_t, best_f
    v0 = triangles[:, 0]
    e1 = triangles[:, 1] - v0
    e2 = triangles[:, 2] - v0
    tvec = -v0  # ray origin is the camera centre
    for start in range(0, n_rays, chunk):
        d = dirs[start:start + chunk]
        p = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("tk,rtk->rt", e1, p)
        parallel = np.abs(det) < MT_EPS
        inv = np.where(parallel, 0.0, 1.0 / np.where(parallel, 1.0, det))
        u = np.einsum("tk,rtk->rt", tvec, p) * inv
        q = np.cross(tvec, e1)
        v = np.einsum("rk,tk->rt", d, q) * inv
        t = np.einsum("tk,tk->t", e2, q)[None, :] * inv
        hit = (~parallel) & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > MT_EPS)
        t = np.where(hit, t, np.inf)
        f = np.argmin(t, axis=1)
        tmin = t[np.arange(len(d)), f]
        best_t[start:start + chunk] = tmin
        best_f[start:start + chunk] = np.where(np.isfinite(tmin), f, -1)
    return best_t, best_f


def _scene_hits(scene: SyntheticScene, intr: CameraIntrinsics):
    meshes = [inst.mesh() for inst in scene.instances]
    owner = np.concatenate([np.full(len(m.faces), i, dtype=np.int64) for i, m in enumerate(meshes)]) \
        if meshes else np.zeros(0, dtype=np.int64)
    tris = np.concatenate([m.triangles() for m in meshes]) if meshes else np.zeros((0, 3, 3))
    dirs = pixel_rays(intr)
    t, face = raycast(tris, dirs)
    inst = np.where(face >= 0, owner[np.maximum(face, 0)] if len(owner) else -1, -1)
    return t.reshape(intr.height, intr.width), inst.reshape(intr.height, intr.width)


def render_mesh(mesh: TriangleMesh, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Depth map and coverage mask of one camera-frame mesh."""
    t, face = raycast(mesh.triangles(), pixel_rays(intr))
    depth = np.where(np.isfinite(t), t, 0.0).reshape(intr.height, intr.width)
    return depth, (face >= 0).reshape(intr.height, intr.width)


def render_depth(scene: SyntheticScene, intr: CameraIntrinsics | None = None) -> np.ndarray:
    intr = intr or scene.intrinsics
    t, _ = _scene_hits(scene, intr)
    return np.where(np.isfinite(t), t, 0.0)


def render_masks(scene: SyntheticScene, intr: CameraIntrinsics | None = None) -> list[np.ndarray]:
    intr = intr or scene.intrinsics
    _, owner = _scene_hits(scene, intr)
    return [owner == i for i in range(len(scene.instances))]


def render_image(scene: SyntheticScene, intr: CameraIntrinsics | None = None) -> np.ndarray:
    """Flat-coloured RGB image: one hue per instance, brightness falling with depth."""
    intr = intr or scene.intrinsics
    t, owner = _scene_hits(scene, intr)
    palette = np.array([[230, 80, 60], [60, 160, 230], [90, 200, 90], [220, 190, 60],
                        [170, 90, 210], [60, 200, 190], [240, 140, 40], [150, 150, 150]], dtype=float)
    img = np.zeros((intr.height, intr.width, 3))
    hit = owner >= 0
    if np.any(hit):
        z = t[hit]
        shade = 1.0 - 0.5 * (z - z.min()) / max(z.max() - z.min(), 1e-9)
        img[hit] = palette[owner[hit] % len(palette)] * shade[:, None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# scene construction


def random_rotation_vector(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    q = rng.standard_normal(4)
    rv = rotvec_from_quaternion(q)
    theta = np.linalg.norm(rv)
    if theta > max_angle and theta > 0:
        rv = rv / theta * rng.uniform(0.0, max_angle)
    return rv


def single_primitive_scene(seed: int, kind: str = "box", resolution: int = DEFAULT_RESOLUTION,
                           max_angle: float = np.pi, max_offset: float = 1.0,
                           scale_range=(0.5, 2.0), base_depth: float = 6.0,
                           spec: PrimitiveSpec | None = None) -> SyntheticScene:
    """One primitive with a random pose: rotation up to ``max_angle``, translation
    within ``max_offset`` of ``(0, 0, base_depth)``, scale drawn log-uniformly."""
    rng = np.random.default_rng(seed)
    if spec is None:
        spec = {
            "box": PrimitiveSpec("box", (1.0, 0.7, 0.45)),
            "cylinder": PrimitiveSpec("cylinder", (0.3, 1.0), 2),
            "icosphere": PrimitiveSpec("icosphere", (0.5,), 2),
        }[kind]
    rv = random_rotation_vector(rng, max_angle)
    offset = rng.standard_normal(3)
    offset *= rng.uniform(0.0, max_offset) / np.linalg.norm(offset)
    lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
    scale = float(np.exp(rng.uniform(lo, hi)))
    pose = Pose7(rv, np.array([0.0, 0.0, base_depth]) + offset, scale)
    return SyntheticScene([SceneInstance("inst0", spec.kind, spec, pose)],
                          default_intrinsics(resolution), seed)


def preset_scene(name: str, seed: int = 0, resolution: int = DEFAULT_RESOLUTION) -> SyntheticScene:
    if name == "two-primitives":
        intr = default_intrinsics(resolution)
        box = SceneInstance("inst0", "box", PrimitiveSpec("box", (1.0, 0.7, 0.45)),
                            Pose7([0.2, 0.5, 0.1], [-0.9, 0.2, 5.0], 1.1))
        cyl = SceneInstance("inst1", "cylinder", PrimitiveSpec("cylinder", (0.3, 1.0), 2),
                            Pose7([0.3, 0.0, 0.2], [0.9, -0.1, 5.5], 0.9))
        return SyntheticScene([box, cyl], intr, seed)
    if name == "single-box":
        return single_primitive_scene(seed, "box", resolution)
    raise ConfigError(f"unknown preset {name!r}")


def scene_from_dict(d: dict) -> SyntheticScene:
    """Build a scene from a JSON-style spec document."""
    try:
        intr_d = d.get("intrinsics")
        if intr_d is None:
            intr = default_intrinsics(int(d.get("resolution", DEFAULT_RESOLUTION)))
        else:
            intr = CameraIntrinsics.from_dict(intr_d)
        insts = []
        for i, inst in enumerate(d["instances"]):
            spec = PrimitiveSpec.from_dict(inst["primitive"])
            insts.append(SceneInstance(str(inst.get("id", f"inst{i}")),
                                       str(inst.get("category", spec.kind)),
                                       spec, Pose7.from_dict(inst["pose"])))
        return SyntheticScene(insts, intr, int(d.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise InvalidSpec(f"malformed scene spec: {exc}") from None


# ---------------------------------------------------------------------------
# emission


def emit_case(scene: SyntheticScene, out_dir, seed: int | None = None,
              depth_distortion=(1.0, 0.0)) -> dict:
    """Write depth, masks, image, meshes and ``manifest.json``; return the manifest.

    ``depth_distortion`` is the affine map ``(h0, q0)`` the mock depth
    estimator applies to the ray-cast depth.
    """
    seed = scene.seed if seed is None else seed
    out = Path(out_dir)
    try:
        (out / "masks").mkdir(parents=True, exist_ok=True)
        (out / "gt").mkdir(exist_ok=True)
        (out / "proposals").mkdir(exist_ok=True)
        intr = scene.intrinsics
        depth = render_depth(scene, intr)
        masks = render_masks(scene, intr)
        meshio.write_pfm(out / "depth.pfm", depth)
        meshio.write_image_png(out / "image.png", render_image(scene, intr))
        instances = []
        gt_meshes = []
        for inst, mask in zip(scene.instances, masks):
            mask_rel = f"masks/{inst.instance_id}.png"
            canon_rel = f"proposals/{inst.instance_id}_0.obj"
            gt_rel = f"gt/{inst.instance_id}.obj"
            meshio.write_mask_png(out / mask_rel, mask)
            meshio.write_obj(out / canon_rel, make_primitive(inst.spec))
            gt_mesh = inst.mesh()
            gt_meshes.append(gt_mesh)
            meshio.write_obj(out / gt_rel, gt_mesh)
            instances.append({
                "id": inst.instance_id,
                "category": inst.category,
                "confidence": 1.0,
                "mask": mask_rel,
                "proposals": [canon_rel],
                "primitive": inst.spec.to_dict(),
                "gt_mesh": gt_rel,
                "gt_pose": inst.pose.to_dict(),
            })
        if gt_meshes:
            meshio.write_obj(out / "gt_scene.obj", TriangleMesh.concatenate(gt_meshes))
        manifest = {
            "version": 1,
            "units": "meters",
            "seed": int(seed),
            "intrinsics": intr.to_dict(),
            "image": "image.png",
            "depth": "depth.pfm",
            "reference_depth": "depth.pfm",
            "instances": instances,
            "gt_scene": "gt_scene.obj" if gt_meshes else None,
            "mock": {"depth_distortion": {"scale": float(depth_distortion[0]),
                                          "shift": float(depth_distortion[1])}},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write case to {out}: {exc}") from None
    return manifest


def load_case(out_dir) -> SyntheticScene:
    """Rebuild the scene recorded in an emitted manifest."""
    out = Path(out_dir)
    try:
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read manifest in {out}: {exc}") from None
    insts = [SceneInstance(i["id"], i["category"], PrimitiveSpec.from_dict(i["primitive"]),
                           Pose7.from_dict(i["gt_pose"])) for i in manifest["instances"]]
    return SyntheticScene(insts, CameraIntrinsics.from_dict(manifest["intrinsics"]),
                          int(manifest.get("seed", 0)))
