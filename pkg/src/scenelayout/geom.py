"""Core geometry: rotations, 7-DoF similarity transforms, pinhole projection,
mesh sampling, exact nearest-neighbour search and Chamfer distances.

Point clouds are plain ``(N, 3)`` / ``(N, 2)`` float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, EmptyMesh, InvalidMesh, NonPositiveDepth, ConfigError


def _as_points(points, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size in (2, 3) and dim in (None, arr.size):
        arr = arr[None, :]
    if arr.size == 0:
        return arr.reshape(0, dim or (arr.shape[-1] if arr.ndim == 2 else 3))
    if arr.ndim != 2 or (dim is not None and arr.shape[1] != dim):
        raise ValueError(f"expected an (N, {dim or 'D'}) point array, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# rotations


def skew(k: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[k]x`` so that ``skew(k) @ x == cross(k, x)``."""
    return np.array(
        [[0.0, -k[2], k[1]],
         [k[2], 0.0, -k[0]],
         [-k[1], k[0], 0.0]]
    )


def rotation_matrix(rv) -> np.ndarray:
    """Rodrigues formula for an axis-angle vector; the zero vector maps to identity."""
    rv = np.asarray(rv, dtype=np.float64)
    theta = float(np.linalg.norm(rv))
    if theta < 1e-12:
        return np.eye(3) + skew(rv)
    K = skew(rv / theta)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rotation_jacobians(rv) -> np.ndarray:
    """Derivatives ``dR/dr_i`` of the Rodrigues map, shape ``(3, 3, 3)``.

    Uses the closed form ``dR/dr_i = (r_i [r]x + [r x (I - R) e_i]x) R / |r|^2``,
    which reduces to ``[e_i]x`` at the origin.
    """
    rv = np.asarray(rv, dtype=np.float64)
    theta2 = float(rv @ rv)
    eye = np.eye(3)
    if theta2 < 1e-16:
        return np.stack([skew(eye[i]) for i in range(3)])
    R = rotation_matrix(rv)
    rx = skew(rv)
    out = np.empty((3, 3, 3))
    for i in range(3):
        col = np.cross(rv, (eye - R)[:, i])
        out[i] = (rv[i] * rx + skew(col)) @ R / theta2
    return out


def canonical_rotvec(rv) -> np.ndarray:
    """Same rotation with angle folded into ``[0, pi]``."""
    rv = np.asarray(rv, dtype=np.float64).copy()
    theta = float(np.linalg.norm(rv))
    if theta <= np.pi:
        return rv
    axis = rv / theta
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    if wrapped < 0.0:
        axis, wrapped = -axis, -wrapped
    return axis * wrapped


def rotvec_from_matrix(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    if theta < 1e-12:
        return np.zeros(3)
    if np.pi - theta > 1e-6:
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        return w / (2.0 * np.sin(theta)) * theta
    # near pi: axis from the symmetric part
    B = (R + np.eye(3)) / 2.0
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / np.sqrt(B[i, i])
    axis /= np.linalg.norm(axis)
    return axis * theta


def rotvec_from_quaternion(q) -> np.ndarray:
    """Axis-angle vector for a (w, x, y, z) quaternion; angle in ``[0, pi]``."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    w, xyz = q[0], q[1:]
    s = float(np.linalg.norm(xyz))
    if s < 1e-15:
        return np.zeros(3)
    theta = 2.0 * np.arctan2(s, w)
    return xyz / s * theta


def geodesic_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Rotation angle (radians) of ``Ra^T Rb``."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# poses and cameras


@dataclass(frozen=True)
class Pose7:
    """Similarity transform ``p -> scale * R(rotation) @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        rot = canonical_rotvec(np.asarray(self.rotation, dtype=np.float64).reshape(3))
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        scale = float(self.scale)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans)) and np.isfinite(scale)):
            raise ConfigError("pose components must be finite")
        if scale <= 0.0:
            raise ConfigError(f"pose scale must be positive, got {scale}")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def identity(cls) -> "Pose7":
        return cls()

    @classmethod
    def from_params(cls, params) -> "Pose7":
        p = np.asarray(params, dtype=np.float64)
        return cls(p[0:3], p[3:6], float(p[6]))

    def params(self) -> np.ndarray:
        """Flat ``(rx, ry, rz, tx, ty, tz, v)`` vector."""
        return np.concatenate([self.rotation, self.translation, [self.scale]])

    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation)

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation],
            "translation": [float(x) for x in self.translation],
            "scale": float(self.scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose7":
        return cls(d["rotation"], d["translation"], d["scale"])

    def __eq__(self, other):
        if not isinstance(other, Pose7):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and self.scale == other.scale)

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes(), self.scale))


def apply_pose(pose: Pose7, cloud) -> np.ndarray:
    pts = _as_points(cloud, 3)
    R = rotation_matrix(pose.rotation)
    return pose.scale * (pts @ R.T) + pose.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    @property
    def max_side(self) -> int:
        return max(self.width, self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def project(intr: CameraIntrinsics, cloud) -> np.ndarray:
    """Pinhole projection to continuous pixel coordinates.

    Raises:
        NonPositiveDepth: if any point has ``z <= 0``.
    """
    pts = _as_points(cloud, 3)
    z = pts[:, 2]
    if np.any(z <= 0.0):
        raise NonPositiveDepth(f"{int(np.sum(z <= 0.0))} point(s) at or behind the camera plane")
    u = intr.fx * pts[:, 0] / z + intr.cx
    v = intr.fy * pts[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1)


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise InvalidMesh("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise InvalidMesh("face with repeated vertex index")
        if not np.all(np.isfinite(v)):
            raise InvalidMesh("non-finite vertex coordinate")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def transformed(self, pose: Pose7) -> "TriangleMesh":
        return TriangleMesh(apply_pose(pose, self.vertices), self.faces)

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        verts, faces, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + offset)
            offset += len(m.vertices)
        if not verts:
            return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def sample_mesh(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Draw ``n`` area-uniform surface samples (deterministic per seed)."""
    if n < 0:
        raise ValueError("sample count must be non-negative")
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0.0:
        raise EmptyMesh("mesh has zero surface area")
    if n == 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles()[idx]
    a = (1.0 - r1)[:, None]
    b = (r1 * (1.0 - r2))[:, None]
    c = (r1 * r2)[:, None]
    return a * tri[:, 0] + b * tri[:, 1] + c * tri[:, 2]


def cull_to_frustum(mesh: TriangleMesh, intr: CameraIntrinsics) -> TriangleMesh:
    """Drop faces with no vertex inside the camera's view frustum.

    Culling is per face; kept faces are not clipped. Unused vertices are removed.
    """
    v = mesh.vertices
    z = v[:, 2]
    inside = z > 0.0
    zs = np.where(inside, z, 1.0)
    u = intr.fx * v[:, 0] / zs + intr.cx
    w = intr.fy * v[:, 1] / zs + intr.cy
    inside &= (u >= 0.0) & (u <= intr.width) & (w >= 0.0) & (w <= intr.height)
    faces = mesh.faces[inside[mesh.faces].any(axis=1)]
    used, remap = np.unique(faces, return_inverse=True)
    return TriangleMesh(v[used], remap.reshape(-1, 3))


# ---------------------------------------------------------------------------
# nearest neighbours and Chamfer


def pair_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean distance between two equally shaped point arrays."""
    d = a - b
    return np.sqrt((d * d).sum(axis=-1))


class NNIndex:
    """Exact nearest-neighbour index over a fixed point cloud (2D or 3D).

    Backed by a kd-tree; returned distances are recomputed with
    :func:`pair_distances` so they agree bit-for-bit with a brute-force scan.
    """

    def __init__(self, cloud):
        pts = np.asarray(cloud, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, distances)`` of the nearest indexed point per query."""
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1
        q2 = q[None, :] if single else q
        if len(q2) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        _, idx = self._tree.query(q2, k=1)
        idx = np.asarray(idx, dtype=np.int64)
        dist = pair_distances(q2, self.points[idx])
        if single:
            return idx[0], dist[0]
        return idx, dist

    def nearest(self, p) -> tuple[np.ndarray, float]:
        idx, dist = self.query(np.asarray(p, dtype=np.float64))
        return self.points[idx], float(dist)


def nn_build(cloud) -> NNIndex:
    return NNIndex(cloud)


def nn_query(index: NNIndex, p) -> tuple[np.ndarray, float]:
    return index.nearest(p)


class ChamferResult(NamedTuple):
    forward: float
    backward: float
    symmetric: float


def _directional(a: np.ndarray, b: np.ndarray) -> float:
    _, d = NNIndex(b).query(a)
    return float(d.mean())


def _check_pair(a, b, dim):
    a = _as_points(a, dim)
    b = _as_points(b, dim)
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("Chamfer distance needs two nonempty clouds")
    return a, b


def chamfer3(a, b) -> ChamferResult:
    """Mean nearest-neighbour distance a->b, b->a and their average."""
    a, b = _check_pair(a, b, 3)
    fwd = _directional(a, b)
    bwd = _directional(b, a)
    return ChamferResult(fwd, bwd, (fwd + bwd) / 2.0)


def chamfer2(a, b) -> float:
    a, b = _check_pair(a, b, 2)
    return (_directional(a, b) + _directional(b, a)) / 2.0
