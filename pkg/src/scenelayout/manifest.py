"""Scene manifests: the JSON document that points at a case's depth, masks,
proposals and (optionally) ground truth. Paths are relative to the manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import meshio
from .depthfit import DepthAlignment
from .errors import FormatError, ManifestError, SceneLayoutError
from .geom import CameraIntrinsics, Pose7, TriangleMesh

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ManifestInstance:
    instance_id: str
    category: str
    confidence: float
    mask: Path
    proposals: tuple[Path, ...] = ()
    primitive: dict | None = None
    gt_mesh: Path | None = None
    gt_pose: Pose7 | None = None


@dataclass
class SceneManifest:
    root: Path
    intrinsics: CameraIntrinsics
    depth: Path
    instances: list[ManifestInstance]
    image: Path | None = None
    reference_depth: Path | None = None
    depth_alignment: DepthAlignment | None = None
    gt_scene: Path | None = None
    seed: int = 0
    mock: dict = field(default_factory=dict)

    def instance(self, instance_id: str) -> ManifestInstance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise ManifestError(f"no instance {instance_id!r} in manifest")

    def load_depth(self) -> np.ndarray:
        return _load(meshio.read_pfm, self.depth, (self.intrinsics.height, self.intrinsics.width))

    def load_reference_depth(self) -> np.ndarray | None:
        if self.reference_depth is None:
            return None
        return _load(meshio.read_pfm, self.reference_depth, (self.intrinsics.height, self.intrinsics.width))

    def load_image(self) -> np.ndarray | None:
        if self.image is None:
            return None
        return _load(meshio.read_image_png, self.image, (self.intrinsics.height, self.intrinsics.width))

    def load_mask(self, inst: ManifestInstance) -> np.ndarray:
        return _load(meshio.read_mask_png, inst.mask, (self.intrinsics.height, self.intrinsics.width))

    def load_proposals(self, inst: ManifestInstance) -> list[TriangleMesh]:
        return [_load(meshio.read_mesh, p) for p in inst.proposals]

    def load_gt_mesh(self, inst: ManifestInstance) -> TriangleMesh | None:
        return None if inst.gt_mesh is None else _load(meshio.read_mesh, inst.gt_mesh)


def _load(reader, path: Path, shape=None):
    try:
        data = reader(path)
    except OSError as exc:
        raise ManifestError(f"cannot read {path}: {exc.strerror or exc}") from None
    except FormatError as exc:
        raise ManifestError(f"cannot parse {path}: {exc}") from None
    if shape is not None and tuple(data.shape[:2]) != shape:
        raise ManifestError(f"{path.name} has size {data.shape[1]}x{data.shape[0]}, "
                            f"expected {shape[1]}x{shape[0]}")
    return data


def _path(root: Path, rel, what: str, required: bool = True) -> Path | None:
    if rel is None:
        if required:
            raise ManifestError(f"manifest lacks {what}")
        return None
    p = (root / str(rel)).resolve()
    if not p.is_file():
        raise ManifestError(f"{what} file not found: {rel}")
    return p


def parse_manifest(doc: dict, root) -> SceneManifest:
    root = Path(root)
    try:
        intr = CameraIntrinsics.from_dict(doc["intrinsics"])
        insts = []
        seen = set()
        for i, d in enumerate(doc["instances"]):
            iid = str(d.get("id", f"inst{i}"))
            if iid in seen:
                raise ManifestError(f"duplicate instance id {iid!r}")
            seen.add(iid)
            conf = float(d.get("confidence", 1.0))
            if not 0.0 <= conf <= 1.0:
                raise ManifestError(f"instance {iid!r} confidence {conf} outside [0, 1]")
            insts.append(ManifestInstance(
                instance_id=iid,
                category=str(d.get("category", "object")),
                confidence=conf,
                mask=_path(root, d.get("mask"), f"mask of {iid}"),
                proposals=tuple(_path(root, p, f"proposal of {iid}") for p in d.get("proposals", [])),
                primitive=d.get("primitive"),
                gt_mesh=_path(root, d.get("gt_mesh"), f"ground truth of {iid}", required=False),
                gt_pose=Pose7.from_dict(d["gt_pose"]) if d.get("gt_pose") else None,
            ))
        align = None
        if doc.get("depth_alignment"):
            a = doc["depth_alignment"]
            align = DepthAlignment(float(a["scale"]), float(a["shift"]))
        return SceneManifest(
            root=root,
            intrinsics=intr,
            depth=_path(root, doc.get("depth"), "depth"),
            instances=insts,
            image=_path(root, doc.get("image"), "image", required=False),
            reference_depth=_path(root, doc.get("reference_depth"), "reference depth", required=False),
            depth_alignment=align,
            gt_scene=_path(root, doc.get("gt_scene"), "ground-truth scene", required=False),
            seed=int(doc.get("seed", 0)),
            mock=dict(doc.get("mock") or {}),
        )
    except ManifestError:
        raise
    except SceneLayoutError as exc:
        raise ManifestError(f"invalid manifest: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed manifest: {exc!r}") from None


def load_manifest(path) -> SceneManifest:
    """Load ``path`` (a manifest file or a directory containing ``manifest.json``)."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {p}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise ManifestError(f"manifest {p} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    return parse_manifest(doc, p.parent)
