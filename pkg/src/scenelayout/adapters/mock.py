"""Deterministic stand-ins for the five priors, driven by a scene manifest.

Every mock is a pure function of its configuration and inputs, so reruns
with the same seed are byte-identical.
"""

from __future__ import annotations

import zlib

import numpy as np
from PIL import Image

from .. import synthscene
from ..errors import ManifestError
from ..geom import TriangleMesh
from ..manifest import SceneManifest
from ..priorsel import DetectionRecord
from .base import ImageBuffer, check_count

EMBED_DIM = 128
EMBED_GRID = 16


def _digest(image: ImageBuffer) -> int:
    return zlib.crc32(image.data) ^ (image.width << 16) ^ image.height


class MockSegmenter:
    """Returns the manifest's instances and masks, confidences from the manifest
    unless overridden per instance id."""

    def __init__(self, manifest: SceneManifest, confidences: dict[str, float] | None = None):
        self.manifest = manifest
        self.confidences = dict(confidences or {})

    def segment(self, image: ImageBuffer) -> list[DetectionRecord]:
        intr = self.manifest.intrinsics
        if (image.width, image.height) != (intr.width, intr.height):
            raise ManifestError("image size differs from the manifest intrinsics")
        out = []
        for inst in self.manifest.instances:
            conf = self.confidences.get(inst.instance_id, inst.confidence)
            out.append(DetectionRecord(inst.instance_id, inst.category, float(conf),
                                       self.manifest.load_mask(inst)))
        return out


class MockEnhancer:
    """The input crop followed by ``m - 1`` seeded noisy copies."""

    def __init__(self, seed: int = 0, noise: float = 12.0):
        self.seed = int(seed)
        self.noise = float(noise)

    def enhance(self, crop: ImageBuffer, prompt: str, m: int) -> list[ImageBuffer]:
        check_count(m)
        base = crop.to_array().astype(np.float64)
        out = [crop]
        key = zlib.crc32(prompt.encode("utf-8"))
        for j in range(1, m):
            rng = np.random.default_rng([self.seed, _digest(crop), key, j])
            gain = rng.uniform(0.85, 1.15)
            pix = base * gain + rng.normal(0.0, self.noise, base.shape)
            if crop.channels == 4:
                pix[..., 3] = base[..., 3]
            out.append(ImageBuffer.from_array(np.clip(np.rint(pix), 0, 255).astype(np.uint8)))
        return out


class MockEmbedder:
    """Random-projection hash of a downsampled, contrast-normalised image.

    Nearby images (small pixel perturbations) map to nearby directions, so
    cosine ranking behaves sensibly without a learned encoder.
    """

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        self.dim = int(dim)
        rng = np.random.default_rng([int(seed), 0xE5])
        self._proj = rng.standard_normal((self.dim, EMBED_GRID * EMBED_GRID * 3 + 1))

    def embed(self, image: ImageBuffer) -> np.ndarray:
        rgb = Image.fromarray(image.to_array()[..., :3])
        small = np.asarray(rgb.resize((EMBED_GRID, EMBED_GRID), Image.Resampling.BOX), dtype=np.float64)
        x = small.ravel() / 255.0
        x = x - x.mean()
        norm = np.linalg.norm(x)
        if norm > 0:
            x = x / norm
        return self._proj @ np.append(x, 1.0)


class MockShapeGenerator:
    """Returns the primitive recorded for an instance, optionally with vertex
    jitter seeded by the input image."""

    def __init__(self, manifest: SceneManifest, seed: int = 0, jitter: float = 0.0):
        self.manifest = manifest
        self.seed = int(seed)
        self.jitter = float(jitter)

    def base_mesh(self, instance_id: str) -> TriangleMesh:
        inst = self.manifest.instance(instance_id)
        if inst.primitive:
            return synthscene.make_primitive(synthscene.PrimitiveSpec.from_dict(inst.primitive))
        if inst.proposals:
            return self.manifest.load_proposals(inst)[0]
        raise ManifestError(f"instance {instance_id!r} has no primitive or proposal to return")

    def generate_shape(self, image: ImageBuffer, instance_id: str | None = None) -> TriangleMesh:
        if instance_id is None:
            raise ManifestError("the mock shape generator needs the instance id")
        mesh = self.base_mesh(instance_id)
        if self.jitter <= 0:
            return mesh
        rng = np.random.default_rng([self.seed, _digest(image)])
        noise = rng.uniform(-self.jitter, self.jitter, mesh.vertices.shape)
        return TriangleMesh(mesh.vertices + noise, mesh.faces)


class MockDepthEstimator:
    """Ray-cast depth passed through the affine distortion ``h0 * z + q0``;
    invalid pixels stay 0."""

    def __init__(self, manifest: SceneManifest, scale: float = 1.0, shift: float = 0.0):
        self.manifest = manifest
        self.scale = float(scale)
        self.shift = float(shift)

    @classmethod
    def from_manifest(cls, manifest: SceneManifest) -> "MockDepthEstimator":
        d = manifest.mock.get("depth_distortion") or {}
        return cls(manifest, float(d.get("scale", 1.0)), float(d.get("shift", 0.0)))

    def estimate_depth(self, image: ImageBuffer) -> np.ndarray:
        z = self.manifest.load_depth()
        valid = z > 0
        return np.where(valid, self.scale * z + self.shift, 0.0)
