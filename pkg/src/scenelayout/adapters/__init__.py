"""Interfaces to the external priors (segmentation, enhancement, embedding,
shape generation, depth) with seeded mock and remote HTTP backends."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError
from ..manifest import SceneManifest
from .base import (
    CROP_FRACTION,
    AdapterEndpoint,
    DepthEstimator,
    Embedder,
    Enhancer,
    ImageBuffer,
    Segmenter,
    ShapeGenerator,
    ShapeProposal,
    crop_fraction,
    instance_bbox,
    normalize_crop,
)
from .mock import MockDepthEstimator, MockEmbedder, MockEnhancer, MockSegmenter, MockShapeGenerator
from .remote import (
    RemoteDepthEstimator,
    RemoteEmbedder,
    RemoteEnhancer,
    RemoteSegmenter,
    RemoteShapeGenerator,
)

ADAPTER_NAMES = ("segment", "enhance", "embed", "shape", "depth")


@dataclass
class AdapterSet:
    segmenter: Segmenter
    enhancer: Enhancer
    embedder: Embedder
    shaper: ShapeGenerator
    depth: DepthEstimator
    sources: dict


def parse_backend_flags(items) -> dict[str, str]:
    """``["shape=http://host:8000", ...]`` -> ``{"shape": "http://host:8000"}``."""
    out = {}
    for item in items or ():
        name, sep, target = item.partition("=")
        name = name.strip()
        if not sep or name not in ADAPTER_NAMES or not target.strip():
            raise ConfigError(f"bad backend spec {item!r}; expected <{'|'.join(ADAPTER_NAMES)}>=<mock|url>")
        out[name] = target.strip()
    return out


def build_adapters(manifest: SceneManifest, backends: dict[str, str] | None = None, seed: int = 0,
                   shape_jitter: float = 0.0, confidences: dict[str, float] | None = None,
                   timeout: float = 60.0, retries: int = 2, auth_token: str | None = None,
                   transport=None) -> AdapterSet:
    """One backend per prior: ``"mock"`` (default) or the base URL of a remote service."""
    backends = dict(backends or {})
    unknown = set(backends) - set(ADAPTER_NAMES)
    if unknown:
        raise ConfigError(f"unknown adapters {sorted(unknown)}")
    sources = {name: backends.get(name, "mock") for name in ADAPTER_NAMES}

    def remote(name, cls, **kw):
        ep = AdapterEndpoint(sources[name], timeout, retries, auth_token)
        return cls(ep, transport=transport, **kw)

    def pick(name, mock_factory, remote_cls):
        return mock_factory() if sources[name] == "mock" else remote(name, remote_cls)

    return AdapterSet(
        segmenter=pick("segment", lambda: MockSegmenter(manifest, confidences), RemoteSegmenter),
        enhancer=pick("enhance", lambda: MockEnhancer(seed), RemoteEnhancer),
        embedder=pick("embed", lambda: MockEmbedder(seed), RemoteEmbedder),
        shaper=pick("shape", lambda: MockShapeGenerator(manifest, seed, shape_jitter), RemoteShapeGenerator),
        depth=pick("depth", lambda: MockDepthEstimator.from_manifest(manifest), RemoteDepthEstimator),
        sources=sources,
    )


__all__ = [
    "ADAPTER_NAMES", "AdapterEndpoint", "AdapterSet", "CROP_FRACTION", "ImageBuffer", "ShapeProposal",
    "MockDepthEstimator", "MockEmbedder", "MockEnhancer", "MockSegmenter", "MockShapeGenerator",
    "RemoteDepthEstimator", "RemoteEmbedder", "RemoteEnhancer", "RemoteSegmenter",
    "RemoteShapeGenerator", "build_adapters", "crop_fraction", "instance_bbox", "normalize_crop",
    "parse_backend_flags",
]
