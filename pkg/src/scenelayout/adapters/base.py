"""Types shared by every prior backend, plus instance-crop normalisation."""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from PIL import Image

from ..errors import ConfigError, EmptyMask, FormatError
from ..geom import TriangleMesh
from ..priorsel import DetectionRecord

CROP_FRACTION = 0.6


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major 8-bit image with 3 (RGB) or 4 (RGBA) channels."""

    width: int
    height: int
    channels: int
    data: bytes = field(repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("image must be at least 1x1")
        if self.channels not in (3, 4):
            raise ConfigError("image must have 3 or 4 channels")
        if len(self.data) != self.width * self.height * self.channels:
            raise ConfigError("image byte length does not match its size")

    @classmethod
    def from_array(cls, pixels) -> "ImageBuffer":
        arr = np.asarray(pixels)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        if arr.ndim != 3:
            raise ConfigError(f"cannot build an image from shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        h, w, c = arr.shape
        return cls(w, h, c, arr.tobytes())

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8).reshape(self.height, self.width, self.channels)

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.to_array()).save(buf, format="PNG")
        return buf.getvalue()

    @classmethod
    def from_png(cls, data: bytes) -> "ImageBuffer":
        try:
            with Image.open(io.BytesIO(data)) as im:
                if im.mode not in ("RGB", "RGBA"):
                    im = im.convert("RGBA" if "A" in im.mode else "RGB")
                return cls.from_array(np.asarray(im))
        except (OSError, ValueError) as exc:
            raise FormatError(f"undecodable PNG payload: {exc}") from None

    def to_wire(self) -> dict:
        return {"width": self.width, "height": self.height, "channels": self.channels,
                "png": base64.b64encode(self.to_png()).decode("ascii")}


@dataclass(frozen=True)
class AdapterEndpoint:
    base_url: str
    timeout: float = 60.0
    retries: int = 2
    auth_token: str | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")
        if not self.timeout > 0:
            raise ConfigError("timeout must be positive")
        if not self.base_url:
            raise ConfigError("endpoint URL is empty")


@dataclass(frozen=True)
class ShapeProposal:
    instance_id: str
    candidate_index: int
    mesh: TriangleMesh
    source: str = "mock"

    def __post_init__(self):
        if self.source not in ("mock", "remote", "file"):
            raise ConfigError(f"unknown proposal source {self.source!r}")


# backend interfaces; the pipeline only relies on these call shapes


class Segmenter(Protocol):
    def segment(self, image: ImageBuffer) -> list[DetectionRecord]: ...


class Enhancer(Protocol):
    def enhance(self, crop: ImageBuffer, prompt: str, m: int) -> list[ImageBuffer]: ...


class Embedder(Protocol):
    def embed(self, image: ImageBuffer) -> np.ndarray: ...


class ShapeGenerator(Protocol):
    def generate_shape(self, image: ImageBuffer, instance_id: str | None = None) -> TriangleMesh: ...


class DepthEstimator(Protocol):
    def estimate_depth(self, image: ImageBuffer) -> np.ndarray: ...


def crop_fraction(fraction: float | None = None, scale_knob: float | None = None) -> float:
    """Resolve the instance size setting.

    ``fraction`` is the target size as a fraction of the image's larger side.
    ``scale_knob`` is the same quantity on a 0-10 scale (6 means 0.6). When
    both are given the knob wins.
    """
    if scale_knob is not None:
        if not scale_knob > 0:
            raise ConfigError("scale knob must be positive")
        return float(scale_knob) / 10.0
    f = CROP_FRACTION if fraction is None else float(fraction)
    if not f > 0:
        raise ConfigError("crop fraction must be positive")
    return f


def normalize_crop(image: ImageBuffer, mask, fraction: float = CROP_FRACTION) -> ImageBuffer:
    """Re-centre the masked instance on a canvas of the image's size.

    The instance is scaled uniformly so its larger bounding-box side becomes
    ``fraction * max(W, H)``, shrunk further if needed to fit the canvas.
    Pixels outside the instance are black (and transparent for RGBA input).
    """
    m = np.asarray(mask, dtype=bool)
    if m.shape != (image.height, image.width):
        raise ConfigError("mask does not match the image size")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise EmptyMask("cannot crop an empty mask")
    if not fraction > 0:
        raise ConfigError("crop fraction must be positive")
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    bh, bw = r1 - r0, c1 - c0
    W, H = image.width, image.height
    s = fraction * max(W, H) / max(bw, bh)
    s = min(s, W / bw, H / bh)
    nw = min(W, max(1, int(round(bw * s))))
    nh = min(H, max(1, int(round(bh * s))))

    pix = image.to_array()
    rgba = np.zeros((bh, bw, 4), dtype=np.uint8)
    rgba[..., :3] = pix[r0:r1, c0:c1, :3]
    rgba[..., 3] = 255 if image.channels == 3 else pix[r0:r1, c0:c1, 3]
    rgba[~m[r0:r1, c0:c1]] = 0
    scaled = np.asarray(Image.fromarray(rgba).resize((nw, nh), Image.Resampling.NEAREST))

    out = np.zeros((H, W, 4), dtype=np.uint8)
    top = (H - nh) // 2
    left = (W - nw) // 2
    out[top:top + nh, left:left + nw] = scaled
    return ImageBuffer.from_array(out if image.channels == 4 else out[..., :3])


def instance_bbox(pixels) -> tuple[int, int, int, int] | None:
    """``(row0, row1, col0, col1)`` of the non-black pixels, half-open; None if all black."""
    arr = np.asarray(pixels)
    occ = arr.any(axis=2) if arr.ndim == 3 else arr.astype(bool)
    rows = np.flatnonzero(occ.any(axis=1))
    cols = np.flatnonzero(occ.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1] + 1), int(cols[0]), int(cols[-1] + 1)


def check_count(m: int) -> None:
    if m < 1:
        raise ConfigError("need at least one enhanced candidate")

