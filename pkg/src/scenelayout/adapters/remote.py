"""HTTP clients for remotely served priors.

Wire protocol: ``POST {base_url}/{segment,enhance,embed,shape,depth}`` with a
UTF-8 JSON body; images travel as base64 PNG, depth maps as base64
little-endian float32 in row-major order. Requests and responses carry a
schema version ``"v"``.
"""

from __future__ import annotations

import base64
import binascii

import httpx
import numpy as np

from ..errors import EmptyMesh, FormatError, InvalidMesh, RemoteFailure, SchemaError
from ..geom import TriangleMesh
from ..priorsel import DetectionRecord
from .base import AdapterEndpoint, ImageBuffer, check_count

WIRE_VERSION = 1


def _b64(s, what: str) -> bytes:
    if not isinstance(s, str):
        raise SchemaError(f"{what} must be a base64 string")
    try:
        return base64.b64decode(s, validate=True)
    except (binascii.Error, ValueError):
        raise SchemaError(f"{what} is not valid base64") from None


def _field(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    val = doc[key]
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise SchemaError(f"{where}: field {key!r} has the wrong type")
    return val


def decode_image(doc, where: str) -> ImageBuffer:
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: image must be an object")
    try:
        img = ImageBuffer.from_png(_b64(_field(doc, "png", str, where), f"{where}.png"))
    except FormatError as exc:
        raise SchemaError(f"{where}: {exc}") from None
    for key, val in (("width", img.width), ("height", img.height)):
        if key in doc and doc[key] != val:
            raise SchemaError(f"{where}: declared {key} {doc[key]} but payload has {val}")
    return img


class RemoteClient:
    """Posts JSON to one prior service with per-call timeout and bounded retries.

    Transport errors, timeouts and 5xx responses are retried up to
    ``endpoint.retries`` times; 4xx responses fail at once. The last failure is
    raised as :class:`RemoteFailure`.
    """

    def __init__(self, endpoint: AdapterEndpoint, transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint
        self._transport = transport

    def post(self, route: str, payload: dict) -> dict:
        url = self.endpoint.base_url.rstrip("/") + "/" + route
        headers = {"Content-Type": "application/json"}
        if self.endpoint.auth_token:
            headers["Authorization"] = f"Bearer {self.endpoint.auth_token}"
        body = dict(payload, v=WIRE_VERSION)
        last = "no attempt made"
        with httpx.Client(timeout=self.endpoint.timeout, transport=self._transport) as client:
            for _ in range(self.endpoint.retries + 1):
                try:
                    resp = client.post(url, json=body, headers=headers)
                except httpx.HTTPError as exc:
                    last = f"{type(exc).__name__}: {exc}"
                    continue
                if resp.is_success:
                    return self._decode(resp, route)
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code < 500:
                    break
        raise RemoteFailure(f"{route} at {self.endpoint.base_url} failed: {last}")

    @staticmethod
    def _decode(resp: httpx.Response, route: str) -> dict:
        try:
            doc = resp.json()
        except ValueError:
            raise SchemaError(f"{route}: response is not JSON") from None
        if not isinstance(doc, dict):
            raise SchemaError(f"{route}: response must be a JSON object")
        if doc.get("v") != WIRE_VERSION:
            raise SchemaError(f"{route}: unsupported schema version {doc.get('v')!r}")
        return doc


class RemoteSegmenter(RemoteClient):
    def segment(self, image: ImageBuffer) -> list[DetectionRecord]:
        doc = self.post("segment", {"image": image.to_wire()})
        dets = _field(doc, "detections", list, "segment")
        out = []
        for i, d in enumerate(dets):
            where = f"segment.detections[{i}]"
            if not isinstance(d, dict):
                raise SchemaError(f"{where} must be an object")
            mask = decode_image(_field(d, "mask", dict, where), where + ".mask").to_array()
            if mask.shape[:2] != (image.height, image.width):
                raise SchemaError(f"{where}: mask size differs from the image")
            conf = float(_field(d, "confidence", (int, float), where))
            if not 0.0 <= conf <= 1.0:
                raise SchemaError(f"{where}: confidence outside [0, 1]")
            out.append(DetectionRecord(str(d.get("instance_id", f"inst{i}")),
                                       str(_field(d, "category", str, where)), conf,
                                       mask[..., :3].max(axis=2) >= 128))
        return out


class RemoteEnhancer(RemoteClient):
    def enhance(self, crop: ImageBuffer, prompt: str, m: int) -> list[ImageBuffer]:
        check_count(m)
        doc = self.post("enhance", {"image": crop.to_wire(), "prompt": prompt, "count": m})
        imgs = _field(doc, "images", list, "enhance")
        if len(imgs) != m:
            raise SchemaError(f"enhance: asked for {m} images, got {len(imgs)}")
        return [decode_image(x, f"enhance.images[{i}]") for i, x in enumerate(imgs)]


class RemoteEmbedder(RemoteClient):
    def __init__(self, endpoint: AdapterEndpoint, dim: int | None = None, transport=None):
        super().__init__(endpoint, transport)
        self.dim = dim

    def embed(self, image: ImageBuffer) -> np.ndarray:
        doc = self.post("embed", {"image": image.to_wire()})
        vec = _field(doc, "embedding", list, "embed")
        try:
            arr = np.asarray(vec, dtype=np.float64)
        except (TypeError, ValueError):
            raise SchemaError("embed: embedding must be a list of numbers") from None
        if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
            raise SchemaError("embed: embedding must be a nonempty finite vector")
        if self.dim is None:
            self.dim = arr.size
        elif arr.size != self.dim:
            raise SchemaError(f"embed: dimension {arr.size} differs from expected {self.dim}")
        return arr


class RemoteShapeGenerator(RemoteClient):
    def generate_shape(self, image: ImageBuffer, instance_id: str | None = None) -> TriangleMesh:
        payload = {"image": image.to_wire()}
        if instance_id is not None:
            payload["instance_id"] = instance_id
        doc = self.post("shape", payload)
        try:
            v = np.asarray(_field(doc, "vertices", list, "shape"), dtype=np.float64)
            f = np.asarray(_field(doc, "faces", list, "shape"), dtype=np.int64)
        except (TypeError, ValueError):
            raise SchemaError("shape: vertices/faces must be numeric arrays") from None
        if v.size == 0 or f.size == 0:
            raise EmptyMesh("remote shape generator returned an empty mesh")
        if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3:
            raise SchemaError("shape: vertices and faces must be N x 3")
        try:
            return TriangleMesh(v, f)
        except InvalidMesh as exc:
            raise SchemaError(f"shape: {exc}") from None


class RemoteDepthEstimator(RemoteClient):
    def estimate_depth(self, image: ImageBuffer) -> np.ndarray:
        doc = self.post("depth", {"image": image.to_wire()})
        w = _field(doc, "width", int, "depth")
        h = _field(doc, "height", int, "depth")
        if (w, h) != (image.width, image.height):
            raise SchemaError(f"depth: map is {w}x{h}, image is {image.width}x{image.height}")
        raw = _b64(_field(doc, "depth", str, "depth"), "depth.depth")
        if len(raw) != 4 * w * h:
            raise SchemaError("depth: payload length does not match the declared size")
        return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)


def encode_depth(depth: np.ndarray) -> dict:
    """Wire form of a depth map (used by servers and tests)."""
    d = np.asarray(depth, dtype="<f4")
    return {"width": int(d.shape[1]), "height": int(d.shape[0]),
            "depth": base64.b64encode(d.tobytes()).decode("ascii")}
