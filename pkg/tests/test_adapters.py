import base64
import json

import httpx
import numpy as np
import pytest

from scenelayout import adapters as ad
from scenelayout import synthscene as ss
from scenelayout.adapters import remote as rm
from scenelayout.errors import ConfigError, EmptyMask, EmptyMesh, RemoteFailure, SchemaError
from scenelayout.manifest import load_manifest


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("case")
    ss.emit_case(ss.preset_scene("two-primitives", resolution=64), out, seed=3,
                 depth_distortion=(0.5, 0.2))
    return load_manifest(out)


def _image(w=32, h=24, seed=0):
    rng = np.random.default_rng(seed)
    return ad.ImageBuffer.from_array(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


# ---------------------------------------------------------------- image buffer

def test_image_buffer_roundtrip():
    img = _image()
    assert ad.ImageBuffer.from_png(img.to_png()) == img
    rgba = ad.ImageBuffer.from_array(np.zeros((4, 5, 4), np.uint8))
    assert rgba.channels == 4 and rgba.to_array().shape == (4, 5, 4)
    with pytest.raises(ConfigError):
        ad.ImageBuffer(2, 2, 3, b"\x00" * 5)
    with pytest.raises(ConfigError):
        ad.ImageBuffer(2, 2, 2, b"\x00" * 8)


# ---------------------------------------------------------------- crop normalisation

def test_crop_fraction_knob():
    assert ad.crop_fraction() == 0.6
    assert ad.crop_fraction(0.4) == 0.4
    assert ad.crop_fraction(0.4, scale_knob=7) == pytest.approx(0.7)
    with pytest.raises(ConfigError):
        ad.crop_fraction(scale_knob=0)


def test_normalize_crop_centres_and_scales():
    W, H = 100, 80
    pix = np.full((H, W, 3), 200, np.uint8)
    mask = np.zeros((H, W), bool)
    mask[5:15, 10:30] = True  # 20 wide, 10 tall
    out = ad.normalize_crop(ad.ImageBuffer.from_array(pix), mask, 0.6)
    r0, r1, c0, c1 = ad.instance_bbox(out.to_array())
    assert c1 - c0 == 60 and r1 - r0 == 30
    assert abs((c0 + c1) / 2 - W / 2) <= 1 and abs((r0 + r1) / 2 - H / 2) <= 1
    arr = out.to_array()
    assert arr[0, 0].tolist() == [0, 0, 0]


def test_normalize_crop_clamps_to_canvas():
    pix = np.full((50, 200, 3), 90, np.uint8)
    mask = np.zeros((50, 200), bool)
    mask[10:20, 0:10] = True
    out = ad.normalize_crop(ad.ImageBuffer.from_array(pix), mask, 0.9)
    r0, r1, c0, c1 = ad.instance_bbox(out.to_array())
    assert r1 - r0 <= 50 and c1 - c0 <= 200
    with pytest.raises(EmptyMask):
        ad.normalize_crop(ad.ImageBuffer.from_array(pix), np.zeros((50, 200), bool))


# ---------------------------------------------------------------- mocks

def test_mock_segmenter(manifest):
    img = ad.ImageBuffer.from_array(manifest.load_image())
    dets = ad.MockSegmenter(manifest).segment(img)
    assert [d.instance_id for d in dets] == ["inst0", "inst1"]
    assert all(d.mask.any() for d in dets)
    over = ad.MockSegmenter(manifest, {"inst1": 0.2}).segment(img)
    assert over[1].confidence == 0.2


def test_mock_enhancer_deterministic():
    img = _image()
    a = ad.MockEnhancer(seed=1).enhance(img, "a chair", 4)
    b = ad.MockEnhancer(seed=1).enhance(img, "a chair", 4)
    assert a == b and len(a) == 4 and a[0] == img
    assert ad.MockEnhancer(seed=2).enhance(img, "a chair", 4)[1] != a[1]
    with pytest.raises(ConfigError):
        ad.MockEnhancer().enhance(img, "x", 0)


def test_mock_embedder_similarity():
    emb = ad.MockEmbedder(seed=0)
    img = _image(seed=1)
    noisy = ad.ImageBuffer.from_array(np.clip(img.to_array().astype(int) + 3, 0, 255).astype(np.uint8))
    other = _image(seed=2)
    e0, e1, e2 = emb.embed(img), emb.embed(noisy), emb.embed(other)
    cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    assert e0.shape == (128,)
    assert cos(e0, e1) > cos(e0, e2)
    assert np.array_equal(e0, ad.MockEmbedder(seed=0).embed(img))


def test_mock_shape_generator(manifest):
    gen = ad.MockShapeGenerator(manifest)
    img = _image()
    mesh = gen.generate_shape(img, "inst0")
    assert len(mesh.faces) == 12
    jit = ad.MockShapeGenerator(manifest, seed=0, jitter=0.01)
    a, b = jit.generate_shape(img, "inst0"), jit.generate_shape(img, "inst0")
    assert np.array_equal(a.vertices, b.vertices)
    assert 0 < np.abs(a.vertices - mesh.vertices).max() <= 0.01


def test_mock_depth_applies_distortion(manifest):
    est = ad.MockDepthEstimator.from_manifest(manifest)
    img = ad.ImageBuffer.from_array(manifest.load_image())
    d = est.estimate_depth(img)
    ref = manifest.load_reference_depth()
    valid = ref > 0
    assert np.allclose(d[valid], 0.5 * ref[valid] + 0.2, atol=1e-5)
    assert np.all(d[~valid] == 0)


# ---------------------------------------------------------------- remote

def _client(cls, handler, retries=2, **kw):
    ep = ad.AdapterEndpoint("http://prior.test", timeout=5, retries=retries)
    return cls(ep, transport=httpx.MockTransport(handler), **kw)


def _png_doc(arr):
    return ad.ImageBuffer.from_array(arr).to_wire()


def test_remote_segmenter_roundtrip():
    img = _image(16, 12)
    mask = np.zeros((12, 16, 3), np.uint8)
    mask[2:5, 3:9] = 255
    seen = {}

    def handler(req):
        seen["body"] = json.loads(req.content)
        seen["path"] = req.url.path
        return httpx.Response(200, json={"v": 1, "detections": [
            {"instance_id": "a", "category": "chair", "confidence": 0.9, "mask": _png_doc(mask)}]})

    dets = _client(rm.RemoteSegmenter, handler).segment(img)
    assert seen["path"] == "/segment" and seen["body"]["v"] == 1
    assert dets[0].category == "chair" and dets[0].mask.sum() == 18


def test_remote_depth_and_embed():
    img = _image(4, 3)
    depth = np.arange(12, dtype=np.float64).reshape(3, 4) / 4
    est = _client(rm.RemoteDepthEstimator, lambda r: httpx.Response(200, json={"v": 1, **rm.encode_depth(depth)}))
    assert np.array_equal(est.estimate_depth(img), depth)
    emb = _client(rm.RemoteEmbedder, lambda r: httpx.Response(200, json={"v": 1, "embedding": [1.0, 2.0]}), dim=3)
    with pytest.raises(SchemaError):
        emb.embed(img)


def test_remote_schema_errors():
    img = _image(4, 3)
    bad_version = _client(rm.RemoteEmbedder, lambda r: httpx.Response(200, json={"v": 2, "embedding": [1.0]}))
    with pytest.raises(SchemaError):
        bad_version.embed(img)
    not_json = _client(rm.RemoteEmbedder, lambda r: httpx.Response(200, content=b"<html>"))
    with pytest.raises(SchemaError):
        not_json.embed(img)
    short = {"v": 1, "width": 4, "height": 3, "depth": base64.b64encode(b"\x00" * 8).decode()}
    with pytest.raises(SchemaError):
        _client(rm.RemoteDepthEstimator, lambda r: httpx.Response(200, json=short)).estimate_depth(img)
    wrong_n = _client(rm.RemoteEnhancer, lambda r: httpx.Response(200, json={"v": 1, "images": []}))
    with pytest.raises(SchemaError):
        wrong_n.enhance(img, "p", 2)


def test_remote_empty_mesh():
    gen = _client(rm.RemoteShapeGenerator, lambda r: httpx.Response(200, json={"v": 1, "vertices": [], "faces": []}))
    with pytest.raises(EmptyMesh):
        gen.generate_shape(_image(4, 3))


def test_remote_retries_server_errors():
    calls = []

    def flaky(req):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503, text="busy")
        return httpx.Response(200, json={"v": 1, "embedding": [0.5]})

    assert _client(rm.RemoteEmbedder, flaky, retries=2).embed(_image(4, 3)).tolist() == [0.5]
    assert len(calls) == 3


def test_remote_gives_up():
    calls = []

    def down(req):
        calls.append(1)
        raise httpx.ConnectError("refused", request=req)

    with pytest.raises(RemoteFailure):
        _client(rm.RemoteEmbedder, down, retries=1).embed(_image(4, 3))
    assert len(calls) == 2
    calls.clear()

    def reject(req):
        calls.append(1)
        return httpx.Response(400, text="bad request")

    with pytest.raises(RemoteFailure):
        _client(rm.RemoteEmbedder, reject, retries=3).embed(_image(4, 3))
    assert len(calls) == 1


def test_build_adapters(manifest):
    assert ad.parse_backend_flags(["shape=http://x:1", "depth=mock"]) == {"shape": "http://x:1", "depth": "mock"}
    with pytest.raises(ConfigError):
        ad.parse_backend_flags(["nope=mock"])
    with pytest.raises(ConfigError):
        ad.parse_backend_flags(["shape"])
    s = ad.build_adapters(manifest, {"shape": "http://x:1"})
    assert isinstance(s.shaper, rm.RemoteShapeGenerator) and isinstance(s.depth, ad.MockDepthEstimator)
    assert s.sources["shape"] == "http://x:1" and s.sources["segment"] == "mock"
