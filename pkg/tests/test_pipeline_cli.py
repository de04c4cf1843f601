import json

import numpy as np
import pytest

from scenelayout import cli, meshio, pipeline
from scenelayout import synthscene as ss
from scenelayout.errors import ConfigError
from scenelayout.layout import SolverConfig
from scenelayout.manifest import load_manifest

FAST = ["--iters", "60", "--restarts", "2", "--proposal-samples", "2048", "--mask-samples", "256"]


@pytest.fixture(scope="module")
def case(tmp_path_factory):
    out = tmp_path_factory.mktemp("two")
    assert cli.main(["synth", "--preset", "two-primitives", "--out", str(out), "--resolution", "64",
                     "--depth-distortion", "0.5", "0.3"]) == 0
    return out


def _run(argv, capsys):
    code = cli.main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_synth_writes_case(case):
    m = load_manifest(case)
    assert [i.instance_id for i in m.instances] == ["inst0", "inst1"]
    assert m.load_depth().shape == (64, 64)
    assert (case / "gt_scene.obj").is_file()


def test_solve_and_eval(case, tmp_path, capsys):
    out = tmp_path / "solve"
    code, text, _ = _run(["solve", str(case), "--out", str(out), "--evaluate", *FAST], capsys)
    assert code == 0 and "solved 2/2" in text
    doc = json.loads((out / "layout.json").read_text())
    assert [i["id"] for i in doc["instances"]] == ["inst0", "inst1"]
    assert doc["units"] == "meters" and doc["version"] == 1
    assert all(i["matching_error"] >= 0 for i in doc["instances"])
    obj = (out / "scene.obj").read_text()
    assert "g inst0" in obj and "g inst1" in obj
    assert len(meshio.read_obj(out / "scene.obj").faces) > 0
    assert (out / "metrics.txt").is_file()
    code, text, _ = _run(["eval", str(out / "scene.obj"), str(case / "gt_scene.obj"), "--samples", "500"], capsys)
    assert code == 0
    lines = text.strip().splitlines()
    assert lines[0] == "scene_id,cdl1_s,cdl1,fscore" and lines[-1].startswith("mean,")


def test_pipeline_deterministic(case, tmp_path, capsys):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code, _, _ = _run(["pipeline", str(case), "--out", str(out), "--seed", "4", *FAST], capsys)
        assert code == 0
        outs.append((out / "layout.json").read_bytes())
    assert outs[0] == outs[1]
    doc = json.loads(outs[0])
    # the mock depth was distorted by (0.5, 0.3); the fitted alignment undoes it
    assert doc["depth_alignment"]["scale"] == pytest.approx(2.0, rel=1e-4)
    assert doc["depth_alignment"]["shift"] == pytest.approx(-0.6, abs=1e-4)
    assert all(len(i["candidate_indices"]) == 3 for i in doc["instances"])


def test_pipeline_no_enhance(case, tmp_path, capsys):
    out = tmp_path / "noenh"
    code, _, _ = _run(["pipeline", str(case), "--out", str(out), "--no-enhance", *FAST], capsys)
    assert code == 0
    doc = json.loads((out / "layout.json").read_text())
    assert all(i["candidate_indices"] == [0] and i["proposal_count"] == 1 for i in doc["instances"])


def test_all_below_sigma_gives_empty_layout(case, tmp_path, capsys):
    low = tmp_path / "low"
    low.mkdir()
    doc = json.loads((case / "manifest.json").read_text())
    for inst in doc["instances"]:
        inst["confidence"] = 0.1
        for key in ("mask", "gt_mesh"):
            inst[key] = str(case / inst[key])
        inst["proposals"] = [str(case / p) for p in inst["proposals"]]
    for key in ("image", "depth", "reference_depth", "gt_scene"):
        doc[key] = str(case / doc[key])
    (low / "manifest.json").write_text(json.dumps(doc))
    code, _, err = _run(["solve", str(low), "--out", str(tmp_path / "o"), *FAST], capsys)
    assert code == 0 and "warning" in err
    lay = json.loads((tmp_path / "o" / "layout.json").read_text())
    assert lay["instances"] == [] and lay["filtered_out"] == ["inst0", "inst1"]


def test_depth_align_cli(tmp_path, capsys):
    rng = np.random.default_rng(0)
    ref = rng.uniform(1, 5, (20, 30))
    meshio.write_pfm(tmp_path / "ref.pfm", ref)
    meshio.write_pfm(tmp_path / "pred.pfm", (ref - 0.25) / 1.5)
    code, text, _ = _run(["depth-align", str(tmp_path / "pred.pfm"), str(tmp_path / "ref.pfm")], capsys)
    assert code == 0
    vals = dict(kv.split("=") for kv in text.split())
    assert float(vals["scale"]) == pytest.approx(1.5, rel=1e-5)
    assert float(vals["shift"]) == pytest.approx(0.25, abs=1e-5)
    meshio.write_pfm(tmp_path / "flat.pfm", np.full((20, 30), 2.0))
    code, _, err = _run(["depth-align", str(tmp_path / "flat.pfm"), str(tmp_path / "ref.pfm")], capsys)
    assert code == 1 and err.startswith("E_DEGENERATE_DEPTH:")


def test_error_codes(tmp_path, capsys):
    code, _, err = _run(["solve", str(tmp_path / "missing"), "--out", str(tmp_path / "o")], capsys)
    assert code == 1 and err.startswith("E_MANIFEST:") and len(err.strip().splitlines()) == 1
    code, _, err = _run(["solve"], capsys)
    assert code == 2 and err.startswith("E_USAGE:")
    code, _, err = _run(["frobnicate"], capsys)
    assert code == 2
    code, _, err = _run(["eval", "a.obj"], capsys)
    assert code == 2 and err.startswith("E_USAGE:")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = _run(["synth", "--spec", str(bad), "--out", str(tmp_path / "s")], capsys)
    assert code == 1 and err.startswith("E_INVALID_SPEC:")


def test_top_k_larger_than_enhance_count(case, tmp_path, capsys):
    code, _, err = _run(["pipeline", str(case), "--out", str(tmp_path / "o"), "--top-k", "5",
                         "--enhance-count", "3"], capsys)
    assert code == 1 and err.startswith("E_CONFIG:")


def test_config_file_precedence(tmp_path):
    cfg = pipeline.merge_config({"sigma": 0.3, "solver": {"iterations": 50}},
                                {"solver.iterations": 70, "top_k": 2})
    assert cfg.sigma == 0.3 and cfg.top_k == 2 and cfg.solver.iterations == 70
    again = pipeline.PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert pipeline.PipelineConfig(solver=SolverConfig(iterations=5)).config_hash() != cfg.config_hash()
    with pytest.raises(ConfigError):
        pipeline.merge_config({"sigmaa": 1}, {})
    with pytest.raises(ConfigError):
        pipeline.PipelineConfig(top_k=4, enhance_count=3)


def test_frustum_culling_drops_offscreen_faces(case):
    m = load_manifest(case)
    cfg = pipeline.merge_config(None, {"solver.iterations": 5, "solver.restarts": 1,
                                       "solver.proposal_sample_count": 512, "cull_frustum": True})
    lay = pipeline.run_solve(m, cfg)
    mesh, groups = lay.scene_mesh()
    assert sum(n for _, n in groups) == len(mesh.faces)
    intr = m.intrinsics
    far = ss.make_primitive(ss.PrimitiveSpec("box", (1.0, 1.0, 1.0)))
    from scenelayout.geom import Pose7, cull_to_frustum
    off = far.transformed(Pose7([0, 0, 0], [50.0, 0, 5.0], 1.0))
    assert len(cull_to_frustum(off, intr).faces) == 0
    on = far.transformed(Pose7([0, 0, 0], [0, 0, 5.0], 1.0))
    assert len(cull_to_frustum(on, intr).faces) == len(on.faces)
