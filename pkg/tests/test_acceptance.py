"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the criterion lines are
printed even when output capture is on. Criteria 4-7 and 11 take minutes.
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

import support as S
from scenelayout import depthfit, evalkit, geom, layout, pipeline
from scenelayout import synthscene as ss
from scenelayout.adapters import ImageBuffer, MockDepthEstimator, MockShapeGenerator
from scenelayout.errors import DegenerateDepth
from scenelayout.manifest import load_manifest

# cost limits for criteria whose statement leaves the solver budget open
ABLATION_2D_RESTARTS = 4
SELECTION_RESTARTS = 4


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}"
        if detail:
            line += f" [{detail}]"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


# ---------------------------------------------------------------------------
# 1. Chamfer oracle equivalence


def _brute_directional(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.sqrt((d * d).sum(axis=-1)).min(axis=1).mean()


def test_c01_chamfer_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    bad = 0
    for i in range(200):
        dim = 2 if i % 2 else 3
        a = rng.normal(size=(rng.integers(1, 257), dim))
        b = rng.normal(size=(rng.integers(1, 257), dim))
        if i % 7 == 0:  # shared points exercise exact zeros
            b[: min(len(a), len(b)) // 2] = a[: min(len(a), len(b)) // 2]
        fwd, bwd = _brute_directional(a, b), _brute_directional(b, a)
        if dim == 2:
            bad += geom.chamfer2(a, b) != (fwd + bwd) / 2.0
        else:
            ch = geom.chamfer3(a, b)
            bad += (ch.forward, ch.backward, ch.symmetric) != (fwd, bwd, (fwd + bwd) / 2.0)
            bad += evalkit.cdl1_single(a, b) != fwd
    dt = time.perf_counter() - t0
    report(1, "Chamfer via NNIndex equals brute force bit for bit", bad == 0 and dt < 10,
           f"{bad} mismatches, {dt:.2f}s")


# ---------------------------------------------------------------------------
# 2. gradient correctness


def _gradient_config(rng):
    W, H = int(rng.integers(32, 129)), int(rng.integers(32, 129))
    f = rng.uniform(50, 200)
    intr = geom.CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), W / 2 + rng.normal(), H / 2 + rng.normal(), W, H)
    P = rng.uniform(-0.5, 0.5, (int(rng.integers(50, 300)), 3))
    truth = geom.Pose7(rng.normal(size=3),
                       [rng.normal(0, 0.3), rng.normal(0, 0.3), rng.uniform(3, 8)], rng.uniform(0.5, 2))
    D = geom.apply_pose(truth, P[rng.permutation(len(P))[: max(10, len(P) // 2)]])
    D = D + rng.normal(0, 0.02, D.shape)
    uv = geom.project(intr, D)
    mask = np.zeros((H, W), bool)
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < W) & (uv[:, 1] >= 0) & (uv[:, 1] < H)
    mask[uv[inside, 1].astype(int), uv[inside, 0].astype(int)] = True
    if not mask.any():
        mask[H // 2, W // 2] = True
    ev = layout.InstanceEvidence(D, mask, intr)
    pose = geom.Pose7(truth.rotation + rng.normal(0, 0.3, 3), truth.translation + rng.normal(0, 0.1, 3),
                      truth.scale * rng.uniform(0.8, 1.25))
    cfg = layout.SolverConfig(weight_3d=rng.uniform(0.2, 2), weight_2d=rng.uniform(0.2, 2),
                              depth_term=layout.DEPTH_TERMS[int(rng.integers(2))],
                              projection_sample_count=None)
    return P, ev, layout.mask_to_points(mask, 128, int(rng.integers(1 << 30))), pose, cfg


def test_c02_gradient_correctness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        P, ev, mp, pose, cfg = _gradient_config(rng)
        prob = layout._problem(P, ev, mp, cfg)
        x = pose.params()
        _, g, corr = prob.evaluate(x, want_grad=True)
        fd = prob.fd_gradient(x, corr, step=1e-5)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.abs(fd))))
    dt = time.perf_counter() - t0
    report(2, "analytic gradient matches central differences", worst < 1e-4 and dt < 30,
           f"max relative error {worst:.2e}, {dt:.2f}s")


# ---------------------------------------------------------------------------
# 3. closed-form depth alignment


def test_c03_depth_alignment(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst, beaten = 0.0, 0
    steps = [(dh, dq) for dh in (-1e-3, 0, 1e-3) for dq in (-1e-3, 0, 1e-3) if dh or dq]
    for _ in range(100):
        pred = rng.uniform(0.5, 10, (int(rng.integers(8, 64)), int(rng.integers(8, 64))))
        h, q = rng.uniform(0.1, 10), rng.uniform(-2, 2)
        ref = h * pred + q
        a = depthfit.solve_scale_shift(pred, ref)
        worst = max(worst, abs(a.scale - h), abs(a.shift - q))
        r0 = depthfit.alignment_residual(pred, ref, a)
        for dh, dq in steps:
            other = depthfit.DepthAlignment(a.scale + dh, a.shift + dq)
            beaten += depthfit.alignment_residual(pred, ref, other) <= r0
    try:
        depthfit.solve_scale_shift(np.full((8, 8), 3.0), rng.uniform(1, 2, (8, 8)))
        raised = False
    except DegenerateDepth:
        raised = True
    dt = time.perf_counter() - t0
    report(3, "closed-form scale/shift", worst < 1e-9 and beaten == 0 and raised and dt < 5,
           f"max error {worst:.1e}, {beaten} perturbations not worse, degenerate raised={raised}, {dt:.2f}s")


# ---------------------------------------------------------------------------
# 4 and 5. synthetic pose recovery and the restart ablation


@pytest.fixture(scope="module")
def recovery_runs():
    cpu0, wall0 = time.process_time(), time.perf_counter()
    runs = []
    for seed in range(50):
        case = S.recovery_case(seed)
        cfg = S.recovery_config(seed=seed)
        results = layout.run_restarts(case.proposal_points, case.evidence, cfg)
        runs.append((case, results))
    return runs, time.process_time() - cpu0, time.perf_counter() - wall0


def test_c04_pose_recovery(report, recovery_runs):
    runs, cpu, wall = recovery_runs
    ok = sum(S.recovered(S.pose_errors(case, layout._min_result(res).pose)) for case, res in runs)
    report(4, "pose recovery on 50 synthetic cases (r=10, 1000 iterations)", ok >= 45 and cpu < 600,
           f"{ok}/50 recovered, {cpu:.0f}s CPU, {wall:.0f}s wall")


def test_c05_restart_ablation(report, recovery_runs):
    runs, _, _ = recovery_runs
    w10 = np.array([layout._min_result(res).loss.total for _, res in runs])
    # restart 0 does not depend on the restart count, so it is the r=1 solve
    w1 = np.array([res[0].loss.total for _, res in runs])
    far = np.array([S.rotation_error(case.kind, np.eye(3), case.true_pose.matrix()) >= 90.0
                    for case, _ in runs])
    med10, med1 = np.median(w10), np.median(w1)
    ok = med10 <= med1
    detail = f"median w r=10 {med10:.5f} vs r=1 {med1:.5f}"
    if far.any():
        f10, f1 = np.median(w10[far]), np.median(w1[far])
        ok = ok and f10 < f1
        detail += f"; {far.sum()} cases init >= 90 deg: {f10:.5f} vs {f1:.5f}"
    else:
        ok = False
        detail += "; no case initialised >= 90 deg from truth"
    report(5, "restart ablation", ok, detail)


# ---------------------------------------------------------------------------
# 6. 2D matching ablation


def test_c06_mask_term_ablation(report):
    errs = {1.0: [], 0.0: []}
    for seed in range(30):
        case = S.recovery_case(1000 + seed, depth_noise=0.05)
        for w2 in errs:
            cfg = S.recovery_config(seed=seed, weight_2d=w2, restarts=ABLATION_2D_RESTARTS)
            res = layout.solve_with_restarts(case.proposal_points, case.evidence, cfg)
            errs[w2].append(S.pose_errors(case, res.pose)[0])
    with_2d, without = float(np.mean(errs[1.0])), float(np.mean(errs[0.0]))
    report(6, "mask term does not hurt rotation under depth noise", with_2d <= without,
           f"mean rotation error {with_2d:.2f} deg with vs {without:.2f} deg without")


# ---------------------------------------------------------------------------
# 7. proposal selection


WRONG_SHAPES = {
    "box": [ss.PrimitiveSpec("cylinder", (0.3, 1.0), 2), ss.PrimitiveSpec("icosphere", (0.5,), 2)],
    "cylinder": [ss.PrimitiveSpec("box", (1.0, 0.7, 0.45)), ss.PrimitiveSpec("icosphere", (0.5,), 2)],
}


def test_c07_proposal_selection(report):
    hits = 0
    for seed in range(20):
        case = S.recovery_case(2000 + seed)
        shapes = [case.spec] + WRONG_SHAPES[case.kind]
        order = np.random.default_rng(seed).permutation(3)
        meshes = [ss.make_primitive(shapes[k]) for k in order]
        cfg = S.recovery_config(seed=seed, restarts=SELECTION_RESTARTS,
                                proposal_sample_count=S.RECOVERY_PROPOSAL_SAMPLES)
        sol = layout.solve_instance(meshes, case.evidence, cfg)
        hits += order[sol.proposal_index] == 0
    report(7, "true shape chosen among K=3 proposals", hits >= 18, f"{hits}/20")


# ---------------------------------------------------------------------------
# 8 and 9. metrics and ICP


def test_c08_metrics_sanity(report):
    cube = ss.make_primitive(ss.PrimitiveSpec("box", (1.0, 1.0, 1.0)))
    same = evalkit.evaluate_scene(cube, cube, n=10000, tau=0.1)
    moved = cube.transformed(geom.Pose7([0, 0, 0], [0.05, 0, 0], 1.0))
    shifted = evalkit.evaluate_scene(moved, cube, n=10000, tau=0.1)
    ok = same.cdl1 < 1e-12 and same.fscore == 100.0 and shifted.cdl1 < 0.05
    report(8, "metrics sanity", ok,
           f"identical cdl1 {same.cdl1:.1e} fscore {same.fscore:.1f}; shifted cdl1 {shifted.cdl1:.4f}")


def test_c09_icp(report):
    worst, iters = 0.0, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        src = rng.uniform(-0.5, 0.5, (500, 3)) * [1.0, 0.7, 0.4]
        axis = rng.normal(size=3)
        R = geom.rotation_matrix(np.radians(5.0) * axis / np.linalg.norm(axis))
        t = rng.normal(size=3)
        dst = src @ R.T + 0.05 * t / np.linalg.norm(t)
        res = evalkit.icp_align(src, dst, max_iters=50)
        rmse = float(np.sqrt(np.mean(np.sum((res.transform.apply(src) - dst) ** 2, axis=1))))
        worst, iters = max(worst, rmse), max(iters, res.iterations)
    report(9, "ICP realigns 5 deg / 0.05 perturbations", worst < 1e-3 and iters <= 50,
           f"worst RMSE {worst:.1e} after at most {iters} iterations")


# ---------------------------------------------------------------------------
# 10. end-to-end determinism


def test_c10_pipeline_determinism(report, tmp_path):
    ss.emit_case(ss.preset_scene("two-primitives"), tmp_path / "case", seed=0, depth_distortion=(0.8, 0.4))
    manifest = load_manifest(tmp_path / "case")
    cfg = pipeline.PipelineConfig(seed=7)
    docs = [pipeline.run_pipeline(manifest, cfg).to_json() for _ in range(2)]
    identical = docs[0] == docs[1]
    lay = json.loads(docs[0])

    image = ImageBuffer.from_array(manifest.load_image())
    pred = MockDepthEstimator.from_manifest(manifest).estimate_depth(image)
    align = depthfit.DepthAlignment(lay["depth_alignment"]["scale"], lay["depth_alignment"]["shift"])
    metric = depthfit.apply_alignment(pred, align)
    shaper = MockShapeGenerator(manifest)
    gaps = []
    for inst in lay["instances"]:
        minst = manifest.instance(inst["id"])
        ev = pipeline._evidence(manifest.intrinsics, metric, manifest.load_mask(minst), cfg)
        alone = layout.solve_instance([shaper.base_mesh(inst["id"])], ev, pipeline._solver_cfg(cfg))
        gaps.append(inst["matching_error"] - alone.result.matching_error)
    ok = identical and len(lay["instances"]) == 2 and all(g <= 1e-9 for g in gaps)
    report(10, "pipeline is deterministic and matches isolated solves", ok,
           f"identical={identical}, w minus isolated w: {', '.join(f'{g:.1e}' for g in gaps)}")


# ---------------------------------------------------------------------------
# 11. performance envelope


def _perf_case():
    scene = ss.single_primitive_scene(11, "box", resolution=256, base_depth=4.0, scale_range=(1.6, 1.6))
    depth = ss.render_depth(scene)
    mask = ss.render_masks(scene)[0]
    pts = depthfit.instance_depth_points(scene.intrinsics, depth, mask, 2048, 0)
    ev = layout.InstanceEvidence(pts, mask, scene.intrinsics)
    prop = geom.sample_mesh(ss.make_primitive(scene.instances[0].spec), 2048, 0)
    return prop, ev


def test_c11_performance(report):
    prop, ev = _perf_case()
    base = layout.SolverConfig(projection_sample_count=None)
    layout.solve_with_restarts(prop, ev, layout.with_overrides(base, iterations=2, restarts=1))  # warm up
    t0 = time.perf_counter()
    layout.solve_with_restarts(prop, ev, layout.with_overrides(base, restarts=1))
    one = time.perf_counter() - t0
    t0 = time.perf_counter()
    layout.solve_with_restarts(prop, ev, layout.with_overrides(base, restarts=10, jobs=4))
    ten = time.perf_counter() - t0
    ok = len(ev.depth_points) == 2048 and one < 30 and ten < 90
    report(11, "performance envelope", ok,
           f"{len(prop)} proposal / {len(ev.depth_points)} depth points: 1 restart {one:.1f}s, "
           f"r=10 on 4 jobs {ten:.1f}s")
