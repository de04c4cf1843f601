"""Command-line entry point: ``scenelayout {pipeline,solve,eval,synth,depth-align}``.

Errors are reported on stderr as one line, ``<CODE>: <message>``, with a
nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import depthfit, evalkit, meshio, synthscene
from .adapters import parse_backend_flags
from .errors import ConfigError, InvalidSpec, IoFailure, SceneLayoutError
from .manifest import load_manifest
from .pipeline import PipelineConfig, evaluate_layout, evaluate_pairs, merge_config, run_pipeline, run_solve

EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag -> (config key, converter); only flags actually given override the config
_OVERRIDES = {
    "sigma": ("sigma", float),
    "enhance_count": ("enhance_count", int),
    "top_k": ("top_k", int),
    "iters": ("solver.iterations", int),
    "restarts": ("solver.restarts", int),
    "lr": ("solver.step_size", float),
    "seed": ("seed", int),
    "jobs": ("jobs", int),
    "fscore_tau": ("fscore_tau", float),
    "samples": ("eval_samples", int),
    "crop_fraction": ("crop_fraction", float),
    "scale_knob": ("scale_knob", float),
    "depth_budget": ("depth_budget", int),
    "shape_jitter": ("shape_jitter", float),
    "proposal_samples": ("solver.proposal_sample_count", int),
    "mask_samples": ("solver.mask_sample_count", int),
    "gradient": ("solver.gradient_mode", str),
    "depth_term": ("solver.depth_term", str),
}


def _add_config_flags(p: argparse.ArgumentParser, solver: bool = True, pipeline: bool = False) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (command-line flags take precedence)")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="instances (and restarts) processed concurrently")
    p.add_argument("--samples", type=int, help="points sampled per mesh for evaluation")
    p.add_argument("--fscore-tau", type=float)
    p.add_argument("--icp", action="store_true", default=None, help="ICP pre-alignment before scoring")
    if not solver:
        return
    p.add_argument("--sigma", type=float, help="detection confidence threshold")
    p.add_argument("--iters", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--depth-budget", type=int, help="depth points per instance")
    p.add_argument("--proposal-samples", type=int)
    p.add_argument("--mask-samples", type=int)
    p.add_argument("--gradient", choices=("analytic", "finite-difference"))
    p.add_argument("--depth-term", choices=("evidence", "symmetric"))
    p.add_argument("--no-2d-match", action="store_true", help="drop the mask term (weight_2d = 0)")
    p.add_argument("--no-3d-match", action="store_true", help="drop the depth term (weight_3d = 0)")
    p.add_argument("--no-background", action="store_true", help="skip background plane fitting")
    p.add_argument("--cull-frustum", action="store_true", help="drop faces outside the view frustum")
    p.add_argument("--evaluate", action="store_true", help="score against the manifest's ground truth")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("manifest", type=Path, help="manifest.json or the directory holding it")
    if not pipeline:
        return
    p.add_argument("--enhance-count", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--crop-fraction", type=float)
    p.add_argument("--scale-knob", type=float, help="instance size on a 0-10 scale (6 = 0.6)")
    p.add_argument("--shape-jitter", type=float, help="mock shape vertex jitter amplitude")
    p.add_argument("--backend", action="append", metavar="ADAPTER=mock|URL",
                   help="backend per adapter (segment, enhance, embed, shape, depth)")
    p.add_argument("--no-enhance", action="store_true", help="use the segmented crop as the only candidate")
    p.add_argument("--no-clip-filter", action="store_true", help="take the first K candidates unranked")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenelayout", description="Single-image scene layout by 7-DoF shape registration.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pipeline", help="priors -> selection -> depth alignment -> registration")
    _add_config_flags(p, pipeline=True)

    p = sub.add_parser("solve", help="registration only, proposals taken from the manifest")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="CDL1 / CDL1-S / F-score of predicted against ground-truth geometry")
    _add_config_flags(p, solver=False)
    p.add_argument("pairs", nargs="+", type=Path, metavar="PRED GT",
                   help="alternating prediction and ground-truth files (OBJ/PLY)")
    p.add_argument("--out", type=Path, help="write the CSV here instead of stdout")

    p = sub.add_parser("synth", help="emit a synthetic test case")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=("two-primitives", "single-box"))
    src.add_argument("--spec", type=Path, help="JSON scene spec")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=synthscene.DEFAULT_RESOLUTION)
    p.add_argument("--depth-distortion", type=float, nargs=2, metavar=("H0", "Q0"), default=(1.0, 0.0),
                   help="affine map applied by the mock depth estimator")

    p = sub.add_parser("depth-align", help="closed-form depth scale and shift")
    p.add_argument("pred", type=Path, help="predicted depth (PFM)")
    p.add_argument("reference", type=Path, help="reference depth (PFM)")
    p.add_argument("--mask", type=Path, help="PNG mask restricting the fit")
    return parser


def _config(args) -> PipelineConfig:
    file_doc = None
    if getattr(args, "config", None):
        try:
            file_doc = json.loads(args.config.read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoFailure(f"cannot read config {args.config}: {exc.strerror or exc}") from None
        except ValueError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(file_doc, dict):
            raise ConfigError("config file must hold a JSON object")
    over = {}
    for flag, (key, conv) in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            over[key] = conv(val)
    if getattr(args, "icp", None):
        over["icp"] = True
    if getattr(args, "no_2d_match", False):
        over["solver.weight_2d"] = 0.0
    if getattr(args, "no_3d_match", False):
        over["solver.weight_3d"] = 0.0
    if getattr(args, "no_background", False):
        over["background"] = False
    if getattr(args, "cull_frustum", False):
        over["cull_frustum"] = True
    if getattr(args, "no_enhance", False):
        over["no_enhance"] = True
    if getattr(args, "no_clip_filter", False):
        over["no_clip_filter"] = True
    if getattr(args, "backend", None):
        merged = dict((file_doc or {}).get("backends", {}))
        merged.update(parse_backend_flags(args.backend))
        over["backends"] = merged
    if "jobs" in over:
        over["solver.jobs"] = over["jobs"]
    return merge_config(file_doc, over)


def _write_layout(layout, manifest, args) -> None:
    paths = layout.write(args.out)
    n_ok = len(layout.solved)
    print(f"solved {n_ok}/{len(layout.outcomes)} instance(s); layout {paths['layout']}; scene {paths['scene']}")
    for o in layout.outcomes:
        if not o.ok:
            print(f"skipped {o.instance_id} at {o.stage}: {o.error.code}: {o.error}", file=sys.stderr)
    if not layout.outcomes:
        print("warning: no instance passed the confidence threshold", file=sys.stderr)
    if args.evaluate:
        rep = evaluate_layout(layout, manifest)
        if rep is None:
            print("warning: nothing to evaluate (no ground truth or no solved instance)", file=sys.stderr)
        else:
            (Path(args.out) / "metrics.txt").write_text(rep.to_text(), encoding="utf-8")
            print(rep.to_text(), end="")


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    _write_layout(run_pipeline(manifest, cfg), manifest, args)
    return 0


def cmd_solve(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    _write_layout(run_solve(manifest, cfg), manifest, args)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if len(args.pairs) % 2:
        raise UsageError("eval expects PRED GT pairs")
    pairs, seen = [], {}
    for pred, gt in zip(args.pairs[0::2], args.pairs[1::2]):
        sid = pred.stem
        seen[sid] = seen.get(sid, 0) + 1
        if seen[sid] > 1:
            sid = f"{sid}_{seen[sid]}"
        pairs.append((sid, _geometry(pred), _geometry(gt)))
    text = evalkit.metrics_csv(evaluate_pairs(pairs, cfg))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _geometry(path: Path):
    try:
        return meshio.read_geometry(path)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror or exc}") from None


def cmd_synth(args) -> int:
    if args.preset:
        scene = synthscene.preset_scene(args.preset, args.seed, args.resolution)
    else:
        try:
            doc = json.loads(args.spec.read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoFailure(f"cannot read spec {args.spec}: {exc.strerror or exc}") from None
        except ValueError as exc:
            raise InvalidSpec(f"spec {args.spec} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise InvalidSpec("scene spec must be a JSON object")
        scene = synthscene.scene_from_dict(doc)
    synthscene.emit_case(scene, args.out, args.seed, tuple(args.depth_distortion))
    print(f"wrote {len(scene.instances)} instance(s) to {args.out}")
    return 0


def cmd_depth_align(args) -> int:
    try:
        pred = meshio.read_pfm(args.pred)
        ref = meshio.read_pfm(args.reference)
        mask = meshio.read_mask_png(args.mask) if args.mask else None
    except OSError as exc:
        raise IoFailure(f"cannot read input: {exc.strerror or exc}") from None
    if pred.shape != ref.shape:
        raise ConfigError(f"depth maps differ in size: {pred.shape} vs {ref.shape}")
    valid = depthfit.valid_pixels(pred) & depthfit.valid_pixels(ref)
    if mask is not None:
        if mask.shape != pred.shape:
            raise ConfigError("mask size differs from the depth maps")
        valid &= mask
    a = depthfit.solve_scale_shift(pred, ref, valid)
    print(f"scale={a.scale!r} shift={a.shift!r}")
    return 0


COMMANDS = {
    "pipeline": cmd_pipeline,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "depth-align": cmd_depth_align,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"E_USAGE: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_USAGE
    except SceneLayoutError as exc:
        print(f"{exc.code}: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"{IoFailure.code}: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
