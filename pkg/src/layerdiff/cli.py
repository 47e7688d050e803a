"""Command-line interface.

Verbs: render, edit, invert, sweep, train-toy, validate.  Flags mirror the
scene-file keys and override them; ``--estimator`` selects the exact oracle
(``analytic``) or a trained checkpoint (``toy:<path>``).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .diffusion import Schedule
from .editing import ddim_invert, edit_scene
from .errors import ConfigError, LayerDiffError
from .imageio import default_out_dir, read_ppm, write_ppm
from .metrics import evaluate_placement
from .network import TrainConfig, load_checkpoint, save_checkpoint, train_toy_score
from .renderer import SceneSpec, render
from .scene import load_scene, scene_echo
from .scores import AnalyticScoreModel
from .sweep import SweepConfig, run_sweep
from .world import BlobWorld, make_blob_world


def _make_estimator(spec: str, world: BlobWorld, sched: Schedule):
    if spec == "analytic":
        return AnalyticScoreModel(world.dist, sched)
    if spec.startswith("toy:"):
        return load_checkpoint(spec[len("toy:") :], sched=sched)
    raise ConfigError(f"unknown estimator {spec!r}; use 'analytic' or 'toy:<checkpoint>'")


def _apply_common_overrides(scene: SceneSpec, args) -> SceneSpec:
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    return scene


def _out_path(args, default_name: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    return default_out_dir() / default_name


def cmd_validate(args) -> int:
    scene, _ = load_scene(args.scene)
    print(json.dumps(scene_echo(scene), indent=2))
    return 0


def cmd_render(args) -> int:
    scene, world = load_scene(args.scene)
    scene = _apply_common_overrides(scene, args)
    sched = scene.make_schedule()
    est = _make_estimator(args.estimator, world, sched)
    x0 = render(scene, est, rng=scene.seed, sched=sched)
    out = _out_path(args, "render.ppm")
    write_ppm(x0, out)
    report = evaluate_placement([x0], scene, world, seeds=[scene.seed])
    print(f"wrote {out}")
    print(f"placement_rate={report.placement_rate:.3f} mean_iou={report.mean_iou:.3f}")
    return 0


def cmd_invert(args) -> int:
    scene, world = load_scene(args.scene)
    sched = scene.make_schedule()
    est = _make_estimator(args.estimator, world, sched)
    x0 = read_ppm(args.image)
    inv = ddim_invert(x0, est, scene.global_caption, sched)
    out = _out_path(args, "latent.npz")
    np.savez(out, x_T_hat=inv.x_T_hat, recon_mse=inv.recon_mse)
    print(f"wrote {out}")
    print(f"reconstruction_mse={inv.recon_mse:.3e}")
    return 0


def cmd_edit(args) -> int:
    scene, world = load_scene(args.scene)
    scene = _apply_common_overrides(scene, args)
    sched = scene.make_schedule()
    est = _make_estimator(args.estimator, world, sched)
    source = read_ppm(args.source)
    x0 = edit_scene(source, scene, est, sched)
    out = _out_path(args, "edit.ppm")
    write_ppm(x0, out)
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    with open(args.config) as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.config}: sweep config must be a mapping")
    unknown = set(doc) - {"schema", "scene", "axes", "seeds", "out_dir"}
    if unknown:
        raise ConfigError(f"{args.config}: unknown key(s) {sorted(unknown)}")
    base = Path(args.config).parent
    scene, world = load_scene(base / doc["scene"])
    seeds_doc = doc.get("seeds", [0])
    if isinstance(seeds_doc, dict):
        seeds = tuple(range(int(seeds_doc.get("base", 0)),
                            int(seeds_doc.get("base", 0)) + int(seeds_doc["count"])))
    else:
        seeds = tuple(int(s) for s in seeds_doc)
    out_dir = Path(args.out) if args.out else base / doc.get("out_dir", "sweep_out")
    config = SweepConfig(
        scene=scene,
        world=world,
        axes={k: list(v) for k, v in (doc.get("axes") or {}).items()},
        seeds=seeds,
        out_dir=out_dir,
    )
    est = None
    if args.estimator != "analytic":
        est = _make_estimator(args.estimator, world, scene.make_schedule())
    written = run_sweep(config, est)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_train_toy(args) -> int:
    world = make_blob_world(cells=args.cells, cell_px=args.cell_px)
    from .diffusion import build_schedule

    sched = build_schedule(args.T, "linear", min(15, args.T))
    config = TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size)
    est = train_toy_score(
        world.dist, config, seed=args.seed or 0, sched=sched, vocab=world.vocab
    )
    out = _out_path(args, "toy_checkpoint.npz")
    save_checkpoint(est, out)
    tail = est.training_losses[-1] if est.training_losses else float("nan")
    print(f"wrote {out}")
    print(f"final_loss={tail:.4f} parameters={est.net.parameter_count()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerdiff")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--estimator", default="analytic")

    p = sub.add_parser("validate", help="parse a scene file and echo its config")
    p.add_argument("scene")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("render", help="render a scene to a PPM image")
    p.add_argument("scene")
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("invert", help="DDIM-invert an image to a latent")
    p.add_argument("image")
    p.add_argument("--scene", required=True, help="scene file providing caption/sampler")
    common(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("edit", help="edit a source image with a scene's layers")
    p.add_argument("scene")
    p.add_argument("--source", required=True)
    common(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train-toy", help="train the toy score network")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--cells", type=int, default=3)
    p.add_argument("--cell-px", type=int, default=4)
    common(p)
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LayerDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
