"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage, parse or I/O error.
Every command writes a JSON manifest next to its outputs.
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__, checkpoint
from .config import RunConfig, dump_run_config, load_grid_spec, load_run_config
from .exceptions import ConfigError, ParseError, ShapeError
from .gradcheck import layer_checks
from .network import build
from .profiler import compare, format_comparison, profile, sscnet_reference
from .pyramid import CASCADED, PARALLEL
from .synthetic import CLASS_NAMES, make_scene
from .training import EvaluationError, evaluate_scene, train
from .voxel import Scene, load_depth, save_camera, save_pgm, save_volume, voxelize

log = logging.getLogger("ccpnet")

USAGE_ERRORS = (ParseError, ConfigError, ShapeError, EvaluationError, OSError)
SSCNET = "sscnet"


def _threads():
    value = os.environ.get("CCP_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise click.UsageError(f"CCP_THREADS must be an integer, got {value!r}")
    if n < 1:
        raise click.UsageError("CCP_THREADS must be >= 1")
    return n


def command(fn):
    """Map domain errors to exit code 2 and apply the CCP_THREADS limit."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        from threadpoolctl import threadpool_limits
        try:
            with threadpool_limits(limits=_threads()):
                return fn(*args, **kwargs)
        except USAGE_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
    return wrapper


def _digest(path) -> str:
    h = hashlib.sha1()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        h.update(q.name.encode())
        h.update(q.read_bytes())
    return h.hexdigest()


def write_manifest(path, command: str, config, seed, inputs: dict, outputs: dict, started: float, **extra):
    """Manifest with a content-derived run id: identical command, config,
    seed and input bytes give the same id."""
    key = {"command": command, "config": config, "seed": seed,
           "inputs": {k: _digest(v) for k, v in inputs.items() if v is not None}, **extra}
    if config is not None and Path(str(config)).is_file():
        key["config_digest"] = _digest(config)
    run_id = hashlib.sha1(json.dumps(key, sort_keys=True, default=str).encode()).hexdigest()[:12]
    manifest = {
        "run_id": run_id,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "elapsed_s": round(time.time() - started, 3),
        "version": __version__,
        **extra,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return manifest


def _sidecar(path) -> Path:
    return Path(str(path) + ".cfg")


def _dtype(name):
    return np.float64 if name == "float64" else np.float32


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log debug output.")
def main(verbose):
    """Dilated-convolution scene completion toolkit."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(message)s")


@main.command("voxelize")
@click.option("--depth", "depth_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--camera", "camera_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--grid-spec", default="desk", show_default=True, help="Grid preset or spec file.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@command
def cmd_voxelize(depth_path, camera_path, grid_spec, out_dir):
    """Depth image + camera -> fTSDF and visibility volumes."""
    started = time.time()
    spec = load_grid_spec(grid_spec)
    depth = load_depth(depth_path, camera_path)
    ftsdf, vis = voxelize(depth, spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(out / "ftsdf.vox", ftsdf.astype(np.float32))
    save_volume(out / "visibility.vox", vis.astype(np.uint8))
    write_manifest(out / "manifest.json", "voxelize", grid_spec, None,
                   {"depth": depth_path, "camera": camera_path},
                   {"ftsdf": out / "ftsdf.vox", "visibility": out / "visibility.vox"}, started,
                   dims=list(spec.dims))
    click.echo(f"wrote {out} dims={'x'.join(map(str, spec.dims))}")


@main.command("make-scene")
@click.option("--grid-spec", default="desk", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--objects", default=6, show_default=True, type=click.IntRange(0))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@command
def cmd_make_scene(grid_spec, seed, objects, out_dir):
    """Render a synthetic room: depth image, camera and labelled scene volumes."""
    started = time.time()
    spec = load_grid_spec(grid_spec)
    depth, scene = make_scene(spec, seed=seed, n_objects=objects)
    out = Path(out_dir)
    scene.save(out)
    save_pgm(out / "depth.pgm", depth.depth)
    save_camera(out / "camera.txt", depth)
    write_manifest(out / "manifest.json", "make-scene", grid_spec, seed, {},
                   {"scene": out}, started, objects=objects)
    click.echo(f"wrote {out}")


def _load_scene(path, rc: RunConfig) -> Scene:
    scene = Scene.load(path, rc.network.num_classes)
    if scene.dims != rc.network.input_dims:
        raise ShapeError(f"scene {path} is {scene.dims}, config expects {rc.network.input_dims}")
    return scene


@main.command("train-toy")
@click.option("--config", "config_src", default="desk", show_default=True, help="Preset or config file.")
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--steps", default=200, show_default=True, type=click.IntRange(0))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out-checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--dtype", type=click.Choice(["float32", "float64"]), default="float32", show_default=True)
@click.option("--quiet", is_flag=True, help="Do not print the per-step loss.")
@command
def cmd_train_toy(config_src, scene_dir, steps, seed, out_checkpoint, dtype, quiet):
    """Overfit the network on one scene and save the weights."""
    started = time.time()
    rc = load_run_config(config_src)
    scene = _load_scene(scene_dir, rc)
    net = build(rc.network, seed=seed, dtype=_dtype(dtype))

    def report(step, loss):
        if not quiet:
            click.echo(f"step {step}\tloss {loss:.6f}")

    result = train(net, scene, steps, rc.sgd, seed=seed, ratio=rc.ratio,
                   occluded_only=rc.occluded_only, callback=report, class_names=CLASS_NAMES)
    ckpt = Path(out_checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(ckpt, net.parameters())
    _sidecar(ckpt).write_text(dump_run_config(rc))
    metrics_path = Path(f"{ckpt}.metrics.txt")
    metrics_path.write_text(result.metrics.to_text())
    loss_path = Path(f"{ckpt}.loss.txt")
    loss_path.write_text("".join(f"{v!r}\n" for v in result.losses))
    write_manifest(Path(f"{ckpt}.manifest.json"), "train-toy", config_src, seed,
                   {"scene": scene_dir},
                   {"checkpoint": ckpt, "config": _sidecar(ckpt), "metrics": metrics_path, "losses": loss_path},
                   started, steps=steps, dtype=dtype)
    click.echo(result.metrics.to_text(), nl=False)


@main.command("eval")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out-report", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_src", default=None, help="Defaults to the checkpoint's .cfg sidecar.")
@command
def cmd_eval(ckpt_path, scene_dir, out_report, config_src):
    """Score a checkpoint on a scene and write the metrics report."""
    started = time.time()
    if config_src is None:
        config_src = _sidecar(ckpt_path)
        if not config_src.is_file():
            raise FileNotFoundError(f"no --config given and sidecar {config_src} is missing")
    rc = load_run_config(config_src)
    scene = _load_scene(scene_dir, rc)
    net = build(rc.network, dtype=np.float32)
    net.load_state_dict(checkpoint.load(ckpt_path))
    report = evaluate_scene(net, scene, CLASS_NAMES)
    out = Path(out_report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_text())
    write_manifest(Path(f"{out}.manifest.json"), "eval", str(config_src), None,
                   {"checkpoint": ckpt_path, "scene": scene_dir}, {"report": out}, started)
    click.echo(report.to_text(), nl=False)


@main.command("gradcheck")
@click.option("--config", "config_src", default="desk", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@command
def cmd_gradcheck(config_src, seed):
    """Finite-difference check of every layer; exit 1 if any exceeds tolerance."""
    rc = load_run_config(config_src)
    results = []
    for r in layer_checks(rc.network, seed=seed):
        results.append(r)
        click.echo(f"{'ok  ' if r.ok else 'FAIL'}  {r.error:.3e}  (tol {r.tol:.0e})  {r.name}")
    worst = max(results, key=lambda r: r.error / r.tol)
    click.echo(f"max relative error {max(r.error for r in results):.3e}; worst offender: {worst.name}")
    if not all(r.ok for r in results):
        sys.exit(1)


def _report(src, like=None):
    if src == SSCNET:
        cfg = like or load_run_config("full").network
        return sscnet_reference(cfg.input_dims, cfg.num_classes)
    return profile(load_run_config(src).network)


@main.command("profile")
@click.option("--config", "config_src", default="desk", show_default=True,
              help=f"Preset, config file, or '{SSCNET}' for the reference baseline.")
@click.option("--compare", "other", default=None, help="Second config; prints ratios config/other.")
@click.option("--tsv", is_flag=True, help="Tab-separated rows.")
@command
def cmd_profile(config_src, other, tsv):
    """Parameter and MAC counts per layer."""
    like = None
    for src in (config_src, other):
        if src is not None and src != SSCNET:
            like = load_run_config(src).network
            break
    rep = _report(config_src, like)
    if other is None:
        click.echo(rep.format(tsv=tsv), nl=False)
        return
    click.echo(format_comparison(compare(rep, _report(other, like))), nl=False)


ABLATIONS = ("cascaded", "parallel", "no-amplify", "no-guidance", "brb")


def ablation_config(rc: RunConfig, variant: str) -> RunConfig:
    net = rc.network
    if variant == "cascaded":
        net = replace(net, pyramid=replace(net.pyramid, mode=CASCADED))
    elif variant == "parallel":
        net = replace(net, pyramid=replace(net.pyramid, mode=PARALLEL))
    else:
        net = replace(net, grb_mode=variant)
    return replace(rc, network=net)


@main.command("pyramid-ablate")
@click.option("--config", "config_src", default="desk", show_default=True)
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--steps", default=200, show_default=True, type=click.IntRange(0))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--variants", default=",".join(ABLATIONS), show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False), help="Also write the table here.")
@command
def cmd_pyramid_ablate(config_src, scene_dir, steps, seed, variants, out_path):
    """Train each pyramid/GRB variant with the same seed and steps; print a table."""
    started = time.time()
    names = [v.strip() for v in variants.split(",") if v.strip()]
    unknown = sorted(set(names) - set(ABLATIONS))
    if unknown:
        raise click.UsageError(f"unknown variants {unknown}; choose from {list(ABLATIONS)}")
    base = load_run_config(config_src)
    scene = _load_scene(scene_dir, base)
    lines = ["variant\tparams\tfinal_loss\tsc_iou\tssc_mean_iou"]
    for name in names:
        rc = ablation_config(base, name)
        net = build(rc.network, seed=seed, dtype=np.float32)
        res = train(net, scene, steps, rc.sgd, seed=seed, ratio=rc.ratio,
                    occluded_only=rc.occluded_only, class_names=CLASS_NAMES)
        final = res.losses[-1] if res.losses else float("nan")
        lines.append(f"{name}\t{net.num_parameters}\t{final:.4f}\t{res.metrics.sc_iou:.4f}\t"
                     f"{res.metrics.ssc_mean_iou:.4f}")
        log.info(lines[-1])
    table = "\n".join(lines) + "\n"
    click.echo(table, nl=False)
    if out_path:
        Path(out_path).write_text(table)
        write_manifest(Path(f"{out_path}.manifest.json"), "pyramid-ablate", config_src, seed,
                       {"scene": scene_dir}, {"table": out_path}, started, steps=steps, variants=names)


if __name__ == "__main__":
    main()
