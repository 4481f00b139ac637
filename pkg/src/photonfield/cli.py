"""Command-line front end: reproducible renders, training runs, metrics.

Every file-writing command also writes ``<out>.manifest.json`` holding the
fully resolved flags, the scene content hash, and SHA-256 digests of the
outputs; re-running the manifest's argv reproduces the outputs byte for
byte (fixed seeds, thread-count-independent streams).

Exit codes: 0 success, 2 parse errors (bad files/flags), 3 validation
errors (well-formed but invalid input), 4 runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time

import numpy as np

from . import images, integrators, training
from .field import GaussianField
from .integrators import SppmConfig
from .scene import (
    Camera,
    Scene,
    SceneParseError,
    SceneValidationError,
    builtin_scene,
    load_scene,
    scene_from_dict,
)


def _load_scene_arg(source: str) -> Scene:
    if source.startswith("builtin:"):
        return builtin_scene(source[len("builtin:"):])
    return load_scene(source)


def _camera_from_dict(obj: dict) -> Camera:
    probe = {
        "camera": obj,
        "materials": {"m": {"type": "diffuse", "albedo": [0.5, 0.5, 0.5]}},
        "shapes": [{"type": "sphere", "center": [0, 0, 0], "radius": 1.0, "material": "m"}],
    }
    return scene_from_dict(probe).camera


def _load_camera_file(path) -> Camera:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise SceneParseError(f"invalid JSON in {path}: {e.msg} at line {e.lineno} column {e.colno}") from e
    if not isinstance(obj, dict):
        raise SceneParseError(f"{path} must hold a single camera object")
    return _camera_from_dict(obj)


def _load_views_file(path) -> list[Camera]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            arr = json.load(fh)
        except json.JSONDecodeError as e:
            raise SceneParseError(f"invalid JSON in {path}: {e.msg} at line {e.lineno} column {e.colno}") from e
    if not isinstance(arr, list) or not arr:
        raise SceneParseError(f"{path} must hold a non-empty JSON array of cameras")
    return [_camera_from_dict(o) for o in arr]


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolved_argv(command: str, args: argparse.Namespace) -> list[str]:
    skip = {"func", "command"}
    argv = [command]
    for key in sorted(vars(args)):
        if key in skip:
            continue
        value = getattr(args, key)
        flag = "--" + key.replace("_", "-")
        if value is None:
            continue
        if isinstance(value, bool):
            if value:
                argv.append(flag)
            continue
        if isinstance(value, (list, tuple)):
            argv.append(flag)
            argv.extend(str(v) for v in value)
            continue
        argv.extend([flag, str(value)])
    return argv


def _write_manifest(command: str, args: argparse.Namespace, scene: Scene | None, outputs: list[str]):
    from . import __version__

    out = {
        "command": command,
        "argv": _resolved_argv(command, args),
        "package_version": __version__,
        "scene_hash": scene.content_hash() if scene is not None else None,
        "outputs": {p: _sha256_file(p) for p in outputs},
    }
    path = outputs[0] + ".manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")
    return path


def _apply_resolution(camera: Camera, resolution) -> Camera:
    if resolution is None:
        return camera
    return camera.with_resolution(int(resolution[0]), int(resolution[1]))


def _metric_record(psnr_value, ssim_value, time_seconds=None, storage_bytes=None) -> dict:
    return {
        "psnr": "inf" if psnr_value == float("inf") else psnr_value,
        "ssim": ssim_value,
        "time_seconds": time_seconds,
        "storage_bytes": storage_bytes,
    }


# ---------------------------------------------------------------------------
# subcommands


def _cmd_render_pt(args) -> int:
    scene = _load_scene_arg(args.scene)
    camera = _apply_resolution(scene.camera, args.resolution)
    img = integrators.render_pt(scene, camera, args.spp, args.max_depth, args.seed, threads=args.threads)
    images.write_pfm(args.out, img)
    _write_manifest("render-pt", args, scene, [args.out])
    return 0


def _cmd_render_sppm(args) -> int:
    scene = _load_scene_arg(args.scene)
    camera = _apply_resolution(scene.camera, args.resolution)
    cfg = SppmConfig(
        iterations=args.iterations,
        photons_per_iter=args.photons,
        initial_radius=args.r0,
        alpha=args.alpha,
        max_photon_bounces=args.max_bounces,
        seed=args.seed,
    )
    img = integrators.render_sppm(scene, camera, cfg, threads=args.threads)
    images.write_pfm(args.out, img)
    _write_manifest("render-sppm", args, scene, [args.out])
    return 0


def _cmd_gpf_init(args) -> int:
    from .photons import trace_photons
    from .core import Rng

    scene = _load_scene_arg(args.scene)
    photons = trace_photons(scene, args.photons, args.max_bounces, Rng(args.seed))
    field = GaussianField.from_photons(
        photons, initial_scale=args.scale0, rng=Rng(args.seed, 0x51), radius=args.radius, k_min=args.kmin
    )
    field.save(args.out_checkpoint)
    _write_manifest("gpf-init", args, scene, [args.out_checkpoint])
    print(f"initialized {len(field)} primitives from {len(photons)} photons")
    return 0


def _cmd_gpf_train(args) -> int:
    from .photons import trace_photons
    from .core import Rng

    scene = _load_scene_arg(args.scene)
    cameras = _load_views_file(args.views)
    cfg = SppmConfig(
        iterations=args.sppm_iterations,
        photons_per_iter=args.sppm_photons,
        initial_radius=args.r0,
        alpha=args.alpha,
        max_photon_bounces=args.max_bounces,
        seed=args.seed,
    )
    if args.in_checkpoint is not None:
        field = GaussianField.load(args.in_checkpoint, radius=args.radius, k_min=args.kmin)
    else:
        photons = trace_photons(scene, args.photons, args.max_bounces, Rng(args.seed))
        field = GaussianField.from_photons(
            photons, initial_scale=args.scale0, rng=Rng(args.seed, 0x51), radius=args.radius, k_min=args.kmin
        )
    dataset = training.build_dataset(scene, cameras, cfg, samples_per_pixel=args.spp, threads=args.threads)
    tcfg = training.TrainConfig(
        learning_rate=args.lr,
        steps=args.steps,
        batch_size=args.batch,
        rebuild_every=args.rebuild_every,
        seed=args.seed,
    )
    log = training.train(field, dataset, tcfg)
    field.save(args.out_checkpoint)
    outputs = [args.out_checkpoint]
    if args.dataset_out is not None:
        dataset.save(args.dataset_out)
        outputs.append(args.dataset_out)
    if args.log is not None:
        with open(args.log, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "losses": log.losses.tolist(),
                    "initial_full_loss": log.initial_full_loss,
                    "final_full_loss": log.final_full_loss,
                },
                fh,
            )
            fh.write("\n")
        outputs.append(args.log)
    _write_manifest("gpf-train", args, scene, outputs)
    print(
        f"trained {len(field)} primitives on {len(dataset)} samples: "
        f"loss {log.initial_full_loss:.6g} -> {log.final_full_loss:.6g}"
    )
    return 0


def _cmd_gpf_render(args) -> int:
    scene = _load_scene_arg(args.scene)
    camera = scene.camera if args.camera is None else _load_camera_file(args.camera)
    camera = _apply_resolution(camera, args.resolution)
    field = GaussianField.load(args.checkpoint, radius=args.radius, k_min=args.kmin)
    img = integrators.render_gpf(
        scene, camera, field, spp=args.spp, seed=args.seed, bsdf_modulation=args.bsdf_modulation, threads=args.threads
    )
    images.write_pfm(args.out, img)
    _write_manifest("gpf-render", args, scene, [args.out])
    return 0


def _cmd_compare(args) -> int:
    ref = images.read_pfm(args.ref)
    table = {}
    for test_path in args.test:
        test = images.read_pfm(test_path)
        table[test_path] = _metric_record(
            images.psnr(ref, test, args.exposure),
            images.ssim(ref, test, args.exposure),
            storage_bytes=None,
        )
    blob = json.dumps({"ref": args.ref, "exposure": args.exposure, "results": table}, indent=2)
    print(blob)
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(blob + "\n")
    return 0


def _cmd_sweep(args) -> int:
    import os

    from .core import Rng
    from .photons import trace_photons

    scene = _load_scene_arg(args.scene)
    cameras = _load_views_file(args.views)
    heldout = scene.camera if args.camera is None else _load_camera_file(args.camera)
    heldout = _apply_resolution(heldout, args.resolution)
    values = [int(v) for v in args.values.split(",")]
    ref_cfg = SppmConfig(
        iterations=args.ref_iterations,
        photons_per_iter=args.sppm_photons,
        initial_radius=args.r0,
        alpha=args.alpha,
        max_photon_bounces=args.max_bounces,
        seed=args.seed,
    )
    reference = integrators.render_sppm(scene, heldout, ref_cfg, threads=args.threads)
    train_cfg = SppmConfig(
        iterations=args.sppm_iterations,
        photons_per_iter=args.sppm_photons,
        initial_radius=args.r0,
        alpha=args.alpha,
        max_photon_bounces=args.max_bounces,
        seed=args.seed,
    )
    rows = []
    dataset = None
    for value in values:
        n_photons = value if args.param == "gaussians" else args.photons
        k_min = value if args.param == "k" else args.kmin
        photons = trace_photons(scene, n_photons, args.max_bounces, Rng(args.seed))
        field = GaussianField.from_photons(
            photons, initial_scale=args.scale0, rng=Rng(args.seed, 0x51), radius=args.radius, k_min=k_min
        )
        if dataset is None:
            dataset = training.build_dataset(scene, cameras, train_cfg, samples_per_pixel=args.spp, threads=args.threads)
        tcfg = training.TrainConfig(
            learning_rate=args.lr, steps=args.steps, batch_size=args.batch, rebuild_every=args.rebuild_every, seed=args.seed
        )
        training.train(field, dataset, tcfg)
        ckpt = f"{args.out}.{args.param}-{value}.gpf"
        field.save(ckpt)
        t0 = time.perf_counter()
        img = integrators.render_gpf(scene, heldout, field, spp=args.spp, seed=args.seed, threads=args.threads)
        elapsed = time.perf_counter() - t0
        rows.append(
            {
                "param": args.param,
                "value": value,
                **_metric_record(
                    images.psnr(reference, img, args.exposure),
                    images.ssim(reference, img, args.exposure),
                    time_seconds=elapsed,
                    storage_bytes=os.path.getsize(ckpt),
                ),
            }
        )
    blob = json.dumps({"param": args.param, "rows": rows}, indent=2)
    print(blob)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(blob + "\n")
    _write_manifest("sweep", args, scene, [args.out])
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p, with_threads=True):
    p.add_argument("--seed", type=int, default=0)
    if with_threads:
        p.add_argument("--threads", type=int, default=1, help="worker cap; never changes results")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="photonfield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render-pt", help="path-traced render (NEE + MIS)")
    p.add_argument("--scene", required=True, help="scene JSON path or builtin:<name>")
    p.add_argument("--spp", type=int, default=64)
    p.add_argument("--max-depth", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, nargs=2, metavar=("W", "H"))
    _add_common(p)
    p.set_defaults(func=_cmd_render_pt)

    p = sub.add_parser("render-sppm", help="progressive photon-mapping render")
    p.add_argument("--scene", required=True)
    p.add_argument("--iterations", type=int, default=64)
    p.add_argument("--photons", type=int, default=100_000)
    p.add_argument("--r0", type=float, default=0.02)
    p.add_argument("--alpha", type=float, default=0.7)
    p.add_argument("--max-bounces", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, nargs=2, metavar=("W", "H"))
    _add_common(p)
    p.set_defaults(func=_cmd_render_sppm)

    p = sub.add_parser("gpf-init", help="seed a photon field from traced photons")
    p.add_argument("--scene", required=True)
    p.add_argument("--photons", type=int, default=100_000)
    p.add_argument("--scale0", type=float, default=0.01)
    p.add_argument("--radius", type=float, default=0.02)
    p.add_argument("--kmin", type=int, default=3)
    p.add_argument("--max-bounces", type=int, default=16)
    p.add_argument("--out-checkpoint", required=True)
    _add_common(p, with_threads=False)
    p.set_defaults(func=_cmd_gpf_init)

    p = sub.add_parser("gpf-train", help="optimize a photon field against photon-mapped references")
    p.add_argument("--scene", required=True)
    p.add_argument("--views", required=True, help="JSON array of camera objects")
    p.add_argument("--sppm-iterations", type=int, default=256)
    p.add_argument("--sppm-photons", type=int, default=100_000)
    p.add_argument("--r0", type=float, default=0.02)
    p.add_argument("--alpha", type=float, default=0.7)
    p.add_argument("--max-bounces", type=int, default=16)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--radius", type=float, default=0.02)
    p.add_argument("--kmin", type=int, default=3)
    p.add_argument("--rebuild-every", type=int, default=100)
    p.add_argument("--spp", type=int, default=1, help="supervision samples per pixel")
    p.add_argument("--in-checkpoint", help="start from this field (default: fresh photon init)")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--photons", type=int, default=100_000, help="photon count for fresh init")
    p.add_argument("--scale0", type=float, default=0.01)
    p.add_argument("--dataset-out", help="also save the supervision dataset")
    p.add_argument("--log", help="write per-step losses as JSON")
    _add_common(p)
    p.set_defaults(func=_cmd_gpf_train)

    p = sub.add_parser("gpf-render", help="render by querying a trained photon field")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", help="JSON camera object (default: scene camera)")
    p.add_argument("--out", required=True)
    p.add_argument("--spp", type=int, default=1)
    p.add_argument("--radius", type=float, default=0.02)
    p.add_argument("--kmin", type=int, default=3)
    p.add_argument("--bsdf-modulation", action="store_true", help="ablation: multiply queries by albedo")
    p.add_argument("--resolution", type=int, nargs=2, metavar=("W", "H"))
    _add_common(p)
    p.set_defaults(func=_cmd_gpf_render)

    p = sub.add_parser("compare", help="PSNR/SSIM between a reference and test images")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True, action="append")
    p.add_argument("--exposure", type=float, default=1.0)
    p.add_argument("--out", help="also write the JSON table here")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("sweep", help="ablation sweep over primitive count or k")
    p.add_argument("--param", required=True, choices=("gaussians", "k"))
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--scene", required=True)
    p.add_argument("--views", required=True)
    p.add_argument("--camera", help="held-out camera (default: scene camera)")
    p.add_argument("--ref-iterations", type=int, default=256)
    p.add_argument("--sppm-iterations", type=int, default=64)
    p.add_argument("--sppm-photons", type=int, default=50_000)
    p.add_argument("--r0", type=float, default=0.02)
    p.add_argument("--alpha", type=float, default=0.7)
    p.add_argument("--max-bounces", type=int, default=16)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--radius", type=float, default=0.02)
    p.add_argument("--kmin", type=int, default=3)
    p.add_argument("--rebuild-every", type=int, default=100)
    p.add_argument("--photons", type=int, default=10_000, help="init photons when sweeping k")
    p.add_argument("--scale0", type=float, default=0.01)
    p.add_argument("--spp", type=int, default=1)
    p.add_argument("--exposure", type=float, default=1.0)
    p.add_argument("--resolution", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SceneParseError as e:
        print(f"error: parse: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: parse: missing file: {e.filename or e}", file=sys.stderr)
        return 2
    except (SceneValidationError, ValueError) as e:
        print(f"error: validate: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # pragma: no cover - defensive
        print(f"error: runtime: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
