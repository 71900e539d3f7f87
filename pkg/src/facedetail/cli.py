"""Command-line entry point: ``facedetail <command> [flags]``.

Commands
--------
model        build a synthetic face model (JSON + ``.bin`` sidecar + ``.mesh``)
dataset      render a labelled real/fake corpus with ``manifest.jsonl``
decompose    decompose one image and write all eight input variants
train-eval   featurize a corpus, train the linear detector, print metrics JSON
attention    pooled |FD_real - FD_fake| map as a 16-bit PGM

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .detail import ATTENTION_SIZE, MaskedImage, Variant, attention_target, compose_all
from .fitting import FittingError, decompose
from .geometry import MeshError, read_mesh
from .pipeline import EVAL_CHOICES, corpus_features, required_variants, train_eval
from .renderer import raster_plan, rasterize
from .sh_lighting import shading
from .synth import (DatasetExhaustedError, ForgeryConfig, build_model, generate_dataset,
                    load_model, save_model)

log = logging.getLogger("facedetail")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    """Bad flags or inputs detected before any work starts."""


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir_ok(path: Path) -> None:
    parent = path.parent if path.parent != Path("") else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")


def _load_model(path: str):
    p = _existing(path, "model file")
    try:
        return load_model(p)
    except (formats.FormatError, KeyError, ValueError, OSError) as exc:
        raise UsageError(f"cannot load model {p}: {exc}") from exc


# ----------------------------------------------------------------------------- commands

def cmd_model(args) -> int:
    out = Path(args.out)
    _out_dir_ok(out)
    try:
        model = build_model(args.seed, grid_n=args.grid, k=args.k, image_size=args.image_size)
    except (ValueError, MeshError) as exc:
        raise UsageError(str(exc)) from exc
    save_model(model, out)
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_dataset(args) -> int:
    model = _load_model(args.model)
    if args.real < 1 or args.fake < 1:
        raise UsageError("--real and --fake must both be >= 1")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    try:
        cfg = ForgeryConfig(light_mismatch=args.light_mismatch, feather_sigma=args.feather)
        cfg = cfg.scaled(model.camera.width / 128.0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = generate_dataset(model, args.real, args.fake, cfg, args.seed, out_dir,
                                workers=args.workers)
    print(manifest)
    return EXIT_OK


def reconstruction_residual(pixels, decomp, model) -> float:
    """RMS difference between the image and its full re-render, over face pixels."""
    colors = shading(model.basis, decomp.light) * (
        model.texture_model.common(decomp.beta) + decomp.t_id)
    syn = rasterize(model.mesh, model.camera, colors)
    cov = syn.coverage
    d = (pixels - syn.pixels)[cov]
    return float(np.sqrt(np.mean(d * d)))


def cmd_decompose(args) -> int:
    model = _load_model(args.model)
    mesh_path = _existing(args.mesh, "mesh file")
    image_path = _existing(args.image, "image")
    prefix = Path(args.out_prefix)
    _out_dir_ok(prefix)
    try:
        mesh = read_mesh(mesh_path)
    except (formats.FormatError, MeshError) as exc:
        raise UsageError(f"bad mesh {mesh_path}: {exc}") from exc
    if mesh.n_vertices != model.texture_model.n_vertices:
        raise UsageError(f"mesh has {mesh.n_vertices} vertices, texture model expects "
                         f"{model.texture_model.n_vertices}")
    pixels = formats.read_ppm(image_path)
    if pixels.shape[:2] != (model.camera.height, model.camera.width):
        raise UsageError(f"image is {pixels.shape[1]}x{pixels.shape[0]}, model camera is "
                         f"{model.camera.width}x{model.camera.height}")
    if mesh.key != model.mesh.key:
        model = type(model)(mesh, model.camera, model.texture_model, model.ranges,
                            model.grid_n, model.seed)

    decomp = decompose(pixels, model.mesh, model.camera, model.texture_model)
    residual = reconstruction_residual(pixels, decomp, model)
    variants = compose_all(decomp, model.mesh, model.camera, model.texture_model, pixels)

    sidecar = prefix.with_name(prefix.name + ".f64")
    layout = formats.save_arrays(sidecar, {"t_id": decomp.t_id,
                                           "visibility": decomp.visibility.astype(np.uint8)})
    doc = decomp.to_dict()
    doc.update({"residual_rms": residual, "sidecar": sidecar.name, "arrays": layout,
                "visible_fraction": float(decomp.visibility.mean())})
    formats.write_json(prefix.with_name(prefix.name + ".json"), doc)
    for v, img in variants.items():
        formats.write_ppm(prefix.with_name(f"{prefix.name}.{v.value}.ppm"), img.pixels)
        if v.in_uv:
            formats.write_mask(prefix.with_name(f"{prefix.name}.{v.value}.mask.pgm"),
                               img.validity)
    print(f"residual_rms {residual:.6f}")
    return EXIT_OK


def cmd_train_eval(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    if not 0.0 < args.split < 1.0:
        raise UsageError("--split must lie strictly between 0 and 1")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    if args.model is not None:
        model = _load_model(args.model)
    else:
        model = _load_model(str(manifest.parent / "model.json"))
    if args.out is not None:
        _out_dir_ok(Path(args.out))
    corpus = corpus_features(manifest, required_variants(args.variant), model,
                             workers=args.workers)
    report = train_eval(corpus, args.variant, split=args.split, seed=args.seed)
    doc = report.to_dict()
    doc["variant"] = args.variant
    if args.out is not None:
        formats.write_json(args.out, doc)
    sys.stdout.write(formats.json_line(doc))
    return EXIT_OK


def _read_fd(path: str) -> MaskedImage:
    p = _existing(path, "facial detail image")
    px = formats.read_ppm(p)
    mask_path = p.with_name(p.name[:-len(p.suffix)] + ".mask.pgm") if p.suffix else None
    if mask_path is not None and mask_path.is_file():
        valid = formats.read_pgm(mask_path) > 0.5
        if valid.shape != px.shape[:2]:
            raise UsageError(f"mask {mask_path} does not match {p}")
    else:
        valid = np.ones(px.shape[:2], dtype=bool)
    return MaskedImage(px, valid)


def cmd_attention(args) -> int:
    real = _read_fd(args.real_fd)
    fake = _read_fd(args.fake_fd)
    out = Path(args.out)
    _out_dir_ok(out)
    if real.pixels.shape != fake.pixels.shape:
        raise UsageError(f"facial detail sizes differ: {real.pixels.shape[1]}x"
                         f"{real.pixels.shape[0]} vs {fake.pixels.shape[1]}x{fake.pixels.shape[0]}")
    try:
        amap = attention_target(real, fake, args.size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    formats.write_pgm(out, amap, maxval=65535)
    return EXIT_OK


# ----------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facedetail", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("model", help="build a synthetic face model")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--grid", type=int, default=48, help="mesh grid size (default 48)")
    m.add_argument("--k", type=int, default=8, help="texture basis size (default 8)")
    m.add_argument("--image-size", type=int, default=128)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_model)

    d = sub.add_parser("dataset", help="render a labelled real/fake corpus")
    d.add_argument("--model", required=True)
    d.add_argument("--real", type=int, required=True)
    d.add_argument("--fake", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--light-mismatch", type=float, default=40.0,
                   help="minimum source/target light angle in degrees (default 40)")
    d.add_argument("--feather", type=float, default=1.0,
                   help="Gaussian sigma of the blend mask edge in pixels (default 1)")
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_dataset)

    c = sub.add_parser("decompose", help="decompose an image and write all variants")
    c.add_argument("--model", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--mesh", required=True)
    c.add_argument("--out-prefix", required=True)
    c.set_defaults(func=cmd_decompose)

    t = sub.add_parser("train-eval", help="train and evaluate the linear detector")
    t.add_argument("--manifest", required=True)
    t.add_argument("--variant", required=True, choices=EVAL_CHOICES)
    t.add_argument("--split", type=float, default=0.7,
                   help="image-level training fraction (default 0.7)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--model", default=None,
                   help="model file (default: model.json next to the manifest)")
    t.add_argument("--out", default=None, help="also write the metrics JSON here")
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_train_eval)

    a = sub.add_parser("attention", help="attention target from two facial detail maps")
    a.add_argument("--real-fd", required=True)
    a.add_argument("--fake-fd", required=True)
    a.add_argument("--size", type=int, default=ATTENTION_SIZE)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", 0) is not None and getattr(args, "seed", 0) < 0:
        print("facedetail: error: --seed must be a non-negative integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"facedetail: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetExhaustedError, FittingError, formats.FormatError, ValueError,
            OSError) as exc:
        print(f"facedetail: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
