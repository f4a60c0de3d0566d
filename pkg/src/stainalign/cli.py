"""Command-line interface: register, eval, synth, features, overlay.

Exit codes: 0 success, 2 registration failure, 3 input/config error,
4 evaluation shape mismatch. Every command is deterministic given identical
inputs, config, and seeds; diagnostics always embed the fully resolved
configuration so runs can be replayed from their artifacts alone.
"""

from __future__ import annotations

import argparse
import base64
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import evalkit, pipeline
from .errors import PrealignmentFailedError, ShapeError, StainAlignError
from .features import detect_and_describe
from .pipeline import PipelineConfig, RegistrationResult
from .preprocess import StainMatrix, tissue_mask
from .raster import Raster, downscale, load_image, load_mask, save_image, save_mask, to_grayscale

EXIT_OK = 0
EXIT_REGISTRATION_FAILED = 2
EXIT_INPUT_ERROR = 3
EXIT_SHAPE_ERROR = 4


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value)}")


def _dump_json(doc: dict, path: Path | None = None) -> str:
    text = json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"
    if path is not None:
        path.write_text(text)
    return text


def _load_config(path: str | None, max_dim: int | None) -> PipelineConfig:
    doc = {}
    if path:
        doc = json.loads(Path(path).read_text())
    cfg = PipelineConfig.from_dict(doc)
    if max_dim is not None:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), "working_max_dim": max_dim})
    return cfg


def _load_landmarks(path: str) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """CSV rows of x_src, y_src, x_tgt, y_tgt; '#' lines and a header row are skipped."""
    pairs = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(v) for v in row[:4]]
            except ValueError:
                continue
            if len(vals) == 4:
                pairs.append(((vals[0], vals[1]), (vals[2], vals[3])))
    return pairs


def cmd_register(args) -> int:
    try:
        source = load_image(args.source)
        target = load_image(args.target)
        cfg = _load_config(args.config, args.max_dim)
    except (OSError, ValueError, StainAlignError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = pipeline.register(source, target, cfg)
    except PrealignmentFailedError as e:
        print(f"registration failed: {e}", file=sys.stderr)
        _dump_json({"config": cfg.to_dict(), "diagnostics": e.diagnostics, "error": str(e)},
                   out_dir / "diagnostics.json")
        return EXIT_REGISTRATION_FAILED
    except StainAlignError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR

    save_image(result.warped, out_dir / "warped.png")
    _dump_json(result.to_dict(), out_dir / "transform.json")
    _dump_json({"config": cfg.to_dict(), "diagnostics": result.diagnostics}, out_dir / "diagnostics.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        doc = json.loads(Path(args.transform).read_text())
        result = RegistrationResult.from_dict(doc)
        source_mask = load_mask(args.source_mask)
        target_mask = load_mask(args.target_mask)
        landmarks = _load_landmarks(args.landmarks) if args.landmarks else None
    except (OSError, ValueError, KeyError, StainAlignError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    try:
        metrics = evalkit.evaluate(result, source_mask, target_mask, landmarks=landmarks)
    except ShapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SHAPE_ERROR
    print(_dump_json(metrics.to_dict()), end="")
    return EXIT_OK


def _parse_synth_spec(raw: str, seed_override: int | None) -> evalkit.SynthSpec:
    text = raw if raw.lstrip().startswith("{") else Path(raw).read_text()
    doc = json.loads(text)
    allowed = {"rotation", "scale", "translation", "deform_amplitude", "deform_wavelength", "recolor", "seed"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown keys in synth spec: {sorted(unknown)}")
    recolor = None
    if doc.get("recolor"):
        rec = doc["recolor"]
        def _stain(v):
            return StainMatrix.preset(v) if isinstance(v, str) else StainMatrix.from_rows(v)
        recolor = (_stain(rec["from"]), _stain(rec["to"]))
    return evalkit.SynthSpec(
        rotation=float(doc.get("rotation", 0.0)),
        scale=float(doc.get("scale", 1.0)),
        translation=tuple(doc.get("translation", (0.0, 0.0))),
        deform_amplitude=float(doc.get("deform_amplitude", 0.0)),
        deform_wavelength=float(doc.get("deform_wavelength", 64.0)),
        recolor=recolor,
        seed=seed_override if seed_override is not None else int(doc.get("seed", 0)),
    )


def cmd_synth(args) -> int:
    try:
        base = load_image(args.base)
        spec = _parse_synth_spec(args.spec, args.seed)
        source, target, truth, truth_affine = evalkit.synth_pair(base, spec)
    except (OSError, ValueError, StainAlignError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(source, out_dir / "source.png")
    save_image(target, out_dir / "target.png")
    save_mask(tissue_mask(source), out_dir / "source_mask.png")
    save_mask(tissue_mask(target), out_dir / "target_mask.png")
    _dump_json(
        {
            "affine": truth_affine.to_list(),
            "rotation": spec.rotation,
            "scale": spec.scale,
            "translation": list(spec.translation),
            "deform_amplitude": spec.deform_amplitude,
            "deform_wavelength": spec.deform_wavelength,
            "deform_phases": list(truth.phases),
            "seed": spec.seed,
        },
        out_dir / "truth.json",
    )
    # A grid of exact correspondences on tissue, usable as a landmark file
    # for `eval` (off-tissue points would score the extrapolation fallback,
    # not the registration).
    tmask = tissue_mask(target)
    ty, tx = np.nonzero(tmask.bits)
    if len(tx) == 0:
        print("error: target has no detectable tissue for landmarks", file=sys.stderr)
        return EXIT_INPUT_ERROR
    grid = np.stack(
        np.meshgrid(
            np.linspace(tx.min(), tx.max(), 7),
            np.linspace(ty.min(), ty.max(), 7),
        ),
        axis=-1,
    ).reshape(-1, 2)
    on_tissue = tmask.bits[np.rint(grid[:, 1]).astype(int), np.rint(grid[:, 0]).astype(int)]
    grid = grid[on_tissue]
    src_pts = truth.map_target_to_source(grid)
    with open(out_dir / "landmarks.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_src", "y_src", "x_tgt", "y_tgt"])
        for (sx, sy), (tx, ty) in zip(src_pts, grid):
            writer.writerow([f"{sx:.4f}", f"{sy:.4f}", f"{tx:.4f}", f"{ty:.4f}"])
    return EXIT_OK


def cmd_features(args) -> int:
    try:
        img = load_image(args.image)
        cfg = _load_config(args.config, args.max_dim)
        if args.max_dim:
            factor = max(1.0, max(img.width, img.height) / args.max_dim)
            if factor > 1:
                img = downscale(img, factor)
        feats = detect_and_describe(pipeline.preprocess_for_features(img, cfg.preprocess), cfg.sift)
    except (OSError, ValueError, StainAlignError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR

    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for i, kp in enumerate(feats.keypoints):
            doc = {
                "x": kp.x,
                "y": kp.y,
                "scale": kp.scale,
                "orientation": kp.orientation,
                "response": kp.response,
            }
            if args.descriptors:
                doc["descriptor"] = base64.b64encode(
                    feats.descriptors[i].astype(np.float32).tobytes()
                ).decode("ascii")
            out.write(json.dumps(doc, sort_keys=True) + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_overlay(args) -> int:
    try:
        a = load_image(args.image_a)
        b = load_image(args.image_b)
    except (OSError, ValueError, StainAlignError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    if (a.width, a.height) != (b.width, b.height):
        print(
            f"error: image sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}",
            file=sys.stderr,
        )
        return EXIT_SHAPE_ERROR
    ga = to_grayscale(a).data if a.channels == 3 else a.data[:, :, 0].astype(float)
    gb = to_grayscale(b).data if b.channels == 3 else b.data[:, :, 0].astype(float)
    overlay = np.stack([ga, gb, ga], axis=-1)  # a in magenta, b in green
    save_image(Raster(np.clip(np.rint(overlay), 0, 255).astype(np.uint8)), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stainalign",
        description="Two-step automatic cross-stain image registration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a source image onto a target image")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--max-dim", type=int, help="working resolution bound (overrides config)")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="score a transform against mask (and landmark) files")
    p.add_argument("transform", help="transform.json from `register`")
    p.add_argument("source_mask")
    p.add_argument("target_mask")
    p.add_argument("--landmarks", help="CSV of x_src,y_src,x_tgt,y_tgt rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic pair with known ground truth")
    p.add_argument("base", help="base image (becomes the target)")
    p.add_argument("--spec", required=True, help="deformation spec: JSON file path or inline JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the spec's seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="detect keypoints and emit them as JSON lines")
    p.add_argument("image")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--max-dim", type=int, help="downscale bound before detection")
    p.add_argument("--descriptors", action="store_true", help="include base64 float32 descriptors")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("overlay", help="false-color overlay of two equally sized images")
    p.add_argument("image_a", help="rendered into magenta")
    p.add_argument("image_b", help="rendered into green")
    p.add_argument("out", help="output PNG path")
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
