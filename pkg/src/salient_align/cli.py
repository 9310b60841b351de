"""Command line interface: ``salient-align {synth,extract,cluster,register,evaluate}``.

Exit codes: 0 success, 1 invalid input or arguments, 2 I/O failure.
Data goes to files; diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from salient_align import __version__
from salient_align.errors import IoFailure, SalientAlignError, ValidationError
from salient_align.evaluation import (
    DEFAULT_RADIUS,
    METHODS,
    parse_label_map,
    parse_methods,
    report_csv,
    report_json,
    salient_transform,
    format_table,
    evaluate_all,
)
from salient_align.grids import load_manifest, read_pgm
from salient_align.peaks import (
    DEFAULT_MIN_DISTANCE,
    DEFAULT_THRESHOLD,
    LandmarkSet,
    PeakConfig,
)

log = logging.getLogger("salient_align")

TOOL = "salient-align"
SEED_ENV = "SALIENT_ALIGN_SEED"
EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 7
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def provenance(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose", "jobs")}
    return {"tool": TOOL, "version": __version__, "command": args.command, "config": cfg}


def _write_json(path, doc) -> None:
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def _labeled_sets(clusters_path) -> list[LandmarkSet]:
    doc = _read_json(clusters_path)
    try:
        return [LandmarkSet.from_json(d) for d in doc["images"]]
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"{clusters_path}: malformed cluster file ({exc})") from exc


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    from salient_align.pipeline import write_cohort
    from salient_align.synth import SynthParams, make_cohort

    if args.n < 1:
        raise ValidationError("--n must be at least 1")
    params = SynthParams(image_noise=args.noise, shadows=args.shadows,
                         saliency_noise=args.saliency_noise, feature_noise=args.feature_noise)
    cohort = make_cohort(args.n, args.seed, params)
    manifest = write_cohort(cohort, args.out_dir, provenance(args))
    log.info("wrote %d pairs, manifest %s", len(cohort), manifest)
    return EXIT_OK


def cmd_extract(args) -> int:
    from salient_align.pipeline import extract_manifest

    cfg = PeakConfig(args.min_distance, args.threshold)
    manifest = load_manifest(args.manifest)
    sets = extract_manifest(manifest, cfg)
    _write_json(args.out, {
        "provenance": provenance(args),
        "images": [ls.to_json() for ls in sets],
    })
    if args.figures:
        from salient_align.figures import plot_landmarks

        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        for rec, ls in zip(manifest.images, sets):
            image = read_pgm(rec.image) if rec.image else None
            plot_landmarks(image, rec.load_saliency(), ls, fig_dir / f"{rec.image_id}.png",
                           rec.annotations)
    log.info("extracted %d landmarks from %d images", sum(len(s) for s in sets), len(sets))
    return EXIT_OK


def cmd_cluster(args) -> int:
    from salient_align.pipeline import cluster_manifest

    if args.k_min < 2 or (args.k_max is not None and args.k_max < args.k_min):
        raise ValidationError(f"invalid k range [{args.k_min}, {args.k_max}]")
    manifest = load_manifest(args.manifest)
    doc = _read_json(args.landmarks)
    sets = [LandmarkSet.from_json(d) for d in doc.get("images", [])]
    labeled, results = cluster_manifest(manifest, sets, args.k_min, args.k_max, args.seed,
                                        args.normalize)
    _write_json(args.out, {
        "provenance": provenance(args),
        "planes": {p: (r.to_json() if r else None) for p, r in sorted(results.items())},
        "assignments": [
            {"image_id": ls.image_id, "landmark_index": i, "cluster": lm.cluster}
            for ls in labeled for i, lm in enumerate(ls.landmarks)
        ],
        "images": [ls.to_json() for ls in labeled],
    })
    for plane, res in sorted(results.items()):
        if res:
            log.info("plane %s: k=%d, silhouette %.3f", plane, res.k, res.silhouette)
    return EXIT_OK


def cmd_register(args) -> int:
    manifest = load_manifest(args.manifest)
    records = manifest.by_id()
    sets = {ls.image_id: ls for ls in _labeled_sets(args.clusters)}
    for image_id in (args.source, args.target):
        if image_id not in records or image_id not in sets:
            raise ValidationError(f"unknown image id {image_id!r}")
    src = records[args.source]
    tf = salient_transform(sets[args.source], sets[args.target], parse_label_map(args.label_map),
                           src.pixel_width, force=args.force_orientation)
    _write_json(args.out, {"provenance": provenance(args), "source": args.source,
                           "target": args.target, "transform": tf.to_json()})
    if args.warp or args.overlay:
        from salient_align.figures import plot_alignment, save_gray
        from salient_align.registration import warp_image

        tgt = records[args.target]
        if src.image is None or tgt.image is None:
            raise ValidationError("manifest lists no images to warp")
        target_img = read_pgm(tgt.image)
        warped = warp_image(read_pgm(src.image), tf, target_img.shape)
        if args.warp:
            save_gray(warped, args.warp)
        if args.overlay:
            plot_alignment(target_img, warped, args.overlay, f"{args.source} -> {args.target}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from salient_align.pipeline import eval_images_from_manifest, infer_label_map

    if not 0 < args.radius <= 1:
        raise ValidationError("--radius must lie in (0, 1]")
    if args.jobs is not None and args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    methods = parse_methods(args.methods)
    manifest = load_manifest(args.manifest)
    sets = _labeled_sets(args.clusters)
    if args.label_map == "auto":
        label_map = infer_label_map(
            sets, {r.image_id: r.annotations for r in manifest.images if r.annotations})
        log.info("inferred label map %s", label_map)
    else:
        label_map = parse_label_map(args.label_map)
    images = eval_images_from_manifest(manifest, sets)
    result = evaluate_all(images, label_map, methods, pairs=manifest.pairs,
                          radius_frac=args.radius, jobs=args.jobs or os.cpu_count() or 1)
    out = Path(args.out)
    prov = provenance(args)
    prov["label_map"] = {str(k): v for k, v in sorted(label_map.items())}
    try:
        out.write_text(report_csv(result, prov))
        out.with_suffix(".json").write_text(report_json(result, prov))
    except OSError as exc:
        raise IoFailure(f"cannot write report: {exc}") from exc
    if not args.no_figures:
        from salient_align.figures import plot_errors

        plot_errors(result, out.with_suffix(".png"))
    print(format_table(result), file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog=TOOL, description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    seed = default_seed()

    p = sub.add_parser("synth", help="generate a synthetic cohort of image pairs", formatter_class=fmt)
    p.add_argument("--n", type=int, default=40, help="number of image pairs (split over TV/TC)")
    p.add_argument("--seed", type=int, default=seed, help=f"random seed (env {SEED_ENV})")
    p.add_argument("--noise", type=float, default=0.1, help="image speckle noise sigma")
    p.add_argument("--shadows", action="store_true", help="add acoustic-shadow wedges")
    p.add_argument("--saliency-noise", type=float, default=0.0, help="saliency grid noise sigma")
    p.add_argument("--feature-noise", type=float, default=0.5, help="feature grid noise sigma")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="find salient landmarks in saliency grids", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-distance", type=int, default=DEFAULT_MIN_DISTANCE,
                   help="minimum distance d between maxima, in grid cells")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                   help="saliency threshold t for maxima")
    p.add_argument("--out", required=True, help="landmarks JSON")
    p.add_argument("--figures", help="directory for per-image landmark figures")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("cluster", help="match landmarks by k-means on CNN features", formatter_class=fmt)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=10, help="capped at (landmarks - 1)")
    p.add_argument("--seed", type=int, default=seed, help=f"random seed (env {SEED_ENV})")
    p.add_argument("--normalize", action="store_true", help="L2-normalize feature vectors")
    p.add_argument("--out", required=True, help="clusters JSON")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("register", help="align one image pair with its landmarks", formatter_class=fmt)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--label-map", default="csp=0,lv=1", help="cluster id per structure")
    p.add_argument("--force-orientation", action="store_true",
                   help="treat vertically aligned landmarks as not flipped")
    p.add_argument("--out", required=True, help="transform JSON")
    p.add_argument("--warp", help="write the warped source image (PNG)")
    p.add_argument("--overlay", help="write a target/warped-source overlay figure")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="baselines and landmark alignment error report",
                       formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--label-map", default="csp=0,lv=1",
                   help="cluster id per structure, or 'auto' to infer from annotations")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS,
                   help="match radius as a fraction of the HC long axis")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers (default: all cores)")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True, help="report CSV; JSON and PNG written alongside")
    p.set_defaults(func=cmd_evaluate)
    return parser


def run(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{TOOL}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (IoFailure, OSError) as exc:
        print(f"{TOOL}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SalientAlignError, ValueError, KeyError) as exc:
        print(f"{TOOL}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())
