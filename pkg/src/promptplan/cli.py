"""Batch driver: fixture synthesis, pipeline runs, evaluation, reporting.

Exit codes are a stable contract: 0 success, 1 usage/config error,
2 runtime failure (including any image skipped mid-run). The environment
variable ``PROMPTPLAN_LOG`` sets log verbosity (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .backends import (
    GenerationFailure,
    OracleDetector,
    OracleSegmenter,
    load_fixtures,
    save_scene,
    synth_scene,
)
from .evaluation import (
    ApSummary,
    EvalReport,
    MissingCategory,
    eval_ap,
    eval_class_agnostic,
    load_predictions,
)
from .overlay import render_overlay, write_png
from .pipeline import (
    MODES,
    PROV_BOX,
    PipelineConfig,
    prediction_records,
    run_batch,
)
from .prompts import GridSpec
from .protocol import BackendUnavailable, ExternalBackend, parse_tcp_spec

log = logging.getLogger("promptplan")

RUN_DEFAULTS = {
    "mode": "hybrid",
    "backend": "oracle",
    "external_cmd": None,
    "external_tcp": None,
    "recall": 1.0,
    "seed": 0,
    "coarse": 8,
    "dense": 32,
    "sparse": 16,
    "nms_iou": 0.7,
    "high_conf": 0.88,
    "conf_floor": 0.25,
    "min_area": 16,
    "timeout": 30.0,
    "jobs": 0,  # 0 = available parallelism
}

_CONVERTERS = {
    "mode": str,
    "backend": str,
    "external_cmd": str,
    "external_tcp": str,
    "recall": float,
    "seed": int,
    "coarse": int,
    "dense": int,
    "sparse": int,
    "nms_iou": float,
    "high_conf": float,
    "conf_floor": float,
    "min_area": int,
    "timeout": float,
    "jobs": int,
}

CONFIG_FILE_HELP = (
    "flat key-value file, one `key = value` per line, `#` comments; keys are "
    "the long flag names (dashes or underscores), e.g. `nms-iou = 0.6`. "
    "Precedence: CLI flags > config file > defaults."
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # exit code 1 on usage errors (argparse defaults to 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self._fail(message))

    @staticmethod
    def _fail(message):
        print(f"error: {message}", file=sys.stderr)
        return 1


def _atomic_write(path: Path, data: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in RUN_DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CONVERTERS[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def _resolve_run_options(args) -> dict:
    options = dict(RUN_DEFAULTS)
    if args.config:
        options.update(_parse_config_file(args.config))
    for key in RUN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    if options["mode"] not in MODES:
        raise UsageError(f"--mode must be one of {', '.join(MODES)}")
    if options["backend"] not in ("oracle", "external"):
        raise UsageError("--backend must be oracle or external")
    if options["backend"] == "external" and not (options["external_cmd"] or options["external_tcp"]):
        raise UsageError("--backend external needs --external-cmd or --external-tcp")
    return options


def _pipeline_config(options: dict) -> PipelineConfig:
    return PipelineConfig(
        mode=options["mode"],
        coarse_grid=GridSpec(options["coarse"]),
        dense_grid=GridSpec(options["dense"]),
        sparse_grid=GridSpec(options["sparse"]),
        nms_iou_threshold=options["nms_iou"],
        high_conf_threshold=options["high_conf"],
        detection_conf_floor=options["conf_floor"],
        min_mask_area=options["min_area"],
    )


# --- synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = args.instances
    import numpy as np

    rng = np.random.default_rng(args.seed)
    files = []
    failures = 0
    for i in range(args.scenes):
        n_instances = int(rng.integers(lo, hi + 1))
        scene_seed = int(rng.integers(0, 2**31))
        image_id = f"scene_{i:04d}"
        name = f"{image_id}.json"
        try:
            scene = synth_scene(args.width, args.height, n_instances, scene_seed, image_id=image_id)
        except GenerationFailure as exc:
            log.error("scene %s failed: %s", image_id, exc)
            failures += 1
            continue
        save_scene(scene, out_dir / name)
        files.append(name)
    index = {
        "width": args.width,
        "height": args.height,
        "instances": [lo, hi],
        "seed": args.seed,
        "count": len(files),
        "files": files,
    }
    _atomic_write(out_dir / "index.json", json.dumps(index, sort_keys=True) + "\n")
    log.info("wrote %d scenes to %s", len(files), out_dir)
    return 2 if failures else 0


def _parse_instance_range(text: str) -> tuple[int, int]:
    parts = text.split(":")
    if len(parts) == 1:
        lo = hi = int(parts[0])
    elif len(parts) == 2:
        lo, hi = int(parts[0]), int(parts[1])
    else:
        raise argparse.ArgumentTypeError("expected N or LO:HI")
    if lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError(f"bad instance range {text!r}")
    return lo, hi


# --- run ---------------------------------------------------------------------

def cmd_run(args) -> int:
    options = _resolve_run_options(args)
    config = _pipeline_config(options)
    scenes = load_fixtures(args.fixtures)
    out_dir = Path(options_out(args))
    out_dir.mkdir(parents=True, exist_ok=True)

    factory = _backend_factory(options)
    jobs = options["jobs"] or os.cpu_count() or 1
    log.info("running %s over %d scenes (%d jobs)", options["mode"], len(scenes), jobs)
    try:
        results, skipped = run_batch(scenes, config, factory, jobs=jobs)
    except BackendUnavailable as exc:
        print(f"error: backend unavailable: {exc}", file=sys.stderr)
        return 2

    lines = []
    for run in results:
        for record in prediction_records(run):
            lines.append(json.dumps(record, sort_keys=True))
    _atomic_write(out_dir / "predictions.jsonl", "".join(line + "\n" for line in lines))

    stats_buf = io.StringIO()
    writer = csv.writer(stats_buf)
    writer.writerow(["image_id", "detector_calls", "segmenter_calls", "wall_time",
                     "masks", "box", "sparse", "round1", "round2"])
    for run in results:
        counts = run.collection.prompt_counts
        writer.writerow([
            run.image_id,
            run.stats.detector_calls,
            run.stats.segmenter_calls,
            f"{run.stats.wall_time:.6f}",
            len(run.collection),
            counts.get("box", 0),
            counts.get("sparse", 0),
            counts.get("round1", 0),
            counts.get("round2", 0),
        ])
    _atomic_write(out_dir / "stats.csv", stats_buf.getvalue())

    manifest = {
        "tool": "promptplan",
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "fixtures": str(Path(args.fixtures).resolve()),
        "out": str(out_dir.resolve()),
        "jobs": jobs,
        "backend": _backend_manifest(options),
        "config": {
            "mode": options["mode"],
            "coarse": options["coarse"],
            "dense": options["dense"],
            "sparse": options["sparse"],
            "nms_iou": options["nms_iou"],
            "high_conf": options["high_conf"],
            "conf_floor": options["conf_floor"],
            "min_area": options["min_area"],
        },
        "images_evaluated": len(results),
        "images_skipped": [{"image_id": s.image_id, "reason": s.reason} for s in skipped],
    }
    _atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    for s in skipped:
        log.warning("skipped %s: %s", s.image_id, s.reason)
    return 2 if skipped else 0


def options_out(args):
    if getattr(args, "out", None) is None:
        raise UsageError("--out is required")
    return args.out


def _backend_factory(options: dict):
    if options["backend"] == "oracle":
        detector = OracleDetector(recall=options["recall"], seed=options["seed"])
        segmenter = OracleSegmenter()
        return lambda: (detector, segmenter)

    def factory():
        if options["external_tcp"]:
            backend = ExternalBackend(
                tcp=parse_tcp_spec(options["external_tcp"]), timeout=options["timeout"]
            )
        else:
            backend = ExternalBackend(command=options["external_cmd"], timeout=options["timeout"])
        return backend, backend

    return factory


def _backend_manifest(options: dict) -> dict:
    if options["backend"] == "oracle":
        return {"kind": "oracle", "recall": options["recall"], "seed": options["seed"]}
    return {
        "kind": "external",
        "command": options["external_cmd"],
        "tcp": options["external_tcp"],
        "timeout": options["timeout"],
    }


# --- eval --------------------------------------------------------------------

def _read_stats_means(stats_path: Path) -> tuple[float, float, int]:
    if not stats_path.exists():
        return 0.0, 0.0, 0
    times, calls = [], []
    with open(stats_path) as handle:
        for row in csv.DictReader(handle):
            times.append(float(row["wall_time"]))
            calls.append(int(row["segmenter_calls"]))
    if not times:
        return 0.0, 0.0, 0
    return sum(times) / len(times), sum(calls) / len(calls), len(times)


def _evaluate(predictions_path: Path, fixtures_path: str, track: str) -> EvalReport:
    predictions = load_predictions(predictions_path)
    scenes = load_fixtures(fixtures_path)
    gts = {str(s.image_id): s for s in scenes}

    unknown = sorted(set(predictions) - set(gts))
    if unknown:
        raise UsageError(f"predictions reference image ids missing from fixtures: {unknown}")
    silent = sorted(set(gts) - set(predictions))
    if silent:
        log.warning("%d fixture images have no predictions (count as misses): %s",
                    len(silent), silent[:5])

    ap_summary = ApSummary(ap=None, ap_small=None, ap_medium=None, ap_large=None)
    ar = miou = None
    if track in ("detector", "both"):
        tagged = {
            image_id: [p for p in preds if p.category_id is not None]
            for image_id, preds in predictions.items()
        }
        if any(tagged.values()):
            ap_summary = eval_ap(tagged, gts)
        elif track == "detector":
            raise MissingCategory(
                "detector track requested but no prediction carries a category_id"
            )
    if track in ("class_agnostic", "both"):
        ar, miou = eval_class_agnostic(predictions, gts)

    seconds, calls, evaluated = _read_stats_means(predictions_path.parent / "stats.csv")
    manifest_path = predictions_path.parent / "manifest.json"
    skipped = 0
    if manifest_path.exists():
        skipped = len(json.loads(manifest_path.read_text()).get("images_skipped", []))
    return EvalReport(
        ap=ap_summary.ap,
        ap_small=ap_summary.ap_small,
        ap_medium=ap_summary.ap_medium,
        ap_large=ap_summary.ap_large,
        ar=ar,
        miou=miou,
        seconds_per_image=seconds,
        calls_per_image=calls,
        images_evaluated=evaluated or len(predictions),
        images_skipped=skipped,
    )


REPORT_COLUMNS = ["mode", "ar", "miou", "ap", "ap_small", "ap_medium", "ap_large",
                  "seconds_per_image", "calls_per_image"]


def _report_csv_row(mode: str, report: EvalReport) -> list[str]:
    def fmt(value, digits=6):
        return "" if value is None else f"{value:.{digits}f}"

    return [
        mode,
        fmt(report.ar),
        fmt(report.miou),
        fmt(report.ap),
        fmt(report.ap_small),
        fmt(report.ap_medium),
        fmt(report.ap_large),
        fmt(report.seconds_per_image),
        fmt(report.calls_per_image, 3),
    ]


def cmd_eval(args) -> int:
    predictions_path = Path(args.predictions)
    report = _evaluate(predictions_path, args.fixtures, args.track)
    out_dir = Path(args.out) if args.out else predictions_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "eval_report.json", json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")

    mode = "?"
    manifest_path = predictions_path.parent / "manifest.json"
    if manifest_path.exists():
        mode = json.loads(manifest_path.read_text())["config"]["mode"]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(REPORT_COLUMNS)
    writer.writerow(_report_csv_row(mode, report))
    _atomic_write(out_dir / "eval_report.csv", buf.getvalue())
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0


# --- report ------------------------------------------------------------------

def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for run_dir_name in args.run_dirs:
        run_dir = Path(run_dir_name)
        manifest_path = run_dir / "manifest.json"
        if not manifest_path.exists():
            raise UsageError(f"{run_dir} has no manifest.json (not a run directory?)")
        manifest = json.loads(manifest_path.read_text())
        mode = manifest["config"]["mode"]
        report_path = run_dir / "eval_report.json"
        if report_path.exists():
            report = EvalReport.from_json(json.loads(report_path.read_text()))
        else:
            report = _evaluate(run_dir / "predictions.jsonl", manifest["fixtures"], "both")
        rows.append(_report_csv_row(mode, report))
        if not args.no_overlays:
            _write_overlays(run_dir, manifest, out_dir / "overlays" / run_dir.name)

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(REPORT_COLUMNS)
    writer.writerows(rows)
    _atomic_write(out_dir / "comparison.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def _write_overlays(run_dir: Path, manifest: dict, overlay_dir: Path) -> None:
    overlay_dir.mkdir(parents=True, exist_ok=True)
    predictions = load_predictions(run_dir / "predictions.jsonl")
    scenes = {str(s.image_id): s for s in load_fixtures(manifest["fixtures"])}
    for image_id, preds in predictions.items():
        scene = scenes.get(image_id)
        if scene is None:
            continue
        masks = [(p.mask, p.provenance == PROV_BOX) for p in preds]
        rgb = render_overlay(scene.width, scene.height, masks)
        write_png(overlay_dir / f"{image_id}.png", rgb)


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="promptplan", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"promptplan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate synthetic scene fixtures")
    p_synth.add_argument("--scenes", type=int, default=10)
    p_synth.add_argument("--width", type=int, default=256)
    p_synth.add_argument("--height", type=int, default=256)
    p_synth.add_argument("--instances", type=_parse_instance_range, default=(5, 20),
                         metavar="LO:HI", help="instances per scene (default 5:20)")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run a pipeline mode over fixtures",
                           epilog=f"config file: {CONFIG_FILE_HELP}")
    p_run.add_argument("fixtures", help="scene fixture directory or file")
    p_run.add_argument("--mode", choices=MODES)
    p_run.add_argument("--backend", choices=["oracle", "external"])
    p_run.add_argument("--external-cmd", dest="external_cmd",
                       help="command line for a wire-protocol backend process")
    p_run.add_argument("--external-tcp", dest="external_tcp", metavar="HOST:PORT")
    p_run.add_argument("--recall", type=float, help="oracle detector recall")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--coarse", type=int, help="hierarchical round-1 points per side")
    p_run.add_argument("--dense", type=int, help="hierarchical round-2 points per side")
    p_run.add_argument("--sparse", type=int, help="hybrid uncovered-grid points per side")
    p_run.add_argument("--nms-iou", dest="nms_iou", type=float)
    p_run.add_argument("--high-conf", dest="high_conf", type=float)
    p_run.add_argument("--conf-floor", dest="conf_floor", type=float)
    p_run.add_argument("--min-area", dest="min_area", type=int)
    p_run.add_argument("--timeout", type=float, help="external request timeout (s)")
    p_run.add_argument("--jobs", type=int, help="worker threads (0 = all cores)")
    p_run.add_argument("--config", help=CONFIG_FILE_HELP)
    p_run.add_argument("--out", required=True)
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="evaluate a predictions file against fixtures")
    p_eval.add_argument("--predictions", required=True)
    p_eval.add_argument("--fixtures", required=True)
    p_eval.add_argument("--track", choices=["detector", "class_agnostic", "both"],
                        default="both")
    p_eval.add_argument("--out", help="output directory (default: next to predictions)")
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="comparison table + overlays for finished runs")
    p_report.add_argument("run_dirs", nargs="+")
    p_report.add_argument("--out", required=True)
    p_report.add_argument("--no-overlays", action="store_true")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("PROMPTPLAN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, MissingCategory, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, GenerationFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
