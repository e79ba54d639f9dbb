"""Command line: ``simulate``, ``run`` and ``eval``.

Exit codes: 0 success, 2 tracking lost, 3 input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .errors import PLSlamError
from .evaluation import (
    DEFAULT_LENGTHS, TrajectorySeries, metrics_report, read_tum, write_metrics, write_tum,
)
from .pipeline import (
    MODES, PipelineConfig, event_summary, load_key_values, run_pipeline, write_similarity_csv,
)
from .simulator import SimSpec, simulate
from .tracks import ingest_tracks, read_header, write_tracks

log = logging.getLogger("plslam")

EXIT_OK, EXIT_TRACKING_LOST, EXIT_INPUT = 0, 2, 3


class InputError(Exception):
    pass


def _load_spec(path: Optional[str], seed: Optional[int] = None) -> SimSpec:
    values = load_key_values(path) if path else {}
    if seed is not None:
        values["seed"] = str(seed)
    try:
        return SimSpec.from_mapping(values)
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"bad simulation spec: {exc}") from None


def _gt_series(poses, frames) -> TrajectorySeries:
    return TrajectorySeries.from_world_to_camera([f.stamp for f in frames], poses)


def _lengths(text: str) -> tuple:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise InputError(f"bad lengths {text!r}") from None
    if not vals or min(vals) <= 0:
        raise InputError("lengths must be positive")
    return vals


def cmd_simulate(args) -> int:
    spec = _load_spec(args.spec, args.seed)
    poses, frames, _ = simulate(spec)
    write_tracks(args.out, frames, spec.camera)
    if args.gt:
        write_tum(_gt_series(poses, frames), args.gt)
    log.info("simulated %d frames", len(frames))
    return EXIT_OK


def _config(args) -> PipelineConfig:
    values = load_key_values(args.config) if args.config else {}
    if args.mode:
        values["mode"] = args.mode
    if args.deterministic:
        values["deterministic"] = "true"
    try:
        return PipelineConfig.from_mapping(values)
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"bad config: {exc}") from None


def cmd_run(args) -> int:
    cfg = _config(args)
    gt = None
    if args.sim:
        spec = _load_spec(args.sim)
        poses, frames, _ = simulate(spec)
        camera = spec.camera
        gt = _gt_series(poses, frames)
    else:
        camera = read_header(args.tracks)
        if camera is None:
            raise InputError("track file has no camera header")
        frames = list(ingest_tracks(args.tracks, camera))
    if args.gt:
        gt = read_tum(args.gt)
    stamps = {f.index: f.stamp for f in frames}
    report = run_pipeline(cfg, frames, camera)

    est = report.keyframe_series(stamps)
    if args.traj:
        write_tum(est, args.traj)
    if args.map:
        report.wmap.save(args.map)
    if args.sim_matrix and report.database is not None:
        write_similarity_csv(report.database, args.sim_matrix, cfg.use_points, cfg.use_lines)
    metrics = {"run": event_summary(report), "mode": cfg.mode, "events": report.events}
    if gt is not None and not report.failed and len(est) >= 2:
        metrics["trajectory"] = metrics_report(gt, est)
    if args.metrics:
        write_metrics(metrics, args.metrics)
    if report.failed:
        log.error("tracking lost: %s", report.error)
        return EXIT_TRACKING_LOST
    log.info("%d keyframes, %d loops closed", len(report.wmap.keyframes), len(report.loops))
    return EXIT_OK


def cmd_eval(args) -> int:
    lengths = _lengths(args.lengths)
    metrics = metrics_report(read_tum(args.gt), read_tum(args.est), lengths)
    if args.out:
        write_metrics(metrics, args.out)
    else:
        print(json.dumps(metrics, indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plslam", description="Stereo point and line SLAM back-end")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic sequence to a track file")
    s.add_argument("--spec", help="key=value simulation spec")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output JSONL tracks")
    s.add_argument("--gt", help="output ground-truth trajectory (TUM)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run the SLAM pipeline")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--tracks", help="JSONL track file")
    src.add_argument("--sim", help="key=value simulation spec")
    r.add_argument("--config", help="key=value pipeline config")
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--gt", help="ground truth (TUM) for metrics")
    r.add_argument("--traj", help="output keyframe trajectory (TUM)")
    r.add_argument("--map", help="output map (JSON)")
    r.add_argument("--metrics", help="output metrics and events (JSON)")
    r.add_argument("--sim-matrix", dest="sim_matrix", help="output keyframe similarity matrix (CSV)")
    r.add_argument("--deterministic", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="compare an estimate against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--est", required=True)
    e.add_argument("--lengths", default=",".join(f"{x:g}" for x in DEFAULT_LENGTHS))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, PLSlamError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
