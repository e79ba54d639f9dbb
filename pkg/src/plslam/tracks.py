"""JSONL feature tracks: one frame per line, optional camera header first.

Frame record::

    {"frame": 3, "t": 0.3,
     "points": [{"u": .., "v": .., "d": .., "desc": "<64 hex>", "id": 17}],
     "lines":  [{"px": .., "py": .., "qx": .., "qy": .., "dp": .., "dq": .., "desc": "..", "id": 4}]}

``t`` and ``id`` are optional. Depth inputs replace ``d`` with ``z`` and
``dp``/``dq`` with ``zp``/``zq``; they are converted to disparity with the
header camera. Header record: ``{"camera": {"fx": .., ..., "baseline": ..}}``.
"""

from __future__ import annotations

import json
from typing import Iterable, Iterator, Optional

from .camera import StereoCamera, depth_to_disparity
from .errors import NonPositiveDepth, SchemaError
from .features import Frame, LineObservation, PointObservation, descriptor_from_hex, descriptor_to_hex


def _point_record(o: PointObservation) -> dict:
    rec = {"u": o.uL, "v": o.vL, "d": o.disparity, "desc": descriptor_to_hex(o.descriptor)}
    if o.landmark_hint is not None:
        rec["id"] = int(o.landmark_hint)
    return rec


def _line_record(o: LineObservation) -> dict:
    rec = {"px": float(o.p[0]), "py": float(o.p[1]), "qx": float(o.q[0]), "qy": float(o.q[1]),
           "dp": o.disp_p, "dq": o.disp_q, "desc": descriptor_to_hex(o.descriptor)}
    if o.landmark_hint is not None:
        rec["id"] = int(o.landmark_hint)
    return rec


def frame_record(frame: Frame) -> dict:
    rec: dict = {"frame": frame.index}
    if frame.timestamp is not None:
        rec["t"] = frame.timestamp
    rec["points"] = [_point_record(o) for o in frame.points]
    rec["lines"] = [_line_record(o) for o in frame.lines]
    return rec


def dump_tracks(frames: Iterable[Frame], camera: Optional[StereoCamera] = None) -> str:
    rows = []
    if camera is not None:
        rows.append(json.dumps({"camera": camera.to_dict()}))
    rows.extend(json.dumps(frame_record(f)) for f in frames)
    return "\n".join(rows) + "\n"


def write_tracks(path, frames: Iterable[Frame], camera: Optional[StereoCamera] = None) -> None:
    with open(path, "w") as fh:
        fh.write(dump_tracks(frames, camera))


def _num(rec: dict, key: str, line: int) -> float:
    try:
        v = rec[key]
    except KeyError:
        raise SchemaError(f"missing field {key!r}", line) from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"field {key!r} must be a number", line)
    return float(v)


def _desc(rec: dict, line: int):
    try:
        return descriptor_from_hex(rec["desc"])
    except KeyError:
        raise SchemaError("missing field 'desc'", line) from None
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"bad descriptor: {exc}", line) from None


def _hint(rec: dict, line: int):
    v = rec.get("id")
    if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
        raise SchemaError("field 'id' must be an integer", line)
    return v


def _disparity(rec: dict, dkey: str, zkey: str, camera, line: int) -> float:
    if dkey in rec:
        return _num(rec, dkey, line)
    if zkey in rec:
        if camera is None:
            raise SchemaError(f"depth field {zkey!r} needs a camera header", line)
        try:
            return depth_to_disparity(_num(rec, zkey, line), camera.baseline, camera.fx)
        except NonPositiveDepth as exc:
            raise SchemaError(str(exc), line) from None
    raise SchemaError(f"missing field {dkey!r}", line)


def parse_frame(rec, line: int, camera: Optional[StereoCamera] = None) -> Frame:
    if not isinstance(rec, dict):
        raise SchemaError("record must be an object", line)
    idx = rec.get("frame")
    if isinstance(idx, bool) or not isinstance(idx, int):
        raise SchemaError("field 'frame' must be an integer", line)
    pts_raw, lns_raw = rec.get("points", []), rec.get("lines", [])
    if not isinstance(pts_raw, list) or not isinstance(lns_raw, list):
        raise SchemaError("'points' and 'lines' must be lists", line)
    points = []
    for p in pts_raw:
        if not isinstance(p, dict):
            raise SchemaError("point entries must be objects", line)
        points.append(PointObservation(_num(p, "u", line), _num(p, "v", line),
                                       _disparity(p, "d", "z", camera, line), _desc(p, line), _hint(p, line)))
    lines = []
    for s in lns_raw:
        if not isinstance(s, dict):
            raise SchemaError("line entries must be objects", line)
        lines.append(LineObservation(
            (_num(s, "px", line), _num(s, "py", line)), (_num(s, "qx", line), _num(s, "qy", line)),
            _disparity(s, "dp", "zp", camera, line), _disparity(s, "dq", "zq", camera, line),
            _desc(s, line), _hint(s, line)))
    t = rec.get("t")
    if t is not None:
        t = _num(rec, "t", line)
    return Frame(idx, points, lines, t)


def _camera(rec: dict, line: int) -> StereoCamera:
    c = rec["camera"]
    if not isinstance(c, dict):
        raise SchemaError("'camera' must be an object", line)
    try:
        return StereoCamera(**c)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad camera: {exc}", line) from None


def ingest_tracks(path, camera: Optional[StereoCamera] = None) -> Iterator[Frame]:
    """Stream frames from a JSONL track file.

    A ``camera`` header in the file overrides the argument. Frame indices must
    increase strictly.
    """
    last = None
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", n) from None
            if isinstance(rec, dict) and "camera" in rec and "frame" not in rec:
                camera = _camera(rec, n)
                continue
            frame = parse_frame(rec, n, camera)
            if last is not None and frame.index <= last:
                raise SchemaError(f"frame index {frame.index} does not increase", n)
            last = frame.index
            yield frame


def read_header(path) -> Optional[StereoCamera]:
    """Camera from the header record, if the first record is one."""
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", n) from None
            if isinstance(rec, dict) and "camera" in rec and "frame" not in rec:
                return _camera(rec, n)
            return None
    return None
