"""Reading and writing sequence documents, raw dataset exports and manifests.

The canonical document is JSON::

    {"format": "kinect_v2", "exercise_id": "...", "subject_id": "...",
     "label": "correct", "annotations": ["correct", "incorrect"],
     "timestamps": [...], "frames": [[[x, y, z], ...], ...]}

``custom`` documents also carry a ``graph`` object (see
:meth:`SkeletonGraph.to_dict`). Unknown fields are ignored.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import ParseError, SchemaError
from .sequence import MotionSequence, impute_missing
from .skeleton import BUILTIN_GRAPHS, FORMAT_IDS, SkeletonGraph, get_graph

KIMORE_FPS = 30.0


def _field(doc: dict, name: str, kind=None, required=True):
    if name not in doc or doc[name] is None:
        if required:
            raise ParseError(f"missing required field '{name}'")
        return None
    value = doc[name]
    if kind is not None and not isinstance(value, kind):
        raise ParseError(f"field '{name}' has type {type(value).__name__}")
    return value


def _numeric_array(value, name: str, ndim: int) -> np.ndarray:
    try:
        arr = np.array(
            [[[np.nan if v is None else v for v in joint] for joint in frame] for frame in value]
            if ndim == 3
            else [np.nan if v is None else v for v in value],
            dtype=np.float64,
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"field '{name}' is not a regular numeric array: {exc}") from exc
    if arr.ndim != ndim:
        raise ParseError(f"field '{name}' must be a {ndim}-level nested list, got {arr.ndim}")
    return arr


def sequence_from_dict(
    doc: dict[str, Any], format_hint: str | None = None, *, impute: bool = False
) -> MotionSequence:
    if not isinstance(doc, dict):
        raise ParseError("sequence document must be an object")
    fmt = doc.get("format", format_hint)
    if fmt is None:
        raise ParseError("missing required field 'format'")
    if fmt not in FORMAT_IDS:
        raise ParseError(f"field 'format' has unknown value {fmt!r}")
    if format_hint is not None and format_hint != fmt:
        raise SchemaError(f"document declares format {fmt!r} but {format_hint!r} was expected")
    if fmt == "custom":
        graph = SkeletonGraph.from_dict(_field(doc, "graph", dict))
    else:
        graph = get_graph(fmt)

    timestamps = _numeric_array(_field(doc, "timestamps", list), "timestamps", 1)
    frames = _numeric_array(_field(doc, "frames", list), "frames", 3)
    if frames.shape[1] != graph.joint_count:
        raise SchemaError(
            f"field 'frames' has {frames.shape[1]} joints; format {fmt!r} expects {graph.joint_count}"
        )
    if frames.shape[2] != graph.dimensionality:
        raise SchemaError(
            f"field 'frames' has {frames.shape[2]} coordinates per joint; "
            f"format {fmt!r} expects {graph.dimensionality}"
        )
    if impute and not np.all(np.isfinite(frames)):
        frames = impute_missing(frames, timestamps)

    label = _field(doc, "label", str, required=False)
    annotations = _field(doc, "annotations", list, required=False)
    return MotionSequence(
        frames=frames,
        timestamps=timestamps,
        graph=graph,
        exercise_id=str(doc.get("exercise_id", "")),
        subject_id=str(doc.get("subject_id", "")),
        label=label,
        annotations=None if annotations is None else tuple(annotations),
    )


def sequence_to_dict(seq: MotionSequence) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "format": seq.format_id,
        "exercise_id": seq.exercise_id,
        "subject_id": seq.subject_id,
    }
    if seq.label is not None:
        doc["label"] = seq.label
    if seq.annotations is not None:
        doc["annotations"] = list(seq.annotations)
    if seq.format_id == "custom":
        doc["graph"] = seq.graph.to_dict()
    doc["timestamps"] = seq.timestamps.tolist()
    doc["frames"] = seq.frames.tolist()
    return doc


def serialize_sequence(seq: MotionSequence) -> bytes:
    """Canonical JSON bytes; floats use shortest round-trip repr."""
    return json.dumps(sequence_to_dict(seq), separators=(",", ":")).encode("utf-8")


def parse_sequence_file(
    content: bytes | str,
    format_hint: str | None = None,
    *,
    impute: bool = False,
    exercise_id: str = "",
    subject_id: str = "",
    fps: float = KIMORE_FPS,
) -> MotionSequence:
    """Parse a canonical document or a recognized raw export.

    Detection: a JSON object is a canonical document, a JSON array is an
    OpenPose keypoint stream, anything else is a delimited table (KIMORE /
    Keraal style, see :func:`parse_joint_table`). ``format_hint`` is required
    for raw exports and checked against canonical documents.
    """
    text = content.decode("utf-8") if isinstance(content, (bytes, bytearray)) else content
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON document: {exc}") from exc
        return sequence_from_dict(doc, format_hint, impute=impute)
    if stripped.startswith("["):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON keypoint stream: {exc}") from exc
        return parse_openpose_frames(
            doc, impute=impute, exercise_id=exercise_id, subject_id=subject_id, fps=fps
        )
    if format_hint is None:
        raise ParseError("raw table exports need a format_hint")
    return parse_joint_table(
        text,
        get_graph(format_hint),
        impute=impute,
        exercise_id=exercise_id,
        subject_id=subject_id,
        fps=fps,
    )


def parse_joint_table(
    text: str,
    graph: SkeletonGraph,
    *,
    impute: bool = False,
    exercise_id: str = "",
    subject_id: str = "",
    fps: float = KIMORE_FPS,
) -> MotionSequence:
    """Parse one-frame-per-line joint tables.

    Accepted row layouts, with ``n = J * D`` (comma, semicolon or whitespace
    separated, blank trailing cells allowed):

    * ``n`` values: positions only, timestamps from ``fps``;
    * ``n + 1`` values: leading timestamp in seconds (Keraal-style);
    * ``J * (D + 1)`` values: per-joint position plus one extra channel
      (KIMORE tracking state / confidence), which is dropped.
    """
    j, d = graph.joint_count, graph.dimensionality
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cells = [c for c in line.replace(";", ",").replace(",", " ").split()]
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            if not rows:  # header line
                continue
            raise ParseError(f"line {lineno}: non-numeric cell in joint table") from None
    if not rows:
        raise ParseError("joint table contains no frames")
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise ParseError(f"joint table rows have inconsistent widths {sorted(width)}")
    (w,) = width
    arr = np.array(rows)
    if w == j * d:
        frames = arr.reshape(-1, j, d)
        ts = np.arange(len(arr)) / fps
    elif w == j * d + 1:
        ts = arr[:, 0]
        frames = arr[:, 1:].reshape(-1, j, d)
    elif w == j * (d + 1):
        frames = arr.reshape(-1, j, d + 1)[:, :, :d]
        ts = np.arange(len(arr)) / fps
    else:
        raise SchemaError(
            f"joint table rows have {w} values; format {graph.format_id!r} "
            f"expects {j * d}, {j * d + 1} or {j * (d + 1)}"
        )
    if impute:
        frames = impute_missing(frames, ts)
    return MotionSequence(frames, ts, graph, exercise_id=exercise_id, subject_id=subject_id)


def parse_openpose_frames(
    frames_json: list,
    *,
    impute: bool = False,
    exercise_id: str = "",
    subject_id: str = "",
    fps: float = KIMORE_FPS,
) -> MotionSequence:
    """Parse a list of OpenPose per-frame JSON outputs (BODY_25).

    Each element is either an OpenPose frame (``{"people": [{"pose_keypoints_2d":
    [...]}]}``) or the bare 75-value keypoint list. The first person is used;
    keypoints with zero confidence become missing values.
    """
    graph = get_graph("openpose")
    out = []
    for i, frame in enumerate(frames_json):
        if isinstance(frame, dict):
            people = frame.get("people") or []
            if not people:
                kp = [np.nan] * (3 * graph.joint_count)
            else:
                kp = people[0].get("pose_keypoints_2d")
                if kp is None:
                    raise ParseError(f"frame {i}: missing field 'pose_keypoints_2d'")
        else:
            kp = frame
        try:
            kp = np.asarray(kp, dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError(f"frame {i}: keypoints are not numeric") from None
        if kp.size != 3 * graph.joint_count:
            raise SchemaError(
                f"frame {i}: {kp.size // 3} keypoints, openpose expects {graph.joint_count}"
            )
        kp = kp.reshape(graph.joint_count, 3)
        xy = kp[:, :2].copy()
        xy[kp[:, 2] <= 0] = np.nan
        out.append(xy)
    if not out:
        raise ParseError("keypoint stream contains no frames")
    frames = np.stack(out)
    ts = np.arange(len(frames)) / fps
    if impute:
        frames = impute_missing(frames, ts)
    return MotionSequence(frames, ts, graph, exercise_id=exercise_id, subject_id=subject_id)


def read_sequence(path: str | os.PathLike, format_hint: str | None = None, **kwargs) -> MotionSequence:
    return parse_sequence_file(Path(path).read_bytes(), format_hint, **kwargs)


def write_sequence(seq: MotionSequence, path: str | os.PathLike) -> None:
    Path(path).write_bytes(serialize_sequence(seq))


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    split: str | None = None


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Read a dataset manifest.

    JSON list of paths or of ``{"path": ..., "split": ...}`` objects, or an
    object with a ``"sequences"`` key holding such a list. Relative paths are
    resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed manifest {path}: {exc}") from exc
    if isinstance(doc, dict):
        doc = doc.get("sequences")
    if not isinstance(doc, list):
        raise ParseError(f"manifest {path} must contain a list of sequences")
    entries = []
    for item in doc:
        if isinstance(item, str):
            p, split = item, None
        elif isinstance(item, dict) and "path" in item:
            p, split = item["path"], item.get("split")
        else:
            raise ParseError(f"manifest entry {item!r} has no 'path'")
        p = Path(p)
        entries.append(ManifestEntry(p if p.is_absolute() else path.parent / p, split))
    return entries


def write_manifest(path: str | os.PathLike, paths: Iterable[str | os.PathLike], splits=None) -> None:
    path = Path(path)
    items = []
    splits = list(splits) if splits is not None else None
    for i, p in enumerate(paths):
        p = Path(p)
        try:
            rel = p.relative_to(path.parent)
        except ValueError:
            rel = p
        item = {"path": rel.as_posix()}
        if splits is not None and splits[i] is not None:
            item["split"] = splits[i]
        items.append(item)
    path.write_text(json.dumps({"sequences": items}, indent=1) + "\n")


def load_dataset(manifest_path, format_hint: str | None = None, **kwargs) -> list[MotionSequence]:
    return [read_sequence(e.path, format_hint, **kwargs) for e in read_manifest(manifest_path)]


def write_dataset(sequences: Iterable[MotionSequence], out_dir, manifest_name: str = "manifest.json") -> Path:
    """Write each sequence as a canonical document plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, seq in enumerate(sequences):
        name = f"{i:05d}_{seq.exercise_id or 'ex'}_{seq.subject_id or 'subj'}.json"
        p = out_dir / name.replace("/", "_")
        write_sequence(seq, p)
        paths.append(p)
    manifest = out_dir / manifest_name
    write_manifest(manifest, paths)
    return manifest


__all__ = [
    "BUILTIN_GRAPHS",
    "ManifestEntry",
    "load_dataset",
    "parse_joint_table",
    "parse_openpose_frames",
    "parse_sequence_file",
    "read_manifest",
    "read_sequence",
    "sequence_from_dict",
    "sequence_to_dict",
    "serialize_sequence",
    "write_dataset",
    "write_manifest",
    "write_sequence",
]
