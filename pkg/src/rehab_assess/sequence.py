"""Motion sequences and the preprocessing shared by both assessors."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import DataError, PreprocessError, SchemaError
from .skeleton import SkeletonGraph

LABELS = ("correct", "incorrect")


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """A timed sequence of skeleton frames.

    ``frames`` has shape ``(T, J, D)``; ``timestamps`` are in seconds and
    strictly increasing. Arrays are copied and made read-only on construction.
    """

    frames: np.ndarray
    timestamps: np.ndarray
    graph: SkeletonGraph
    exercise_id: str = ""
    subject_id: str = ""
    label: str | None = None
    annotations: tuple | None = None

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        ts = np.array(self.timestamps, dtype=np.float64)
        frames.setflags(write=False)
        ts.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)
        if self.annotations is not None:
            object.__setattr__(self, "annotations", tuple(self.annotations))
        self._validate()

    def _validate(self) -> None:
        f, ts, g = self.frames, self.timestamps, self.graph
        if f.ndim != 3:
            raise SchemaError(f"frames must be T x J x D, got shape {f.shape}")
        t, j, d = f.shape
        if t < 2:
            raise SchemaError(f"a sequence needs at least 2 frames, got {t}")
        if j != g.joint_count:
            raise SchemaError(
                f"joint count {j} does not match format {g.format_id!r} ({g.joint_count} joints)"
            )
        if d != g.dimensionality:
            raise SchemaError(
                f"dimensionality {d} does not match format {g.format_id!r} ({g.dimensionality}D)"
            )
        if ts.shape != (t,):
            raise SchemaError(f"timestamps has shape {ts.shape}, expected ({t},)")
        if not np.all(np.isfinite(ts)):
            raise SchemaError("timestamps contain non-finite values")
        if np.any(np.diff(ts) <= 0):
            raise SchemaError("timestamps not strictly increasing")
        if not np.all(np.isfinite(f)):
            raise SchemaError("frames contain non-finite coordinates")
        if self.label is not None and self.label not in LABELS:
            raise DataError(f"label must be one of {LABELS}, got {self.label!r}")

    @property
    def format_id(self) -> str:
        return self.graph.format_id

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return (
            self.graph == other.graph
            and self.exercise_id == other.exercise_id
            and self.subject_id == other.subject_id
            and self.label == other.label
            and self.annotations == other.annotations
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    __hash__ = None

    def with_label(self, label: str | None) -> "MotionSequence":
        return replace(self, label=label)


@dataclass(frozen=True)
class PreprocessConfig:
    target_length: int = 100
    center_on_root: bool = True
    scale_normalize: bool = True

    def __post_init__(self):
        if int(self.target_length) < 2:
            raise PreprocessError(f"target_length must be >= 2, got {self.target_length}")


def impute_missing(frames: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
    """Linearly interpolate non-finite coordinates along time, per channel.

    Leading/trailing gaps take the nearest observed value. A channel with no
    finite sample at all cannot be imputed.
    """
    out = np.array(frames, dtype=np.float64)
    t = np.asarray(timestamps, dtype=np.float64)
    flat = out.reshape(out.shape[0], -1)
    for c in range(flat.shape[1]):
        col = flat[:, c]
        ok = np.isfinite(col)
        if ok.all():
            continue
        if not ok.any():
            j, d = divmod(c, out.shape[2])
            raise SchemaError(f"joint {j} coordinate {d} is missing in every frame")
        col[~ok] = np.interp(t[~ok], t[ok], col[ok])
    return flat.reshape(out.shape)


def _group_centroid(frames: np.ndarray, group: Sequence[int]) -> np.ndarray:
    return frames[:, list(group), :].mean(axis=1)


def torso_length(sequence: MotionSequence) -> float:
    """Mean (over frames) distance between the two torso joint groups."""
    lo, hi = sequence.graph.torso_groups()
    seg = _group_centroid(sequence.frames, hi) - _group_centroid(sequence.frames, lo)
    return float(np.linalg.norm(seg, axis=1).mean())


def resample(frames: np.ndarray, timestamps: np.ndarray, target_length: int) -> np.ndarray:
    """Linear interpolation onto ``target_length`` uniform time points."""
    t_new = np.linspace(timestamps[0], timestamps[-1], target_length)
    # searchsorted-based interpolation, vectorized over all channels
    idx = np.clip(np.searchsorted(timestamps, t_new, side="right") - 1, 0, len(timestamps) - 2)
    t0 = timestamps[idx]
    t1 = timestamps[idx + 1]
    w = ((t_new - t0) / (t1 - t0))[:, None, None]
    out = frames[idx] * (1.0 - w) + frames[idx + 1] * w
    # exact endpoints and exact hits avoid round-off in w
    exact = t_new == t0
    out[exact] = frames[idx[exact]]
    out[-1] = frames[-1]
    return out


def preprocess(sequence: MotionSequence, config: PreprocessConfig = PreprocessConfig()) -> MotionSequence:
    """Resample to a fixed length, center on the root joint, normalize scale.

    Timestamps of the result are uniform on [0, 1]. Scale normalization uses
    the torso length measured after resampling.
    """
    ts = sequence.timestamps
    frames = resample(sequence.frames, ts, config.target_length)
    if config.center_on_root:
        frames = frames - frames[:, sequence.graph.root_joint : sequence.graph.root_joint + 1, :]
    if config.scale_normalize:
        tmp = replace(sequence, frames=frames, timestamps=np.arange(config.target_length, dtype=float))
        length = torso_length(tmp)
        if not np.isfinite(length) or length <= 1e-12:
            raise PreprocessError(
                f"zero torso length in sequence {sequence.subject_id!r}; cannot scale"
            )
        frames = frames / length
    new_ts = np.linspace(0.0, 1.0, config.target_length)
    return replace(sequence, frames=frames, timestamps=new_ts)


def to_gmm_datapoints(sequence: MotionSequence) -> np.ndarray:
    """Rows ``[t, x_00, x_01, ..., x_(J-1)(D-1)]``, one per frame (joint-major)."""
    t = sequence.timestamps[:, None]
    x = sequence.frames.reshape(len(sequence), -1)
    return np.hstack([t, x])


def from_gmm_datapoints(points: np.ndarray, joint_count: int, dimensionality: int):
    """Inverse of :func:`to_gmm_datapoints`: returns ``(timestamps, frames)``."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 1 + joint_count * dimensionality:
        raise SchemaError(
            f"datapoints of shape {points.shape} do not match J={joint_count}, D={dimensionality}"
        )
    return points[:, 0].copy(), points[:, 1:].reshape(-1, joint_count, dimensionality)
