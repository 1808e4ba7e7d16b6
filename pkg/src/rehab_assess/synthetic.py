"""Labeled synthetic exercise executions for tests and benchmarks.

A correct execution is one period of a smooth sinusoidal motion around a
rest pose; every joint moves along its own direction with its own phase.
Executions differ by small smooth jitter (amplitude, phase, rest pose).
Incorrect executions rescale the motion of the affected joints and add
white noise to them.
"""
from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import write_dataset
from .sequence import MotionSequence
from .skeleton import KINECT_V2, SkeletonGraph, get_graph

# right arm of the Kinect v2 skeleton
DEFAULT_AFFECTED_JOINTS = (8, 9, 10, 11, 23, 24)


@dataclass(frozen=True)
class Perturbation:
    amplitude_scale: float = 0.5
    noise_std: float = 0.02
    affected_joints: tuple[int, ...] = DEFAULT_AFFECTED_JOINTS


def default_perturbation(graph: SkeletonGraph) -> Perturbation:
    """Right arm for Kinect v2, otherwise the highest-indexed third of the joints."""
    if graph.format_id == "kinect_v2":
        return Perturbation()
    n = graph.joint_count
    return Perturbation(affected_joints=tuple(range(n - max(1, n // 3), n)))


@dataclass(frozen=True)
class SyntheticSpec:
    graph: SkeletonGraph = KINECT_V2
    duration_frames: int = 60
    motion_amplitude: float = 0.25
    incorrect_perturbation: Perturbation | None = None  # None: default_perturbation(graph)
    seed: int = 0
    fps: float = 30.0
    bone_length: float = 0.2
    amplitude_jitter: float = 0.1
    phase_jitter: float = 0.3
    pose_jitter: float = 0.01

    def __post_init__(self):
        if self.incorrect_perturbation is None:
            object.__setattr__(self, "incorrect_perturbation", default_perturbation(self.graph))
        if self.duration_frames < 2:
            raise ValueError("duration_frames must be >= 2")
        if not self.motion_amplitude > 0:
            raise ValueError("motion_amplitude must be positive")
        p = self.incorrect_perturbation
        bad = [j for j in p.affected_joints if not 0 <= j < self.graph.joint_count]
        if bad:
            raise ValueError(f"affected joints {bad} are outside the skeleton")
        if p.amplitude_scale == 1 and p.noise_std <= 0:
            warnings.warn(
                "incorrect perturbation is degenerate: incorrect executions equal correct ones",
                stacklevel=2,
            )

    @property
    def period_frames(self) -> float:
        return float(self.duration_frames)


def _stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def _exercise_key(exercise_id: str) -> int:
    return zlib.crc32(exercise_id.encode("utf-8"))


def _rest_pose(graph: SkeletonGraph, rng: np.random.Generator, bone_length: float) -> np.ndarray:
    d = graph.dimensionality
    pose = np.zeros((graph.joint_count, d))
    neighbours = {i: [] for i in range(graph.joint_count)}
    for a, b in graph.edges:
        neighbours[a].append(b)
        neighbours[b].append(a)
    seen = {graph.root_joint}
    frontier = [graph.root_joint]
    while frontier:
        nxt = []
        for j in frontier:
            for c in neighbours[j]:
                if c not in seen:
                    v = rng.normal(size=d)
                    pose[c] = pose[j] + bone_length * v / np.linalg.norm(v)
                    seen.add(c)
                    nxt.append(c)
        frontier = nxt
    return pose


@dataclass(frozen=True)
class _BaseMotion:
    rest: np.ndarray        # (J, D)
    directions: np.ndarray  # (J, D), norms in [0.3, 1]
    phases: np.ndarray      # (J,)


def base_motion(spec: SyntheticSpec, exercise_id: str) -> _BaseMotion:
    rng = _stream(spec.seed, _exercise_key(exercise_id))
    g = spec.graph
    rest = _rest_pose(g, rng, spec.bone_length)
    v = rng.normal(size=(g.joint_count, g.dimensionality))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    directions = v * rng.uniform(0.3, 1.0, size=(g.joint_count, 1))
    phases = rng.uniform(0.0, 2 * np.pi, size=g.joint_count)
    return _BaseMotion(rest, directions, phases)


def generate_sequence(
    spec: SyntheticSpec, label: str, index: int = 0, exercise_id: str = "ex0"
) -> MotionSequence:
    """One execution; deterministic in ``(spec.seed, exercise_id, index, label)``.

    The smooth jitter depends on ``index`` only, so with a degenerate
    perturbation the correct and incorrect executions of an index coincide.
    """
    if label not in ("correct", "incorrect"):
        raise ValueError(f"label must be 'correct' or 'incorrect', got {label!r}")
    base = base_motion(spec, exercise_id)
    g = spec.graph
    key = _exercise_key(exercise_id)
    rng = _stream(spec.seed, key, index)
    amp = spec.motion_amplitude * rng.uniform(1.0 - spec.amplitude_jitter, 1.0)
    shift = rng.uniform(-spec.phase_jitter, spec.phase_jitter)
    rest = base.rest + rng.normal(scale=spec.pose_jitter, size=base.rest.shape)

    n = np.arange(spec.duration_frames, dtype=np.float64)
    angle = 2 * np.pi * n[:, None] / spec.period_frames + base.phases[None, :] + shift  # (T, J)
    motion = amp * np.sin(angle)[:, :, None] * base.directions[None, :, :]  # (T, J, D)

    if label == "incorrect":
        p = spec.incorrect_perturbation
        joints = list(p.affected_joints)
        motion[:, joints, :] *= p.amplitude_scale
        if p.noise_std > 0:
            noise_rng = _stream(spec.seed, key, index, 1)
            motion[:, joints, :] += noise_rng.normal(scale=p.noise_std, size=motion[:, joints, :].shape)

    frames = rest[None, :, :] + motion
    return MotionSequence(
        frames=frames,
        timestamps=n / spec.fps,
        graph=g,
        exercise_id=exercise_id,
        subject_id=f"synth{index:04d}",
        label=label,
    )


def _annotate(label: str, rng: np.random.Generator, annotators: int, flip: float) -> tuple[str, ...]:
    other = "incorrect" if label == "correct" else "correct"
    return tuple(other if rng.random() < flip else label for _ in range(annotators))


def generate_dataset(
    spec: SyntheticSpec,
    n_correct: int,
    n_incorrect: int,
    exercises=("ex0",),
    *,
    annotators: int = 0,
    annotator_flip: float = 0.1,
    out_dir: str | Path | None = None,
) -> list[MotionSequence]:
    """Correct then incorrect executions for every exercise.

    With ``annotators > 0`` each sequence also carries simulated per-annotator
    labels, each flipped independently with probability ``annotator_flip``.
    With ``out_dir`` the sequences are also written as canonical documents
    with a ``manifest.json``.
    """
    if n_correct < 0 or n_incorrect < 0:
        raise ValueError("counts must be non-negative")
    data = []
    for ex in exercises:
        labels = ["correct"] * n_correct + ["incorrect"] * n_incorrect
        for i, label in enumerate(labels):
            seq = generate_sequence(spec, label, i, ex)
            if annotators:
                rng = _stream(spec.seed, _exercise_key(ex), i, 2)
                seq = MotionSequence(
                    seq.frames, seq.timestamps, seq.graph, seq.exercise_id,
                    seq.subject_id, seq.label, _annotate(label, rng, annotators, annotator_flip),
                )
            data.append(seq)
    if out_dir is not None:
        write_dataset(data, out_dir)
    return data


def spec_to_dict(spec: SyntheticSpec) -> dict:
    d = {f: getattr(spec, f) for f in SyntheticSpec.__dataclass_fields__ if f not in ("graph", "incorrect_perturbation")}
    p = spec.incorrect_perturbation
    d["format"] = spec.graph.format_id
    if spec.graph.format_id == "custom":
        d["graph"] = spec.graph.to_dict()
    d["incorrect_perturbation"] = {
        "amplitude_scale": p.amplitude_scale,
        "noise_std": p.noise_std,
        "affected_joints": list(p.affected_joints),
    }
    return d


def spec_from_dict(d: dict) -> SyntheticSpec:
    d = dict(d)
    fmt = d.pop("format", "kinect_v2")
    graph_doc = d.pop("graph", None)
    graph = SkeletonGraph.from_dict(graph_doc) if graph_doc is not None else get_graph(fmt)
    p = d.pop("incorrect_perturbation", None)
    if p is not None:
        p = dict(p)
        if "affected_joints" in p:
            p["affected_joints"] = tuple(int(j) for j in p["affected_joints"])
        d["incorrect_perturbation"] = Perturbation(**p)
    return SyntheticSpec(graph=graph, **d)
