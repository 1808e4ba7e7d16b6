"""Skeleton topologies for the supported capture formats.

Three built-in layouts are provided: Kinect v2 (25 joints, 3D), OpenPose
BODY_25 (25 joints, 2D) and BlazePose (33 landmarks, 3D). Arbitrary layouts
can be described with ``format_id="custom"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import SchemaError

FORMAT_IDS = ("kinect_v2", "openpose", "blazepose", "custom")


@dataclass(frozen=True)
class SkeletonGraph:
    """Joint topology of one capture format.

    Attributes:
        format_id: one of ``FORMAT_IDS``.
        joint_names: ordered joint names; defines the joint index.
        dimensionality: 2 or 3 coordinates per joint.
        edges: unordered joint index pairs (bones), no self-loops.
        root_joint: joint subtracted when centering a sequence.
        torso: two joint groups whose centroids span the torso segment used
            for scale normalization. ``None`` falls back to the first bone
            attached to the root.
    """

    format_id: str
    joint_names: tuple[str, ...]
    dimensionality: int
    edges: tuple[tuple[int, int], ...]
    root_joint: int = 0
    torso: tuple[tuple[int, ...], tuple[int, ...]] | None = None
    _adjacency_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(
            self, "edges", tuple((int(a), int(b)) for a, b in self.edges)
        )
        if self.torso is not None:
            object.__setattr__(
                self, "torso", (tuple(self.torso[0]), tuple(self.torso[1]))
            )
        self.validate()

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def validate(self) -> None:
        if self.format_id not in FORMAT_IDS:
            raise SchemaError(f"unknown skeleton format {self.format_id!r}")
        n = self.joint_count
        if n < 1:
            raise SchemaError("joint_count must be positive")
        if self.dimensionality not in (2, 3):
            raise SchemaError(f"dimensionality must be 2 or 3, got {self.dimensionality}")
        if not 0 <= self.root_joint < n:
            raise SchemaError(f"root_joint {self.root_joint} out of range [0, {n})")
        seen = set()
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise SchemaError(f"edge ({a}, {b}) references a joint outside [0, {n})")
            if a == b:
                raise SchemaError(f"self-loop on joint {a} in edge list")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise SchemaError(f"duplicate edge {key}")
            seen.add(key)
        if not _is_connected(n, self.edges):
            raise SchemaError(f"skeleton {self.format_id!r} is not connected")
        if self.torso is not None:
            for group in self.torso:
                if not group or any(not 0 <= j < n for j in group):
                    raise SchemaError(f"invalid torso joint group {group}")

    def is_tree(self) -> bool:
        return len(self.edges) == self.joint_count - 1 and _is_connected(
            self.joint_count, self.edges
        )

    def torso_groups(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self.torso is not None:
            return self.torso
        for a, b in self.edges:
            if a == self.root_joint:
                return (a,), (b,)
            if b == self.root_joint:
                return (b,), (a,)
        raise SchemaError(f"skeleton {self.format_id!r} has no torso segment")

    def normalized_adjacency(self) -> np.ndarray:
        """Cached :func:`build_normalized_adjacency` (returns a copy)."""
        if "A" not in self._adjacency_cache:
            self._adjacency_cache["A"] = build_normalized_adjacency(self)
        return self._adjacency_cache["A"].copy()

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_id": self.format_id,
            "joint_names": list(self.joint_names),
            "dimensionality": self.dimensionality,
            "edges": [list(e) for e in self.edges],
            "root_joint": self.root_joint,
            "torso": None if self.torso is None else [list(g) for g in self.torso],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SkeletonGraph":
        try:
            torso = d.get("torso")
            return cls(
                format_id=d["format_id"],
                joint_names=tuple(d["joint_names"]),
                dimensionality=int(d["dimensionality"]),
                edges=tuple(tuple(e) for e in d["edges"]),
                root_joint=int(d.get("root_joint", 0)),
                torso=None if torso is None else (tuple(torso[0]), tuple(torso[1])),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise SchemaError(f"invalid skeleton graph description: {exc}") from exc


def _is_connected(n: int, edges) -> bool:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        parent[find(a)] = find(b)
    return len({find(i) for i in range(n)}) == 1


def build_normalized_adjacency(graph: SkeletonGraph) -> np.ndarray:
    """Symmetrically renormalized adjacency ``D^-1/2 (A + I) D^-1/2``.

    ``D`` is the degree matrix of ``A + I``, so every node has degree >= 1 and
    the result is symmetric with entries in [0, 1].
    """
    n = graph.joint_count
    a = np.eye(n)
    for i, j in graph.edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    deg = a.sum(axis=1)
    # one rounding per entry: a_ij / sqrt(d_i d_j)
    return a / np.sqrt(np.outer(deg, deg))


KINECT_V2_JOINTS = (
    "SpineBase", "SpineMid", "Neck", "Head",
    "ShoulderLeft", "ElbowLeft", "WristLeft", "HandLeft",
    "ShoulderRight", "ElbowRight", "WristRight", "HandRight",
    "HipLeft", "KneeLeft", "AnkleLeft", "FootLeft",
    "HipRight", "KneeRight", "AnkleRight", "FootRight",
    "SpineShoulder", "HandTipLeft", "ThumbLeft", "HandTipRight", "ThumbRight",
)
KINECT_V2_EDGES = (
    (0, 1), (1, 20), (20, 2), (2, 3),
    (20, 4), (4, 5), (5, 6), (6, 7), (7, 21), (6, 22),
    (20, 8), (8, 9), (9, 10), (10, 11), (11, 23), (10, 24),
    (0, 12), (12, 13), (13, 14), (14, 15),
    (0, 16), (16, 17), (17, 18), (18, 19),
)

OPENPOSE_BODY25_JOINTS = (
    "Nose", "Neck", "RShoulder", "RElbow", "RWrist",
    "LShoulder", "LElbow", "LWrist", "MidHip",
    "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
    "REye", "LEye", "REar", "LEar",
    "LBigToe", "LSmallToe", "LHeel", "RBigToe", "RSmallToe", "RHeel",
)
OPENPOSE_BODY25_EDGES = (
    (1, 8), (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (8, 9), (9, 10), (10, 11), (8, 12), (12, 13), (13, 14),
    (1, 0), (0, 15), (15, 17), (0, 16), (16, 18),
    (14, 19), (19, 20), (14, 21), (11, 22), (22, 23), (11, 24),
)

BLAZEPOSE_JOINTS = (
    "nose", "left_eye_inner", "left_eye", "left_eye_outer",
    "right_eye_inner", "right_eye", "right_eye_outer",
    "left_ear", "right_ear", "mouth_left", "mouth_right",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_pinky", "right_pinky",
    "left_index", "right_index", "left_thumb", "right_thumb",
    "left_hip", "right_hip", "left_knee", "right_knee",
    "left_ankle", "right_ankle", "left_heel", "right_heel",
    "left_foot_index", "right_foot_index",
)
# MediaPipe's connection list pruned to a spanning tree: the face hangs off
# the nose, the nose off the left shoulder; hand and foot loops are opened.
BLAZEPOSE_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 7), (0, 4), (4, 5), (5, 6), (6, 8),
    (0, 9), (0, 10), (0, 11), (11, 12),
    (11, 13), (13, 15), (15, 17), (15, 19), (15, 21),
    (12, 14), (14, 16), (16, 18), (16, 20), (16, 22),
    (11, 23), (12, 24),
    (23, 25), (25, 27), (27, 29), (29, 31),
    (24, 26), (26, 28), (28, 30), (30, 32),
)

KINECT_V2 = SkeletonGraph(
    "kinect_v2", KINECT_V2_JOINTS, 3, KINECT_V2_EDGES, root_joint=0, torso=((0,), (20,))
)
OPENPOSE = SkeletonGraph(
    "openpose", OPENPOSE_BODY25_JOINTS, 2, OPENPOSE_BODY25_EDGES, root_joint=8, torso=((8,), (1,))
)
BLAZEPOSE = SkeletonGraph(
    "blazepose", BLAZEPOSE_JOINTS, 3, BLAZEPOSE_EDGES, root_joint=23, torso=((23, 24), (11, 12))
)

BUILTIN_GRAPHS = {g.format_id: g for g in (KINECT_V2, OPENPOSE, BLAZEPOSE)}


def get_graph(format_id: str) -> SkeletonGraph:
    try:
        return BUILTIN_GRAPHS[format_id]
    except KeyError:
        if format_id == "custom":
            raise SchemaError("custom format requires an explicit graph description") from None
        raise SchemaError(f"unknown skeleton format {format_id!r}") from None


def chain_graph(n_joints: int, dimensionality: int = 3) -> SkeletonGraph:
    """A simple path skeleton ``0 - 1 - ... - n-1`` (custom format)."""
    return SkeletonGraph(
        "custom",
        tuple(f"j{i}" for i in range(n_joints)),
        dimensionality,
        tuple((i, i + 1) for i in range(n_joints - 1)),
        root_joint=0,
    )
