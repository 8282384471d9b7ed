"""Data types, file formats, snippet arithmetic, and dataset splitting.

A dataset lives in one directory: a ``manifest.json``, and per sample a
binary feature file for the clip features, two more for the per-clip
actor features and positions (same container format), an annotation
JSON, and an optional generator sidecar with the latent quality values.
Everything round-trips bit-exactly so reruns can be compared byte for
byte.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import ACTION_LEXICON, validate_labels

__all__ = [
    "FeatureFileError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedPayloadError",
    "save_features",
    "load_features",
    "ActorFrame",
    "FormationLabel",
    "SyntheticInfo",
    "VideoSample",
    "DatasetManifest",
    "is_convex",
    "split_into_snippets",
    "seeded_rng",
    "make_split",
    "save_dataset",
    "load_dataset",
    "labels_to_actions",
    "actions_to_labels",
]

FEATURE_MAGIC = b"LOGF"
FEATURE_VERSION = 1


class FeatureFileError(ValueError):
    """Base error for the binary feature container."""

    code = "feature_file"


class BadMagicError(FeatureFileError):
    code = "bad_magic"


class VersionMismatchError(FeatureFileError):
    code = "version_mismatch"


class TruncatedPayloadError(FeatureFileError):
    code = "truncated"


def save_features(matrix: np.ndarray, path) -> None:
    """Write a rows x cols float64 matrix to the LOGF container."""
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, rows, cols))
        fh.write(matrix.astype("<f8").tobytes(order="C"))


def load_features(path) -> np.ndarray:
    """Read a LOGF container back into a float64 matrix (bit-exact)."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a feature file (bad magic)")
    version, rows, cols = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise VersionMismatchError(
            f"{path}: unsupported feature file version {version}")
    expected = rows * cols * 8
    payload = blob[16:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise FeatureFileError(f"{path}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

def is_convex(vertices) -> bool:
    """Strict convexity of an ordered polygon via cross-product signs."""
    pts = np.asarray(vertices, dtype=np.float64)
    n = len(pts)
    if n < 3:
        return False
    sign = 0.0
    for i in range(n):
        a, b, c = pts[i], pts[(i + 1) % n], pts[(i + 2) % n]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross == 0.0:
            return False
        if sign == 0.0:
            sign = math.copysign(1.0, cross)
        elif math.copysign(1.0, cross) != sign:
            return False
    return True


@dataclass
class ActorFrame:
    """Per-actor appearance features and normalized image positions
    for the middle frame of one clip."""

    features: np.ndarray   # N x d
    positions: np.ndarray  # N x 2, inside the unit square

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("actor features must be an N x d matrix with N >= 1")
        if self.positions.shape != (self.features.shape[0], 2):
            raise ValueError("positions must be N x 2, aligned with features")
        if np.any(self.positions < 0.0) or np.any(self.positions > 1.0):
            raise ValueError("positions must lie in the unit square")

    @property
    def actor_count(self) -> int:
        return self.features.shape[0]


@dataclass
class FormationLabel:
    """Convex formation polygon: its ordered vertices and, per actor,
    whether that actor stands at a polygon vertex."""

    vertices: list
    vertex_flags: list

    def __post_init__(self):
        self.vertices = [(float(x), float(y)) for x, y in self.vertices]
        self.vertex_flags = [bool(f) for f in self.vertex_flags]
        n_vertices = len(self.vertices)
        if not (3 <= n_vertices <= len(self.vertex_flags)):
            raise ValueError(
                f"need 3 <= vertex count <= actor count, got {n_vertices}"
                f" vertices for {len(self.vertex_flags)} actors")
        if sum(self.vertex_flags) != n_vertices:
            raise ValueError("vertex_flags must mark exactly the polygon vertices")
        for x, y in self.vertices:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError("formation vertices must lie in the unit square")
        if not is_convex(self.vertices):
            raise ValueError("formation vertices must form a convex polygon")


@dataclass
class SyntheticInfo:
    """Generator sidecar: which clips carry score signal and how much."""

    element_mask: list
    quality: list
    oracle_score: float


@dataclass
class VideoSample:
    """One video reduced to per-clip features plus annotations."""

    id: str
    clip_features: np.ndarray            # T x d_v
    actor_frames: list                   # T ActorFrame records
    score: float
    action_labels: list | None = None    # per-frame labels over the lexicon
    formation_labels: dict = field(default_factory=dict)  # clip index -> FormationLabel
    synthetic: SyntheticInfo | None = None

    def __post_init__(self):
        self.clip_features = np.ascontiguousarray(self.clip_features, dtype=np.float64)
        if self.clip_features.ndim != 2:
            raise ValueError("clip features must be a T x d matrix")
        if len(self.actor_frames) != self.clip_features.shape[0]:
            raise ValueError("need one actor frame per clip")
        counts = {frame.actor_count for frame in self.actor_frames}
        if len(counts) > 1:
            raise ValueError("actor count must be constant within a sample")
        if self.action_labels is not None:
            self.action_labels = validate_labels(self.action_labels)
        for clip in self.formation_labels:
            if not (0 <= clip < self.clip_count):
                raise ValueError(f"formation label for out-of-range clip {clip}")

    @property
    def clip_count(self) -> int:
        return self.clip_features.shape[0]

    @property
    def actor_count(self) -> int:
        return self.actor_frames[0].actor_count


@dataclass
class DatasetManifest:
    """Dataset-level bookkeeping: ids, score range, split, and shapes."""

    sample_ids: list
    score_min: float
    score_max: float
    split: dict                   # id -> "train" | "test"
    feature_dim: int
    clip_count: int
    actor_count: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.score_max <= self.score_min:
            raise ValueError("score_max must exceed score_min")
        if set(self.split) != set(self.sample_ids):
            raise ValueError("split must assign every sample id")
        bad = {v for v in self.split.values()} - {"train", "test"}
        if bad:
            raise ValueError(f"unknown split assignment(s): {sorted(bad)}")

    def ids_for(self, split: str) -> list:
        return [s for s in self.sample_ids if self.split[s] == split]

    def normalize_score(self, score: float) -> float:
        return (score - self.score_min) / (self.score_max - self.score_min)

    def denormalize_score(self, value: float) -> float:
        return self.score_min + value * (self.score_max - self.score_min)

    def to_json(self) -> dict:
        return {
            "samples": list(self.sample_ids),
            "score_min": self.score_min,
            "score_max": self.score_max,
            "split": dict(self.split),
            "feature_dim": self.feature_dim,
            "clip_count": self.clip_count,
            "actor_count": self.actor_count,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        return cls(
            sample_ids=list(doc["samples"]),
            score_min=float(doc["score_min"]),
            score_max=float(doc["score_max"]),
            split=dict(doc["split"]),
            feature_dim=int(doc["feature_dim"]),
            clip_count=int(doc["clip_count"]),
            actor_count=int(doc["actor_count"]),
            metadata=dict(doc.get("metadata", {})),
        )


# ---------------------------------------------------------------------------
# snippet arithmetic and splitting
# ---------------------------------------------------------------------------

def split_into_snippets(frame_count: int, snippet_len: int, stride: int) -> list:
    """Half-open frame ranges of fixed-length snippets at a fixed stride."""
    if snippet_len < 1 or stride < 1:
        raise ValueError("snippet_len and stride must be >= 1")
    if frame_count < snippet_len:
        raise ValueError(
            f"frame_count {frame_count} shorter than snippet length {snippet_len}")
    count = (frame_count - snippet_len) // stride + 1
    return [(i * stride, i * stride + snippet_len) for i in range(count)]


# Named substreams keep every source of randomness traceable to one seed.
_STREAM_IDS = {"split": 0, "generator": 1, "init": 2, "formations": 3}


def seeded_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent deterministic RNG for one named use of the run seed."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), _STREAM_IDS[stream]]))


def make_split(sample_ids, seed: int) -> dict:
    """Deterministic 3:1 train/test assignment over the given ids."""
    sample_ids = list(sample_ids)
    if len(sample_ids) < 4:
        raise ValueError(f"need at least 4 samples to split, got {len(sample_ids)}")
    n_train = int(math.floor(0.75 * len(sample_ids) + 0.5))
    order = seeded_rng(seed, "split").permutation(len(sample_ids))
    train = {sample_ids[i] for i in order[:n_train]}
    return {s: ("train" if s in train else "test") for s in sample_ids}


# ---------------------------------------------------------------------------
# annotation and dataset directory IO
# ---------------------------------------------------------------------------

def labels_to_actions(labels) -> list:
    """Frame labels -> [{label, start_frame, end_frame}] with half-open ranges."""
    labels = validate_labels(labels)
    actions = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            actions.append({"label": labels[start], "start_frame": start,
                            "end_frame": i})
            start = i
    return actions


def actions_to_labels(actions) -> list:
    """Inverse of labels_to_actions; intervals must tile [0, n)."""
    actions = sorted(actions, key=lambda a: a["start_frame"])
    labels = []
    cursor = 0
    for action in actions:
        if action["start_frame"] != cursor:
            raise ValueError("action intervals must tile the frame range")
        if action["label"] not in ACTION_LEXICON:
            raise ValueError(f"unknown action label {action['label']!r}")
        labels.extend([action["label"]] * (action["end_frame"] - action["start_frame"]))
        cursor = action["end_frame"]
    return labels


def _annotation_doc(sample: VideoSample) -> dict:
    doc = {"id": sample.id, "score": sample.score, "actions": [], "formations": []}
    if sample.action_labels is not None:
        doc["actions"] = labels_to_actions(sample.action_labels)
    for clip in sorted(sample.formation_labels):
        label = sample.formation_labels[clip]
        doc["formations"].append({
            "clip": clip,
            "vertices": [[x, y] for x, y in label.vertices],
            "vertex_flags": list(label.vertex_flags),
        })
    return doc


def _dump_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def save_dataset(manifest: DatasetManifest, samples, directory) -> None:
    """Write manifest, features, annotations, and generator sidecars."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    by_id = {s.id: s for s in samples}
    if set(by_id) != set(manifest.sample_ids):
        raise ValueError("manifest ids and samples disagree")
    _dump_json(manifest.to_json(), directory / "manifest.json")
    for sid in manifest.sample_ids:
        sample = by_id[sid]
        save_features(sample.clip_features, directory / f"{sid}.features.logf")
        actors = np.concatenate([f.features for f in sample.actor_frames], axis=0)
        positions = np.concatenate([f.positions for f in sample.actor_frames], axis=0)
        save_features(actors, directory / f"{sid}.actors.logf")
        save_features(positions, directory / f"{sid}.positions.logf")
        _dump_json(_annotation_doc(sample), directory / f"{sid}.json")
        if sample.synthetic is not None:
            _dump_json({
                "element_mask": [bool(x) for x in sample.synthetic.element_mask],
                "quality": [float(x) for x in sample.synthetic.quality],
                "oracle_score": sample.synthetic.oracle_score,
            }, directory / f"{sid}.synth.json")


def _load_sample(directory: Path, sid: str, manifest: DatasetManifest) -> VideoSample:
    clip_features = load_features(directory / f"{sid}.features.logf")
    actors = load_features(directory / f"{sid}.actors.logf")
    positions = load_features(directory / f"{sid}.positions.logf")
    t = clip_features.shape[0]
    n = manifest.actor_count
    if actors.shape[0] != t * n or positions.shape != (t * n, 2):
        raise ValueError(f"{sid}: actor tensors disagree with manifest shapes")
    frames = [ActorFrame(actors[i * n:(i + 1) * n], positions[i * n:(i + 1) * n])
              for i in range(t)]
    doc = json.loads((directory / f"{sid}.json").read_text())
    labels = actions_to_labels(doc["actions"]) if doc.get("actions") else None
    formations = {}
    for item in doc.get("formations", []):
        formations[int(item["clip"])] = FormationLabel(
            vertices=[tuple(v) for v in item["vertices"]],
            vertex_flags=item["vertex_flags"])
    synthetic = None
    synth_path = directory / f"{sid}.synth.json"
    if synth_path.exists():
        sdoc = json.loads(synth_path.read_text())
        synthetic = SyntheticInfo(sdoc["element_mask"], sdoc["quality"],
                                  float(sdoc["oracle_score"]))
    return VideoSample(id=doc["id"], clip_features=clip_features,
                       actor_frames=frames, score=float(doc["score"]),
                       action_labels=labels, formation_labels=formations,
                       synthetic=synthetic)


def load_dataset(directory):
    """Read a dataset directory back into (manifest, samples)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {directory}")
    manifest = DatasetManifest.from_json(json.loads(manifest_path.read_text()))
    samples = [_load_sample(directory, sid, manifest) for sid in manifest.sample_ids]
    return manifest, samples
