"""Seeded synthetic datasets: a desk-scale surrogate for pool footage.

Each sample carries a latent per-clip formation quality q in [0, 1] and a
sparse mask of "element" clips; only element clips embed q into the clip
and actor features, everything else carries a score-independent
distractor along the same feature direction.  The ground-truth score is
the element-clip mean of q mapped onto the dataset score range, so the
generator doubles as a closed-form oracle: any fusion that upweights
element clips beats average pooling, which cannot separate signal from
distractor.

Element clips also get convex actor formations whose perturbation
shrinks as q grows, plus formation labels; non-element clips show
scattered actors.  A second generator emits standalone formation images
and moment-based patch features for vertex-detector experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import (ActorFrame, DatasetManifest, FormationLabel, SyntheticInfo,
                   VideoSample, is_convex, make_split)
from .metrics import ACTION_LEXICON

__all__ = [
    "SyntheticConfig",
    "oracle_score",
    "sample_formation",
    "generate_synthetic_dataset",
    "FormationImage",
    "generate_formation_images",
    "make_patch_projection",
    "occupancy_features",
]

_ELEMENT_LABELS = ("required_1", "required_2", "required_3", "required_4",
                   "required_5", "acrobatic", "cadence", "free")
_BACKGROUND_LABELS = ("upper", "lower", "float", "none")

_GENERATOR_STREAM = 1
_FORMATION_STREAM = 3
_PROJECTION_STREAM = 4


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *key]))


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale dataset shape and noise levels."""

    sample_count: int = 80
    clip_count: int = 32
    actor_count: int = 8
    feature_dim: int = 64
    score_min: float = 0.0
    score_max: float = 100.0
    snippet_len: int = 16
    stride: int = 10
    clip_noise: float = 0.05
    actor_noise: float = 0.1
    element_marker: float = 1.5   # constant offset marking element clips
    quality_gain: float = 1.0     # how strongly q enters actor features

    def __post_init__(self):
        if self.clip_count < 4:
            raise ValueError("clip_count must be at least 4")
        if self.actor_count < 2:
            raise ValueError("actor_count must be at least 2")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be at least 4")
        if self.sample_count < 8:
            raise ValueError("sample_count must be at least 8")
        if self.score_max <= self.score_min:
            raise ValueError("score_max must exceed score_min")
        if self.snippet_len < 1 or self.stride < 1:
            raise ValueError("snippet_len and stride must be >= 1")
        if self.clip_noise < 0 or self.actor_noise < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def element_count(self) -> int:
        return math.ceil(self.clip_count / 4)

    @property
    def frame_count(self) -> int:
        return (self.clip_count - 1) * self.stride + self.snippet_len


def oracle_score(quality, element_mask, score_min: float, score_max: float) -> float:
    """Closed-form ground truth: element-clip mean quality on the score range."""
    quality = np.asarray(quality, dtype=np.float64)
    element_mask = np.asarray(element_mask, dtype=bool)
    if not element_mask.any():
        raise ValueError("element mask must select at least one clip")
    return float(score_min + (score_max - score_min) * quality[element_mask].mean())


def sample_formation(rng: np.random.Generator, n_actors: int, quality: float):
    """Convex formation with noise shrinking as quality grows.

    Returns (positions, vertex_flags, ordered_vertices): actor rows are a
    seeded permutation of polygon vertices and interior actors; the
    ordered vertex list traverses the polygon boundary.  Degenerate
    draws are rejected and resampled, so the result is always strictly
    convex and inside the unit square.
    """
    if n_actors < 3:
        raise ValueError("a formation needs at least 3 actors")
    noise = 1.0 - float(np.clip(quality, 0.0, 1.0))
    lo = min(max(3, n_actors // 2), n_actors)
    n_vertices = int(rng.integers(lo, n_actors + 1))
    spacing = 2.0 * np.pi / n_vertices
    for _ in range(200):
        center = 0.5 + rng.uniform(-0.04, 0.04, size=2)
        radius = rng.uniform(0.24, 0.36)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        angles = (phase + np.arange(n_vertices) * spacing
                  + rng.uniform(-1.0, 1.0, n_vertices) * 0.30 * spacing * noise)
        radii = radius * (1.0 + rng.uniform(-1.0, 1.0, n_vertices) * 0.12 * noise)
        vertices = center + radii[:, None] * np.stack(
            [np.cos(angles), np.sin(angles)], axis=1)
        inside = np.all((vertices > 0.05) & (vertices < 0.95))
        if inside and is_convex(vertices):
            break
    else:  # pragma: no cover - the noise bounds keep rejection rare
        raise RuntimeError("could not sample a convex formation")

    n_interior = n_actors - n_vertices
    rr = 0.25 * radius * np.sqrt(rng.uniform(size=n_interior))
    aa = rng.uniform(0.0, 2.0 * np.pi, size=n_interior)
    interior = center + rr[:, None] * np.stack([np.cos(aa), np.sin(aa)], axis=1)

    stacked = np.concatenate([vertices, interior], axis=0)
    roles = np.array([True] * n_vertices + [False] * n_interior)
    perm = rng.permutation(n_actors)
    ordered_vertices = [(float(x), float(y)) for x, y in vertices]
    return stacked[perm], roles[perm].tolist(), ordered_vertices


def _scattered_positions(rng: np.random.Generator, n_actors: int) -> np.ndarray:
    center = 0.5 + rng.uniform(-0.05, 0.05, size=2)
    rr = 0.35 * np.sqrt(rng.uniform(size=n_actors))
    aa = rng.uniform(0.0, 2.0 * np.pi, size=n_actors)
    return center + rr[:, None] * np.stack([np.cos(aa), np.sin(aa)], axis=1)


def _frame_labels(rng: np.random.Generator, cfg: SyntheticConfig,
                  element_mask: np.ndarray) -> list:
    """Per-frame labels: each frame takes the label of the nearest clip."""
    clip_labels = [
        str(rng.choice(_ELEMENT_LABELS if element_mask[i] else _BACKGROUND_LABELS))
        for i in range(cfg.clip_count)
    ]
    half = cfg.snippet_len / 2.0
    labels = []
    for frame in range(cfg.frame_count):
        clip = int(round((frame - half) / cfg.stride))
        clip = min(max(clip, 0), cfg.clip_count - 1)
        labels.append(clip_labels[clip])
    return labels


def generate_synthetic_dataset(config: SyntheticConfig, seed: int):
    """Deterministic dataset; returns (manifest, samples)."""
    cfg = config
    dirs_rng = _rng(seed, _GENERATOR_STREAM, 0)
    basis, _ = np.linalg.qr(dirs_rng.normal(size=(cfg.feature_dim, 4)))
    base_dir, marker_dir, quality_dir, clip_dir = basis.T

    samples = []
    for k in range(cfg.sample_count):
        rng = _rng(seed, _GENERATOR_STREAM, k + 1)
        quality = rng.uniform(size=cfg.clip_count)
        element_idx = np.sort(rng.choice(cfg.clip_count, cfg.element_count,
                                         replace=False))
        element_mask = np.zeros(cfg.clip_count, dtype=bool)
        element_mask[element_idx] = True
        distractor = rng.uniform(size=cfg.clip_count)
        coef = np.where(element_mask, quality, distractor)
        clip_features = (coef[:, None] * clip_dir[None, :]
                         + cfg.clip_noise * rng.normal(
                             size=(cfg.clip_count, cfg.feature_dim)))

        frames, formations = [], {}
        for i in range(cfg.clip_count):
            if element_mask[i] and cfg.actor_count >= 3:
                positions, flags, vertices = sample_formation(
                    rng, cfg.actor_count, quality[i])
                formations[i] = FormationLabel(vertices=vertices,
                                               vertex_flags=flags)
            else:
                positions = _scattered_positions(rng, cfg.actor_count)
            signal = base_dir.copy()
            if element_mask[i]:
                signal = (signal + cfg.element_marker * marker_dir
                          + cfg.quality_gain * quality[i] * quality_dir)
            features = (signal[None, :]
                        + cfg.actor_noise * rng.normal(
                            size=(cfg.actor_count, cfg.feature_dim)))
            frames.append(ActorFrame(features, np.clip(positions, 0.0, 1.0)))

        score = oracle_score(quality, element_mask, cfg.score_min, cfg.score_max)
        samples.append(VideoSample(
            id=f"sample_{k:03d}",
            clip_features=clip_features,
            actor_frames=frames,
            score=score,
            action_labels=_frame_labels(rng, cfg, element_mask),
            formation_labels=formations,
            synthetic=SyntheticInfo(element_mask.tolist(), quality.tolist(),
                                    score),
        ))

    ids = [s.id for s in samples]
    manifest = DatasetManifest(
        sample_ids=ids,
        score_min=cfg.score_min,
        score_max=cfg.score_max,
        split=make_split(ids, seed),
        feature_dim=cfg.feature_dim,
        clip_count=cfg.clip_count,
        actor_count=cfg.actor_count,
        metadata={"generator": asdict(cfg), "seed": int(seed)},
    )
    return manifest, samples


# ---------------------------------------------------------------------------
# standalone formation images for the vertex detector
# ---------------------------------------------------------------------------

@dataclass
class FormationImage:
    """One labeled formation: actor positions and the polygon label."""

    positions: np.ndarray
    label: FormationLabel
    quality: float = 1.0


def generate_formation_images(count: int, grid_side: int, n_actors: int = 8,
                              seed: int = 0, quality_range=(0.55, 1.0)) -> list:
    """Formations whose ground-truth vertices land in distinct grid patches."""
    if count < 1:
        raise ValueError("count must be positive")
    if grid_side < 2:
        raise ValueError("grid_side must be at least 2")
    rng = _rng(seed, _FORMATION_STREAM)
    images = []
    while len(images) < count:
        quality = rng.uniform(*quality_range)
        positions, flags, vertices = sample_formation(rng, n_actors, quality)
        patches = {(min(int(x * grid_side), grid_side - 1),
                    min(int(y * grid_side), grid_side - 1))
                   for x, y in vertices}
        if len(patches) < len(vertices):
            continue  # two vertices share a patch: resample
        images.append(FormationImage(
            positions=positions,
            label=FormationLabel(vertices=vertices, vertex_flags=flags),
            quality=float(quality),
        ))
    return images


def make_patch_projection(feature_dim: int, seed: int) -> np.ndarray:
    """Fixed per-dataset 3 x d map from occupancy moments to patch features."""
    if feature_dim < 3:
        raise ValueError("feature_dim must be at least 3")
    rng = _rng(seed, _PROJECTION_STREAM)
    return rng.normal(0.0, 1.0 / np.sqrt(3.0), size=(3, feature_dim))


def occupancy_features(positions, grid, projection: np.ndarray,
                       noise: float = 0.0, rng=None) -> np.ndarray:
    """Smooth per-patch occupancy moments projected into feature space.

    For each patch anchor, a Gaussian bump of each actor contributes its
    mass and its first moments (offset from the anchor in patch units);
    the three moment channels are mixed through the fixed projection.
    """
    positions = np.asarray(positions, dtype=np.float64)
    anchors = np.asarray(grid.anchors, dtype=np.float64)
    patch = float(grid.patch_size)
    sigma = 0.75 * patch
    delta = positions[None, :, :] - anchors[:, None, :]      # P x N x 2
    weight = np.exp(-(delta ** 2).sum(axis=2) / sigma ** 2)  # P x N
    m0 = weight.sum(axis=1)
    mx = (weight * delta[:, :, 0] / patch).sum(axis=1)
    my = (weight * delta[:, :, 1] / patch).sum(axis=1)
    moments = np.stack([m0, mx, my], axis=1)                 # P x 3
    features = moments @ projection
    if noise > 0.0:
        if rng is None:
            raise ValueError("noise requires an rng")
        features = features + noise * rng.normal(size=features.shape)
    return features
