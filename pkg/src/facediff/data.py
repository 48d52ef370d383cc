"""Domain types and the synthetic paired audio / vertex-offset generator.

The generator stands in for captured audio-4D corpora.  Its construction is
fully specified so that tests can reason about it exactly:

* audio channel 0 is a "mouth amplitude" ``m_t`` in ``[0, 1]``; the other
  channels are independent smoothed noise;
* lip vertices move vertically by ``lip_gain * style_scale(k) * m_t``;
* upper-face vertices drift along a slow sinusoid whose phase is drawn per
  sequence, so they cannot be predicted from the audio;
* every other vertex is static.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

LIP, UPPER, OTHER = 0, 1, 2
REGION_NAMES = {LIP: "lip", UPPER: "upper", OTHER: "other"}


@dataclass(frozen=True)
class MeshTemplate:
    rest_positions: np.ndarray
    region_labels: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.rest_positions)
        labels = np.asarray(self.region_labels)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"rest_positions must be V x 3, got {pos.shape}")
        if pos.shape[0] < 3:
            raise ValueError("a template needs at least 3 vertices")
        if labels.shape != (pos.shape[0],):
            raise ValueError("one region label per vertex required")
        if not np.all(np.isin(labels, (LIP, UPPER, OTHER))):
            raise ValueError("region labels must be lip/upper/other")
        if not np.any(labels == LIP) or not np.any(labels == UPPER):
            raise ValueError("template needs at least one lip and one upper vertex")
        if not np.all(np.isfinite(pos)):
            raise ValueError("rest_positions must be finite")

    @property
    def vertex_count(self) -> int:
        return int(self.rest_positions.shape[0])

    @property
    def lip_mask(self) -> np.ndarray:
        return np.asarray(self.region_labels) == LIP

    @property
    def upper_mask(self) -> np.ndarray:
        return np.asarray(self.region_labels) == UPPER


@dataclass(frozen=True)
class MotionSequence:
    """T x V x 3 vertex offsets over a template."""

    offsets: np.ndarray
    fps: int = 25

    def __post_init__(self):
        off = np.asarray(self.offsets)
        if off.ndim != 3 or off.shape[2] != 3:
            raise ValueError(f"offsets must be T x V x 3, got {off.shape}")
        if off.shape[0] < 1:
            raise ValueError("a motion sequence needs at least one frame")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if not np.all(np.isfinite(off)):
            raise ValueError("offsets must be finite")

    @property
    def frames(self) -> int:
        return int(self.offsets.shape[0])

    @property
    def vertex_count(self) -> int:
        return int(self.offsets.shape[1])


@dataclass(frozen=True)
class AudioFeatureSequence:
    """T x D per-frame audio features, aligned one-to-one with motion frames."""

    features: np.ndarray
    fps: int = 25

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise ValueError(f"features must be T x D, got {f.shape}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")

    @property
    def frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class StyleOneHot:
    subject_index: int
    subject_count: int

    def __post_init__(self):
        if self.subject_count <= 0:
            raise ValueError("subject_count must be positive")
        if not 0 <= self.subject_index < self.subject_count:
            raise ValueError(
                f"subject index {self.subject_index} outside [0, {self.subject_count})"
            )

    @property
    def vector(self) -> np.ndarray:
        v = np.zeros(self.subject_count)
        v[self.subject_index] = 1.0
        return v


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    vertex_count: int = 40
    subject_count: int = 4
    feature_dim: int = 16
    fps: int = 25
    sequence_count: int = 64
    min_frames: int = 50
    max_frames: int = 100
    rng_seed: int = 0
    lip_gain: float = 1.0
    upper_drift_period: float = 2.0
    upper_amplitude: float = 0.3
    smoothing_frames: float = 2.0

    def validate(self) -> None:
        for name in ("vertex_count", "subject_count", "feature_dim", "fps",
                     "sequence_count", "min_frames", "max_frames"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.vertex_count < 3:
            raise ValueError("vertex_count must be at least 3")
        if self.min_frames > self.max_frames:
            raise ValueError("min_frames must not exceed max_frames")
        if self.lip_gain < 0:
            raise ValueError("lip_gain must be non-negative")
        if self.upper_drift_period <= 0:
            raise ValueError("upper_drift_period must be positive")
        if self.upper_amplitude < 0 or self.smoothing_frames < 0:
            raise ValueError("upper_amplitude and smoothing_frames must be non-negative")


@dataclass
class Dataset:
    template: MeshTemplate
    items: List[Tuple[AudioFeatureSequence, MotionSequence, StyleOneHot]] = field(
        default_factory=list
    )

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


def style_scale(k: int) -> float:
    return 1.0 + 0.25 * k


def make_template(vertex_count: int, rng: np.random.Generator) -> MeshTemplate:
    """Scatter vertices over a face-like box: lips low, upper face high."""
    n_lip = max(1, vertex_count // 5)
    n_upper = max(1, (3 * vertex_count) // 10)
    n_other = vertex_count - n_lip - n_upper
    if n_other < 0:
        n_upper = vertex_count - n_lip
        n_other = 0
    lip = np.column_stack([rng.uniform(-0.3, 0.3, n_lip),
                           rng.uniform(-0.8, -0.6, n_lip),
                           rng.uniform(0.9, 1.0, n_lip)])
    upper = np.column_stack([rng.uniform(-0.8, 0.8, n_upper),
                             rng.uniform(0.4, 1.0, n_upper),
                             rng.uniform(0.6, 0.9, n_upper)])
    other = np.column_stack([rng.uniform(-1.0, 1.0, n_other),
                             rng.uniform(-0.5, 0.3, n_other),
                             rng.uniform(0.0, 0.8, n_other)])
    labels = np.concatenate([np.full(n_lip, LIP), np.full(n_upper, UPPER),
                             np.full(n_other, OTHER)]).astype(np.int64)
    pos = np.concatenate([lip, upper, other]).astype(np.float32)
    return MeshTemplate(pos, labels)


def _smooth(x: np.ndarray, width: float) -> np.ndarray:
    """Gaussian smoothing along axis 0 with reflect padding."""
    if width <= 0:
        return x
    radius = int(np.ceil(3 * width))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / width) ** 2)
    taps /= taps.sum()
    padded = np.pad(x, [(radius, radius)] + [(0, 0)] * (x.ndim - 1), mode="reflect"
                    if x.shape[0] > radius else "edge")
    out = np.zeros_like(x, dtype=np.float64)
    for i, w in enumerate(taps):
        out += w * padded[i:i + x.shape[0]]
    return out


def synthesize_audio(frames: int, spec: SyntheticDatasetSpec,
                     rng: np.random.Generator) -> AudioFeatureSequence:
    raw = rng.standard_normal((frames, spec.feature_dim))
    smooth = _smooth(raw, spec.smoothing_frames)
    smooth /= smooth.std(axis=0, keepdims=True) + 1e-8
    feats = smooth.copy()
    # tanh keeps the mouth amplitude inside [0, 1]
    feats[:, 0] = 0.5 * (1.0 + np.tanh(smooth[:, 0]))
    return AudioFeatureSequence(feats.astype(np.float32), fps=spec.fps)


def synthesize_motion(audio: AudioFeatureSequence, style: StyleOneHot,
                      template: MeshTemplate, spec: SyntheticDatasetSpec,
                      rng: np.random.Generator) -> MotionSequence:
    """Vertex offsets for one clip; only the upper-face phase consumes ``rng``."""
    T = audio.frames
    mouth = np.asarray(audio.features[:, 0], dtype=np.float64)
    offsets = np.zeros((T, template.vertex_count, 3), dtype=np.float64)
    offsets[:, template.lip_mask, 1] = (
        spec.lip_gain * style_scale(style.subject_index) * mouth
    )[:, None]
    phase = rng.uniform(0.0, 2 * np.pi)
    t = np.arange(T) / spec.fps
    drift = spec.upper_amplitude * np.sin(2 * np.pi * t / spec.upper_drift_period + phase)
    offsets[:, template.upper_mask, 1] = drift[:, None]
    return MotionSequence(offsets.astype(np.float32), fps=spec.fps)


def generate_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    template = make_template(spec.vertex_count, rng)
    items = []
    for _ in range(spec.sequence_count):
        T = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        k = int(rng.integers(spec.subject_count))
        style = StyleOneHot(k, spec.subject_count)
        audio = synthesize_audio(T, spec, rng)
        motion = synthesize_motion(audio, style, template, spec, rng)
        items.append((audio, motion, style))
    return Dataset(template, items)


def split_indices(n: int, fractions=(0.8, 0.1, 0.1),
                  seed: Optional[int] = 0) -> dict:
    """Deterministic train/val/test partition of ``range(n)``."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train:n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val:].tolist()),
    }
