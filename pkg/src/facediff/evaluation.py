"""Lip vertex error, facial dynamics deviation, motion-variation maps, and the
variant x guidance ablation harness.

Metric definitions used throughout:

* LVE: for each frame, the largest Euclidean error over lip vertices; averaged
  over frames.
* FDD: for each upper-face vertex, the temporal standard deviation of its
  displacement norm, computed separately for prediction and ground truth;
  the mean absolute difference of the two over upper-face vertices.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import stats

from .attention import AttentionVariant
from .data import MeshTemplate
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import DiffusionSchedule, SamplerConfig, sample
from .training import TrainConfig, train

log = logging.getLogger(__name__)


def _offsets(x):
    return np.asarray(getattr(x, "offsets", x), dtype=float)


def _mask(mask, V):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (V,):
        raise ValueError(f"mask length {mask.shape} does not match V={V}")
    if not mask.any():
        raise ValueError("vertex mask is empty")
    return mask


def lip_vertex_error(pred, gt, lip_mask) -> float:
    pred, gt = _offsets(pred), _offsets(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = _mask(lip_mask, gt.shape[1])
    err = np.linalg.norm(pred[:, mask] - gt[:, mask], axis=-1)
    return float(err.max(axis=1).mean())


def displacement_std(motion, mask=None) -> np.ndarray:
    """Per-vertex temporal std (population) of the displacement norm."""
    x = _offsets(motion)
    if mask is not None:
        x = x[:, mask]
    return np.linalg.norm(x, axis=-1).std(axis=0)


def facial_dynamics_deviation(pred, gt, upper_mask) -> float:
    pred, gt = _offsets(pred), _offsets(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if gt.shape[0] < 2:
        raise ValueError("FDD needs at least two frames")
    mask = _mask(upper_mask, gt.shape[1])
    return float(np.mean(np.abs(displacement_std(pred, mask) - displacement_std(gt, mask))))


def motion_std_map(sequences: Iterable) -> np.ndarray:
    """Per-vertex std of displacement norms pooled over all frames of all sequences."""
    norms = [np.linalg.norm(_offsets(s), axis=-1) for s in sequences]
    if not norms:
        raise ValueError("no sequences given")
    return np.concatenate(norms, axis=0).std(axis=0)


def write_std_map_csv(path, std_map, template: Optional[MeshTemplate] = None) -> None:
    """Whitespace-free CSV: ``vertex,region,std`` (region blank without a template)."""
    from .data import REGION_NAMES
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex", "region", "std"])
        for v, s in enumerate(std_map):
            region = REGION_NAMES[int(template.region_labels[v])] if template is not None else ""
            w.writerow([v, region, repr(float(s))])


def confidence_half_width(values, level: float = 0.95) -> Optional[float]:
    """Student-t half-width of the mean's confidence interval; None below 2 samples."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return None
    sem = values.std(ddof=1) / np.sqrt(values.size)
    return float(stats.t.ppf(0.5 + level / 2, values.size - 1) * sem)


@dataclass
class MetricReport:
    lve: float
    fdd: float
    per_vertex_std: np.ndarray
    seeds_used: List[int]
    lve_ci: Optional[float] = None
    fdd_ci: Optional[float] = None
    upper_std: float = 0.0
    upper_std_ci: Optional[float] = None
    lve_per_seed: List[float] = field(default_factory=list)
    fdd_per_seed: List[float] = field(default_factory=list)
    upper_std_per_seed: List[float] = field(default_factory=list)
    label: str = ""
    guidance: float = 0.0


def report_from_predictions(preds_per_seed: Dict[int, List], gts: List,
                            template: MeshTemplate, label: str = "",
                            guidance: float = 0.0) -> MetricReport:
    """Aggregate metrics; ``preds_per_seed[seed][i]`` predicts ``gts[i]``."""
    lip, upper = template.lip_mask, template.upper_mask
    lves, fdds, ustd, pooled = [], [], [], []
    for seed, preds in preds_per_seed.items():
        lves.append(np.mean([lip_vertex_error(p, g, lip) for p, g in zip(preds, gts)]))
        fdds.append(np.mean([facial_dynamics_deviation(p, g, upper)
                             for p, g in zip(preds, gts)]))
        seed_map = motion_std_map(preds)
        ustd.append(float(seed_map[upper].mean()))
        pooled.extend(preds)
    return MetricReport(
        lve=float(np.mean(lves)), fdd=float(np.mean(fdds)),
        per_vertex_std=motion_std_map(pooled), seeds_used=list(preds_per_seed),
        lve_ci=confidence_half_width(lves), fdd_ci=confidence_half_width(fdds),
        upper_std=float(np.mean(ustd)), upper_std_ci=confidence_half_width(ustd),
        lve_per_seed=[float(v) for v in lves], fdd_per_seed=[float(v) for v in fdds],
        upper_std_per_seed=ustd, label=label, guidance=guidance)


def sample_items(model, items, schedule: DiffusionSchedule, sampler: SamplerConfig,
                 seed: int) -> List[np.ndarray]:
    """Sample every item with one RNG stream seeded by ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for audio, motion, style, *_ in items:
        seq, _ = sample(model, audio, style, sampler, schedule, rng,
                        vertex_count=motion.vertex_count)
        out.append(seq.offsets)
    return out


def evaluate_model(model, items, template: MeshTemplate, schedule: DiffusionSchedule,
                   sampler: SamplerConfig, seeds: Sequence[int], label: str = "") -> MetricReport:
    preds = {s: sample_items(model, items, schedule, sampler, s) for s in seeds}
    gts = [m.offsets for _, m, *_ in items]
    return report_from_predictions(preds, gts, template, label, sampler.guidance_scale)


class MissingCheckpointError(RuntimeError):
    pass


def run_ablation(train_items, test_items, template: MeshTemplate,
                 variants: Sequence, guidance_values: Sequence[float],
                 seeds: Sequence[int], schedule: DiffusionSchedule,
                 model_config: DenoiserConfig, train_config: TrainConfig,
                 train_steps: int, sampler: SamplerConfig = SamplerConfig(),
                 models: Optional[Dict[AttentionVariant, Denoiser]] = None,
                 allow_train: bool = True, model_seed: int = 0,
                 on_trained: Optional[Callable] = None) -> List[MetricReport]:
    """One :class:`MetricReport` per (variant, guidance) pair.

    ``models`` supplies trained denoisers per variant; missing ones are trained
    here (identical data, seed and step budget for every variant) unless
    ``allow_train`` is false.
    """
    models = dict(models or {})
    rows = []
    for variant in variants:
        variant = AttentionVariant.parse(variant)
        if variant not in models:
            if not allow_train:
                raise MissingCheckpointError(f"no trained model for variant {variant.value}")
            log.info("training variant %s for %d steps", variant.value, train_steps)
            cfg = DenoiserConfig(**{**model_config.to_dict(), "variant": variant.value})
            model = Denoiser(cfg, seed=model_seed)
            train(model, train_items, schedule, train_config, steps=train_steps)
            models[variant] = model
            if on_trained is not None:
                on_trained(variant, model)
        for w in guidance_values:
            cfg = SamplerConfig(sampler.step_count, sampler.eta, float(w), sampler.substeps)
            rows.append(evaluate_model(models[variant], test_items, template, schedule, cfg,
                                       seeds, label=variant.value))
    return rows


REPORT_COLUMNS = ["variant", "guidance", "lve_mean", "lve_ci95", "fdd_mean", "fdd_ci95",
                  "upper_std_mean", "upper_std_ci95", "n_seeds", "seeds"]


def write_report_csv(path, reports: Sequence[MetricReport]) -> None:
    """CSV with ``REPORT_COLUMNS``; CI cells are empty when fewer than 2 seeds."""
    def cell(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.label, repr(float(r.guidance)), cell(r.lve), cell(r.lve_ci),
                        cell(r.fdd), cell(r.fdd_ci), cell(r.upper_std), cell(r.upper_std_ci),
                        len(r.seeds_used), " ".join(str(s) for s in r.seeds_used)])
