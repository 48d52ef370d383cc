"""Noise schedules, forward noising, x0-parameterised DDIM sampling and
classifier-free guidance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .data import MotionSequence


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        b, ab = np.asarray(self.betas), np.asarray(self.alpha_bars)
        if b.ndim != 1 or b.size < 1 or ab.shape != (b.size + 1,):
            raise ValueError("need N betas and N+1 alpha_bars")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(ab))):
            raise ValueError("schedule must be finite")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if ab[0] != 1.0 or np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bars must start at 1 and strictly decrease")
        if not 0 < ab[-1] < 0.02:
            raise ValueError(f"final alpha_bar {ab[-1]:.4g} outside (0, 0.02)")

    @property
    def steps(self) -> int:
        return int(self.betas.size)


def make_schedule(N: int, kind: str = "linear") -> DiffusionSchedule:
    """Linear or squared-cosine schedule with ``N`` steps.

    The linear endpoints 1e-4 -> 2e-2 are defined for N = 1000 and rescaled by
    1000 / N (capped at 0.999) so short chains still end near pure noise.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if kind == "linear":
        scale = 1000.0 / N
        start, end = min(1e-4 * scale, 0.999), min(2e-2 * scale, 0.999)
        betas = np.linspace(start, end, N) if N > 1 else np.array([end])
    elif kind == "cosine":
        s = 0.008
        t = np.arange(N + 1) / N
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(betas, alpha_bars)


def _check_step(n, schedule):
    if not 0 <= n <= schedule.steps:
        raise ValueError(f"step {n} outside [0, {schedule.steps}]")


def forward_noise(x0, n: int, eps, schedule: DiffusionSchedule) -> np.ndarray:
    _check_step(n, schedule)
    ab = schedule.alpha_bars[n]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def ddim_step(x_n, x0_hat, n: int, n_prev: int, schedule: DiffusionSchedule,
              eta: float = 0.0, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One DDIM update from step ``n`` to ``n_prev`` given an estimate of x_0."""
    if n <= n_prev:
        raise ValueError(f"need n > n_prev, got {n} <= {n_prev}")
    _check_step(n, schedule)
    _check_step(n_prev, schedule)
    ab, ab_prev = schedule.alpha_bars[n], schedule.alpha_bars[n_prev]
    if ab >= 1.0:
        raise ValueError(f"alpha_bar at step {n} is 1; noise estimate undefined")
    x_n, x0_hat = np.asarray(x_n, float), np.asarray(x0_hat, float)
    eps_hat = (x_n - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0:
        if rng is None:
            raise ValueError("eta > 0 needs an rng")
        out = out + sigma * rng.standard_normal(x_n.shape)
    return out


def guided_x0(x0_cond, x0_uncond, w: float) -> np.ndarray:
    x0_cond, x0_uncond = np.asarray(x0_cond), np.asarray(x0_uncond)
    if x0_cond.shape != x0_uncond.shape:
        raise ValueError("conditional and unconditional estimates differ in shape")
    return (1.0 + w) * x0_cond - w * x0_uncond


def uniform_substeps(N: int, S: int) -> Tuple[int, ...]:
    if not 1 <= S <= N:
        raise ValueError(f"need 1 <= S <= N, got S={S}, N={N}")
    steps = np.round(np.linspace(N, 0, S + 1)).astype(int)
    return tuple(int(s) for s in steps)


@dataclass(frozen=True)
class SamplerConfig:
    step_count: int = 10
    eta: float = 0.0
    guidance_scale: float = 0.0
    substeps: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.step_count < 1:
            raise ValueError("step_count must be at least 1")
        if self.eta < 0 or self.guidance_scale < 0:
            raise ValueError("eta and guidance_scale must be non-negative")
        if self.substeps is not None:
            s = tuple(int(v) for v in self.substeps)
            object.__setattr__(self, "substeps", s)
            if s[-1] != 0 or len(s) != self.step_count + 1 or any(
                    a <= b for a, b in zip(s, s[1:])):
                raise ValueError("substeps must strictly decrease to 0 with step_count+1 entries")

    def schedule_for(self, N: int) -> Tuple[int, ...]:
        if self.substeps is None:
            return uniform_substeps(N, self.step_count)
        if self.substeps[0] != N:
            raise ValueError(f"substep schedule starts at {self.substeps[0]}, chain has N={N}")
        return self.substeps


DenoiserFn = Callable[[np.ndarray, np.ndarray, np.ndarray, int], np.ndarray]


def sample(denoiser: DenoiserFn, audio, style, config: SamplerConfig,
           schedule: DiffusionSchedule, rng: np.random.Generator,
           vertex_count: Optional[int] = None, fps: Optional[int] = None):
    """Draw x_0 for the given audio and style.

    Returns ``(MotionSequence, pass_count)``; ``pass_count`` is the number of
    denoiser evaluations, S without guidance and 2S with it, whatever the length.
    """
    features = np.asarray(getattr(audio, "features", audio), dtype=float)
    T = features.shape[0]
    if T < 1:
        raise ValueError("audio must have at least one frame")
    V = vertex_count if vertex_count is not None else denoiser.vertex_count
    fps = fps or getattr(audio, "fps", 25)
    null_audio = np.zeros_like(features)
    w = config.guidance_scale
    steps = config.schedule_for(schedule.steps)
    x = rng.standard_normal((T, V, 3))
    passes = 0
    for n, n_prev in zip(steps, steps[1:]):
        x0_hat = denoiser(x, features, style, n)
        passes += 1
        if w > 0:
            x0_uncond = denoiser(x, null_audio, style, n)
            passes += 1
            x0_hat = guided_x0(x0_hat, x0_uncond, w)
        x = ddim_step(x, x0_hat, n, n_prev, schedule, config.eta, rng)
    return MotionSequence(x, fps=fps), passes
