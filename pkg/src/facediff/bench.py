"""Latency comparison: fixed-pass diffusion sampling vs frame-by-frame
autoregressive decoding with the same layer sizes."""
from __future__ import annotations

import csv
import statistics
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention as attn
from .data import MotionSequence
from .denoiser import (Denoiser, DenoiserConfig, _audio_forward, _sub, gelu, init_params,
                       style_vector)
from .diffusion import SamplerConfig, make_schedule, sample


class AutoregressiveDecoder:
    """FaceFormer-style decoder: one pass over the generated prefix per frame.

    Input tokens are the style embedding followed by projections of the frames
    generated so far (each plus the style embedding); self-attention uses the
    causal periodic bias and cross-attention the diagonal alignment bias.
    Nothing is cached between frames.  Every pass recomputes the prefix keys and
    values of every block; the last block evaluates only the newest query row,
    which is all the readout needs.
    """

    def __init__(self, config: DenoiserConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.params = init_params(config, seed)
        # small readout keeps the frame feedback loop contractive at random init
        self.params["out.w"] *= 0.01
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def _block(self, i, h, rows, e_a, self_bias, cross_bias):
        cfg, p = self.config, self.params
        t = h.shape[0]
        q = h[t - rows:]
        q = q + attn.biased_conditional_attention(
            q, h, h, None, None, self_bias[t - rows:t, :t], _sub(p, f"block{i}.self."),
            cfg.heads)
        q = q + attn.biased_conditional_attention(
            q, e_a[:t], e_a[:t], None, None, cross_bias[t - rows:t, :t],
            _sub(p, f"block{i}.cross."), cfg.heads)
        u = q @ p[f"block{i}.ff.w1"] + p[f"block{i}.ff.b1"]
        return q + gelu(u) @ p[f"block{i}.ff.w2"] + p[f"block{i}.ff.b2"]

    def _pass(self, tokens, e_a, self_bias, cross_bias):
        h = tokens
        last = self.config.blocks - 1
        for i in range(self.config.blocks):
            h = self._block(i, h, 1 if i == last else h.shape[0], e_a, self_bias, cross_bias)
        return h[-1] @ self.params["out.w"] + self.params["out.b"]

    def decode(self, audio, style):
        """Returns ``(MotionSequence, pass_count)`` with ``pass_count == T``."""
        cfg, p = self.config, self.params
        dtype = p["in.w"].dtype
        feats = np.asarray(getattr(audio, "features", audio), dtype=dtype)
        T = feats.shape[0]
        e_a, _ = _audio_forward(feats, p)
        e_s = style_vector(style, cfg.subject_count).astype(dtype)[None, :] @ p["style.w"]
        # bias for every prefix is a leading block of the full-length bias
        self_bias, cross_bias = (b.astype(dtype) for b in attn.faceformer_bias(T, cfg.fps))
        tokens = np.empty((T, cfg.hidden_dim), dtype=dtype)
        tokens[0] = e_s[0]
        frames = np.zeros((T, cfg.vertex_count * 3), dtype=dtype)
        passes = 0
        for t in range(T):
            frames[t] = self._pass(tokens[:t + 1], e_a, self_bias, cross_bias)
            passes += 1
            if t + 1 < T:
                tokens[t + 1] = frames[t] @ p["in.w"] + p["in.b"] + e_s[0]
        return MotionSequence(frames.reshape(T, cfg.vertex_count, 3),
                              fps=getattr(audio, "fps", cfg.fps)), passes


def autoregressive_decode(model: AutoregressiveDecoder, audio, style):
    return model.decode(audio, style)


@dataclass
class LatencyRecord:
    decoder: str
    audio_seconds: float
    frames: int
    denoiser_passes: int
    wall_ms: float
    repeats: int
    warmups: int
    note: str = ""

    def __post_init__(self):
        if self.denoiser_passes <= 0:
            raise ValueError("denoiser_passes must be positive")
        if self.repeats < 3:
            raise ValueError("at least 3 timed repeats are required")


def _time(fn, repeats, warmups):
    result = None
    for _ in range(warmups):
        result = fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times), result


def bench_latency(durations: Sequence[float], fps: int = 25,
                  sampler_config: SamplerConfig = SamplerConfig(),
                  model_config: Optional[DenoiserConfig] = None,
                  repeats: int = 3, warmups: int = 1, seed: int = 0,
                  multithreaded: bool = False, decoders=("diffusion", "autoregressive"),
                  dtype=np.float32) -> List[LatencyRecord]:
    """Median wall time of each decoder per audio duration.

    Both decoders share ``model_config`` and run in ``dtype``.  Runs
    single-threaded unless ``multithreaded``.  Records carry a note when
    the measured time is too close to the clock resolution to be trusted.
    """
    cfg = model_config or DenoiserConfig(fps=fps)
    if cfg.fps != fps:
        cfg = DenoiserConfig(**{**cfg.to_dict(), "fps": fps})
    diff_model = Denoiser(cfg, seed=seed).astype(dtype)
    ar_model = AutoregressiveDecoder(cfg, seed=seed, dtype=dtype)
    schedule = make_schedule(cfg.diffusion_steps)
    resolution_ms = time.get_clock_info("perf_counter").resolution * 1e3
    records = []
    limits = nullcontext() if multithreaded else threadpool_limits(1)
    with limits:
        for dur in durations:
            T = max(1, int(round(dur * fps)))
            feats = np.random.default_rng(seed).standard_normal((T, cfg.feature_dim))
            runs = {
                "diffusion": lambda: sample(diff_model, feats, 0, sampler_config, schedule,
                                            np.random.default_rng(seed),
                                            vertex_count=cfg.vertex_count, fps=fps),
                "autoregressive": lambda: ar_model.decode(feats, 0),
            }
            for name in decoders:
                wall, (_, passes) = _time(runs[name], repeats, warmups)
                note = "clock resolution insufficient" if wall < 100 * resolution_ms else ""
                records.append(LatencyRecord(name, float(dur), T, passes, wall, repeats,
                                             warmups, note))
    return records


def latency_ratios(records: Sequence[LatencyRecord]) -> dict:
    """``{audio_seconds: autoregressive wall / diffusion wall}``."""
    by = {(r.decoder, r.audio_seconds): r.wall_ms for r in records}
    return {s: by[("autoregressive", s)] / by[("diffusion", s)]
            for (d, s) in by if d == "diffusion" and ("autoregressive", s) in by}


CSV_COLUMNS = ["decoder", "audio_seconds", "frames", "denoiser_passes", "wall_ms",
               "repeats", "warmups", "note"]


def write_latency_csv(path, records: Sequence[LatencyRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))
