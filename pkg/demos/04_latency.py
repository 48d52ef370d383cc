"""Why parallel decoding wins on long clips.

The diffusion sampler runs the denoiser a fixed number of times (10 here)
over the whole clip at once.  An autoregressive decoder needs one pass per
frame, each over everything generated so far.  Both use the same layer
sizes.  The pass counts tell the story before any clock is read; the wall
times show the gap widening as clips get longer.

Single-threaded, so the comparison is not skewed by BLAS parallelism.  The
default durations take about a minute.
"""
import sys

from facediff.config import RunConfig
from facediff.bench import bench_latency, latency_ratios

durations = [float(a) for a in sys.argv[1:]] or [5.0, 20.0, 40.0]
cfg = RunConfig.parse("")
records = bench_latency(durations, fps=25, sampler_config=cfg.sampler_config(),
                        model_config=cfg.bench_model_config(), repeats=3, warmups=1)
print(f"{'decoder':<15}{'seconds':>8}{'frames':>8}{'passes':>8}{'wall ms':>11}")
for r in records:
    print(f"{r.decoder:<15}{r.audio_seconds:>8g}{r.frames:>8}{r.denoiser_passes:>8}"
          f"{r.wall_ms:>11.1f}")
print()
for secs, ratio in sorted(latency_ratios(records).items()):
    print(f"autoregressive / diffusion at {secs:g}s: {ratio:.2f}x")
