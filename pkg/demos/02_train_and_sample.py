"""Train a small denoiser on synthetic clips and sample lip motion from audio.

The synthetic data makes lip height a known function of the first audio
channel, so after a few hundred steps the sampled lips should follow the
audio closely, while the upper face (independent of audio) cannot be
predicted and is left to the sampler's randomness.

Runs in a few minutes on one CPU core.  Pass a smaller step count as the
first argument for a quick look, e.g. ``python 02_train_and_sample.py 50``.
"""
import sys

import numpy as np

from facediff.config import RunConfig
from facediff.data import generate_dataset, split_indices
from facediff.denoiser import Denoiser
from facediff.diffusion import make_schedule, sample
from facediff.evaluation import lip_vertex_error
from facediff.training import train, validation_rec_loss

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = RunConfig.parse("")  # desk defaults: 64 clips, V=40, C=64, lr 5e-3
ds = generate_dataset(cfg.dataset_spec())
parts = split_indices(len(ds.items), cfg["data.split"], cfg["data.split_seed"])
train_items = [ds.items[i] for i in parts["train"]]
val_items = [ds.items[i] for i in parts["val"]]
test_items = [ds.items[i] for i in parts["test"]]
schedule = make_schedule(cfg["model.diffusion_steps"])

model = Denoiser(cfg.model_config(), seed=0)
print(f"{model.parameter_count()} parameters")
print(f"validation rec_loss before: {validation_rec_loss(model, val_items, schedule):.4f}")
history = train(model, train_items, schedule, cfg.train_config(), steps=steps)
for h in history[:: max(1, steps // 6)]:
    print(f"  step {h['step']:4d}  loss {h['loss']:.4f}")
print(f"validation rec_loss after:  {validation_rec_loss(model, val_items, schedule):.4f}")

lip = ds.template.lip_mask
audio, motion, style = test_items[0]
pred, passes = sample(model, audio, style, cfg.sampler_config(), schedule,
                      np.random.default_rng(0))
print(f"\nsampled {pred.frames} frames in {passes} denoiser passes")
print(f"LVE {lip_vertex_error(pred, motion, lip):.4f}  vs  standing still "
      f"{lip_vertex_error(np.zeros_like(motion.offsets), motion, lip):.4f}")

mouth = audio.features[:, 0]
lip_y = pred.offsets[:, lip, 1].mean(axis=1)
print(f"correlation of sampled lip height with the mouth channel: "
      f"{np.corrcoef(mouth, lip_y)[0, 1]:.3f}")
