"""Classifier-free guidance: trading lip accuracy for livelier motion.

The model is trained with the audio dropped 10% of the time, so it can also
predict motion without audio.  Sampling with guidance scale w mixes the two
predictions as (1 + w) * conditional - w * unconditional.  Larger w pushes
the motion further from the audio-free prediction: the lips overshoot (LVE
rises) and the whole face moves more (larger upper-face spread).
"""
import sys

import numpy as np

from facediff.config import RunConfig
from facediff.data import generate_dataset, split_indices
from facediff.denoiser import Denoiser
from facediff.diffusion import make_schedule
from facediff.evaluation import evaluate_model
from facediff.training import train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = RunConfig.parse("")
ds = generate_dataset(cfg.dataset_spec())
parts = split_indices(len(ds.items), cfg["data.split"], cfg["data.split_seed"])
schedule = make_schedule(cfg["model.diffusion_steps"])
model = Denoiser(cfg.model_config(), seed=0)
train(model, [ds.items[i] for i in parts["train"]], schedule, cfg.train_config(), steps=steps)

test_items = [ds.items[i] for i in parts["test"]]
print(" w     LVE              upper-face std")
for w in (0.0, 0.5, 1.0):
    r = evaluate_model(model, test_items, ds.template, schedule, cfg.sampler_config(w),
                       seeds=[0, 1, 2])
    print(f"{w:3.1f}  {r.lve:.4f} +- {r.lve_ci:.4f}  {r.upper_std:.4f} +- {r.upper_std_ci:.4f}")
