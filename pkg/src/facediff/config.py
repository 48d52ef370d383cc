"""Flat ``section.key = value`` run configuration.

Every accepted key is listed in ``KEYS`` with its type, default and meaning;
anything else is rejected.  Relative paths resolve against the config file's
directory.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any, Dict, Optional

from .attention import AttentionVariant
from .data import SyntheticDatasetSpec
from .denoiser import DenoiserConfig
from .diffusion import SamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _words(text):
    return tuple(v for v in text.replace(",", " ").split())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key: (parser, default, description)
KEYS: Dict[str, tuple] = {
    "data.vertex_count": (int, 40, "vertices per synthetic template"),
    "data.subject_count": (int, 4, "number of speaking styles K"),
    "data.feature_dim": (int, 16, "audio feature channels D"),
    "data.fps": (int, 25, "frame rate; also the self-bias interval p"),
    "data.sequence_count": (int, 64, "number of generated clips"),
    "data.min_frames": (int, 50, "shortest clip length"),
    "data.max_frames": (int, 100, "longest clip length"),
    "data.rng_seed": (int, 7, "dataset generator seed"),
    "data.lip_gain": (float, 1.0, "lip offset per unit mouth amplitude"),
    "data.upper_drift_period": (float, 2.0, "upper-face sinusoid period, seconds"),
    "data.upper_amplitude": (float, 0.3, "upper-face sinusoid amplitude"),
    "data.smoothing_frames": (float, 2.0, "Gaussian smoothing width of audio features"),
    "data.split": (_floats, (0.8, 0.1, 0.1), "train/val/test fractions"),
    "data.split_seed": (int, 0, "seed for the train/val/test partition"),
    "model.hidden_dim": (int, 64, "hidden width C"),
    "model.ff_dim": (int, 128, "feedforward width"),
    "model.heads": (int, 4, "attention heads"),
    "model.blocks": (int, 1, "decoder blocks"),
    "model.diffusion_steps": (int, 50, "diffusion chain length N"),
    "model.schedule": (str, "linear", "noise schedule: linear or cosine"),
    "model.variant": (str, "full", "attention variant"),
    "model.init_seed": (int, 0, "parameter initialisation seed"),
    "train.batch_size": (int, 8, "clips per optimiser step"),
    "train.learning_rate": (float, 5e-3, "AdamW learning rate"),
    "train.steps": (int, 300, "optimiser steps"),
    "train.lambda1": (float, 1.0, "reconstruction loss weight"),
    "train.lambda2": (float, 1.0, "velocity loss weight"),
    "train.uncond_prob": (float, 0.1, "probability of dropping the audio per clip"),
    "train.weight_decay": (float, 1e-4, "decoupled weight decay"),
    "train.rng_seed": (int, 0, "training RNG seed"),
    "train.checkpoint_every": (int, 0, "write an intermediate checkpoint every k steps (0: off)"),
    "sampler.step_count": (int, 10, "DDIM substeps S"),
    "sampler.eta": (float, 0.0, "DDIM stochasticity"),
    "sampler.guidance_scale": (float, 0.0, "classifier-free guidance scale w"),
    "eval.seeds": (_ints, tuple(range(10)), "sampling seeds for eval/ablate"),
    "eval.variants": (_words, ("full", "no_cross_bias"), "variants for ablate"),
    "eval.guidance_values": (_floats, (0.0, 0.5, 1.0), "guidance scales for ablate"),
    "bench.durations": (_floats, (10.0, 30.0, 60.0, 90.0), "audio lengths in seconds"),
    "bench.repeats": (int, 3, "timed repeats per measurement"),
    "bench.warmups": (int, 1, "untimed warmup runs"),
    "bench.multithreaded": (_bool, False, "allow multi-threaded BLAS during timing"),
    "bench.hidden_dim": (int, 256, "hidden width shared by both benchmarked decoders"),
    "bench.ff_dim": (int, 512, "feedforward width shared by both benchmarked decoders"),
    "bench.heads": (int, 4, "attention heads shared by both benchmarked decoders"),
    "paths.dataset_dir": (Path, Path("data"), "dataset directory"),
    "paths.checkpoint_dir": (Path, Path("checkpoints"), "checkpoint directory"),
    "paths.report_dir": (Path, Path("reports"), "report directory"),
}


def _render(value) -> str:
    if isinstance(value, tuple):
        return " ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, values: Dict[str, Any], base_dir: Path = Path(".")):
        self.values = values
        self.base_dir = base_dir

    @classmethod
    def parse(cls, text: str, base_dir=Path(".")) -> "RunConfig":
        values = {k: spec[1] for k, spec in KEYS.items()}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cls._set(values, key, value, lineno)
        cfg = cls(values, Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        return cls.parse(path.read_text(), path.parent)

    @staticmethod
    def _set(values, key, value, lineno=None):
        where = f"line {lineno}: " if lineno else ""
        if key not in KEYS:
            raise ConfigError(f"{where}unknown config key {key!r}")
        try:
            values[key] = KEYS[key][0](value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}bad value for {key}: {exc}") from None

    def override(self, key: str, value) -> None:
        self._set(self.values, key, str(value))
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    def path(self, key: str) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else (self.base_dir / p)

    def validate(self) -> None:
        try:
            self.dataset_spec().validate()
            self.model_config()
            self.train_config()
            self.sampler_config()
            self.bench_model_config()
            AttentionVariant.parse(self["model.variant"])
            for v in self["eval.variants"]:
                AttentionVariant.parse(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self["model.schedule"] not in ("linear", "cosine"):
            raise ConfigError("model.schedule must be linear or cosine")
        if len(self["data.split"]) != 3 or abs(sum(self["data.split"]) - 1) > 1e-9:
            raise ConfigError("data.split needs three fractions summing to 1")
        if self["bench.repeats"] < 3 or self["bench.warmups"] < 0:
            raise ConfigError("bench.repeats must be >= 3 and bench.warmups >= 0")
        if self["train.steps"] < 1:
            raise ConfigError("train.steps must be positive")

    def canonical(self) -> str:
        return "\n".join(f"{k} = {_render(self.values[k])}" for k in sorted(self.values)) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    # -- typed views --------------------------------------------------------
    def dataset_spec(self) -> SyntheticDatasetSpec:
        v = self.values
        return SyntheticDatasetSpec(
            vertex_count=v["data.vertex_count"], subject_count=v["data.subject_count"],
            feature_dim=v["data.feature_dim"], fps=v["data.fps"],
            sequence_count=v["data.sequence_count"], min_frames=v["data.min_frames"],
            max_frames=v["data.max_frames"], rng_seed=v["data.rng_seed"],
            lip_gain=v["data.lip_gain"], upper_drift_period=v["data.upper_drift_period"],
            upper_amplitude=v["data.upper_amplitude"],
            smoothing_frames=v["data.smoothing_frames"])

    def model_config(self, variant: Optional[str] = None) -> DenoiserConfig:
        v = self.values
        return DenoiserConfig(
            hidden_dim=v["model.hidden_dim"], ff_dim=v["model.ff_dim"], heads=v["model.heads"],
            blocks=v["model.blocks"], vertex_count=v["data.vertex_count"],
            feature_dim=v["data.feature_dim"], subject_count=v["data.subject_count"],
            fps=v["data.fps"], diffusion_steps=v["model.diffusion_steps"],
            variant=variant or v["model.variant"])

    def bench_model_config(self) -> DenoiserConfig:
        v = self.values
        return DenoiserConfig(**{**self.model_config("full").to_dict(),
                                 "hidden_dim": v["bench.hidden_dim"],
                                 "ff_dim": v["bench.ff_dim"], "heads": v["bench.heads"]})

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(batch_size=v["train.batch_size"],
                           learning_rate=v["train.learning_rate"], lambda1=v["train.lambda1"],
                           lambda2=v["train.lambda2"], uncond_prob=v["train.uncond_prob"],
                           weight_decay=v["train.weight_decay"], rng_seed=v["train.rng_seed"])

    def sampler_config(self, guidance: Optional[float] = None) -> SamplerConfig:
        v = self.values
        return SamplerConfig(step_count=v["sampler.step_count"], eta=v["sampler.eta"],
                             guidance_scale=v["sampler.guidance_scale"]
                             if guidance is None else guidance)


def describe_keys() -> str:
    return "\n".join(f"{k} = {_render(spec[1])}    # {spec[2]}" for k, spec in KEYS.items())
