"""Diffusion-transformer speech-to-face-motion library.

Submodules: ``data`` (synthetic clips), ``io`` (file formats), ``attention``
(static biases and conditional attention), ``denoiser``, ``diffusion``
(schedules, DDIM, guidance), ``training``, ``evaluation`` (LVE, FDD, ablation),
``bench`` (latency comparison), ``config`` and ``cli``.
"""
from .attention import (NEG_INF, AttentionVariant, attention_weights_debug,
                        biased_conditional_attention, cross_attention_bias,
                        faceformer_bias, self_attention_bias, variant_biases)
from .bench import AutoregressiveDecoder, LatencyRecord, bench_latency, latency_ratios
from .config import ConfigError, RunConfig
from .data import (AudioFeatureSequence, Dataset, MeshTemplate, MotionSequence,
                   StyleOneHot, SyntheticDatasetSpec, generate_dataset, split_indices)
from .denoiser import Denoiser, DenoiserConfig, denoise
from .diffusion import (DiffusionSchedule, SamplerConfig, ddim_step, forward_noise,
                        guided_x0, make_schedule, sample)
from .evaluation import (MetricReport, displacement_std, evaluate_model,
                         facial_dynamics_deviation, lip_vertex_error, run_ablation)
from .training import (AdamW, NumericalError, TrainConfig, rec_loss, total_loss, train,
                       train_step, vel_loss)

__version__ = "0.1.0"
