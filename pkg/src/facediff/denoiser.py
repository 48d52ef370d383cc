"""The denoising network: condition encoders and the biased-attention decoder.

Everything is plain numpy with explicit backward passes so that parameter
gradients are available for training and for finite-difference checks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from . import attention as attn
from .attention import AttentionVariant

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class DenoiserConfig:
    hidden_dim: int = 64
    ff_dim: int = 128
    heads: int = 4
    blocks: int = 1
    vertex_count: int = 40
    feature_dim: int = 16
    subject_count: int = 4
    fps: int = 25
    diffusion_steps: int = 50
    variant: AttentionVariant = AttentionVariant.FULL

    def __post_init__(self):
        object.__setattr__(self, "variant", AttentionVariant.parse(self.variant))
        for name in ("hidden_dim", "ff_dim", "heads", "blocks", "vertex_count",
                     "feature_dim", "subject_count", "fps", "diffusion_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even for the step encoding")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


# -- primitives ----------------------------------------------------------------

_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def conv1d_same(x, w, b):
    """Kernel-3 temporal convolution with one frame of zero padding per side.

    ``x`` is T x Din, ``w`` is 3 x Din x Dout.
    """
    T = x.shape[0]
    xp = np.pad(x, ((1, 1), (0, 0)))
    return sum(xp[k:k + T] @ w[k] for k in range(w.shape[0])) + b


def conv1d_same_backward(dy, x, w):
    T = x.shape[0]
    xp = np.pad(x, ((1, 1), (0, 0)))
    dw = np.stack([xp[k:k + T].T @ dy for k in range(w.shape[0])])
    dxp = np.zeros_like(xp)
    for k in range(w.shape[0]):
        dxp[k:k + T] += dy @ w[k].T
    return dxp[1:T + 1], dw, dy.sum(axis=0)


def sinusoidal_encoding(n, C: int) -> np.ndarray:
    """Interleaved [sin, cos] pairs over a geometric frequency ladder, 1 x C."""
    half = C // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    enc = np.empty(C)
    enc[0::2] = np.sin(n * freqs)
    enc[1::2] = np.cos(n * freqs)
    return enc[None, :]


# -- parameter initialisation ----------------------------------------------------

def _xavier(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out))


def init_params(config: DenoiserConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    C, D, K, F = config.hidden_dim, config.feature_dim, config.subject_count, config.ff_dim
    VD = 3 * config.vertex_count
    p = {
        "audio.conv1.w": _xavier(rng, 3 * D, C, (3, D, C)),
        "audio.conv1.b": np.zeros(C),
        "audio.conv2.w": _xavier(rng, 3 * C, C, (3, C, C)),
        "audio.conv2.b": np.zeros(C),
        "audio.proj.w": _xavier(rng, C, C),
        "audio.proj.b": np.zeros(C),
        "style.w": _xavier(rng, K, C),
        "step.w": _xavier(rng, C, C),
        "step.b": np.zeros(C),
        "in.w": _xavier(rng, VD, C),
        "in.b": np.zeros(C),
        "out.w": _xavier(rng, C, VD),
        "out.b": np.zeros(VD),
    }
    fully_self = config.variant is AttentionVariant.FULLY_SELF_ATTN
    for i in range(config.blocks):
        for name, value in attn.init_attention_params(C, rng).items():
            p[f"block{i}.self.{name}"] = value
        if not fully_self:
            for name, value in attn.init_attention_params(C, rng).items():
                p[f"block{i}.cross.{name}"] = value
        p[f"block{i}.ff.w1"] = _xavier(rng, C, F)
        p[f"block{i}.ff.b1"] = np.zeros(F)
        p[f"block{i}.ff.w2"] = _xavier(rng, F, C)
        p[f"block{i}.ff.b2"] = np.zeros(C)
    return p


def _sub(params: Params, prefix: str) -> Params:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def unflatten_params(vector: np.ndarray, like: Params) -> Params:
    out, pos = {}, 0
    for k in sorted(like):
        n = like[k].size
        out[k] = vector[pos:pos + n].reshape(like[k].shape).copy()
        pos += n
    if pos != vector.size:
        raise ValueError("vector length does not match parameter layout")
    return out


# -- condition encoders ------------------------------------------------------------

def step_embedding(n: int, params: Params, N: Optional[int] = None) -> np.ndarray:
    if n < 0 or (N is not None and n > N):
        raise ValueError(f"diffusion step {n} outside [0, {N}]")
    C = params["step.w"].shape[0]
    return sinusoidal_encoding(n, C) @ params["step.w"] + params["step.b"]


def style_vector(style, K: int) -> np.ndarray:
    """One-hot (or explicit length-K) style vector."""
    if hasattr(style, "vector"):
        if style.subject_count != K:
            raise ValueError(f"style built for K={style.subject_count}, model has K={K}")
        return style.vector
    if isinstance(style, (int, np.integer)):
        if not 0 <= style < K:
            raise ValueError(f"style index {style} outside [0, {K})")
        v = np.zeros(K)
        v[style] = 1.0
        return v
    v = np.asarray(style, dtype=float).ravel()
    if v.shape != (K,):
        raise ValueError(f"style vector must have length {K}")
    return v


def style_embedding(style, params: Params) -> np.ndarray:
    W = params["style.w"]
    return style_vector(style, W.shape[0])[None, :] @ W


def _audio_forward(features, params):
    x = np.asarray(features, dtype=params["audio.conv1.w"].dtype)
    if x.ndim != 2 or x.shape[1] != params["audio.conv1.w"].shape[1]:
        raise ValueError(f"audio features of shape {x.shape} do not match the encoder")
    if not np.all(np.isfinite(x)):
        raise ValueError("audio features must be finite")
    u1 = conv1d_same(x, params["audio.conv1.w"], params["audio.conv1.b"])
    h1 = gelu(u1)
    u2 = conv1d_same(h1, params["audio.conv2.w"], params["audio.conv2.b"])
    h2 = gelu(u2)
    out = h2 @ params["audio.proj.w"] + params["audio.proj.b"]
    return out, (x, u1, h1, u2, h2)


def _audio_backward(dout, cache, params, grads):
    x, u1, h1, u2, h2 = cache
    grads["audio.proj.w"] = h2.T @ dout
    grads["audio.proj.b"] = dout.sum(axis=0)
    du2 = (dout @ params["audio.proj.w"].T) * gelu_grad(u2)
    dh1, grads["audio.conv2.w"], grads["audio.conv2.b"] = conv1d_same_backward(
        du2, h1, params["audio.conv2.w"])
    du1 = dh1 * gelu_grad(u1)
    _, grads["audio.conv1.w"], grads["audio.conv1.b"] = conv1d_same_backward(
        du1, x, params["audio.conv1.w"])


def audio_encode(features, params: Params) -> np.ndarray:
    """T x D features -> T x C encoding (two kernel-3 convs, then a linear map)."""
    if hasattr(features, "features"):
        features = features.features
    return _audio_forward(features, params)[0]


# -- decoder -------------------------------------------------------------------------

def _decode_forward(x_n, e_a, e_s, e_n, config: DenoiserConfig, params: Params):
    dtype = params["in.w"].dtype
    x_n = np.asarray(x_n, dtype=dtype)
    e_a = np.asarray(e_a, dtype=dtype)
    e_s, e_n = np.asarray(e_s, dtype=dtype), np.asarray(e_n, dtype=dtype)
    if x_n.ndim != 3 or x_n.shape[1:] != (config.vertex_count, 3):
        raise ValueError(f"x_n shape {x_n.shape} does not match V={config.vertex_count}")
    if not np.all(np.isfinite(x_n)):
        raise ValueError("x_n must be finite")
    T = x_n.shape[0]
    C = config.hidden_dim
    if e_a.shape != (T, C):
        raise ValueError(f"audio encoding shape {e_a.shape} != {(T, C)}")
    variant = config.variant
    self_bias, cross_bias = attn.variant_biases(variant, T, config.fps)
    fully_self = variant is AttentionVariant.FULLY_SELF_ATTN
    self_cond = variant is not AttentionVariant.NO_COND_SELF_ATTN

    x_flat = x_n.reshape(T, -1)
    h = x_flat @ params["in.w"] + params["in.b"]
    if fully_self:
        h = np.concatenate([h, e_a], axis=0)
    block_caches = []
    for i in range(config.blocks):
        sp = _sub(params, f"block{i}.self.")
        conds = (e_s, e_n) if self_cond else (None, None)
        a, c_self = attn.attention_forward(h, h, h, *conds, self_bias, sp, config.heads)
        h = h + a
        c_cross = None
        if not fully_self:
            cp = _sub(params, f"block{i}.cross.")
            c, c_cross = attn.attention_forward(h, e_a, e_a, e_s, e_n, cross_bias, cp,
                                                config.heads)
            h = h + c
        hf = h
        u = hf @ params[f"block{i}.ff.w1"] + params[f"block{i}.ff.b1"]
        g = gelu(u)
        h = h + g @ params[f"block{i}.ff.w2"] + params[f"block{i}.ff.b2"]
        block_caches.append((c_self, c_cross, hf, u, g))
    h_out = h[:T]
    out = (h_out @ params["out.w"] + params["out.b"]).reshape(x_n.shape)
    return out, (x_flat, h_out, block_caches, T, fully_self, self_cond)


def _decode_backward(dout, cache, config, params, grads):
    x_flat, h_out, block_caches, T, fully_self, self_cond = cache
    dout = dout.reshape(T, -1)
    grads["out.w"] = h_out.T @ dout
    grads["out.b"] = dout.sum(axis=0)
    dh = dout @ params["out.w"].T
    if fully_self:
        dh = np.concatenate([dh, np.zeros_like(dh)], axis=0)
    de_a = np.zeros((T, config.hidden_dim))
    de_s = np.zeros((1, config.hidden_dim))
    de_n = np.zeros((1, config.hidden_dim))
    for i in reversed(range(config.blocks)):
        c_self, c_cross, hf, u, g = block_caches[i]
        pre = f"block{i}."
        grads[pre + "ff.w2"] = g.T @ dh
        grads[pre + "ff.b2"] = dh.sum(axis=0)
        du = (dh @ params[pre + "ff.w2"].T) * gelu_grad(u)
        grads[pre + "ff.w1"] = hf.T @ du
        grads[pre + "ff.b1"] = du.sum(axis=0)
        dh = dh + du @ params[pre + "ff.w1"].T
        if c_cross is not None:
            cp = _sub(params, pre + "cross.")
            dq, dk, dv, ds, dn, g_cross = attn.attention_backward(dh, c_cross, cp)
            for k, v in g_cross.items():
                grads[pre + "cross." + k] = v
            dh = dh + dq
            de_a += dk + dv
            de_s += ds
            de_n += dn
        sp = _sub(params, pre + "self.")
        dq, dk, dv, ds, dn, g_self = attn.attention_backward(dh, c_self, sp)
        for k, v in g_self.items():
            grads[pre + "self." + k] = v
        dh = dh + dq + dk + dv
        if self_cond:
            de_s += ds
            de_n += dn
    if fully_self:
        de_a += dh[T:]
        dh = dh[:T]
    grads["in.w"] = x_flat.T @ dh
    grads["in.b"] = dh.sum(axis=0)
    return de_a, de_s, de_n


def denoise(x_n, e_a, e_s, e_n, config: DenoiserConfig, params: Params) -> np.ndarray:
    """Decoder pass: noisy motion plus encoded conditions -> estimate of x_0."""
    return _decode_forward(x_n, np.asarray(e_a, float), np.reshape(e_s, (1, -1)),
                           np.reshape(e_n, (1, -1)), config, params)[0]


class Denoiser:
    """Callable ``G(x_n, audio, style, n)`` bundling a config with its parameters."""

    def __init__(self, config: DenoiserConfig, params: Optional[Params] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    @property
    def vertex_count(self) -> int:
        return self.config.vertex_count

    def forward(self, x_n, audio, style, n: int, audio_encoding=None):
        """Returns ``(x0_hat, cache)``; ``audio_encoding`` bypasses the audio encoder."""
        p = self.params
        dtype = p["in.w"].dtype
        if audio_encoding is not None:
            e_a, a_cache = np.asarray(audio_encoding, dtype), None
        else:
            if hasattr(audio, "features"):
                audio = audio.features
            e_a, a_cache = _audio_forward(audio, p)
        s_vec = style_vector(style, self.config.subject_count).astype(dtype)
        e_s = s_vec[None, :] @ p["style.w"]
        enc = sinusoidal_encoding(n, self.config.hidden_dim).astype(dtype)
        if n < 0 or n > self.config.diffusion_steps:
            raise ValueError(f"diffusion step {n} outside [0, {self.config.diffusion_steps}]")
        e_n = enc @ p["step.w"] + p["step.b"]
        out, d_cache = _decode_forward(x_n, e_a, e_s, e_n, self.config, p)
        return out, (a_cache, s_vec, enc, d_cache)

    def backward(self, dout, cache) -> Params:
        a_cache, s_vec, enc, d_cache = cache
        grads: Params = {}
        de_a, de_s, de_n = _decode_backward(np.asarray(dout, float), d_cache, self.config,
                                            self.params, grads)
        grads["style.w"] = np.outer(s_vec, de_s[0])
        grads["step.w"] = enc.T @ de_n
        grads["step.b"] = de_n[0].copy()
        if a_cache is not None:
            _audio_backward(de_a, a_cache, self.params, grads)
        for k, v in self.params.items():
            grads.setdefault(k, np.zeros_like(v))
        return grads

    def __call__(self, x_n, audio, style, n: int) -> np.ndarray:
        return self.forward(x_n, audio, style, n)[0]

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def astype(self, dtype) -> "Denoiser":
        """Copy with parameters cast to ``dtype`` (inference only)."""
        return Denoiser(self.config, {k: v.astype(dtype) for k, v in self.params.items()})
