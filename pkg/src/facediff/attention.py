"""Static attention biases and multi-head attention with prepended condition tokens.

Bias matrices are additive, pre-softmax, and use ``NEG_INF`` (-1e9) as the
masking value.  Column layout for the conditional variants is
``[style, step, token_1, ..., token_T]`` so the key aligned with frame ``i``
(1-based) sits in column ``i + 2``.
"""
from __future__ import annotations

import enum
from typing import Dict, Optional, Tuple

import numpy as np

NEG_INF = -1e9
N_COND = 2

PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


class AttentionVariant(str, enum.Enum):
    FULL = "full"
    NO_CROSS_BIAS = "no_cross_bias"
    NO_SELF_BIAS = "no_self_bias"
    NO_COND_SELF_ATTN = "no_cond_self_attn"
    FACEFORMER_BIAS = "faceformer_bias"
    FULLY_SELF_ATTN = "fully_self_attn"

    @classmethod
    def parse(cls, value) -> "AttentionVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"nocrossbias": "no_cross_bias", "noselfbias": "no_self_bias",
                   "nocondselfattn": "no_cond_self_attn",
                   "faceformerbias": "faceformer_bias", "fullyselfattn": "fully_self_attn"}
        key = aliases.get(key.replace("_", ""), key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown attention variant {value!r}") from None


def is_masked(bias: np.ndarray) -> np.ndarray:
    return bias <= NEG_INF / 2


def check_bias(bias: np.ndarray) -> None:
    if bias.size and not np.all(bias.max(axis=-1) > NEG_INF / 2):
        raise ValueError("bias matrix has a row with no finite entry")


def cross_attention_bias(T: int) -> np.ndarray:
    """T x (T+2): each frame sees both condition tokens and its own audio frame."""
    if T < 1:
        raise ValueError("T must be at least 1")
    bias = np.full((T, T + N_COND), NEG_INF)
    bias[:, :N_COND] = 0.0
    idx = np.arange(T)
    bias[idx, idx + N_COND] = 0.0
    return bias


def self_attention_bias(T: int, p: int) -> np.ndarray:
    """T x (T+2): condition columns 0, motion columns -floor(|i - j| / p).

    The zero band spans 2p - 1 columns per row (distances -(p-1)..(p-1)).
    """
    if T < 1 or p < 1:
        raise ValueError("T and p must be at least 1")
    dist = np.abs(np.arange(T)[:, None] - np.arange(T)[None, :])
    bias = np.zeros((T, T + N_COND))
    bias[:, N_COND:] = -(dist // p)
    return bias


def faceformer_bias(T: int, p: int) -> Tuple[np.ndarray, np.ndarray]:
    """Causal periodic self bias and diagonal alignment bias, both T x T."""
    if T < 1 or p < 1:
        raise ValueError("T and p must be at least 1")
    lag = np.arange(T)[:, None] - np.arange(T)[None, :]
    self_bias = np.where(lag >= 0, -(np.maximum(lag, 0) // p), NEG_INF).astype(float)
    cross = np.full((T, T), NEG_INF)
    np.fill_diagonal(cross, 0.0)
    return self_bias, cross


def faceformer_conditional_bias(T: int, p: int) -> Tuple[np.ndarray, np.ndarray]:
    """FaceFormer biases over ``[style, step, tokens]`` treating the two
    condition tokens as the two positions preceding frame 1.

    The conditions are then penalised by distance like any other past token,
    and cross-attention only reaches the aligned audio frame.
    """
    self_full, cross_full = faceformer_bias(T + N_COND, p)
    return self_full[N_COND:], cross_full[N_COND:]


def variant_biases(variant: AttentionVariant, T: int, p: int):
    """(self bias, cross bias) used by the decoder for ``variant``.

    For FULLY_SELF_ATTN the single bias is over the joint 2T motion+audio sequence
    and is returned as the self bias, with ``None`` for cross.
    """
    variant = AttentionVariant.parse(variant)
    if variant is AttentionVariant.FULL:
        return self_attention_bias(T, p), cross_attention_bias(T)
    if variant is AttentionVariant.NO_CROSS_BIAS:
        return self_attention_bias(T, p), np.zeros((T, T + N_COND))
    if variant is AttentionVariant.NO_SELF_BIAS:
        return np.zeros((T, T + N_COND)), cross_attention_bias(T)
    if variant is AttentionVariant.NO_COND_SELF_ATTN:
        return self_attention_bias(T, p)[:, N_COND:], cross_attention_bias(T)
    if variant is AttentionVariant.FACEFORMER_BIAS:
        return faceformer_conditional_bias(T, p)
    return np.zeros((2 * T, 2 * T + N_COND)), None


# -- multi-head attention ------------------------------------------------------

def init_attention_params(C: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    limit = np.sqrt(6.0 / (2 * C))
    params = {}
    for w in ("wq", "wk", "wv", "wo"):
        params[w] = rng.uniform(-limit, limit, (C, C))
        params["b" + w[1]] = np.zeros(C)
    return params


def _softmax_(scores: np.ndarray) -> np.ndarray:
    """Row softmax computed in place."""
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def _split(x: np.ndarray, heads: int) -> np.ndarray:
    n, C = x.shape
    return x.reshape(n, heads, C // heads).transpose(1, 0, 2)


def _merge(x: np.ndarray) -> np.ndarray:
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


def _with_conditions(x, cond_style, cond_step):
    if cond_style is None and cond_step is None:
        return x
    if cond_style is None or cond_step is None:
        raise ValueError("supply both condition tokens or neither")
    return np.concatenate([np.reshape(cond_style, (1, -1)),
                           np.reshape(cond_step, (1, -1)), x], axis=0)


def _as_float(x, dtype=None):
    x = np.asarray(x)
    if dtype is not None:
        return x.astype(dtype, copy=False)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(float)


def attention_forward(query, key, value, cond_style, cond_step, bias, params, heads):
    """Forward pass returning ``(output, cache)`` for :func:`attention_backward`.

    Computation runs in the dtype of ``params["wq"]``.
    """
    dtype = params["wq"].dtype
    query, key, value = (_as_float(a, dtype) for a in (query, key, value))
    if cond_style is not None:
        cond_style, cond_step = _as_float(cond_style, dtype), _as_float(cond_step, dtype)
    T, C = query.shape
    if C % heads:
        raise ValueError(f"channel dim {C} not divisible by {heads} heads")
    if key.shape != value.shape or key.shape[1] != C:
        raise ValueError(f"key/value shapes {key.shape}/{value.shape} incompatible with C={C}")
    k_src = _with_conditions(key, cond_style, cond_step)
    v_src = _with_conditions(value, cond_style, cond_step)
    if bias.shape != (T, k_src.shape[0]):
        raise ValueError(f"bias shape {bias.shape} != {(T, k_src.shape[0])}")
    check_bias(bias)
    d = C // heads
    q = _split(query @ params["wq"] + params["bq"], heads)
    k = _split(k_src @ params["wk"] + params["bk"], heads)
    v = _split(v_src @ params["wv"] + params["bv"], heads)
    scale = 1.0 / np.sqrt(d)
    scores = q @ k.transpose(0, 2, 1)
    scores *= scale
    scores += bias
    weights = _softmax_(scores)
    mixed = _merge(weights @ v)
    out = mixed @ params["wo"] + params["bo"]
    cache = (query, k_src, v_src, q, k, v, weights, mixed, scale, heads,
             cond_style is not None)
    return out, cache


def attention_backward(dout, cache, params):
    """Gradients w.r.t. query, key, value, condition tokens, and parameters.

    Returns ``(dquery, dkey, dvalue, dcond_style, dcond_step, grads)``; the
    condition gradients are ``None`` when no condition tokens were used.
    """
    query, k_src, v_src, q, k, v, weights, mixed, scale, heads, has_cond = cache
    grads = {"wo": mixed.T @ dout, "bo": dout.sum(axis=0)}
    dmixed = _split(dout @ params["wo"].T, heads)
    dweights = dmixed @ v.transpose(0, 2, 1)
    dv = weights.transpose(0, 2, 1) @ dmixed
    dscores = weights * (dweights - np.sum(dweights * weights, axis=-1, keepdims=True))
    dscores *= scale
    dq = _merge(dscores @ k)
    dk = _merge(dscores.transpose(0, 2, 1) @ q)
    dv = _merge(dv)
    grads["wq"], grads["bq"] = query.T @ dq, dq.sum(axis=0)
    grads["wk"], grads["bk"] = k_src.T @ dk, dk.sum(axis=0)
    grads["wv"], grads["bv"] = v_src.T @ dv, dv.sum(axis=0)
    dquery = dq @ params["wq"].T
    dk_src = dk @ params["wk"].T
    dv_src = dv @ params["wv"].T
    if has_cond:
        dstyle = dk_src[0:1] + dv_src[0:1]
        dstep = dk_src[1:2] + dv_src[1:2]
        return dquery, dk_src[N_COND:], dv_src[N_COND:], dstyle, dstep, grads
    return dquery, dk_src, dv_src, None, None, grads


def biased_conditional_attention(query, key, value, cond_style, cond_step, bias,
                                 params, heads: int = 4) -> np.ndarray:
    """Multi-head attention whose keys/values are ``[style; step; key/value]``.

    ``query`` is T x C, ``key``/``value`` are T' x C, the condition tokens are
    1 x C (pass both as ``None`` to attend without them), and ``bias`` is
    T x (T'+2) (or T x T' without conditions).
    """
    out, _ = attention_forward(query, key, value, cond_style, cond_step,
                               _as_float(bias), params, heads)
    return out


def attention_weights_debug(query, key, value, cond_style, cond_step, bias, params,
                            heads: int = 4, per_head: bool = False) -> np.ndarray:
    """Softmax weights; head-averaged T x (T'+2) unless ``per_head``."""
    _, cache = attention_forward(query, key, value, cond_style, cond_step,
                                 _as_float(bias), params, heads)
    weights = cache[6]
    return weights if per_head else weights.mean(axis=0)
