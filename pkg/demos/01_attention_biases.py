"""Look at the static attention biases and what they do to attention weights.

Each motion frame may attend to the two condition tokens (style, diffusion
step) and to exactly one audio frame, its own.  Self-attention is soft: a
frame's score for another frame drops by one for every full period of
distance between them.
"""
import numpy as np

from facediff.attention import (NEG_INF, attention_weights_debug, cross_attention_bias,
                                faceformer_bias, init_attention_params, self_attention_bias)

np.set_printoptions(precision=3, suppress=True, linewidth=120)


def show(name, bias):
    printable = np.where(bias <= NEG_INF / 2, -np.inf, bias)
    print(f"{name} ({bias.shape[0]}x{bias.shape[1]}), columns = [style, step, frames...]")
    print(printable, end="\n\n")


T, p = 6, 2
show("cross bias", cross_attention_bias(T))
show("self bias", self_attention_bias(T, p))

ff_self, ff_cross = faceformer_bias(T, p)
show("causal periodic self bias used by the autoregressive baseline", ff_self)

# With random projections the softmax spreads mass over all allowed keys, but
# never onto a masked one.
rng = np.random.default_rng(0)
C = 8
params = init_attention_params(C, rng)
motion, audio = rng.standard_normal((T, C)), rng.standard_normal((T, C))
style, step = rng.standard_normal(C), rng.standard_normal(C)
w = attention_weights_debug(motion, audio, audio, style, step, cross_attention_bias(T), params,
                            heads=2)
print("cross-attention weights (head mean); zeros off the allowed columns are exact:")
print(w)
