"""Recurrent building blocks.

Each cell is a pure function of ``(inputs, params)`` where ``params`` is a
dict of leaf :class:`~stpredict.autodiff.Tensor` objects produced by the
matching ``init_*`` function. Gate-producing convolutions stack their outputs
as ``[g, i, f]`` so the fused :func:`~stpredict.autodiff.gate_update` applies.
"""
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError, Tensor, add, affine, concat, channels, conv2d, gate_update, mul,
    pool, relu, reshape, sigmoid, sub, tanh,
)

TA_REDUCTION = 4
STA_REDUCTION = 8
STA_KERNEL = 7
FORGET_BIAS = 1.0


@dataclass
class LayerState:
    h: Tensor
    c: Tensor


@dataclass
class SharedState:
    """Spatial memory threaded through the layer cascade and the highway state."""
    m: Tensor = None
    z: Tensor = None


# -- initialisation --------------------------------------------------------

def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)


def conv_params(rng, cin, cout, k, dtype=np.float32):
    return _uniform(rng, (cout, cin, k, k), cin * k * k, dtype), _zeros((cout,), dtype)


def affine_params(rng, cin, cout, dtype=np.float32):
    return _uniform(rng, (cout, cin), cin, dtype), _zeros((cout,), dtype)


def _forget_bias(b, width):
    # [g, i, f] stacking: the forget slice is the third block
    b.data[2 * width:3 * width] = FORGET_BIAS


def init_convlstm(rng, in_ch, hidden, kernel=3, dtype=np.float32):
    w, b = conv_params(rng, in_ch + hidden, 4 * hidden, kernel, dtype)
    _forget_bias(b, hidden)
    return {"w": w, "b": b}


def init_causal_lstm(rng, in_ch, hidden, mem_ch, kernel=3, dtype=np.float32):
    p = {}
    p["w1"], p["b1"] = conv_params(rng, in_ch + 2 * hidden, 3 * hidden, kernel, dtype)
    p["w2"], p["b2"] = conv_params(rng, in_ch + hidden + mem_ch, 3 * mem_ch, kernel, dtype)
    p["w3"], p["b3"] = conv_params(rng, mem_ch, mem_ch, 1, dtype)
    p["w4"], p["b4"] = conv_params(rng, in_ch + hidden + mem_ch, hidden, kernel, dtype)
    p["w5"], p["b5"] = conv_params(rng, hidden + mem_ch, hidden, 1, dtype)
    _forget_bias(p["b1"], hidden)
    _forget_bias(p["b2"], mem_ch)
    return p


def init_st_lstm(rng, in_ch, hidden, mem_ch, kernel=3, dtype=np.float32):
    p = {}
    p["wt"], p["bt"] = conv_params(rng, in_ch + hidden, 3 * hidden, kernel, dtype)
    p["ws"], p["bs"] = conv_params(rng, in_ch + mem_ch, 3 * mem_ch, kernel, dtype)
    p["wo"], p["bo"] = conv_params(rng, in_ch + 2 * hidden + mem_ch, hidden, kernel, dtype)
    p["wf"], p["bf"] = conv_params(rng, hidden + mem_ch, hidden, 1, dtype)
    _forget_bias(p["bt"], hidden)
    _forget_bias(p["bs"], mem_ch)
    return p


def init_temporal_attention(rng, ch, kernel=3, dtype=np.float32):
    hid = max(ch // TA_REDUCTION, 1)
    p = {}
    p["wu"], p["bu"] = conv_params(rng, ch, ch, kernel, dtype)
    p["ws2"], p["bs2"] = affine_params(rng, ch, hid, dtype)
    p["ws1"], p["bs1"] = affine_params(rng, hid, ch, dtype)
    return p


def init_sta(rng, ch, dtype=np.float32):
    hid = max(ch // STA_REDUCTION, 1)
    p = {}
    p["mlp1_w"], p["mlp1_b"] = affine_params(rng, ch, hid, dtype)
    p["mlp2_w"], p["mlp2_b"] = affine_params(rng, hid, ch, dtype)
    p["conv_w"], p["conv_b"] = conv_params(rng, 2, 1, STA_KERNEL, dtype)
    return p


def init_ghu(rng, in_ch, z_ch, kernel=3, dtype=np.float32):
    # one convolution over [x, z] producing [P, S] pre-activations stacks
    # W_px, W_pz, W_sx and W_sz
    w, b = conv_params(rng, in_ch + z_ch, 2 * z_ch, kernel, dtype)
    return {"w": w, "b": b}


# -- cells -----------------------------------------------------------------

def _same_grid(x, *others):
    for t in others:
        if t.shape[0] != x.shape[0] or t.shape[2:] != x.shape[2:]:
            raise ShapeError(f"batch/spatial mismatch: {x.shape} vs {t.shape}")


def convlstm_forward(x, state, p):
    _same_grid(x, state.h, state.c)
    hidden = state.c.shape[1]
    pre = conv2d(concat([x, state.h]), p["w"], p["b"])
    c = gate_update(channels(pre, 0, 3 * hidden), state.c)
    o = sigmoid(channels(pre, 3 * hidden, 4 * hidden))
    return LayerState(mul(o, tanh(c)), c)


def causal_lstm_forward(x, state, m_in, p):
    """Causal LSTM with cascaded temporal and spatial memories.

    Returns ``(LayerState(h, c), m)``. The output gate uses ``tanh``.
    """
    if m_in is None:
        raise ShapeError("causal_lstm_forward needs the incoming spatial memory m_in")
    _same_grid(x, state.h, state.c, m_in)
    c = gate_update(conv2d(concat([x, state.h, state.c]), p["w1"], p["b1"]), state.c)
    pre_m = conv2d(concat([x, c, m_in]), p["w2"], p["b2"])
    m = gate_update(pre_m, tanh(conv2d(m_in, p["w3"], p["b3"])))
    o = tanh(conv2d(concat([x, c, m]), p["w4"], p["b4"]))
    h = mul(o, tanh(conv2d(concat([c, m]), p["w5"], p["b5"])))
    return LayerState(h, c), m


def st_lstm_forward(x, state, m_in, p):
    """Spatiotemporal LSTM: temporal and spatial memories updated in parallel."""
    if m_in is None:
        raise ShapeError("st_lstm_forward needs the incoming spatial memory m_in")
    _same_grid(x, state.h, state.c, m_in)
    c = gate_update(conv2d(concat([x, state.h]), p["wt"], p["bt"]), state.c)
    m = gate_update(conv2d(concat([x, m_in]), p["ws"], p["bs"]), m_in)
    o = sigmoid(conv2d(concat([x, state.h, c, m]), p["wo"], p["bo"]))
    h = mul(o, tanh(conv2d(concat([c, m]), p["wf"], p["bf"])))
    return LayerState(h, c), m


def _channel_vector(t):
    return reshape(t, (t.shape[0], t.shape[1]))


def temporal_attention_parts(X, p):
    """Return ``(U, e)``: the modulated features and the channel weights."""
    U = conv2d(X, p["wu"], p["bu"])
    s = _channel_vector(pool(U, "avg", "spatial"))
    e = tanh(affine(sigmoid(affine(s, p["ws2"], p["bs2"])), p["ws1"], p["bs1"]))
    return U, e


def temporal_attention(X, p):
    U, e = temporal_attention_parts(X, p)
    return mul(U, reshape(e, e.shape + (1, 1)))


def _shared_mlp(v, p):
    return affine(relu(affine(v, p["mlp1_w"], p["mlp1_b"])), p["mlp2_w"], p["mlp2_b"])


def sta_attention(X, p):
    """Channel attention followed by 7×7 spatial attention."""
    if X.ndim != 4:
        raise ShapeError(f"sta_attention expects [B, C, H, W], got {X.shape}")
    B, C = X.shape[:2]
    avg = _channel_vector(pool(X, "avg", "spatial"))
    mx = _channel_vector(pool(X, "max", "spatial"))
    mc = sigmoid(add(_shared_mlp(avg, p), _shared_mlp(mx, p)))
    xc = mul(X, reshape(mc, (B, C, 1, 1)))
    pooled = concat([pool(xc, "avg", "channel"), pool(xc, "max", "channel")])
    ms = sigmoid(conv2d(pooled, p["conv_w"], p["conv_b"]))
    return mul(xc, ms)


def context_memory_update(state, m_prev, ta_params=None, sta_params=None):
    """Condition the memories before a causal LSTM step.

    The temporal memory gets a residual TA term; the spatial memory is
    replaced by its STA output. Either context may be disabled with ``None``.
    """
    c = state.c
    if ta_params is not None:
        c = add(c, temporal_attention(c, ta_params))
    m = m_prev
    if sta_params is not None and m_prev is not None:
        m = sta_attention(m_prev, sta_params)
    return LayerState(state.h, c), m


def ghu_parts(x, z_prev, p):
    _same_grid(x, z_prev)
    zc = z_prev.shape[1]
    pre = conv2d(concat([x, z_prev]), p["w"], p["b"])
    P = tanh(channels(pre, 0, zc))
    S = sigmoid(channels(pre, zc, 2 * zc))
    return P, S


def ghu_forward(x, z_prev, p):
    """Gradient highway: ``z = S * P + (1 - S) * z_prev``."""
    P, S = ghu_parts(x, z_prev, p)
    return add(z_prev, mul(S, sub(P, z_prev)))


def context_lstm_forward(x, state, m_in, p, z_prev=None):
    """One ContextLSTM layer step.

    ``p`` holds the causal LSTM weights plus optional ``"ta"``, ``"sta"`` and
    ``"ghu"`` sub-dicts. Returns ``(state, m_out, z)``; ``z`` is ``None``
    unless this layer carries the gradient highway.
    """
    state, m_in = context_memory_update(state, m_in, p.get("ta"), p.get("sta"))
    state, m_out = causal_lstm_forward(x, state, m_in, p)
    z = None
    if "ghu" in p:
        if z_prev is None:
            raise ShapeError("layer carries a gradient highway but no z_prev was given")
        z = ghu_forward(state.h, z_prev, p["ghu"])
    return state, m_out, z
