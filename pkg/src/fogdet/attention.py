"""Attention variants: scaled dot-product self-attention, multi-head and
cross attention, fog-scaled attention, and the dual-stream fusion layer.

All functions are pure: they consume immutable token tensors and parameter
records and return new tensors on the autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the shared output projection."""

    w_q: list[Tensor]          # h tensors of shape (d, d_k)
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor                # (h*d_k, d)
    heads: int
    d_k: int

    def __post_init__(self):
        if len(self.w_q) != self.heads or len(self.w_k) != self.heads \
                or len(self.w_v) != self.heads:
            raise ShapeError("per-head projection count must equal head count")
        if self.w_o.shape[0] != self.heads * self.d_k:
            raise ShapeError(
                f"w_o first dim {self.w_o.shape[0]} != heads*d_k "
                f"{self.heads * self.d_k}")

    def tensors(self) -> list[Tensor]:
        return [*self.w_q, *self.w_k, *self.w_v, self.w_o]


@dataclass
class WeatherScalarParams:
    """Linear projection of the auxiliary fog stream to one scalar per token."""

    w_t: Tensor                # (d, 1)
    squash: bool = True        # sigmoid the raw projection to (0, 1)

    def __post_init__(self):
        if self.w_t.shape[1] != 1:
            raise ShapeError(f"weather projection must map to 1 dim, got {self.w_t.shape}")


def init_attention_params(rng: np.random.Generator, d: int, heads: int = 1,
                          d_k: int | None = None) -> AttentionParams:
    """Gaussian init scaled by 1/sqrt(fan-in)."""
    if d_k is None:
        d_k = d // heads
    s_in = 1.0 / math.sqrt(d)
    s_out = 1.0 / math.sqrt(heads * d_k)
    mk = lambda rows, cols, s: Tensor(rng.normal(0.0, s, (rows, cols)),
                                      requires_grad=True)
    return AttentionParams(
        w_q=[mk(d, d_k, s_in) for _ in range(heads)],
        w_k=[mk(d, d_k, s_in) for _ in range(heads)],
        w_v=[mk(d, d_k, s_in) for _ in range(heads)],
        w_o=mk(heads * d_k, d, s_out),
        heads=heads,
        d_k=d_k,
    )


def _head(q_in: Tensor, k_in: Tensor, v_in: Tensor,
          w_q: Tensor, w_k: Tensor, w_v: Tensor,
          v_w: Tensor | None, broadcast_axis: str) -> Tensor:
    """One attention head; v_w scales the pre-softmax logits elementwise."""
    q = ad.matmul(q_in, w_q)
    k = ad.matmul(k_in, w_k)
    v = ad.matmul(v_in, w_v)
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(w_q.shape[1]))
    if v_w is not None:
        if v_w.shape[0] != k_in.shape[0]:
            raise ShapeError(
                f"weather scalar length {v_w.shape[0]} != token count {k_in.shape[0]}")
        if broadcast_axis == "key":
            logits = ad.mul(logits, ad.transpose(v_w))   # scale column j by v_w[j]
        elif broadcast_axis == "query":
            logits = ad.mul(logits, v_w)                 # scale row i by v_w[i]
        else:
            raise ValueError(f"unknown broadcast axis {broadcast_axis!r}")
    attn = ad.softmax_rows(logits)
    return ad.matmul(attn, v)


def self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Single-head softmax(QK^T / sqrt(d_k)) V. Requires p.heads == 1."""
    if p.heads != 1:
        raise ShapeError("self_attention is the single-head form; use "
                         "multi_head_attention for h > 1")
    return _head(x, x, x, p.w_q[0], p.w_k[0], p.w_v[0], None, "key")


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor,
                         p: AttentionParams,
                         v_w: Tensor | None = None,
                         broadcast_axis: str = "key") -> Tensor:
    """Concat of per-head attentions projected by w_o.

    With q_in == k_in == v_in this is multi-head self-attention; with a
    distinct q_in it is cross-attention. An optional weather scalar v_w
    rescales every head's logits before the softmax.
    """
    if k_in.shape[0] != v_in.shape[0]:
        raise ShapeError(
            f"key/value token counts differ: {k_in.shape} vs {v_in.shape}")
    heads = [_head(q_in, k_in, v_in, p.w_q[i], p.w_k[i], p.w_v[i],
                   v_w, broadcast_axis)
             for i in range(p.heads)]
    cat = heads[0] if p.heads == 1 else ad.concat(heads, axis=1)
    return ad.matmul(cat, p.w_o)


def weather_scalar(fog_stream: Tensor, w: WeatherScalarParams) -> Tensor:
    """Per-token fog modulation value from the auxiliary stream.

    The squashed form bounds the multiplicative logit scaling to (0, 1);
    the raw form reproduces the unstable unbounded variant.
    """
    raw = ad.matmul(fog_stream, w.w_t)
    return ad.sigmoid(raw) if w.squash else raw


def fog_aware_attention(x: Tensor, v_w: Tensor, p: AttentionParams,
                        broadcast_axis: str = "key") -> Tensor:
    """Single-head attention with logits scaled elementwise by v_w.

    Default broadcast is along the key axis: column j of the logit matrix
    is multiplied by v_w[j], so heavily fogged tokens attract less
    attention from everyone. v_w == 1 reduces exactly to self_attention.
    """
    if p.heads != 1:
        raise ShapeError("fog_aware_attention is single-head")
    return _head(x, x, x, p.w_q[0], p.w_k[0], p.w_v[0], v_w, broadcast_axis)


@dataclass
class FusionParams:
    """Dual-stream fusion layer: two self-attentions, one cross, then norm."""

    p_img: AttentionParams
    p_fog: AttentionParams
    p_cross: AttentionParams
    ln_gain: Tensor            # (d,)
    ln_bias: Tensor            # (d,)
    eps: float = 1e-5

    def tensors(self) -> list[Tensor]:
        return (self.p_img.tensors() + self.p_fog.tensors()
                + self.p_cross.tensors() + [self.ln_gain, self.ln_bias])


def init_fusion_params(rng: np.random.Generator, d: int,
                       heads: int = 1) -> FusionParams:
    return FusionParams(
        p_img=init_attention_params(rng, d, heads),
        p_fog=init_attention_params(rng, d, heads),
        p_cross=init_attention_params(rng, d, heads),
        ln_gain=Tensor(np.ones(d), requires_grad=True),
        ln_bias=Tensor(np.zeros(d), requires_grad=True),
    )


def fusion_encoder_layer(x_img: Tensor, x_fog: Tensor, p: FusionParams) -> Tensor:
    """Refine each stream with self-attention, let the clear stream query the
    foggy one through cross-attention, then fuse with residual + norm."""
    if x_img.shape != x_fog.shape:
        raise ShapeError(
            f"stream shapes differ: {x_img.shape} vs {x_fog.shape}")
    e_img = multi_head_attention(x_img, x_img, x_img, p.p_img)
    e_fog = multi_head_attention(x_fog, x_fog, x_fog, p.p_fog)
    e_cross = multi_head_attention(e_img, e_fog, e_fog, p.p_cross)
    return ad.layer_norm(ad.add(e_img, e_cross), p.ln_gain, p.ln_bias, p.eps)


def sinusoidal_positions(n: int, d: int) -> Tensor:
    """Fixed sine/cosine position table, entries in [-1, 1]."""
    if d % 2 != 0:
        raise ValueError(f"positional encoding needs even width, got {d}")
    pos = np.arange(n)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(d // 2) / (d // 2))
    table = np.empty((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return Tensor(table)
