"""Multi-head attention with low-rank bypass adapters on Q and V.

A bypass is a trainable pair W1 (in x r) and W2 (r x out) added in parallel
to a frozen base projection: y = x.W1.W2 + x.W.  W2 starts at zero, so an
injected layer is exactly the base layer until training moves W2.  K never
carries a bypass, and neither do the decoder's cross-attention projections.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class BypassLinear:
    """Base projection W (+ bias) with an optional low-rank bypass W1.W2."""

    W: Tensor
    b: Tensor
    W1: Optional[Tensor] = None
    W2: Optional[Tensor] = None
    r: int = 0
    enabled: bool = False

    def __post_init__(self):
        if self.enabled:
            if self.W1 is None or self.W2 is None:
                raise ShapeError("enabled bypass requires W1 and W2")
            if self.W1.shape[1] != self.r or self.W2.shape[0] != self.r:
                raise ShapeError("bypass inner extents must equal r")
            if self.W1.shape[0] != self.W.shape[0] or self.W2.shape[1] != self.W.shape[1]:
                raise ShapeError("bypass outer extents must match W")


@dataclass
class AttentionParams:
    heads: int
    d_k: int
    q_proj: BypassLinear
    k_proj: BypassLinear  # never has a bypass
    v_proj: BypassLinear
    out_proj: BypassLinear  # plain linear
    window: Optional[int] = None

    def __post_init__(self):
        if self.k_proj.enabled:
            raise ShapeError("K projection must not carry a bypass")


def bypass_linear_forward(x: Tensor, p: BypassLinear) -> Tensor:
    """x.W + b, plus x.W1.W2 when the bypass is enabled.

    The base term is computed with an identical op sequence whether or not
    the bypass participates, so a zero W2 reproduces the base output bit for
    bit.
    """
    if x.shape[-1] != p.W.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} != W rows {p.W.shape[0]}")
    flat = x
    lead = x.shape[:-1]
    if x.data.ndim != 2:
        flat = T.reshape(x, (int_prod(lead), x.shape[-1]))
    base = T.add(T.matmul(flat, p.W), p.b)
    if p.enabled:
        out = T.add(base, T.matmul(T.matmul(flat, p.W1), p.W2))
    else:
        out = base
    if x.data.ndim != 2:
        out = T.reshape(out, (*lead, p.W.shape[1]))
    return out


def int_prod(shape) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n


def window_partition(x: Tensor, window: int) -> Tensor:
    """[h, w, d] -> [nw, window, window, d] (row-major tile order).

    A leading batch axis is allowed: [b, h, w, d] -> [b*nw, window, window, d].
    """
    if x.data.ndim == 3:
        h, w, d = x.shape
        lead = ()
    elif x.data.ndim == 4:
        b, h, w, d = x.shape
        lead = (b,)
    else:
        raise ShapeError(f"expected rank 3 or 4, got {x.shape}")
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} not divisible by window {window}")
    nh, nw = h // window, w // window
    L = len(lead)
    y = T.reshape(x, (*lead, nh, window, nw, window, d))
    y = T.transpose(y, (*range(L), L, L + 2, L + 1, L + 3, L + 4))
    return T.reshape(y, (int_prod(lead) * nh * nw, window, window, d))


def window_merge(tiles: Tensor, h: int, w: int, batch: Optional[int] = None) -> Tensor:
    """Inverse of window_partition back to [h, w, d] (or [batch, h, w, d])."""
    _, window, _, d = tiles.shape
    nh, nw = h // window, w // window
    lead = () if batch is None else (batch,)
    L = len(lead)
    y = T.reshape(tiles, (*lead, nh, nw, window, window, d))
    y = T.transpose(y, (*range(L), L, L + 2, L + 1, L + 3, L + 4))
    return T.reshape(y, (*lead, h, w, d))


def _split_heads(x: Tensor, heads: int, d_k: int) -> Tensor:
    # [.., t, heads*d_k] -> [.., heads, t, d_k]
    *lead, t, d = x.shape
    L = len(lead)
    y = T.reshape(x, (*lead, t, heads, d_k))
    return T.transpose(y, (*range(L), L + 1, L, L + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, t, d_k = x.shape
    L = len(lead)
    y = T.transpose(x, (*range(L), L + 1, L, L + 2))
    return T.reshape(y, (*lead, t, heads * d_k))


def attention_tokens(x: Tensor, p: AttentionParams, kv: Optional[Tensor] = None) -> Tensor:
    """Scaled dot-product attention over token sequences [.., t, dim].

    kv supplies the key/value source for cross-attention; self-attention
    when omitted.  Per head: softmax(Q.K^T / sqrt(d_k)).V, heads concatenated,
    then the output projection.
    """
    src = x if kv is None else kv
    q = _split_heads(bypass_linear_forward(x, p.q_proj), p.heads, p.d_k)
    k = _split_heads(bypass_linear_forward(src, p.k_proj), p.heads, p.d_k)
    v = _split_heads(bypass_linear_forward(src, p.v_proj), p.heads, p.d_k)
    kt_perm = tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)
    scores = T.scale(T.matmul(q, T.transpose(k, kt_perm)), 1.0 / (p.d_k ** 0.5))
    att = T.softmax(scores, axis=-1)
    out = _merge_heads(T.matmul(att, v))
    return bypass_linear_forward(out, p.out_proj)


def attention_forward(x: Tensor, p: AttentionParams) -> Tensor:
    """Self-attention over [t, d], [h, w, d], or batched [b, h, w, d] grids.

    Grid inputs run windowed attention when p.window is set (independent
    attention inside each window tile), global attention otherwise.
    """
    if x.data.ndim == 2:
        return attention_tokens(x, p)
    if x.data.ndim == 3:
        h, w, d = x.shape
        batch = None
    elif x.data.ndim == 4:
        batch, h, w, d = x.shape
    else:
        raise ShapeError(f"expected rank 2-4, got {x.shape}")
    if p.window is not None:
        tiles = window_partition(x, p.window)
        tok = T.reshape(tiles, (tiles.shape[0], p.window * p.window, d))
        tok = attention_tokens(tok, p)
        tiles = T.reshape(tok, (tok.shape[0], p.window, p.window, d))
        return window_merge(tiles, h, w, batch)
    lead = (h * w,) if batch is None else (batch, h * w)
    tok = attention_tokens(T.reshape(x, (*lead, d)), p)
    out_shape = (h, w, d) if batch is None else (batch, h, w, d)
    return T.reshape(tok, out_shape)
