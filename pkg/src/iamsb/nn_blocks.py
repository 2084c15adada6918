"""Reusable neural blocks: multi-head attention, SwiGLU feed-forward, and
the bounded three-way decode head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class BlockError(ValueError):
    pass


@dataclass
class MhaParams:
    """Square projections for multi-head attention over channel width C."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        c = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (c, c):
                raise BlockError("mha-shape: projection weights must be square CxC")
        if c % self.heads != 0:
            raise BlockError("mha-shape: channel width not divisible by head count")


@dataclass
class FfnParams:
    """SwiGLU weights: w1, w2 are C x d_ff, w3 is d_ff x C."""

    w1: Tensor
    w2: Tensor
    w3: Tensor


@dataclass
class HeadParams:
    """Fully-connected map C -> 3 producing (start, duration, confidence)."""

    w: Tensor
    b: Tensor


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-8


def ffn_dim(channels: int, alpha: float = 8.0 / 3.0) -> int:
    """Intermediate width, rounded to the nearest integer >= 1."""
    return max(1, int(round(alpha * channels)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (L, C) -> (H, L, d)
    length, c = x.shape
    return nm.moveaxis(nm.reshape(x, (length, heads, c // heads)), 0, 1)


def _merge_heads(x: Tensor) -> Tensor:
    # (H, L, d) -> (L, C)
    h, length, d = x.shape
    return nm.reshape(nm.moveaxis(x, 0, 1), (length, h * d))


def mha(q: Tensor, k: Tensor, v: Tensor, p: MhaParams) -> Tensor:
    """Scaled dot-product attention with per-head 1/sqrt(d) scaling.

    q is L_q x C, k and v are L_k x C; the output is L_q x C.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise BlockError("mha-shape: inputs must be 2-D token matrices")
    c = p.wq.shape[0]
    if q.shape[1] != c or k.shape[1] != c or v.shape[1] != c:
        raise BlockError("mha-shape: channel width mismatch with parameters")
    if k.shape[0] != v.shape[0] or k.shape[0] < 1:
        raise BlockError("mha-shape: keys and values must align and be non-empty")
    kh = _split_heads(nm.matmul(k, p.wk), p.heads)
    vh = _split_heads(nm.matmul(v, p.wv), p.heads)
    return mha_projected(q, kh, vh, p)


def mha_projected(q: Tensor, kh: Tensor, vh: Tensor, p: MhaParams) -> Tensor:
    """Attention against pre-projected per-head keys/values (H, L_k, d).

    Lets callers that read the same memory twice through shared K/V weights
    project it once per step.
    """
    c = p.wq.shape[0]
    d = c // p.heads
    qh = _split_heads(nm.matmul(q, p.wq), p.heads)
    scores = nm.matmul(qh, nm.moveaxis(kh, 1, 2)) * (1.0 / np.sqrt(d))
    att = nm.softmax(scores, axis=-1)
    out = _merge_heads(nm.matmul(att, vh))
    return nm.matmul(out, p.wo)


def project_kv(x: Tensor, p: MhaParams) -> tuple[Tensor, Tensor]:
    """Per-head key/value projections of a token matrix."""
    return (_split_heads(nm.matmul(x, p.wk), p.heads),
            _split_heads(nm.matmul(x, p.wv), p.heads))


def mha_per_query(q: Tensor, kv: Tensor, p: MhaParams) -> Tensor:
    """Attention where each query row attends only to its own key/value set.

    q is N x C and kv is N x k x C; row n of the output reads kv[n] alone.
    """
    if q.ndim != 2 or kv.ndim != 3:
        raise BlockError("mha-shape: per-query attention expects 2-D q, 3-D kv")
    n, c = q.shape
    if kv.shape[0] != n:
        raise BlockError("witness-misalign: one witness set per query row required")
    if kv.shape[2] != c or c != p.wq.shape[0]:
        raise BlockError("mha-shape: channel width mismatch with parameters")
    heads, d = p.heads, c // p.heads
    kcount = kv.shape[1]
    qp = nm.reshape(nm.matmul(q, p.wq), (n * heads, 1, d))
    kv2 = nm.reshape(kv, (n * kcount, c))
    kp = nm.matmul(kv2, p.wk)
    vp = nm.matmul(kv2, p.wv)
    # (N, k, H, d) -> (N, H, k, d) -> (N*H, k, d)
    kp = nm.reshape(nm.moveaxis(nm.reshape(kp, (n, kcount, heads, d)), 1, 2), (n * heads, kcount, d))
    vp = nm.reshape(nm.moveaxis(nm.reshape(vp, (n, kcount, heads, d)), 1, 2), (n * heads, kcount, d))
    scores = nm.matmul(qp, nm.moveaxis(kp, 1, 2)) * (1.0 / np.sqrt(d))
    att = nm.softmax(scores, axis=-1)
    out = nm.matmul(att, vp)  # (N*H, 1, d)
    out = nm.reshape(out, (n, heads * d))
    return nm.matmul(out, p.wo)


def swiglu_ffn(x: Tensor, p: FfnParams) -> Tensor:
    """(SiLU(x w1) * (x w2)) w3."""
    gate = nm.silu(nm.matmul(x, p.w1))
    return nm.matmul(nm.mul(gate, nm.matmul(x, p.w2)), p.w3)


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return nm.layer_norm(x, p.gain, p.bias, p.eps)


def phi(x: Tensor) -> Tensor:
    """Bounded squash 0.5 * (1 + tanh x), strictly inside (0, 1)."""
    return (nm.tanh(x) + 1.0) * 0.5


DEGENERATE_DURATION = 1e-4


@dataclass
class DecodedEvents:
    """Differentiable decode of a latent block: per token (start, dur, conf).

    The tensors stay attached to the graph for the loss; ``triples`` gives
    plain floats for matching and metrics, with degenerate durations
    (dur <= 1e-4) rejected by forcing their confidence to zero.
    """

    start: Tensor
    dur: Tensor
    conf: Tensor

    def __len__(self) -> int:
        return self.start.size

    def triples(self) -> list[tuple[float, float, float]]:
        out = []
        for s, l, c in zip(self.start.data, self.dur.data, self.conf.data):
            conf = 0.0 if l <= DEGENERATE_DURATION else float(c)
            out.append((float(s), float(l), conf))
        return out


def head_decode(z: Tensor, p: HeadParams) -> DecodedEvents:
    """Affine map to 3 outputs per token, squashed by phi into [0, 1]."""
    if z.ndim != 2 or z.shape[0] < 1:
        raise BlockError("head-shape: decode expects a non-empty N x C block")
    raw = nm.add(nm.matmul(z, p.w), p.b)
    y = phi(raw)
    return DecodedEvents(
        start=nm.gather(nm.moveaxis(y, 0, 1), np.intp(0)),
        dur=nm.gather(nm.moveaxis(y, 0, 1), np.intp(1)),
        conf=nm.gather(nm.moveaxis(y, 0, 1), np.intp(2)),
    )
