"""Attention primitives.

Three flavors are used by the forecaster: diagonal-masked element-wise
self-attention inside each patch, diagonal-masked patch-wise self-attention
across patches, and unmasked patch-wise cross-attention from decoder
queries onto encoder features.  All of them share one residual block
layout: pre-norm -> attention -> dropout -> residual, then pre-norm ->
feed-forward (dim -> 4*dim -> dim, rectifier) -> dropout -> residual.

Masking is additive: masked logits get a -1e30 sentinel, which keeps every
intermediate finite for the autodiff tape while the post-softmax weight of
a masked cell underflows to exactly 0.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import MaskDegeneracyError, ShapeError
from .tensor import (
    Tensor,
    dropout,
    layer_norm,
    linear,
    parameter,
    relu,
    zeros_parameter,
    ones_parameter,
)

MASK_SENTINEL = -1e30


class MaskKind(Enum):
    NONE = "none"
    DIAGONAL = "diagonal"


@functools.lru_cache(maxsize=32)
def _diagonal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    np.fill_diagonal(m, MASK_SENTINEL)
    m.setflags(write=False)
    return m


@dataclass
class AttentionBlockParams:
    """Projection, feed-forward and norm parameters for one block."""

    dim: int
    dropout: float
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def create(cls, dim: int, dropout_rate: float, rng: np.random.Generator) -> "AttentionBlockParams":
        hidden = 4 * dim
        return cls(
            dim=dim,
            dropout=dropout_rate,
            wq=parameter((dim, dim), rng),
            bq=zeros_parameter((dim,)),
            wk=parameter((dim, dim), rng),
            bk=zeros_parameter((dim,)),
            wv=parameter((dim, dim), rng),
            bv=zeros_parameter((dim,)),
            wo=parameter((dim, dim), rng),
            bo=zeros_parameter((dim,)),
            w1=parameter((dim, hidden), rng),
            b1=zeros_parameter((hidden,)),
            w2=parameter((hidden, dim), rng),
            b2=zeros_parameter((dim,)),
            ln1_gain=ones_parameter((dim,)),
            ln1_bias=zeros_parameter((dim,)),
            ln2_gain=ones_parameter((dim,)),
            ln2_bias=zeros_parameter((dim,)),
        )

    def named(self, prefix: str):
        for field in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                      "w1", "b1", "w2", "b2",
                      "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            yield f"{prefix}.{field}", getattr(self, field)


def _check_sdp_shapes(qs, ks, vs, mask: MaskKind) -> None:
    dh = qs[-1]
    if dh < 1 or ks[-1] != dh or vs[-1] != dh:
        raise ShapeError(f"attention head dims disagree: q{qs} k{ks} v{vs}")
    if ks[-2] != vs[-2]:
        raise ShapeError(f"key/value token counts disagree: k{ks} v{vs}")
    if qs[:-2] != ks[:-2] or ks[:-2] != vs[:-2]:
        raise ShapeError(f"attention batch extents disagree: q{qs} k{ks} v{vs}")
    if mask is MaskKind.DIAGONAL:
        t, tk = qs[-2], ks[-2]
        if t != tk:
            raise ShapeError(f"diagonal mask needs a square score matrix, got {t}x{tk}")
        if t < 2:
            raise MaskDegeneracyError("diagonal mask with a single token masks the whole row")


def sdp_arrays(qd: np.ndarray, kd: np.ndarray, vd: np.ndarray, mask: MaskKind):
    """Attention forward kernel; returns (weights, context)."""
    scale = 1.0 / np.sqrt(qd.shape[-1])
    scores = qd @ np.swapaxes(kd, -1, -2)
    scores *= scale
    if mask is MaskKind.DIAGONAL:
        scores += _diagonal_mask(qd.shape[-2])
    weights = T.softmax_array(scores, axis=-1)
    return weights, weights @ vd


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor,
                       mask: MaskKind = MaskKind.NONE,
                       capture: dict | None = None) -> Tensor:
    """softmax(q k^T / sqrt(Dh) + mask) v, fused into one tape node.

    Leading axes are treated as batch and must agree across q, k, v.  With
    the diagonal mask the score matrix must be square with at least two
    rows, otherwise a whole row would be masked.
    """
    _check_sdp_shapes(q.shape, k.shape, v.shape, mask)
    weights, context = sdp_arrays(q.data, k.data, v.data, mask)
    if capture is not None:
        capture["weights"] = weights.copy()
    scale = 1.0 / np.sqrt(q.shape[-1])

    def grad_fn(g):
        gw = g @ np.swapaxes(v.data, -1, -2)
        gv = np.swapaxes(weights, -1, -2) @ g if v.requires_grad else None
        gs = (gw - (gw * weights).sum(axis=-1, keepdims=True)) * weights
        gs *= scale
        gq = gs @ k.data if q.requires_grad else None
        gk = np.swapaxes(gs, -1, -2) @ q.data if k.requires_grad else None
        return gq, gk, gv

    return T.record_op(context, (q, k, v), grad_fn)


def _block_arrays(xd: np.ndarray, params: AttentionBlockParams,
                  kvd: np.ndarray | None, mask: MaskKind, feed_forward: bool) -> np.ndarray:
    """No-grad block forward on raw arrays; mirrors the tensor path exactly."""
    p = params
    z, _, _ = T.layer_norm_array(xd, p.ln1_gain.data, p.ln1_bias.data, 1e-5)
    src = z if kvd is None else kvd
    q, _ = T.linear_array(z, p.wq.data, p.bq.data)
    k, _ = T.linear_array(src, p.wk.data, p.bk.data)
    v, _ = T.linear_array(src, p.wv.data, p.bv.data)
    _check_sdp_shapes(q.shape, k.shape, v.shape, mask)
    _, attn = sdp_arrays(q, k, v, mask)
    attn, _ = T.linear_array(attn, p.wo.data, p.bo.data)
    h = xd + attn
    if feed_forward:
        f, _, _ = T.layer_norm_array(h, p.ln2_gain.data, p.ln2_bias.data, 1e-5)
        f, _ = T.linear_array(f, p.w1.data, p.b1.data)
        np.maximum(f, 0.0, out=f)
        f, _ = T.linear_array(f, p.w2.data, p.b2.data)
        h = h + f
    return h


def attention_block(x: Tensor, params: AttentionBlockParams, *,
                    kv: Tensor | None = None,
                    mask: MaskKind = MaskKind.NONE,
                    training: bool = False,
                    rng: np.random.Generator | None = None,
                    feed_forward: bool = True,
                    capture: dict | None = None,
                    value_override: Tensor | None = None) -> Tensor:
    """Residual attention block; self-attention when ``kv`` is None.

    ``value_override`` replaces the input of the value projection only and
    exists so the diagonal-exclusion property can be probed on the
    pre-residual output.
    """
    if (not training and capture is None and value_override is None
            and not T.grad_enabled()):
        return Tensor(_block_arrays(x.data, params,
                                    None if kv is None else kv.data,
                                    mask, feed_forward))
    z = layer_norm(x, params.ln1_gain, params.ln1_bias)
    source = z if kv is None else kv
    v_in = source if value_override is None else value_override
    q = linear(z, params.wq, params.bq)
    k = linear(source, params.wk, params.bk)
    v = linear(v_in, params.wv, params.bv)
    attn = scaled_dot_product(q, k, v, mask, capture)
    attn = linear(attn, params.wo, params.bo)
    if capture is not None:
        capture["pre_residual"] = attn.data.copy()
    attn = dropout(attn, params.dropout, training, rng)
    h = x + attn
    if feed_forward:
        f = layer_norm(h, params.ln2_gain, params.ln2_bias)
        f = linear(relu(linear(f, params.w1, params.b1)), params.w2, params.b2)
        f = dropout(f, params.dropout, training, rng)
        h = h + f
    return h


def dm_element_wise_self_attention(x: Tensor, params: AttentionBlockParams, *,
                                   mask: MaskKind = MaskKind.DIAGONAL,
                                   training: bool = False,
                                   rng: np.random.Generator | None = None,
                                   feed_forward: bool = True,
                                   capture: dict | None = None,
                                   value_override: Tensor | None = None) -> Tensor:
    """Self-attention among the elements inside each patch.

    ``x`` is [..., S, P, D]; attention runs over the P tokens of every
    patch independently, so no information flows between patches.
    """
    if x.ndim < 3:
        raise ShapeError(f"element attention expects [..., S, P, D], got {x.shape}")
    return attention_block(x, params, mask=mask, training=training, rng=rng,
                           feed_forward=feed_forward, capture=capture,
                           value_override=value_override)


def dm_patch_wise_self_attention(x: Tensor, params: AttentionBlockParams, *,
                                 mask: MaskKind = MaskKind.DIAGONAL,
                                 training: bool = False,
                                 rng: np.random.Generator | None = None,
                                 feed_forward: bool = True,
                                 capture: dict | None = None,
                                 value_override: Tensor | None = None) -> Tensor:
    """Self-attention among S patch tokens of feature dimension P*D."""
    if x.ndim < 2:
        raise ShapeError(f"patch attention expects [..., S, PD], got {x.shape}")
    return attention_block(x, params, mask=mask, training=training, rng=rng,
                           feed_forward=feed_forward, capture=capture,
                           value_override=value_override)


def patch_wise_cross_attention(query: Tensor, source: Tensor,
                               params: AttentionBlockParams, *,
                               training: bool = False,
                               rng: np.random.Generator | None = None,
                               feed_forward: bool = True,
                               capture: dict | None = None) -> Tensor:
    """Decoder patches attend over encoder patches; never masked."""
    if query.shape[-1] != source.shape[-1]:
        raise ShapeError(
            f"cross attention feature dims disagree: query {query.shape} vs source {source.shape}"
        )
    return attention_block(query, params, kv=source, mask=MaskKind.NONE,
                           training=training, rng=rng, feed_forward=feed_forward,
                           capture=capture)


def format_float(x: float) -> str:
    """17-significant-digit decimal rendering used by all file outputs."""
    return f"{x:.17g}"


def write_scores_csv(path, weights: np.ndarray) -> None:
    """Write a post-softmax weight tensor as a row-major CSV matrix.

    Stacked per-patch matrices [S, T, T] are flattened to S*T rows so every
    CSV row is one softmax row.
    """
    arr = np.asarray(weights)
    mat = arr.reshape(-1, arr.shape[-1])
    with open(path, "w", encoding="utf-8") as fh:
        for row in mat:
            fh.write(",".join(format_float(x) for x in row))
            fh.write("\n")
