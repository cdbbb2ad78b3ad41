"""Attention kernels: masked multi-head softmax attention and linear attention.

Masks are additive biases over (query, key) pairs with entries in
{0, NEG_BIAS}. NEG_BIAS stands in for -inf to keep arithmetic finite.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import NumericsError, ShapeError, Tensor, softmax

NEG_BIAS = -1e9


class MaskError(ValueError):
    """A mask leaves some query row with no attendable key."""


class AttentionMask:
    """Additive attention bias matrix with entries in {0, NEG_BIAS}."""

    def __init__(self, bias: np.ndarray):
        bias = np.asarray(bias, dtype=np.float32)
        if bias.ndim != 2:
            raise ShapeError("attention mask must be a 2-D (query x key) matrix")
        self.bias = bias

    @classmethod
    def from_allowed(cls, allowed: np.ndarray) -> "AttentionMask":
        allowed = np.asarray(allowed, dtype=bool)
        return cls(np.where(allowed, 0.0, NEG_BIAS))

    @property
    def shape(self):
        return self.bias.shape

    def allowed(self) -> np.ndarray:
        return self.bias > NEG_BIAS / 2

    def validate(self):
        if not self.allowed().any(axis=1).all():
            raise MaskError("mask has a fully masked query row")


def _mask_bias(mask) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, AttentionMask):
        return mask.bias
    return np.asarray(mask, dtype=np.float32)


def attention_kernel(q: Tensor, k: Tensor, v: Tensor, mask=None, heads: int = 1,
                     allow_empty_rows: bool = False) -> Tensor:
    """Scaled dot-product multi-head attention on [..., L, D] tensors.

    With allow_empty_rows, query rows whose keys are all masked produce a
    zero output row instead of raising (callers rely on the residual path
    for such positions).
    """
    d = q.shape[-1]
    if d % heads:
        raise ShapeError(f"model dim {d} not divisible by heads {heads}")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"inconsistent attention shapes {q.shape}, {k.shape}, {v.shape}")
    dh = d // heads
    lq, lk = q.shape[-2], k.shape[-2]

    def split(t, length):
        t = t.reshape(t.shape[:-2] + (length, heads, dh))
        return t.swapaxes(-2, -3)  # [..., heads, L, dh]

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    bias = _mask_bias(mask)
    if bias is not None:
        if bias.shape[-1] != lk or bias.shape[-2] not in (1, lq):
            raise ShapeError(f"mask shape {bias.shape} does not match ({lq}, {lk})")
        if bias.ndim > 2:  # broadcast batched masks across the head axis
            bias = np.expand_dims(bias, -3)
        scores = scores + bias
        valid = (bias > NEG_BIAS / 2).any(axis=-1, keepdims=True)
        if not valid.all() and not allow_empty_rows:
            raise MaskError("mask has a fully masked query row")
    weights = softmax(scores, axis=-1)
    if bias is not None and not valid.all():
        weights = weights * valid.astype(np.float32)
    out = weights @ vh
    return out.swapaxes(-2, -3).reshape(q.shape)


def masked_softmax_attention(q: Tensor, k: Tensor, v: Tensor, mask=None,
                             heads: int = 1) -> Tensor:
    """Multi-head attention with an additive {0, -inf} mask over keys."""
    if isinstance(mask, AttentionMask):
        mask.validate()
    return attention_kernel(q, k, v, mask=mask, heads=heads, allow_empty_rows=False)


def elu_plus_one(x: Tensor) -> Tensor:
    return x.elu() + 1.0


_FEATURE_MAPS = {
    "elu_plus_one": elu_plus_one,
    "identity": lambda x: x,
}


def linear_attention(q: Tensor, k: Tensor, v: Tensor,
                     feature_map: str = "elu_plus_one") -> Tensor:
    """Feature-map linear attention in O(L) accumulator form.

    out_t = phi(q_t)^T (sum_s phi(k_s) v_s^T) / (phi(q_t)^T sum_s phi(k_s)).
    """
    try:
        phi = _FEATURE_MAPS[feature_map]
    except KeyError:
        raise ValueError(f"unknown feature map {feature_map!r}") from None
    pq, pk = phi(q), phi(k)
    kv = pk.swapaxes(-1, -2) @ v                      # [..., D, Dv]
    z = pk.sum(axis=-2, keepdims=True)                # [..., 1, D]
    num = pq @ kv                                     # [..., L, Dv]
    den = (pq * z).sum(axis=-1, keepdims=True)        # [..., L, 1]
    if np.abs(den.data).min() < 1e-8:
        raise NumericsError("linear attention normalizer below 1e-8")
    return num / den
