"""Column-wise set-attention embedder.

Each table column is treated as a permutation-invariant set of row
values. A set transformer over the row axis produces per-cell affine
parameters (W, bias); the cell embedding is x * W + bias. The first
N_CLS feature slots are reserved (skip-valued) to host class tokens
downstream, and a sentinel skip value marks padded/missing cells.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .autodiff import ContractError, Tensor
from .attention import linear_attention

SKIP_VALUE = -1e10


def reserve_cls_slots(x: np.ndarray, n_cls: int, skip_value: float = SKIP_VALUE) -> np.ndarray:
    """Prepend n_cls skip-valued feature slots: [B,n,m] -> [B,n,m+n_cls]."""
    if n_cls < 1:
        raise ContractError("n_cls must be >= 1")
    x = np.asarray(x, dtype=np.float32)
    pad = np.full(x.shape[:-1] + (n_cls,), skip_value, dtype=np.float32)
    return np.concatenate([pad, x], axis=-1)


def skippable_linear(x_padded: np.ndarray, w: Tensor, b: Tensor,
                     skip_value: float, d_src: int) -> Tensor:
    """Scalar affine map that passes skip cells through unchanged.

    Input [B,n,m'] -> output [B,m',n,d_src] (columns outermost), each
    non-skip scalar mapped to w*x + b in every channel.
    """
    xt = np.ascontiguousarray(np.swapaxes(np.asarray(x_padded, np.float32), -1, -2))
    keep = (xt != skip_value).astype(np.float32)
    vals = w * xt + b
    out = vals * keep + skip_value * (1.0 - keep)
    return out.reshape(out.shape + (1,)) * np.ones(d_src, dtype=np.float32)


def embed_cells(x_padded: np.ndarray, w: Tensor, bias: Tensor,
                skip_value: float = SKIP_VALUE) -> Tensor:
    """e[b,t,h] = x[b,t,h] * W[b,t,h] + bias[b,t,h]; skip cells use x = 0."""
    x = np.asarray(x_padded, np.float32)
    x = np.where(x == skip_value, 0.0, x).astype(np.float32)
    return x[..., None] * w + bias


class InducedSetBlock(nn.Module):
    """Set-attention block mediated by learned inducing points.

    Rows first aggregate into the inducing points, which then broadcast
    back to every row; cost is O(n * p) instead of O(n^2).
    """

    def __init__(self, dim: int, heads: int, n_inducing: int,
                 rng: np.random.Generator, ff_mult: int = 2):
        super().__init__()
        self.inducing = nn.uniform_init(rng, (n_inducing, dim), dim)
        self.ln_ind = nn.LayerNorm(dim)
        self.ln_kv = nn.LayerNorm(dim)
        self.attn_in = nn.MultiHeadAttention(dim, heads, rng)
        self.ln_h = nn.LayerNorm(dim)
        self.ff_h = nn.FeedForward(dim, rng, ff_mult)
        self.ln_q = nn.LayerNorm(dim)
        self.ln_h2 = nn.LayerNorm(dim)
        self.attn_out = nn.MultiHeadAttention(dim, heads, rng)
        self.ln_o = nn.LayerNorm(dim)
        self.ff_o = nn.FeedForward(dim, rng, ff_mult)

    def __call__(self, x: Tensor, kv: Tensor) -> Tensor:
        ind = Tensor(np.zeros((x.shape[0], 1, 1), np.float32)) + self.inducing
        h = ind + self.attn_in(self.ln_ind(ind), self.ln_kv(kv))
        h = h + self.ff_h(self.ln_h(h))
        out = x + self.attn_out(self.ln_q(x), self.ln_h2(h))
        return out + self.ff_o(self.ln_o(out))


class LinearAttnSetBlock(nn.Module):
    """Set-attention block using feature-map linear attention over rows."""

    def __init__(self, dim: int, rng: np.random.Generator,
                 feature_map: str = "elu_plus_one", ff_mult: int = 2):
        super().__init__()
        self.feature_map = feature_map
        self.ln_q = nn.LayerNorm(dim)
        self.ln_kv = nn.LayerNorm(dim)
        self.wq = nn.Linear(dim, dim, rng)
        self.wk = nn.Linear(dim, dim, rng)
        self.wv = nn.Linear(dim, dim, rng)
        self.wo = nn.Linear(dim, dim, rng)
        self.ln_o = nn.LayerNorm(dim)
        self.ff = nn.FeedForward(dim, rng, ff_mult)

    def __call__(self, x: Tensor, kv: Tensor) -> Tensor:
        q, kvn = self.ln_q(x), self.ln_kv(kv)
        att = linear_attention(self.wq(q), self.wk(kvn), self.wv(kvn), self.feature_map)
        out = x + self.wo(att)
        return out + self.ff(self.ln_o(out))


class ColumnEmbedder(nn.Module):
    def __init__(self, dim: int, n_cls: int, rng: np.random.Generator, *,
                 heads: int = 4, attn_type: str = "induced", n_inducing: int = 16,
                 n_blocks: int = 2, ff_mult: int = 2,
                 skip_value: float = SKIP_VALUE,
                 attend_support_only: bool = True):
        super().__init__()
        if attn_type not in ("induced", "linear"):
            raise ContractError(f"unknown column attention type {attn_type!r}")
        self.dim = dim
        self.n_cls = n_cls
        self.skip_value = skip_value
        self.attn_type = attn_type
        self.attend_support_only = attend_support_only
        self.scalar_w = Tensor(np.float32(1.0), requires_grad=True)
        self.scalar_b = Tensor(np.float32(0.0), requires_grad=True)
        blocks = []
        for _ in range(n_blocks):
            if attn_type == "induced":
                blocks.append(InducedSetBlock(dim, heads, n_inducing, rng, ff_mult))
            else:
                blocks.append(LinearAttnSetBlock(dim, rng, ff_mult=ff_mult))
        self.blocks = nn.ModuleList(blocks)
        # channel projection ahead of the blocks: the scalar affine yields
        # constant-channel vectors, which pre-LN attention cannot see
        self.in_proj = nn.Linear(dim, dim, rng)
        self.head_w = nn.Linear(dim, dim, rng)
        self.head_b = nn.Linear(dim, dim, rng)

    def column_set_transform(self, src: Tensor, n_train: int,
                             attend_support_only: bool | None = None):
        """Per-column set attention over rows -> per-cell (W, bias).

        src: [B, m', n, D] with skip cells carrying the sentinel value.
        Returns two tensors of shape [B, n, m', D]. Columns never exchange
        information: each is an independent sequence of row values.
        """
        if attend_support_only is None:
            attend_support_only = self.attend_support_only
        b, m_p, n, d = src.shape
        skip_mask = (src.data == self.skip_value)
        x = src * (~skip_mask).astype(np.float32)  # finite stand-in for skip cells
        x = self.in_proj(x.reshape(b * m_p, n, d))
        for blk in self.blocks:
            kv = x[:, :n_train, :] if attend_support_only else x
            x = blk(x, kv)
        w = self.head_w(x).reshape(b, m_p, n, d).swapaxes(1, 2)
        bias = self.head_b(x).reshape(b, m_p, n, d).swapaxes(1, 2)
        return w, bias

    def __call__(self, x_raw: np.ndarray, n_train: int,
                 attend_support_only: bool | None = None) -> Tensor:
        """[B, n, m] raw values -> cell embeddings E [B, n, m+n_cls, D]."""
        x_padded = reserve_cls_slots(x_raw, self.n_cls, self.skip_value)
        src = skippable_linear(x_padded, self.scalar_w, self.scalar_b,
                               self.skip_value, self.dim)
        w, bias = self.column_set_transform(src, n_train, attend_support_only)
        return embed_cells(x_padded, w, bias, self.skip_value)
