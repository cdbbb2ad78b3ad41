"""Biaxial row encoder.

Each row's feature embeddings are refined by a stack of blocks that run
four attention passes over the feature axis (full, grouped, hierarchical
cross-partition, relational) and then aggregate the row into N_CLS
learned class tokens. Padded feature positions and the reserved CLS
slots are masked out of every key set; attention geometry is computed
over the active feature extent so trailing all-padding columns cannot
influence the result.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from . import nn
from .attention import NEG_BIAS
from .autodiff import Tensor, concat


class ConfigError(ValueError):
    pass


def grouped_partition(m_prime: int, groups: int) -> list[tuple[int, int]]:
    """Split [0, m_prime) into `groups` contiguous ranges.

    The first groups-1 ranges have size floor(m_prime/groups); the last
    absorbs the remainder.
    """
    if groups < 1 or groups > m_prime:
        raise ConfigError(f"groups={groups} invalid for {m_prime} positions")
    base = m_prime // groups
    bounds = [i * base for i in range(groups)] + [m_prime]
    return [(bounds[i], bounds[i + 1]) for i in range(groups)]


def hierarchical_partition(m_prime: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Split [0, m_prime) into two halves at ceil(m_prime/2)."""
    if m_prime < 2:
        raise ConfigError("hierarchical partition needs at least 2 positions")
    cut = math.ceil(m_prime / 2)
    return (0, cut), (cut, m_prime)


def reshape_rows(e: Tensor) -> Tensor:
    """[B, n, m', D] -> [(B*n), m', D]; bijective, row-major."""
    b, n, m_p, d = e.shape
    return e.reshape(b * n, m_p, d)


def _key_bias(valid: np.ndarray) -> np.ndarray:
    """[N, L_k] bool -> additive bias [N, 1, L_k] broadcast over queries."""
    return np.where(valid, 0.0, NEG_BIAS).astype(np.float32)[:, None, :]


class BiaxialBlock(nn.Module):
    def __init__(self, dim: int, n_cls: int, heads: int, rng: np.random.Generator,
                 ff_mult: int = 2):
        super().__init__()
        self.ln_std = nn.LayerNorm(dim)
        self.attn_std = nn.MultiHeadAttention(dim, heads, rng)
        self.ln_group = nn.LayerNorm(dim)
        self.attn_group = nn.MultiHeadAttention(dim, heads, rng)
        self.ln_hier = nn.LayerNorm(dim)
        self.attn_hier = nn.MultiHeadAttention(dim, heads, rng)
        self.ln_rel = nn.LayerNorm(dim)
        self.attn_rel = nn.MultiHeadAttention(dim, heads, rng)
        self.ln_cls_q = nn.LayerNorm(dim)
        self.ln_cls_kv = nn.LayerNorm(dim)
        self.attn_cls = nn.MultiHeadAttention(dim, heads, rng)
        self.ln_cls_ff = nn.LayerNorm(dim)
        self.ff_cls = nn.FeedForward(dim, rng, ff_mult)

    def __call__(self, x: Tensor, cls: Tensor, key_valid: np.ndarray,
                 groups: list[tuple[int, int]],
                 hier_split: tuple | None) -> tuple[Tensor, Tensor]:
        """One biaxial pass.

        x: [N, m', D]; cls: [N, n_cls, D]; key_valid: [N, m'] bool marking
        positions usable as attention keys. Query rows with no valid key
        fall back to the residual path (their outputs are never read).
        """
        bias_all = _key_bias(key_valid)

        # 1. full cross-feature self-attention
        x = x + self.attn_std(self.ln_std(x), mask=bias_all, allow_empty_rows=True)

        # 2. local attention within feature groups
        xn = self.ln_group(x)
        parts = []
        for a, b in groups:
            bias = _key_bias(key_valid[:, a:b])
            parts.append(self.attn_group(xn[:, a:b, :], mask=bias, allow_empty_rows=True))
        upd = concat(parts, axis=1)
        if upd.shape[1] < x.shape[1]:  # positions beyond the active extent pass through
            upd = concat([upd, Tensor(np.zeros(
                (x.shape[0], x.shape[1] - upd.shape[1], x.shape[2]), np.float32))], axis=1)
        x = x + upd

        # 3. hierarchical cross-attention between two coarse partitions
        if hier_split is not None:
            (a1, b1), (a2, b2) = hier_split
            xn = self.ln_hier(x)
            p1, p2 = xn[:, a1:b1, :], xn[:, a2:b2, :]
            h1 = x[:, a1:b1, :] + self.attn_hier(
                p1, p2, p2, mask=_key_bias(key_valid[:, a2:b2]), allow_empty_rows=True)
            h1n = self.ln_hier(h1)
            h2 = x[:, a2:b2, :] + self.attn_hier(
                p2, h1n, h1n, mask=_key_bias(key_valid[:, a1:b1]), allow_empty_rows=True)
            tail = [x[:, b2:, :]] if b2 < x.shape[1] else []
            x = concat([h1, h2] + tail, axis=1)

        # 4. relational: full self-attention over the structured features
        x = x + self.attn_rel(self.ln_rel(x), mask=bias_all, allow_empty_rows=True)

        # multi-CLS aggregation over the final feature sequence
        cls = cls + self.attn_cls(self.ln_cls_q(cls), self.ln_cls_kv(x),
                                  mask=bias_all, allow_empty_rows=True)
        cls = cls + self.ff_cls(self.ln_cls_ff(cls))
        return x, cls


class RowEncoder(nn.Module):
    def __init__(self, dim: int, n_cls: int, rng: np.random.Generator, *,
                 heads: int = 4, groups: int = 4, n_blocks: int = 3, ff_mult: int = 2):
        super().__init__()
        if n_blocks < 1:
            raise ConfigError("row encoder needs at least one block")
        self.dim = dim
        self.n_cls = n_cls
        self.groups = groups
        self.cls_tokens = nn.uniform_init(rng, (n_cls, dim), dim)
        self.blocks = nn.ModuleList(
            [BiaxialBlock(dim, n_cls, heads, rng, ff_mult) for _ in range(n_blocks)])

    def encode_rows(self, e: Tensor, d: np.ndarray) -> Tensor:
        """[B, n, m', D] cell embeddings -> [B, n, n_cls*D] row summaries.

        d[b] counts active feature columns of task b; positions outside
        [n_cls, n_cls + d[b]) are excluded from every key set.
        """
        b, n, m_p, dim = e.shape
        d = np.asarray(d, dtype=int)
        x = reshape_rows(e)

        pos = np.arange(m_p)
        valid_task = (pos >= self.n_cls) & (pos[None, :] < self.n_cls + d[:, None])  # [B, m']
        key_valid = np.repeat(valid_task, n, axis=0)  # [(B*n), m']

        # geometry over the active extent, so appended all-padding columns
        # cannot shift group boundaries
        m_eff = int(self.n_cls + d.max())
        g_eff = min(self.groups, m_eff)
        groups = grouped_partition(m_eff, g_eff)
        if m_eff >= 2:
            hier = hierarchical_partition(m_eff)
        else:
            hier = None
            warnings.warn("feature extent < 2: hierarchical pass skipped")

        cls = Tensor(np.zeros((b * n, 1, 1), np.float32)) + self.cls_tokens
        for blk in self.blocks:
            x, cls = blk(x, cls, key_valid, groups, hier)
        return cls.reshape(b, n, self.n_cls * dim)
