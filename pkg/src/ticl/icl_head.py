"""Label-aware in-context learner.

Support labels are embedded and added to support row representations;
a row-axis transformer with a split attention mask (support rows see
only support rows, query rows see only support rows) produces per-row
states, and an MLP decoder maps them to class logits. Tasks with more
classes than the decoder width are routed through a hierarchical class
tree combined by the probability chain rule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .attention import AttentionMask, NEG_BIAS
from .autodiff import ContractError, Tensor, concat, gather_rows, softmax


def build_split_mask(n: int, n_train: int) -> AttentionMask:
    """Every row may attend exactly to the support rows (keys < n_train)."""
    if not 1 <= n_train < n:
        raise ContractError(f"need 1 <= n_train < n, got n_train={n_train}, n={n}")
    bias = np.full((n, n), NEG_BIAS, dtype=np.float32)
    bias[:, :n_train] = 0.0
    return AttentionMask(bias)


class ICLBlock(nn.Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ff_mult: int = 2):
        super().__init__()
        self.ln_attn = nn.LayerNorm(dim)
        self.attn = nn.MultiHeadAttention(dim, heads, rng)
        self.ln_ff = nn.LayerNorm(dim)
        self.ff = nn.FeedForward(dim, rng, ff_mult)

    def __call__(self, x: Tensor, mask: AttentionMask) -> Tensor:
        x = x + self.attn(self.ln_attn(x), mask=mask.bias)
        return x + self.ff(self.ln_ff(x))


class Decoder(nn.Module):
    def __init__(self, d_row: int, c_max: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = nn.Linear(d_row, d_row, rng)
        self.fc2 = nn.Linear(d_row, c_max, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class ICLHead(nn.Module):
    def __init__(self, d_row: int, c_max: int, rng: np.random.Generator, *,
                 heads: int = 4, n_blocks: int = 3, ff_mult: int = 2):
        super().__init__()
        self.d_row = d_row
        self.c_max = c_max
        self.label_proj = nn.uniform_init(rng, (c_max, d_row), c_max)
        self.blocks = nn.ModuleList(
            [ICLBlock(d_row, heads, rng, ff_mult) for _ in range(n_blocks)])

    def inject_labels(self, r: Tensor, y_train: np.ndarray) -> Tensor:
        """Add embedded support labels to the first n_train rows of R.

        r: [B, n, D_row]; y_train: [B, n_train] ints < c_max.
        """
        y = np.asarray(y_train)
        if y.ndim != 2 or y.shape[0] != r.shape[0]:
            raise ContractError(f"y_train shape {y.shape} inconsistent with R {r.shape}")
        n_train = y.shape[1]
        if n_train >= r.shape[1]:
            raise ContractError("support rows must leave at least one query row")
        if y.min() < 0 or y.max() >= self.c_max:
            raise ContractError(
                f"support label outside [0, {self.c_max}); remap through a class tree")
        emb = gather_rows(self.label_proj, y.reshape(-1)).reshape(
            r.shape[0], n_train, self.d_row)
        return concat([r[:, :n_train, :] + emb, r[:, n_train:, :]], axis=1)

    def encode(self, r: Tensor, n_train: int) -> Tensor:
        mask = build_split_mask(r.shape[1], n_train)
        for blk in self.blocks:
            r = blk(r, mask)
        return r


def icl_forward(head: ICLHead, decoder: Decoder, r_injected: Tensor,
                n_train: int) -> Tensor:
    """Label-injected rows -> logits [B, n, c_max]."""
    return decoder(head.encode(r_injected, n_train))


# ----------------------------------------------------------------------
# hierarchical classification tree
# ----------------------------------------------------------------------

@dataclass
class ClassTree:
    labels: tuple[int, ...]                      # sorted original label ids
    children: list["ClassTree"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def depth(self) -> int:
        return 1 if self.is_leaf else 1 + max(c.depth for c in self.children)

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            for c in self.children:
                yield from c.leaves()


def build_class_tree(n_classes: int, c_max: int) -> ClassTree:
    """Recursively group sorted labels into contiguous, size-balanced
    subsets of arity <= c_max; a node with <= c_max labels is a leaf."""
    if n_classes < 2 or c_max < 2:
        raise ContractError("need n_classes >= 2 and c_max >= 2")

    def make(labels: tuple[int, ...]) -> ClassTree:
        if len(labels) <= c_max:
            return ClassTree(labels)
        base, rem = divmod(len(labels), c_max)
        sizes = [base + (1 if i < rem else 0) for i in range(c_max)]
        node = ClassTree(labels)
        start = 0
        for s in sizes:
            node.children.append(make(labels[start:start + s]))
            start += s
        return node

    return make(tuple(range(n_classes)))


def hierarchical_predict(forward_fn, y_support: np.ndarray, n_query: int,
                         tree: ClassTree) -> np.ndarray:
    """Chain-rule probabilities over all original classes.

    forward_fn(support_row_ids, remapped_labels, n_classes) must run the
    model with the given subset of support rows (ids index into
    y_support) against the fixed query set and return probabilities of
    shape [n_query, n_classes]. Support rows whose labels fall outside a
    node's subset are dropped before recursing. A node left with no
    support rows spreads its parent-assigned mass uniformly.
    """
    y_support = np.asarray(y_support)
    n_classes = len(tree.labels)
    out = np.zeros((n_query, n_classes), dtype=np.float64)

    def spread(node: ClassTree, mass: np.ndarray):
        labels = list(node.labels)
        out[:, labels] += mass[:, None] / len(labels)

    def recurse(node: ClassTree, mass: np.ndarray):
        subset = np.asarray(node.labels)
        sel = np.flatnonzero(np.isin(y_support, subset))
        if node.is_leaf:
            if len(subset) == 1:
                out[:, subset[0]] += mass
                return
            if sel.size == 0:
                warnings.warn("class-tree node has no support rows; assigning uniform mass")
                spread(node, mass)
                return
            remap = {c: i for i, c in enumerate(node.labels)}
            relabeled = np.array([remap[c] for c in y_support[sel]])
            probs = forward_fn(sel, relabeled, len(subset))
            out[:, subset] += mass[:, None] * probs
            return
        if sel.size == 0:
            warnings.warn("class-tree node has no support rows; assigning uniform mass")
            spread(node, mass)
            return
        child_of = {}
        for j, child in enumerate(node.children):
            for c in child.labels:
                child_of[c] = j
        relabeled = np.array([child_of[c] for c in y_support[sel]])
        probs = forward_fn(sel, relabeled, len(node.children))
        for j, child in enumerate(node.children):
            recurse(child, mass * probs[:, j])

    recurse(tree, np.ones(n_query, dtype=np.float64))
    return out


def flat_probabilities(logits: Tensor, n_classes: int, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the first n_classes logits only."""
    if n_classes > logits.shape[-1]:
        raise ContractError("n_classes exceeds decoder width")
    return softmax(logits[..., :n_classes] * (1.0 / temperature), axis=-1).data
