import warnings

import numpy as np
import pytest

from ticl.attention import NEG_BIAS
from ticl.autodiff import ContractError, Tensor
from ticl.icl_head import (ClassTree, Decoder, ICLHead, build_class_tree,
                           build_split_mask, flat_probabilities,
                           hierarchical_predict, icl_forward)


def make_head(d_row=8, c_max=4, n_blocks=1, seed=0):
    rng = np.random.default_rng(seed)
    return ICLHead(d_row, c_max, rng, heads=2, n_blocks=n_blocks), Decoder(d_row, c_max, rng)


def test_split_mask_examples():
    m = build_split_mask(3, 2).bias
    assert np.array_equal(m[:, :2], np.zeros((3, 2)))
    assert (m[:, 2] == NEG_BIAS).all()
    m2 = build_split_mask(2, 1).bias
    assert np.array_equal(m2, [[0.0, NEG_BIAS], [0.0, NEG_BIAS]])
    for n, n_train in [(4, 1), (5, 3), (7, 6)]:
        m = build_split_mask(n, n_train).bias
        for s in range(n):
            fully_open = (m[:, s] == 0).all()
            assert fully_open == (s < n_train)


def test_split_mask_contract_errors():
    with pytest.raises(ContractError):
        build_split_mask(3, 0)
    with pytest.raises(ContractError):
        build_split_mask(3, 3)


def test_inject_labels(rng):
    head, _ = make_head()
    r = Tensor(rng.normal(size=(2, 5, 8)).astype(np.float32))
    y = np.array([[0, 1, 2], [3, 0, 1]])
    out = head.inject_labels(r, y)
    assert np.array_equal(out.data[:, 3:], r.data[:, 3:])   # query rows unchanged
    # support rows shifted by the label embedding rows
    for b in range(2):
        for t in range(3):
            want = r.data[b, t] + head.label_proj.data[y[b, t]]
            assert np.allclose(out.data[b, t], want, atol=1e-6)
    # zero projection -> R unchanged everywhere
    head.label_proj.data[:] = 0.0
    assert np.allclose(head.inject_labels(r, y).data, r.data)


def test_inject_labels_one_hot_arithmetic(rng):
    head, _ = make_head(c_max=2)
    head.label_proj.data[:] = 0.0
    head.label_proj.data[1, 1] = 1.0   # identity-like on channel 1
    r = Tensor(np.zeros((1, 3, 8), np.float32))
    out = head.inject_labels(r, np.array([[1, 0]]))
    assert out.data[0, 0, 1] == 1.0
    assert np.abs(out.data[0, 1]).max() == 0.0
    assert np.abs(out.data[0, 2]).max() == 0.0


def test_inject_labels_contract_error(rng):
    head, _ = make_head(c_max=4)
    r = Tensor(rng.normal(size=(1, 3, 8)).astype(np.float32))
    with pytest.raises(ContractError):
        head.inject_labels(r, np.array([[4, 0]]))


def test_query_leakage_and_support_immunity(rng):
    # [DERIVED: perturb-and-compare]
    head, dec = make_head()
    r = Tensor(rng.normal(size=(1, 6, 8)).astype(np.float32))
    n_train = 3
    base = icl_forward(head, dec, r, n_train).data
    r2 = Tensor(r.data.copy())
    r2.data[0, 4] += rng.normal(size=8).astype(np.float32)  # perturb query row 4
    out = icl_forward(head, dec, r2, n_train).data
    assert np.abs(out[0, 4] - base[0, 4]).max() > 1e-6
    others = [0, 1, 2, 3, 5]
    assert np.abs(out[0, others] - base[0, others]).max() < 1e-6


def test_query_permutation_equivariance(rng):
    head, dec = make_head()
    r = rng.normal(size=(1, 7, 8)).astype(np.float32)
    n_train = 3
    base = icl_forward(head, dec, Tensor(r), n_train).data
    perm = n_train + np.random.default_rng(1).permutation(4)
    r2 = r.copy()
    r2[0, n_train:] = r[0, perm]
    out = icl_forward(head, dec, Tensor(r2), n_train).data
    assert np.allclose(out[0, n_train:], base[0, perm], atol=1e-5)


def test_build_class_tree_examples():
    flat = build_class_tree(3, 10)
    assert flat.is_leaf and flat.labels == (0, 1, 2)
    assert build_class_tree(2, 2).is_leaf

    tree = build_class_tree(10, 4)
    assert not tree.is_leaf
    assert [len(c.labels) for c in tree.children] == [3, 3, 2, 2]
    assert all(c.is_leaf for c in tree.children)


def test_class_tree_invariants():
    for c in range(2, 26):
        for c_max in (2, 4, 10):
            tree = build_class_tree(c, c_max)
            leaves = list(tree.leaves())
            covered = sorted(l for leaf in leaves for l in leaf.labels)
            assert covered == list(range(c))          # leaves partition labels

            def walk(node):
                if not node.is_leaf:
                    assert 2 <= len(node.children) <= c_max
                    for ch in node.children:
                        walk(ch)
            walk(tree)
            assert tree.depth <= int(np.ceil(np.log(c) / np.log(c_max))) + 1


def test_hierarchical_predict_hand_example():
    # [DERIVED: hand chain-rule computation] -> [0.45, 0.05, 0.10, 0.40]
    tree = ClassTree((0, 1, 2, 3), children=[ClassTree((0, 1)), ClassTree((2, 3))])
    table = {2: np.array([[0.5, 0.5]]),        # root over 2 children
             0: np.array([[0.9, 0.1]]),
             1: np.array([[0.2, 0.8]])}
    y_support = np.array([0, 1, 2, 3])

    def forward_fn(sel, relabeled, k):
        labels = set(y_support[sel])
        if labels == {0, 1, 2, 3}:
            return table[2]
        if labels == {0, 1}:
            return table[0]
        assert labels == {2, 3}
        return table[1]

    probs = hierarchical_predict(forward_fn, y_support, 1, tree)
    assert np.allclose(probs, [[0.45, 0.05, 0.10, 0.40]], atol=1e-9)
    assert probs.sum() == pytest.approx(1.0, abs=1e-5)


def test_hierarchical_predict_empty_node_uniform():
    tree = ClassTree((0, 1, 2, 3), children=[ClassTree((0, 1)), ClassTree((2, 3))])
    y_support = np.array([0, 1])   # classes 2,3 unsupported

    def forward_fn(sel, relabeled, k):
        out = np.zeros((2, k))
        out[:, 0] = 0.75
        out[:, 1:] = 0.25 / (k - 1)
        return out

    with pytest.warns(UserWarning, match="no support rows"):
        probs = hierarchical_predict(forward_fn, y_support, 2, tree)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    assert np.allclose(probs[:, 2], probs[:, 3])   # uniform spread


def test_flat_probabilities(rng):
    logits = Tensor(rng.normal(size=(3, 6)).astype(np.float32))
    p = flat_probabilities(logits, 4)
    assert p.shape == (3, 4)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert (p >= 0).all()
    uniform = flat_probabilities(logits, 4, temperature=1e9)
    assert np.allclose(uniform, 0.25, atol=1e-4)
    with pytest.raises(ContractError):
        flat_probabilities(logits, 7)


def test_flat_tree_agreement(rng):
    # hierarchical path with C <= C_max equals the flat path exactly
    head, dec = make_head(c_max=4)
    tree = build_class_tree(3, 4)
    assert tree.is_leaf
    r = Tensor(rng.normal(size=(1, 5, 8)).astype(np.float32))
    y_support = np.array([0, 1, 2])
    logits = icl_forward(head, dec, head.inject_labels(r, y_support[None]), 3)
    flat = flat_probabilities(logits[0, 3:, :], 3)

    def forward_fn(sel, relabeled, k):
        rr = Tensor(np.concatenate([r.data[:, :3][:, sel], r.data[:, 3:]], axis=1))
        lg = icl_forward(head, dec, head.inject_labels(rr, relabeled[None]), len(sel))
        return flat_probabilities(lg[0, len(sel):, :], k)

    probs = hierarchical_predict(forward_fn, y_support, 2, tree)
    assert np.array_equal(probs, flat)


def test_end_to_end_gradients_finite(rng):
    from ticl.autodiff import cross_entropy
    from ticl.model import ModelConfig, TableBatch, TabularICLModel
    cfg = ModelConfig(dim=8, n_cls=2, heads=2, c_max=4, groups=2, row_blocks=1,
                      icl_blocks=1, col_blocks=1, n_inducing=4, seed=0)
    model = TabularICLModel(cfg)
    x = rng.normal(size=(1, 6, 3)).astype(np.float32)
    y = rng.integers(0, 2, size=(1, 6))
    batch = TableBatch(x, np.array([3]), y, n_train=4)
    logits = model.forward(batch)
    loss = cross_entropy(logits[0, 4:, :], y[0, 4:])
    loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, f"{name} got no gradient"
        assert np.isfinite(p.grad).all(), f"{name} gradient not finite"
