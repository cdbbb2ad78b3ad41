"""Support/query episode construction and streaming.

Episodes are carved from tables either by stratified random splits or by
a greedy relevance-diversity rule over kNN distances. Labels are
remapped per episode to dense 0..C-1 ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .column_embedder import SKIP_VALUE
from .model import TableBatch


class EpisodeError(ValueError):
    pass


@dataclass
class Episode:
    x: np.ndarray                 # [n_rows, m] source table values
    support_indices: np.ndarray   # ordered row ids into x
    query_indices: np.ndarray
    y_support: np.ndarray         # dense remapped labels
    y_query: np.ndarray
    classes: np.ndarray           # original label ids, position = dense id
    source: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.support_indices)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def rows(self) -> np.ndarray:
        """Episode table with support rows first."""
        return np.concatenate([self.x[self.support_indices],
                               self.x[self.query_indices]], axis=0)

    def labels(self) -> np.ndarray:
        return np.concatenate([self.y_support, self.y_query])


def _remap(classes: np.ndarray, y: np.ndarray) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[v] for v in y], dtype=int)


def _check_sizes(n, n_support, n_query, n_classes):
    if n_support + n_query > n:
        raise EpisodeError(f"{n_support}+{n_query} rows requested from a {n}-row table")
    if n_support < n_classes:
        raise EpisodeError(f"support size {n_support} below class count {n_classes}")


def make_episode_random(x, y, n_support: int, n_query: int, seed: int) -> Episode:
    """Stratified random split: support covers every class."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=int)
    classes = np.unique(y)
    _check_sizes(len(x), n_support, n_query, len(classes))
    rng = np.random.default_rng(seed)
    support = []
    for c in classes:
        rows = np.flatnonzero(y == c)
        if rows.size == 0:
            raise EpisodeError(f"class {c} has no rows")
        support.append(rng.choice(rows))
    remaining = np.setdiff1d(np.arange(len(x)), support)
    extra = rng.choice(remaining, size=n_support - len(classes), replace=False)
    support = np.sort(np.concatenate([np.asarray(support), extra]).astype(int))
    pool = np.setdiff1d(np.arange(len(x)), support)
    query = np.sort(rng.choice(pool, size=n_query, replace=False).astype(int))
    return Episode(x, support, query,
                   _remap(classes, y[support]), _remap(classes, y[query]),
                   classes, source={"mode": "random", "seed": int(seed)})


def _standardize(rows: np.ndarray) -> np.ndarray:
    mu = rows.mean(axis=0)
    sd = rows.std(axis=0)
    return (rows - mu) / np.where(sd < 1e-9, 1.0, sd)


def greedy_knn_select(x_candidates, y_candidates, x_queries, n_support: int,
                      alpha: float = 0.5) -> np.ndarray:
    """Greedy relevance-diversity support selection.

    score(c) = -alpha * meanDist(c, queries) + (1-alpha) * minDist(c, chosen);
    the first pick per class is reserved to guarantee class coverage.
    Distances are Euclidean on features standardized over the candidate
    and query rows passed in. Returns sorted positions into x_candidates.
    """
    x_candidates = np.asarray(x_candidates, dtype=np.float32)
    x_queries = np.asarray(x_queries, dtype=np.float32)
    y_candidates = np.asarray(y_candidates, dtype=int)
    classes = np.unique(y_candidates)
    if n_support < len(classes) or n_support > len(x_candidates):
        raise EpisodeError(
            f"support size {n_support} outside [{len(classes)}, {len(x_candidates)}]")

    z = _standardize(np.concatenate([x_candidates, x_queries], axis=0))
    zc, zq = z[:len(x_candidates)], z[len(x_candidates):]
    dist_q = np.sqrt(((zc[:, None, :] - zq[None, :, :]) ** 2).sum(-1))
    mean_q = dist_q.mean(axis=1)
    dist_cc = np.sqrt(((zc[:, None, :] - zc[None, :, :]) ** 2).sum(-1))

    chosen: list[int] = []
    remaining = set(range(len(x_candidates)))

    def score(i):
        div = min(dist_cc[i, j] for j in chosen) if chosen else 0.0
        return -alpha * mean_q[i] + (1.0 - alpha) * div

    for c in classes:  # coverage: best-scoring candidate per class
        of_class = [i for i in remaining if y_candidates[i] == c]
        best = max(of_class, key=lambda i: (score(i), -i))
        chosen.append(best)
        remaining.discard(best)
    while len(chosen) < n_support:
        best = max(remaining, key=lambda i: (score(i), -i))
        chosen.append(best)
        remaining.discard(best)
    return np.sort(np.asarray(chosen))


def make_episode_knn(x, y, n_support: int, n_query: int, seed: int,
                     alpha: float = 0.5) -> Episode:
    """Random query rows, then greedy_knn_select over the rest."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=int)
    classes = np.unique(y)
    _check_sizes(len(x), n_support, n_query, len(classes))
    rng = np.random.default_rng(seed)
    query = np.sort(rng.choice(len(x), size=n_query, replace=False).astype(int))
    candidates = np.setdiff1d(np.arange(len(x)), query)
    if not np.isin(classes, y[candidates]).all():
        raise EpisodeError("a class has all its rows in the query set")

    chosen = greedy_knn_select(x[candidates], y[candidates], x[query],
                               n_support, alpha)
    support = candidates[chosen]
    return Episode(x, support, query,
                   _remap(classes, y[support]), _remap(classes, y[query]),
                   classes, source={"mode": "knn", "seed": int(seed),
                                    "alpha": float(alpha)})


def episode_stream(tables, episodes_per_table: int, chunk_size: int,
                   mode: str = "random", seed: int = 0, *,
                   n_support: int, n_query: int, alpha: float = 0.5):
    """Lazily yield lists of episodes of at most chunk_size.

    Total episodes = len(tables) * episodes_per_table; ordering and
    per-episode sub-seeds are deterministic in `seed`.
    """
    if chunk_size < 1:
        raise EpisodeError("chunk_size must be >= 1")
    if mode not in ("random", "knn"):
        raise EpisodeError(f"unknown episode mode {mode!r}")
    make = make_episode_random if mode == "random" else make_episode_knn
    chunk = []
    counter = 0
    for t_idx, table in enumerate(tables):
        for e_idx in range(episodes_per_table):
            sub_seed = int(np.random.SeedSequence([seed, t_idx, e_idx]).generate_state(1)[0])
            if mode == "knn":
                ep = make(table.x, table.y, n_support, n_query, sub_seed, alpha)
            else:
                ep = make(table.x, table.y, n_support, n_query, sub_seed)
            ep.source["table"] = t_idx
            chunk.append(ep)
            counter += 1
            if len(chunk) == chunk_size:
                yield chunk
                chunk = []
    if chunk:
        yield chunk


def episodes_to_batch(episodes, skip_value: float = SKIP_VALUE) -> TableBatch:
    """Stack same-sized episodes into one padded TableBatch."""
    n_train = episodes[0].n_train
    n = n_train + len(episodes[0].query_indices)
    if any(ep.n_train != n_train or len(ep.query_indices) + ep.n_train != n
           for ep in episodes):
        raise EpisodeError("episodes in a batch must share support/query sizes")
    m_max = max(ep.x.shape[1] for ep in episodes)
    b = len(episodes)
    x = np.full((b, n, m_max), skip_value, dtype=np.float32)
    y = np.zeros((b, n), dtype=int)
    d = np.zeros(b, dtype=int)
    for i, ep in enumerate(episodes):
        rows = ep.rows()
        x[i, :, :rows.shape[1]] = rows
        y[i] = ep.labels()
        d[i] = rows.shape[1]
    return TableBatch(x, d, y, n_train, skip_value=skip_value)
