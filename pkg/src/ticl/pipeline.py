"""Fit/predict classifier wrapping the model for real tabular data.

fit() detects column kinds, builds categorical code maps, stores
medians and robust statistics plus the support rows; predict_proba()
runs an ensemble of transformed views (normalization scheme, column
shuffle, class permutation), re-aligns per-view logits, and averages
temperature-scaled softmax probabilities.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import yeojohnson_llf

from .autodiff import ContractError, no_grad

NORMALIZATIONS = ("none", "power", "quantile", "robust")
SHUFFLES = ("none", "circular", "random", "latin")

MISSING_TOKENS = {"", "na", "nan", "n/a", "null", "none", "?"}


@dataclass
class ViewSpec:
    normalization: str = "none"
    shuffle: str = "none"
    shuffle_seed: int = 0
    class_perm: np.ndarray | None = None  # None means identity

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ContractError(f"unknown normalization {self.normalization!r}")
        if self.shuffle not in SHUFFLES:
            raise ContractError(f"unknown shuffle {self.shuffle!r}")
        if self.class_perm is not None:
            perm = np.asarray(self.class_perm, dtype=int)
            if sorted(perm.tolist()) != list(range(len(perm))):
                raise ContractError("class_perm must be a bijection on class ids")
            self.class_perm = perm


@dataclass
class ColumnStats:
    kind: str                    # "numeric" | "categorical"
    median: float = 0.0
    mean: float = 0.0
    std: float = 1.0
    iqr_median: float = 0.0
    iqr: float = 1.0
    codes: dict = field(default_factory=dict)   # categorical value -> code
    power_lmbda: float = 1.0
    sorted_values: np.ndarray | None = None     # fit-time values for quantile map


@dataclass
class FitState:
    columns: list[str]
    stats: list[ColumnStats]
    dropped: list[str]
    x_support: np.ndarray        # numeric-converted, missing as NaN
    y_support: np.ndarray        # dense class ids
    classes: np.ndarray          # original labels, position = dense id
    views: list[ViewSpec]
    temperature: float
    z_clip: float

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def _is_missing(v) -> bool:
    if v is None:
        return True
    if isinstance(v, float) and np.isnan(v):
        return True
    return isinstance(v, str) and v.strip().lower() in MISSING_TOKENS


def _try_float(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def detect_kinds(columns: list[list], threshold: float = 0.9) -> list[str]:
    """A column is numeric when >= threshold of its non-missing entries parse."""
    kinds = []
    for col in columns:
        present = [v for v in col if not _is_missing(v)]
        if not present:
            kinds.append("empty")
            continue
        numeric = sum(_try_float(v) is not None for v in present)
        kinds.append("numeric" if numeric / len(present) >= threshold else "categorical")
    return kinds


def _fit_power_lambda(x: np.ndarray) -> float:
    """Coarse grid search for the Yeo-Johnson lambda by log-likelihood."""
    grid = np.linspace(-2.0, 2.0, 17)
    scores = []
    for lam in grid:
        with np.errstate(all="ignore"):
            llf = yeojohnson_llf(lam, x)
        scores.append(llf if np.isfinite(llf) else -np.inf)
    return float(grid[int(np.argmax(scores))])


def _yeojohnson(x: np.ndarray, lam: float) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    if abs(lam) > 1e-12:
        out[pos] = ((x[pos] + 1.0) ** lam - 1.0) / lam
    else:
        out[pos] = np.log1p(x[pos])
    if abs(lam - 2.0) > 1e-12:
        out[~pos] = -((1.0 - x[~pos]) ** (2.0 - lam) - 1.0) / (2.0 - lam)
    else:
        out[~pos] = -np.log1p(-x[~pos])
    return out


@dataclass
class PipelineConfig:
    n_views: int = 4
    temperature: float = 1.0
    z_clip: float = 4.0
    seed: int = 0
    numeric_threshold: float = 0.9


def default_views(n_views: int, n_classes: int, seed: int) -> list[ViewSpec]:
    """Cycle normalization and shuffle schemes; one view carries a random
    class permutation, the rest stay identity."""
    rng = np.random.default_rng(seed)
    views = []
    for i in range(n_views):
        perm = None
        if i == 1 and n_classes >= 2:
            perm = rng.permutation(n_classes)
        views.append(ViewSpec(
            normalization=NORMALIZATIONS[i % len(NORMALIZATIONS)],
            shuffle=SHUFFLES[i % len(SHUFFLES)],
            shuffle_seed=int(rng.integers(2 ** 31)),
            class_perm=perm))
    return views


def fit(rows: list[dict] | dict, y, config: PipelineConfig | None = None) -> FitState:
    """rows: list of {column: value} records or {column: list} mapping."""
    config = config or PipelineConfig()
    if isinstance(rows, dict):
        columns = list(rows.keys())
        data = {c: list(rows[c]) for c in columns}
    else:
        if not rows:
            raise ContractError("empty table")
        columns = list(rows[0].keys())
        data = {c: [r.get(c) for r in rows] for c in columns}
    if not columns:
        raise ContractError("table has no columns")
    y = np.asarray(y)
    n = len(next(iter(data.values())))
    if len(y) != n:
        raise ContractError("label count differs from row count")
    classes, y_dense = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ContractError("need at least 2 distinct labels")

    kinds = detect_kinds([data[c] for c in columns], config.numeric_threshold)
    kept, dropped, stats, numeric_cols = [], [], [], []
    for c, kind in zip(columns, kinds):
        if kind == "empty":
            warnings.warn(f"column {c!r} is entirely missing; dropped")
            dropped.append(c)
            continue
        col = data[c]
        st = ColumnStats(kind=kind)
        if kind == "categorical":
            codes = {}
            vals = []
            for v in col:
                key = "__missing__" if _is_missing(v) else str(v)
                if key not in codes:
                    codes[key] = len(codes)
                vals.append(float(codes[key]))
            st.codes = codes
            numeric_cols.append(np.asarray(vals, dtype=np.float64))
        else:
            vals = np.array([_try_float(v) if not _is_missing(v) else np.nan
                             for v in col], dtype=np.float64)
            numeric_cols.append(vals)
        kept.append(c)
        stats.append(st)
    if not kept:
        raise ContractError("all columns were dropped")

    x = np.stack(numeric_cols, axis=1)
    for j, st in enumerate(stats):
        col = x[:, j]
        present = col[~np.isnan(col)]
        st.median = float(np.median(present))
        filled = np.where(np.isnan(col), st.median, col)
        st.mean = float(filled.mean())
        st.std = float(filled.std()) or 1.0
        q1, q3 = np.percentile(filled, [25, 75])
        st.iqr_median = float(np.median(filled))
        st.iqr = float(q3 - q1) or 1.0
        st.power_lmbda = _fit_power_lambda(filled)
        st.sorted_values = np.sort(filled)

    views = default_views(config.n_views, len(classes), config.seed)
    return FitState(kept, stats, dropped, x, y_dense, classes, views,
                    config.temperature, config.z_clip)


def _impute(x: np.ndarray, state: FitState) -> np.ndarray:
    out = x.copy()
    for j, st in enumerate(state.stats):
        col = out[:, j]
        col[np.isnan(col)] = st.median
    return out


def _normalize(x: np.ndarray, state: FitState, scheme: str) -> np.ndarray:
    if scheme == "none":
        return x
    out = np.empty_like(x)
    for j, st in enumerate(state.stats):
        col = x[:, j]
        if scheme == "power":
            out[:, j] = _yeojohnson(col, st.power_lmbda)
        elif scheme == "quantile":
            ref = st.sorted_values
            ranks = np.searchsorted(ref, col, side="right") / (len(ref) + 1)
            out[:, j] = ndtri(np.clip(ranks, 1e-6, 1 - 1e-6))
        elif scheme == "robust":
            out[:, j] = (col - st.iqr_median) / st.iqr
        else:
            raise ContractError(f"unknown normalization {scheme!r}")
    return out


def _clip_outliers(x: np.ndarray, state: FitState, scheme: str, z_clip: float) -> np.ndarray:
    # z-scores come from fit-time statistics computed in the same view space
    fit_x = _normalize(_impute(state.x_support, state), state, scheme)
    mean, std = fit_x.mean(axis=0), fit_x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    lo, hi = mean - z_clip * std, mean + z_clip * std
    return np.clip(x, lo, hi)


def column_order(n_cols: int, view: ViewSpec, view_index: int = 0) -> np.ndarray:
    if view.shuffle == "none":
        return np.arange(n_cols)
    if view.shuffle == "circular":
        return np.roll(np.arange(n_cols), 1)
    if view.shuffle == "random":
        return np.random.default_rng(view.shuffle_seed).permutation(n_cols)
    # latin: row of the cyclic Latin square indexed by the view
    shift = (view_index + view.shuffle_seed) % max(n_cols, 1)
    return (np.arange(n_cols) + shift) % n_cols


def preprocess_view(x: np.ndarray, state: FitState, view: ViewSpec,
                    view_index: int = 0) -> np.ndarray:
    """impute -> normalize -> clip outliers -> permute columns."""
    x = _impute(np.asarray(x, dtype=np.float64), state)
    x = _normalize(x, state, view.normalization)
    x = _clip_outliers(x, state, view.normalization, state.z_clip)
    return x[:, column_order(x.shape[1], view, view_index)]


def realign_logits(logits: np.ndarray, class_perm) -> np.ndarray:
    """Column c of the output is column class_perm[c] of the input."""
    logits = np.asarray(logits)
    if class_perm is None:
        return logits
    perm = np.asarray(class_perm, dtype=int)
    if sorted(perm.tolist()) != list(range(logits.shape[1])):
        raise ContractError("class_perm must be a bijection matching logit width")
    return logits[:, perm]


def rows_to_matrix(rows, state: FitState) -> np.ndarray:
    """Convert raw records to the fit-time numeric column layout."""
    if isinstance(rows, dict):
        data = rows
        n = len(next(iter(rows.values())))
    else:
        data = {c: [r.get(c) for r in rows] for c in (rows[0].keys() if rows else [])}
        n = len(rows)
    missing = [c for c in state.columns if c not in data]
    if missing:
        raise ContractError(f"query is missing fit-time columns {missing}")
    out = np.full((n, len(state.columns)), np.nan)
    for j, (c, st) in enumerate(zip(state.columns, state.stats)):
        for i, v in enumerate(data[c]):
            if st.kind == "categorical":
                key = "__missing__" if _is_missing(v) else str(v)
                code = st.codes.get(key)
                out[i, j] = np.nan if code is None else float(code)
            else:
                out[i, j] = np.nan if _is_missing(v) else \
                    (np.nan if _try_float(v) is None else float(v))
    return out


def predict_proba(x_query: np.ndarray, state: FitState, model,
                  attend_support_only: bool | None = None) -> np.ndarray:
    """Ensemble-averaged class probabilities for query rows.

    x_query: numeric matrix in the fit-time column layout (use
    rows_to_matrix for raw records).
    """
    x_query = np.asarray(x_query, dtype=np.float64)
    if x_query.shape[1] != len(state.columns):
        raise ContractError(
            f"query has {x_query.shape[1]} columns, fit saw {len(state.columns)}")
    n_train = len(state.y_support)
    n_classes = state.n_classes
    acc = np.zeros((x_query.shape[0], n_classes), dtype=np.float64)
    with no_grad():
        for vi, view in enumerate(state.views):
            both = np.concatenate([state.x_support, x_query], axis=0)
            xt = preprocess_view(both, state, view, vi).astype(np.float32)
            y_sup = state.y_support
            if view.class_perm is not None:
                y_sup = view.class_perm[y_sup]
            probs = model.predict_proba(xt, y_sup, n_train, n_classes,
                                        temperature=state.temperature,
                                        attend_support_only=attend_support_only)
            acc += realign_logits(probs, view.class_perm)
    acc /= len(state.views)
    return acc / acc.sum(axis=1, keepdims=True)


def predict(x_query, state: FitState, model) -> np.ndarray:
    """Original class labels for query rows."""
    probs = predict_proba(x_query, state, model)
    return state.classes[probs.argmax(axis=1)]
