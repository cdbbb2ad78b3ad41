"""Few-shot evaluation harness and metrics."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .autodiff import ContractError
from .episodes import greedy_knn_select
from .pipeline import PipelineConfig, _impute, fit, predict_proba, rows_to_matrix

DEFAULT_K_LIST = (5, 10, 20, 32, 64, 128)


def compute_metrics(predictions, truth) -> tuple[float, float]:
    """(accuracy, class-weighted F1); F1_c = 0 when precision+recall = 0."""
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape or truth.size < 1:
        raise ContractError("predictions and truth must be equal-length, non-empty")
    acc = float((predictions == truth).mean())
    f1 = 0.0
    for c in np.unique(truth):
        tp = float(((predictions == c) & (truth == c)).sum())
        fp = float(((predictions == c) & (truth != c)).sum())
        fn = float(((predictions != c) & (truth == c)).sum())
        denom = 2 * tp + fp + fn
        f1_c = 2 * tp / denom if denom > 0 else 0.0
        f1 += (truth == c).mean() * f1_c
    return acc, float(f1)


def mean_rank(per_dataset_scores: dict) -> dict:
    """{model: {dataset: score}} -> {model: mean accuracy rank}.

    Rank 1 is best; ties get the average of the tied ranks.
    """
    models = sorted(per_dataset_scores)
    datasets = sorted(per_dataset_scores[models[0]])
    for m in models:
        if sorted(per_dataset_scores[m]) != datasets:
            raise ContractError(f"model {m!r} is missing dataset scores")
    ranks = {m: [] for m in models}
    for ds in datasets:
        scores = np.array([per_dataset_scores[m][ds] for m in models])
        r = rankdata(-scores, method="average")
        for m, rk in zip(models, r):
            ranks[m].append(rk)
    return {m: float(np.mean(ranks[m])) for m in models}


@dataclass
class EvalCell:
    dataset: str
    k: int
    seed: int
    selection: str
    accuracy: float
    weighted_f1: float


@dataclass
class EvalReport:
    cells: list[EvalCell] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def aggregate(self) -> dict:
        """mean +- std of accuracy and F1 per support size."""
        out = {}
        for k in sorted({c.k for c in self.cells}):
            accs = [c.accuracy for c in self.cells if c.k == k]
            f1s = [c.weighted_f1 for c in self.cells if c.k == k]
            out[k] = {"acc_mean": float(np.mean(accs)), "acc_std": float(np.std(accs)),
                      "f1_mean": float(np.mean(f1s)), "f1_std": float(np.std(f1s)),
                      "cells": len(accs)}
        return out

    def to_json(self) -> str:
        return json.dumps({"cells": [vars(c) for c in self.cells],
                           "skipped": self.skipped}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls([EvalCell(**c) for c in raw["cells"]], raw.get("skipped", []))

    def write_csv(self, path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["dataset", "k", "seed", "selection", "accuracy", "weighted_f1"])
            for c in self.cells:
                writer.writerow([c.dataset, c.k, c.seed, c.selection,
                                 f"{c.accuracy:.6f}", f"{c.weighted_f1:.6f}"])
        return str(path)

    def summary(self) -> str:
        lines = [f"{'k':>6} {'accuracy':>18} {'weighted F1':>18} {'cells':>6}"]
        for k, agg in self.aggregate().items():
            lines.append(f"{k:>6} {agg['acc_mean']:>9.4f} +- {agg['acc_std']:<6.4f}"
                         f" {agg['f1_mean']:>9.4f} +- {agg['f1_std']:<6.4f}"
                         f" {agg['cells']:>6}")
        if self.skipped:
            lines.append(f"skipped cells: {len(self.skipped)}")
        return "\n".join(lines)


def load_csv_dataset(path) -> tuple[list[dict], np.ndarray]:
    """Header row required; the 'label' column (or the last column) holds
    the class; empty cells or 'NA' are missing."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ContractError(f"{path}: missing header row")
        rows = list(reader)
    if not rows:
        raise ContractError(f"{path}: no data rows")
    label_col = "label" if "label" in reader.fieldnames else reader.fieldnames[-1]
    y = np.array([r.pop(label_col) for r in rows])
    return rows, y


def _split_80_20(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    cut = int(round(0.8 * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


def _uniform_support(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Stratified draw with every class represented."""
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    picks = [rng.choice(np.flatnonzero(y == c)) for c in classes]
    rest = np.setdiff1d(np.arange(len(y)), picks)
    extra = rng.choice(rest, size=k - len(picks), replace=False)
    return np.sort(np.concatenate([np.asarray(picks), extra]).astype(int))


def run_fewshot(datasets: dict, k_list=DEFAULT_K_LIST, selection: str = "uniform",
                seeds: int = 5, model=None, pipeline_config=None,
                progress=None) -> EvalReport:
    """datasets: {name: (rows, labels)} as returned by load_csv_dataset.

    For each (dataset, k, seed): split 80/20, draw a k-row support set
    from the training part per the selection strategy, predict the full
    test part through the pipeline, and record accuracy / weighted F1.
    """
    if selection not in ("uniform", "knn_diverse"):
        raise ContractError(f"unknown selection strategy {selection!r}")
    report = EvalReport()
    pipeline_config = pipeline_config or PipelineConfig()
    for name, (rows, y) in datasets.items():
        y = np.asarray(y)
        for k in k_list:
            n_classes = len(np.unique(y))
            if k < n_classes:
                warnings.warn(f"{name}: k={k} below class count; skipped")
                report.skipped.append({"dataset": name, "k": k,
                                       "reason": "k below class count"})
                continue
            for seed in range(seeds):
                train_idx, test_idx = _split_80_20(len(y), seed)
                if k > len(train_idx):
                    report.skipped.append({"dataset": name, "k": k, "seed": seed,
                                           "reason": "k exceeds training rows"})
                    continue
                y_train = y[train_idx]
                if selection == "uniform":
                    sup_local = _uniform_support(y_train, k, seed + 1)
                else:
                    # select against the actual test queries, imputed in the
                    # training split's column layout
                    state0 = fit([rows[i] for i in train_idx], y_train, pipeline_config)
                    x_all = _impute(np.concatenate(
                        [state0.x_support, rows_to_matrix([rows[i] for i in test_idx],
                                                          state0)], axis=0), state0)
                    xt, xq = x_all[:len(train_idx)], x_all[len(train_idx):]
                    sup_local = greedy_knn_select(xt, state0.y_support, xq, k,
                                                  alpha=0.5)
                support = train_idx[sup_local]
                state = fit([rows[i] for i in support], y[support], pipeline_config)
                xq = rows_to_matrix([rows[i] for i in test_idx], state)
                probs = predict_proba(xq, state, model)
                preds = state.classes[probs.argmax(axis=1)]
                acc, f1 = compute_metrics(preds, y[test_idx])
                report.cells.append(EvalCell(name, int(k), int(seed), selection,
                                             acc, f1))
                if progress:
                    progress(report.cells[-1])
    return report
