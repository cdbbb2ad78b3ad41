"""HTTP service exposing training, prediction, and evaluation.

The CLI talks to this app, by default in-process over an ASGI
transport, so all paths in requests refer to the server's filesystem.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .evaluation import DEFAULT_K_LIST, EvalReport, load_csv_dataset, run_fewshot
from .model import ModelConfig, TabularICLModel
from .pipeline import PipelineConfig, fit, predict_proba, rows_to_matrix
from .synthetic import PriorConfig, dump_table, sample_table
from .trainer import TrainConfig, meta_train


class GenTablesRequest(BaseModel):
    out_dir: str
    count: int = Field(10, ge=1)
    seed: int = 0
    n_range: tuple[int, int] = (64, 512)
    m_range: tuple[int, int] = (3, 24)
    c_range: tuple[int, int] = (2, 10)
    noise: float = 0.1
    categorical_fraction: float = 0.2


class GenTablesResponse(BaseModel):
    paths: list[str]


class TrainRequest(BaseModel):
    model_out: str = "checkpoints"
    steps: int = 200
    episodes_per_step: int = 64
    micro_batch_size: int = 8
    n_support: int = 24
    n_query: int = 16
    lr: float = 3e-4
    warmup_steps: int = 100
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 100
    model: dict = Field(default_factory=dict)   # ModelConfig overrides
    prior: dict = Field(default_factory=dict)   # PriorConfig overrides


class TrainResponse(BaseModel):
    checkpoint: str
    log: str
    final_loss: float | None
    final_query_acc: float | None


class PredictRequest(BaseModel):
    fit_csv: str
    query_csv: str
    model_path: str
    n_views: int = 4
    temperature: float = 1.0
    seed: int = 0


class PredictResponse(BaseModel):
    classes: list[str]
    probabilities: list[list[float]]
    predictions: list[str]


class EvalRequest(BaseModel):
    data_dir: str
    k: list[int] = Field(default_factory=lambda: list(DEFAULT_K_LIST))
    selection: str = "uniform"
    seeds: int = Field(5, ge=1)
    model_path: str
    out_csv: str | None = None
    n_views: int = 4
    temperature: float = 1.0


class EvalResponse(BaseModel):
    summary: str
    aggregate: dict
    csv_path: str | None
    report: dict


def _dataclass_from(cls, overrides: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise HTTPException(422, f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**overrides)


def create_app() -> FastAPI:
    app = FastAPI(title="ticl", version=__version__)

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/gen-tables", response_model=GenTablesResponse)
    def gen_tables(req: GenTablesRequest):
        prior = PriorConfig(n_range=req.n_range, m_range=req.m_range,
                            c_range=req.c_range, noise=req.noise,
                            categorical_fraction=req.categorical_fraction,
                            seed=req.seed)
        paths = []
        for i in range(req.count):
            table = sample_table(prior, i)
            paths.append(dump_table(table, Path(req.out_dir) / f"table_{i:04d}.csv"))
        return GenTablesResponse(paths=paths)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest):
        model_cfg = _dataclass_from(ModelConfig, req.model)
        prior_cfg = _dataclass_from(PriorConfig, req.prior)
        try:
            train_cfg = TrainConfig(
                steps=req.steps, episodes_per_step=req.episodes_per_step,
                micro_batch_size=req.micro_batch_size, n_support=req.n_support,
                n_query=req.n_query, lr=req.lr, warmup_steps=req.warmup_steps,
                clip_norm=req.clip_norm, seed=req.seed,
                checkpoint_interval=req.checkpoint_interval,
                checkpoint_dir=req.model_out)
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        model = TabularICLModel(model_cfg)
        ckpt = meta_train(model, train_cfg, prior_cfg)
        log_path = Path(req.model_out) / "train_log.ndjson"
        last = {}
        for line in log_path.read_text().splitlines():
            if line.strip():
                last = json.loads(line)
        return TrainResponse(checkpoint=ckpt, log=str(log_path),
                             final_loss=last.get("loss"),
                             final_query_acc=last.get("query_acc"))

    @app.post("/predict", response_model=PredictResponse)
    def predict(req: PredictRequest):
        for p in (req.fit_csv, req.query_csv, req.model_path):
            if not Path(p).exists():
                raise HTTPException(404, f"no such file: {p}")
        model = TabularICLModel.load(req.model_path)
        rows, y = load_csv_dataset(req.fit_csv)
        state = fit(rows, y, PipelineConfig(n_views=req.n_views,
                                            temperature=req.temperature,
                                            seed=req.seed))
        q_rows, _ = _query_rows(req.query_csv, state.columns)
        probs = predict_proba(rows_to_matrix(q_rows, state), state, model)
        preds = state.classes[probs.argmax(axis=1)]
        return PredictResponse(classes=[str(c) for c in state.classes],
                               probabilities=probs.tolist(),
                               predictions=[str(p) for p in preds])

    @app.post("/eval-fewshot", response_model=EvalResponse)
    def eval_fewshot(req: EvalRequest):
        data_dir = Path(req.data_dir)
        if not data_dir.is_dir():
            raise HTTPException(404, f"no such directory: {req.data_dir}")
        csvs = sorted(data_dir.glob("*.csv"))
        if not csvs:
            raise HTTPException(404, f"no CSV datasets under {req.data_dir}")
        selection = {"uniform": "uniform", "knn": "knn_diverse"}.get(
            req.selection, req.selection)
        if selection not in ("uniform", "knn_diverse"):
            raise HTTPException(422, f"unknown selection {req.selection!r}")
        model = TabularICLModel.load(req.model_path)
        datasets = {p.stem: load_csv_dataset(p) for p in csvs}
        report = run_fewshot(
            datasets, k_list=req.k, selection=selection, seeds=req.seeds,
            model=model,
            pipeline_config=PipelineConfig(n_views=req.n_views,
                                           temperature=req.temperature))
        csv_path = report.write_csv(req.out_csv) if req.out_csv else None
        return EvalResponse(summary=report.summary(), aggregate=report.aggregate(),
                            csv_path=csv_path, report=json.loads(report.to_json()))

    return app


def _query_rows(path, expected_columns):
    """Query CSVs may omit the label column."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise HTTPException(422, f"{path}: missing header row")
        rows = list(reader)
    if not rows:
        raise HTTPException(422, f"{path}: no data rows")
    labels = None
    extra = [c for c in reader.fieldnames if c not in expected_columns]
    if len(extra) == 1:  # treat a single extra column as labels
        labels = np.array([r.pop(extra[0]) for r in rows])
    return rows, labels


app = create_app()
