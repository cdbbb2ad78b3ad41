import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from ticl import cli
from ticl.model import ModelConfig, TabularICLModel
from ticl.service import create_app
from ticl.synthetic import dump_table, sample_table, stump_prior


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app(), raise_server_exceptions=False) as c:
        yield c


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    d = tmp_path_factory.mktemp("model")
    model = TabularICLModel(ModelConfig(
        dim=8, n_cls=2, heads=2, c_max=4, groups=2, row_blocks=1,
        icl_blocks=1, col_blocks=1, n_inducing=4, seed=0))
    return model.save(d / "m.obix")


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    for s in range(2):
        dump_table(sample_table(stump_prior(seed=s, n_range=(40, 40)), 0),
                   d / f"t{s}.csv")
    return d


def test_health(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok" and "version" in body


def test_gen_tables(client, tmp_path):
    resp = client.post("/gen-tables", json={
        "out_dir": str(tmp_path), "count": 2, "seed": 3,
        "n_range": [20, 20], "m_range": [2, 2], "c_range": [2, 2]})
    assert resp.status_code == 200
    paths = resp.json()["paths"]
    assert len(paths) == 2
    for p in paths:
        lines = open(p).read().splitlines()
        assert lines[0] == "f0,f1,label"
        assert len(lines) == 21


def test_train_endpoint(client, tmp_path):
    resp = client.post("/train", json={
        "model_out": str(tmp_path), "steps": 2, "episodes_per_step": 4,
        "micro_batch_size": 4, "n_support": 6, "n_query": 4,
        "checkpoint_interval": 0,
        "model": {"dim": 8, "n_cls": 2, "heads": 2, "c_max": 4, "groups": 2,
                  "row_blocks": 1, "icl_blocks": 1, "col_blocks": 1,
                  "n_inducing": 4},
        "prior": {"n_range": [32, 32], "m_range": [2, 2], "c_range": [2, 2]}})
    assert resp.status_code == 200
    body = resp.json()
    assert body["checkpoint"].endswith("model_final.obix")
    assert np.isfinite(body["final_loss"])
    log_lines = open(body["log"]).read().splitlines()
    assert len(log_lines) == 2


def test_train_rejects_unknown_override(client, tmp_path):
    resp = client.post("/train", json={
        "model_out": str(tmp_path), "steps": 1,
        "model": {"hidden_layers": 3}})
    assert resp.status_code == 422
    assert "hidden_layers" in resp.json()["detail"]


def test_train_rejects_indivisible_batching(client, tmp_path):
    resp = client.post("/train", json={
        "model_out": str(tmp_path), "episodes_per_step": 10,
        "micro_batch_size": 4})
    assert resp.status_code == 422


def test_predict_endpoint(client, model_path, data_dir):
    fit_csv = str(sorted(data_dir.glob("*.csv"))[0])
    resp = client.post("/predict", json={
        "fit_csv": fit_csv, "query_csv": fit_csv, "model_path": model_path})
    assert resp.status_code == 200
    body = resp.json()
    assert body["classes"] == ["0", "1"]
    probs = np.array(body["probabilities"])
    assert probs.shape == (40, 2)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    assert len(body["predictions"]) == 40
    assert set(body["predictions"]) <= {"0", "1"}


def test_predict_missing_file_404(client, model_path):
    resp = client.post("/predict", json={
        "fit_csv": "/nonexistent.csv", "query_csv": "/nonexistent.csv",
        "model_path": model_path})
    assert resp.status_code == 404


def test_eval_fewshot_endpoint(client, model_path, data_dir, tmp_path):
    out_csv = str(tmp_path / "report.csv")
    resp = client.post("/eval-fewshot", json={
        "data_dir": str(data_dir), "k": [4, 8], "selection": "knn",
        "seeds": 1, "model_path": model_path, "out_csv": out_csv})
    assert resp.status_code == 200
    body = resp.json()
    assert body["csv_path"] == out_csv
    assert len(body["report"]["cells"]) == 4      # 2 datasets x 2 k x 1 seed
    assert all(c["selection"] == "knn_diverse" for c in body["report"]["cells"])
    assert "accuracy" in body["summary"]
    assert set(body["aggregate"]) == {"4", "8"}   # JSON object keys


def test_eval_fewshot_bad_paths(client, model_path, tmp_path):
    resp = client.post("/eval-fewshot", json={
        "data_dir": "/nonexistent", "model_path": model_path})
    assert resp.status_code == 404
    empty = tmp_path / "empty"
    empty.mkdir()
    resp = client.post("/eval-fewshot", json={
        "data_dir": str(empty), "model_path": model_path})
    assert resp.status_code == 404


def test_eval_fewshot_bad_selection(client, model_path, data_dir):
    resp = client.post("/eval-fewshot", json={
        "data_dir": str(data_dir), "selection": "oracle",
        "model_path": model_path})
    assert resp.status_code == 422


# --- CLI thin client -----------------------------------------------------

def test_cli_gen_and_predict(tmp_path, capsys):
    out_dir = tmp_path / "tables"
    cli.main(["gen-tables", "--out-dir", str(out_dir), "--count", "1",
              "--n-range", "20,20", "--m-range", "2,2", "--c-range", "2,2"])
    printed = capsys.readouterr().out.strip().splitlines()
    assert len(printed) == 1 and printed[0].endswith("table_0000.csv")

    ckpt_dir = tmp_path / "ckpt"
    cfg = {"steps": 1, "episodes_per_step": 4, "micro_batch_size": 4,
           "n_support": 6, "n_query": 4, "checkpoint_interval": 0,
           "model": {"dim": 8, "n_cls": 2, "heads": 2, "c_max": 4,
                     "groups": 2, "row_blocks": 1, "icl_blocks": 1,
                     "col_blocks": 1, "n_inducing": 4},
           "prior": {"n_range": [32, 32], "m_range": [2, 2],
                     "c_range": [2, 2]}}
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(json.dumps(cfg))
    cli.main(["train", "--config", str(cfg_path),
              "--model-out", str(ckpt_dir)])   # flag overrides config
    out = capsys.readouterr().out
    assert f"checkpoint: {ckpt_dir}" in out

    table = printed[0]
    cli.main(["predict", "--fit", table, "--query", table,
              "--model", str(ckpt_dir / "model_final.obix")])
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "prediction,p_0,p_1"
    assert len(lines) == 21

    cli.main(["eval-fewshot", "--data", str(out_dir), "--k", "4",
              "--seeds", "1", "--model", str(ckpt_dir / "model_final.obix")])
    assert "accuracy" in capsys.readouterr().out


def test_cli_error_exit(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["predict", "--fit", "/none.csv", "--query", "/none.csv",
                  "--model", "/none.obix"])
    assert exc.value.code == 1
    assert "error (404)" in capsys.readouterr().err
