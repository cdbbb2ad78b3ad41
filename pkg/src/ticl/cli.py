"""Command-line client for the service.

Every subcommand flag can also come from a JSON config file via
--config; explicit flags win. By default the client runs the service
in-process; --server points it at a remote instance instead.
"""

from __future__ import annotations

import argparse
import json
import sys

import httpx


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service import app
    return TestClient(app, raise_server_exceptions=False)


def _merge_config(args: argparse.Namespace) -> dict:
    """Start from the config file, overlay flags given on the command line.

    All flag defaults are None, so a non-None value means the flag was
    set explicitly (or parsed from the config earlier).
    """
    merged = {}
    if args.config:
        with open(args.config) as f:
            merged.update(json.load(f))
    for key, value in vars(args).items():
        if key in ("config", "server", "func", "command"):
            continue
        if value is not None:
            merged[key] = value
    return merged


def _post(server: str | None, route: str, payload: dict) -> dict:
    with _client(server) as client:
        resp = client.post(route, json=payload)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        print(f"error ({resp.status_code}): {detail}", file=sys.stderr)
        raise SystemExit(1)
    return resp.json()


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_train(args):
    payload = _merge_config(args)
    for key in ("model", "prior"):
        if isinstance(payload.get(key), str):
            payload[key] = json.loads(payload[key])
    out = _post(args.server, "/train", payload)
    print(f"checkpoint: {out['checkpoint']}")
    print(f"log: {out['log']}")
    if out["final_loss"] is not None:
        print(f"final loss {out['final_loss']:.4f}"
              f"  query acc {out['final_query_acc']:.4f}")


def cmd_eval_fewshot(args):
    payload = _merge_config(args)
    if isinstance(payload.get("k"), str):
        payload["k"] = _int_list(payload["k"])
    out = _post(args.server, "/eval-fewshot", payload)
    print(out["summary"])
    if out["csv_path"]:
        print(f"per-cell results: {out['csv_path']}")


def cmd_predict(args):
    payload = _merge_config(args)
    out = _post(args.server, "/predict", payload)
    print("prediction," + ",".join(f"p_{c}" for c in out["classes"]))
    for pred, probs in zip(out["predictions"], out["probabilities"]):
        print(pred + "," + ",".join(f"{p:.6f}" for p in probs))


def cmd_gen_tables(args):
    payload = _merge_config(args)
    for key in ("n_range", "m_range", "c_range"):
        if isinstance(payload.get(key), str):
            payload[key] = _int_list(payload[key])
    out = _post(args.server, "/gen-tables", payload)
    for p in out["paths"]:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ticl",
                                     description="tabular in-context learning")
    parser.add_argument("--server", default=None,
                        help="service URL; defaults to in-process execution")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="JSON file supplying any of this command's flags")

    p = sub.add_parser("train", help="meta-train on synthetic tables")
    common(p)
    p.add_argument("--model-out", dest="model_out", default=None,
                   help="checkpoint directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--episodes-per-step", dest="episodes_per_step", type=int,
                   default=None)
    p.add_argument("--micro-batch-size", dest="micro_batch_size", type=int,
                   default=None)
    p.add_argument("--n-support", dest="n_support", type=int, default=None)
    p.add_argument("--n-query", dest="n_query", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=None)
    p.add_argument("--clip-norm", dest="clip_norm", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int,
                   default=None)
    p.add_argument("--model", default=None,
                   help="JSON object of model config overrides")
    p.add_argument("--prior", default=None,
                   help="JSON object of synthetic prior overrides")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-fewshot", help="few-shot evaluation over CSV datasets")
    common(p)
    p.add_argument("--data", dest="data_dir", default=None,
                   help="directory of CSV datasets (label column required)")
    p.add_argument("--k", type=_int_list, default=None,
                   help="comma-separated support sizes, e.g. 5,10,20,32,64,128")
    p.add_argument("--selection", choices=["uniform", "knn"], default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--model", dest="model_path", default=None,
                   help="checkpoint path")
    p.add_argument("--out-csv", dest="out_csv", default=None)
    p.add_argument("--n-views", dest="n_views", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.set_defaults(func=cmd_eval_fewshot)

    p = sub.add_parser("predict", help="fit on one CSV, predict another")
    common(p)
    p.add_argument("--fit", dest="fit_csv", default=None,
                   help="support CSV with a label column")
    p.add_argument("--query", dest="query_csv", default=None,
                   help="query CSV (label column optional, ignored)")
    p.add_argument("--model", dest="model_path", default=None)
    p.add_argument("--n-views", dest="n_views", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gen-tables", help="write synthetic CSV datasets")
    common(p)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-range", dest="n_range", type=_int_list, default=None,
                   help="min,max rows")
    p.add_argument("--m-range", dest="m_range", type=_int_list, default=None,
                   help="min,max features")
    p.add_argument("--c-range", dest="c_range", type=_int_list, default=None,
                   help="min,max classes")
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--categorical-fraction", dest="categorical_fraction",
                   type=float, default=None)
    p.set_defaults(func=cmd_gen_tables)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
