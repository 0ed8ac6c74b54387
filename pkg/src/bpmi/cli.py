"""Command-line entry point.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .acquisition import Strategy, greedy_batch
from .bfgpc import (
    FORMAT_VERSION,
    Fidelity,
    LabeledDataset,
    check_format_version,
    model_from_document,
    model_to_document,
    predict_proba,
)
from .errors import BpmiError, ConfigurationError, NumericalFailureError, ParseError, TrainingFailureError, ValidationError
from .harness import ExperimentConfig, experiment_config_from_dict, fit, run_experiment, summarize, write_results
from .oracles import emit_requests, ingest_results, read_requests, request_path, results_path

log = logging.getLogger("bpmi")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read_json(path, what: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CliError(f"{what} {path} does not exist", EXIT_INVALID) from None
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc}", EXIT_RUNTIME) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}", EXIT_INVALID) from exc


def load_config(path) -> tuple[list[ExperimentConfig], str | None]:
    """Parse a config file into one ExperimentConfig per strategy plus the optional out_dir."""
    doc = _read_json(path, "config")
    if not isinstance(doc, dict):
        raise ConfigurationError("config: expected a JSON object")
    doc = dict(doc)
    out_dir = doc.pop("out_dir", None)
    strategies = doc.pop("strategy", Strategy.BPMI.value)
    if isinstance(strategies, str):
        strategies = [strategies]
    if not isinstance(strategies, list) or not strategies:
        raise ConfigurationError("config: 'strategy' must be a name or a nonempty list of names")
    configs = [experiment_config_from_dict({**doc, "strategy": s}) for s in strategies]
    return configs, out_dir


# --------------------------------------------------------------------------
# datasets


def load_dataset(path) -> dict:
    doc = _read_json(path, "dataset")
    if not isinstance(doc, dict) or not {"lf", "hf"} <= doc.keys():
        raise ParseError(f"dataset {path}: expected an object with 'lf' and 'hf' lists")
    check_format_version(doc, f"dataset {path}")
    for fid in ("lf", "hf"):
        if not isinstance(doc[fid], list):
            raise ParseError(f"dataset {path}: '{fid}' must be a list")
        for i, rec in enumerate(doc[fid]):
            if not (isinstance(rec, dict) and "x" in rec and "y" in rec):
                raise ParseError(f"dataset {path}: {fid}[{i}] lacks x or y")
            if rec["y"] not in (0, 1) or isinstance(rec["y"], bool):
                raise ParseError(f"dataset {path}: {fid}[{i}] has label {rec['y']!r}")
    return doc


def dataset_to_arrays(doc: dict, input_dim: int) -> LabeledDataset:
    def xy(records):
        x = np.array([r["x"] for r in records], dtype=float).reshape(len(records), input_dim)
        return x, np.array([r["y"] for r in records], dtype=float)

    try:
        return LabeledDataset(*xy(doc["lf"]), *xy(doc["hf"]))
    except ValueError as exc:
        raise ParseError(f"dataset inputs do not match the domain dimension {input_dim}: {exc}") from exc


def write_json(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    tmp.replace(path)


# --------------------------------------------------------------------------
# commands


def cmd_run_toy(config_path, out_dir=None) -> int:
    configs, cfg_out = load_config(config_path)
    out = Path(out_dir or cfg_out or "results")
    if not all(c.oracle.is_toy for c in configs):
        raise ConfigurationError("run-toy needs a toy oracle (TOY_LINEAR or TOY_NONLINEAR)")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {out} is not writable: {exc}", EXIT_RUNTIME) from exc
    rows = []
    for config in configs:
        runs = run_experiment(config)
        csv_path, _ = write_results(runs, config, out)
        failed = sum(r.failed for r in runs)
        print(f"{config.strategy.value}: {len(runs)} repeats ({failed} failed) -> {csv_path}")
        rows += [{"strategy": config.strategy.value, **row} for row in summarize(runs)]
    write_json(out / "summary.json", rows)
    return EXIT_OK


def cmd_suggest(config_path, exchange_dir, round_id: int, dataset_path=None, model_path=None) -> int:
    configs, _ = load_config(config_path)
    if len(configs) != 1:
        raise ConfigurationError("suggest needs exactly one strategy")
    config = configs[0]
    exchange = Path(exchange_dir)
    if results_path(exchange, round_id).exists():
        raise CliError(f"round {round_id} already has results in {exchange}; refusing to overwrite it", EXIT_INVALID)
    bounds = config.oracle.domain_bounds
    seeds = np.random.SeedSequence([config.seed, round_id]).generate_state(2)
    if model_path is not None:
        model = model_from_document(Path(model_path).read_text(encoding="utf-8"))
    else:
        if dataset_path is None:
            raise CliError("suggest needs --dataset or --model", EXIT_INVALID)
        data = dataset_to_arrays(load_dataset(dataset_path), bounds.shape[0])
        if data.n_lf == 0 and data.n_hf == 0:
            raise CliError(f"dataset {dataset_path} is empty; nothing to train on", EXIT_INVALID)
        data.check_in_domain(bounds)
        model = fit(data, bounds, config.training, int(seeds[0]))
    acq = replace(config.resolved_acquisition(), seed=int(seeds[1]))
    batch = greedy_batch(model, config.strategy, acq)
    exchange.mkdir(parents=True, exist_ok=True)
    emit_requests(batch, exchange, round_id)
    (exchange / f"round_{round_id}.model.json").write_text(model_to_document(model) + "\n", encoding="utf-8")
    n_copies = sum(q.repeats for q in batch.queries)
    print(
        f"round {round_id}: {batch.count(Fidelity.L)} L / {batch.count(Fidelity.H)} H queries, "
        f"{n_copies} runs, total cost {batch.total_cost:g} -> {request_path(exchange, round_id)}"
    )
    return EXIT_OK


def cmd_ingest(exchange_dir, round_id: int, dataset_path, accept_partial: bool = False) -> int:
    path = Path(dataset_path)
    doc = load_dataset(path) if path.exists() else {"format_version": FORMAT_VERSION, "lf": [], "hf": []}
    requests = {r["query_id"]: r for r in read_requests(exchange_dir, round_id)}
    labels = ingest_results(exchange_dir, round_id, accept_partial=accept_partial)
    present = {rec.get("query_id") for fid in ("lf", "hf") for rec in doc[fid]}
    clash = sorted(qid for qid, _ in labels if qid in present)
    if clash:
        raise ValidationError(f"query ids already merged into {path}: {clash}", clash)
    for qid, y in labels:
        req = requests[qid]
        key = "lf" if req["fidelity"] == Fidelity.L.value else "hf"
        doc[key].append({"x": req["x"], "y": y, "round_id": round_id, "query_id": qid})
    write_json(path, doc)
    print(f"round {round_id}: merged {len(labels)} results into {path} ({len(doc['lf'])} L / {len(doc['hf'])} H)")
    return EXIT_OK


def prediction_grid(model, resolution: int, fidelity) -> tuple[np.ndarray, np.ndarray]:
    """Points on a resolution x resolution grid (x2 outer, x1 inner) and their probabilities."""
    if model.input_dim != 2:
        raise ConfigurationError("prediction grids need a two-dimensional model")
    b = model.domain_bounds
    g1 = np.linspace(b[0, 0], b[0, 1], resolution)
    g2 = np.linspace(b[1, 0], b[1, 1], resolution)
    x2, x1 = np.meshgrid(g2, g1, indexing="ij")
    points = np.column_stack([x1.ravel(), x2.ravel()])
    return points, predict_proba(model, points, fidelity)


def pgm_bytes(probs: np.ndarray, resolution: int) -> bytes:
    """Binary 8-bit graymap; the top row is the largest x2, p = 0 is black."""
    img = np.rint(255.0 * np.clip(probs, 0.0, 1.0)).astype(np.uint8).reshape(resolution, resolution)[::-1]
    return f"P5\n{resolution} {resolution}\n255\n".encode("ascii") + img.tobytes()


def cmd_predict_grid(model_path, resolution: int, fidelity, out_path) -> int:
    if resolution < 2:
        raise CliError("--resolution must be at least 2", EXIT_INVALID)
    try:
        text = Path(model_path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CliError(f"model document {model_path} does not exist", EXIT_INVALID) from None
    model = model_from_document(text)
    points, probs = prediction_grid(model, resolution, Fidelity.parse(fidelity))
    out = Path(out_path)
    lines = ["x1,x2,p"] + [f"{x1!r},{x2!r},{p!r}" for (x1, x2), p in zip(points.tolist(), probs.tolist())]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    out.with_suffix(".pgm").write_bytes(pgm_bytes(probs, resolution))
    print(f"wrote {out} and {out.with_suffix('.pgm')} (p in [{probs.min():.4f}, {probs.max():.4f}])")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpmi", description="Bi-fidelity GP classification with batch active learning.")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-toy", help="run toy-problem experiments and write metric CSVs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides out_dir in the config)")

    p = sub.add_parser("suggest", help="train on a dataset and emit the next round's request file")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset")
    p.add_argument("--model", help="use a trained model document instead of training")
    p.add_argument("--exchange-dir", required=True)
    p.add_argument("--round", type=int, required=True)

    p = sub.add_parser("ingest", help="merge a round's results file into a dataset")
    p.add_argument("--exchange-dir", required=True)
    p.add_argument("--round", type=int, required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--accept-partial", action="store_true")

    p = sub.add_parser("predict-grid", help="evaluate a model on a grid; writes CSV and a PGM image")
    p.add_argument("--model", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--fidelity", default="H", choices=["L", "H"])
    p.add_argument("--out", required=True)
    return parser


def dispatch(args) -> int:
    if args.command == "run-toy":
        return cmd_run_toy(args.config, args.out)
    if args.command == "suggest":
        return cmd_suggest(args.config, args.exchange_dir, args.round, args.dataset, args.model)
    if args.command == "ingest":
        return cmd_ingest(args.exchange_dir, args.round, args.dataset, args.accept_partial)
    return cmd_predict_grid(args.model, args.resolution, args.fidelity, args.out)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingFailureError, NumericalFailureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (BpmiError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
