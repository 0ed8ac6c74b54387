"""Ground-truth probability fields for the 2D toy problems, Bernoulli label
sampling, and the JSON file exchange used to drive external simulators."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .bfgpc import Fidelity
from .errors import InvalidArgumentError, ParseError, UnsupportedOperationError, ValidationError

UNIT_SQUARE = np.array([[0.0, 1.0], [0.0, 1.0]])


class OracleKind(str, Enum):
    TOY_LINEAR = "TOY_LINEAR"
    TOY_NONLINEAR = "TOY_NONLINEAR"
    EXTERNAL = "EXTERNAL"


@dataclass(frozen=True)
class ToyParams:
    alpha: float = 20.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgumentError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class OracleSpec:
    kind: OracleKind
    params: ToyParams = field(default_factory=ToyParams)
    exchange_dir: str | None = None
    # external simulators may declare their own box; toy problems live on the unit square
    bounds: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", OracleKind(self.kind))
        if self.bounds is not None:
            if self.is_toy:
                raise InvalidArgumentError("toy oracles are defined on the unit square only")
            b = np.asarray(self.bounds, dtype=float)
            if b.ndim != 2 or b.shape[1] != 2 or not np.all(b[:, 1] > b[:, 0]):
                raise InvalidArgumentError(f"invalid domain bounds {self.bounds!r}")
            object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in b))

    @property
    def is_toy(self) -> bool:
        return self.kind is not OracleKind.EXTERNAL

    @property
    def domain_bounds(self) -> np.ndarray:
        return UNIT_SQUARE.copy() if self.bounds is None else np.array(self.bounds, dtype=float)


def _xy(x) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 2:
        raise InvalidArgumentError(f"toy problems are two-dimensional, got points of dimension {pts.shape[1]}")
    if np.any(~np.isfinite(pts)) or np.any((pts < 0) | (pts > 1)):
        raise InvalidArgumentError("toy oracle points must lie in [0, 1]^2")
    return pts, single


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lf_boundary(x1):
    return (np.cos(np.pi * np.asarray(x1) / 2.0) + 1.0) / 3.0 - 0.1


def hf_boundary_linear(x1):
    return 0.8 * lf_boundary(x1) + 0.3


def hf_boundary_nonlinear(x1):
    x1 = np.asarray(x1)
    return lf_boundary(x1) + 0.2 * np.sin(3.0 * np.pi * x1) * (1.0 - x1) + 0.1


def _field(x, params: ToyParams, boundary):
    pts, single = _xy(x)
    x1, x2 = pts[:, 0], pts[:, 1]
    scale = params.alpha * (1.0 - 0.75 * x1)
    p = _sigmoid(scale * (x2 - boundary(x1)))
    return float(p[0]) if single else p


def lf_probability(x, params: ToyParams = ToyParams()):
    return _field(x, params, lf_boundary)


def hf_probability_linear(x, params: ToyParams = ToyParams()):
    return _field(x, params, hf_boundary_linear)


def hf_probability_nonlinear(x, params: ToyParams = ToyParams()):
    return _field(x, params, hf_boundary_nonlinear)


def true_probability(oracle: OracleSpec, x, fidelity) -> np.ndarray:
    if not oracle.is_toy:
        raise UnsupportedOperationError("external oracles have no known probability field")
    if Fidelity.parse(fidelity) is Fidelity.L:
        return lf_probability(x, oracle.params)
    if oracle.kind is OracleKind.TOY_LINEAR:
        return hf_probability_linear(x, oracle.params)
    return hf_probability_nonlinear(x, oracle.params)


def sample_labels(oracle: OracleSpec, requests: Sequence, rng: np.random.Generator) -> np.ndarray:
    """One independent Bernoulli draw per ``(x, fidelity)`` request."""
    if not oracle.is_toy:
        raise UnsupportedOperationError("external oracles are queried through the request/result file exchange")
    if len(requests) == 0:
        return np.zeros(0, dtype=int)
    probs = np.empty(len(requests))
    for fid in Fidelity:
        idx = [i for i, (_, m) in enumerate(requests) if Fidelity.parse(m) is fid]
        if idx:
            probs[idx] = true_probability(oracle, np.vstack([np.asarray(requests[i][0], dtype=float) for i in idx]), fid)
    return (rng.random(len(requests)) < probs).astype(int)


# --------------------------------------------------------------------------
# file exchange


def request_path(exchange_dir, round_id) -> Path:
    return Path(exchange_dir) / f"round_{round_id}.requests.json"


def results_path(exchange_dir, round_id) -> Path:
    return Path(exchange_dir) / f"round_{round_id}.results.json"


def expand_batch(batch, round_id) -> list[dict]:
    """One record per repeat copy, with ids unique within the round."""
    records = []
    for qi, query in enumerate(batch.queries):
        for ci, x in enumerate(query.copies):
            records.append(
                {
                    "query_id": f"r{round_id}-q{qi}-c{ci}",
                    "x": [float(v) for v in x],
                    "fidelity": Fidelity.parse(query.fidelity).value,
                }
            )
    return records


def _write_json_atomic(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit_requests(batch, exchange_dir, round_id) -> Path:
    path = request_path(exchange_dir, round_id)
    _write_json_atomic(path, expand_batch(batch, round_id))
    return path


def _load_json(path: Path, what: str):
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"{what} file {path} does not exist") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ParseError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}: {context!r}") from exc


def read_requests(exchange_dir, round_id) -> list[dict]:
    path = request_path(exchange_dir, round_id)
    records = _load_json(path, "request")
    if not isinstance(records, list):
        raise ParseError(f"{path}: expected a JSON array of request records")
    for i, rec in enumerate(records):
        if not (isinstance(rec, dict) and {"query_id", "x", "fidelity"} <= rec.keys()):
            raise ParseError(f"{path}: record {i} lacks query_id, x or fidelity")
        if rec["fidelity"] not in ("L", "H"):
            raise ParseError(f"{path}: record {i} has fidelity {rec['fidelity']!r}")
    return records


def ingest_results(exchange_dir, round_id, accept_partial: bool = False) -> list[tuple[str, int]]:
    """Parse and validate ``round_<id>.results.json`` against the request file."""
    path = results_path(exchange_dir, round_id)
    rows = _load_json(path, "results")
    if not isinstance(rows, list):
        raise ParseError(f"{path}: expected a JSON array of result records")
    out: list[tuple[str, int]] = []
    for i, row in enumerate(rows):
        if not (isinstance(row, dict) and "query_id" in row and "y" in row):
            raise ParseError(f"{path}: record {i} lacks query_id or y")
        y = row["y"]
        if isinstance(y, bool) or y not in (0, 1) or not isinstance(y, (int, float)):
            raise ParseError(f"{path}: record {i} ({row['query_id']!r}) has label {y!r}; labels must be 0 or 1")
        out.append((str(row["query_id"]), int(y)))

    expected = [rec["query_id"] for rec in read_requests(exchange_dir, round_id)]
    seen = [qid for qid, _ in out]
    duplicated = sorted({q for q in seen if seen.count(q) > 1})
    if duplicated:
        raise ValidationError(f"duplicate query ids in {path}: {duplicated}", duplicated)
    unknown = sorted(set(seen) - set(expected))
    if unknown:
        raise ValidationError(f"unknown query ids in {path}: {unknown}", unknown)
    missing = [q for q in expected if q not in set(seen)]
    if missing and not accept_partial:
        raise ValidationError(f"results for round {round_id} are missing {len(missing)} query ids: {missing}", missing)
    return out


def toy_results_for(oracle: OracleSpec, exchange_dir, round_id, rng: np.random.Generator) -> Path:
    """Answer a request file with toy-oracle labels, as an external runner would."""
    records = read_requests(exchange_dir, round_id)
    labels = sample_labels(oracle, [(rec["x"], rec["fidelity"]) for rec in records], rng)
    path = results_path(exchange_dir, round_id)
    _write_json_atomic(path, [{"query_id": rec["query_id"], "y": int(y)} for rec, y in zip(records, labels)])
    return path
