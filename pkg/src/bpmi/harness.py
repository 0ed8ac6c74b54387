"""Active-learning experiment loop, metrics and result files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .acquisition import AcquisitionConfig, QueryBatch, Strategy, greedy_batch, uniform_points
from .bfgpc import (
    BfgpcModel,
    Fidelity,
    LabeledDataset,
    TrainingConfig,
    default_inducing_counts,
    init_model,
    predict_proba,
    train,
)
from .errors import ConfigurationError, InvalidArgumentError, TrainingFailureError
from .oracles import OracleKind, OracleSpec, ToyParams, sample_labels, true_probability

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
CSV_COLUMNS = ("repeat", "round", "cumulative_cost", "elpp", "mse", "n_lf_queries", "n_hf_queries", "mean_repeats", "wall_ms")


@dataclass(frozen=True)
class ExperimentConfig:
    oracle: OracleSpec = field(default_factory=lambda: OracleSpec(OracleKind.TOY_LINEAR))
    strategy: Strategy = Strategy.BPMI
    init_lf: int = 50
    init_hf: int = 25
    rounds: int = 5
    round_budget: float = 100.0
    costs: tuple[float, float] = (0.1, 1.0)
    n_repeats_of_experiment: int = 20
    test_set_size: int = 10_000
    training: TrainingConfig = field(default_factory=TrainingConfig)
    # ``costs`` and ``round_budget`` above take precedence over the ones in here
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    seed: int = 0
    # wall_ms is written as 0 unless enabled, so metric CSVs are reproducible byte for byte
    record_wall_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
        if self.init_lf < 1 or self.init_hf < 1:
            raise ConfigurationError("init_lf and init_hf must be >= 1")
        if self.rounds < 1:
            raise InvalidArgumentError("rounds must be >= 1")
        if not self.round_budget > 0:
            raise InvalidArgumentError("round_budget must be positive")
        if self.n_repeats_of_experiment < 1 or self.test_set_size < 1:
            raise InvalidArgumentError("n_repeats_of_experiment and test_set_size must be >= 1")
        if self.seed < 0:
            raise InvalidArgumentError("seed must be unsigned")

    def resolved_acquisition(self) -> AcquisitionConfig:
        return replace(self.acquisition, costs=self.costs, budget=self.round_budget)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["oracle"] = {
            "kind": self.oracle.kind.value,
            "alpha": self.oracle.params.alpha,
            "exchange_dir": self.oracle.exchange_dir,
            "bounds": None if self.oracle.bounds is None else [list(b) for b in self.oracle.bounds],
        }
        d["strategy"] = self.strategy.value
        d["costs"] = list(self.costs)
        d["acquisition"]["costs"] = list(self.acquisition.costs)
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TestSet:
    points: np.ndarray
    labels: np.ndarray
    true_probs: np.ndarray | None

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.points).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    cumulative_cost: float
    elpp: float
    mse: float | None
    n_lf_queries: int
    n_hf_queries: int
    mean_repeats: float
    wall_ms: float
    # training-set sizes behind this round's metrics
    n_lf: int
    n_hf: int


@dataclass
class RunLog:
    repeat: int
    seed: int
    config_hash: str
    records: list[RoundRecord] = field(default_factory=list)
    batches: list[QueryBatch] = field(default_factory=list)
    failed: bool = False
    failure: str | None = None


# --------------------------------------------------------------------------
# metrics


def _paired(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size != b.size:
        raise InvalidArgumentError(f"{what}: length mismatch ({a.size} vs {b.size})")
    if a.size == 0:
        raise InvalidArgumentError(f"{what}: needs at least one point")
    return a, b


def elpp(pred_probs, labels) -> float:
    p, y = _paired(pred_probs, labels, "elpp")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def mse_prob(pred_probs, true_probs) -> float:
    p, t = _paired(pred_probs, true_probs, "mse_prob")
    return float(np.mean((p - t) ** 2))


# --------------------------------------------------------------------------
# seeding: everything that must match across strategies derives from (seed, repeat) only


def _repeat_streams(seed: int, repeat: int) -> dict[str, np.random.SeedSequence]:
    names = ("test", "design", "rounds")
    return dict(zip(names, np.random.SeedSequence([seed, repeat]).spawn(len(names))))


def make_test_set(config: ExperimentConfig, rng: np.random.Generator) -> TestSet:
    oracle = config.oracle
    if not oracle.is_toy:
        raise ConfigurationError("test sets are only available for toy oracles")
    points = uniform_points(rng, config.test_set_size, oracle.domain_bounds)
    labels = sample_labels(oracle, [(x, Fidelity.H) for x in points], rng)
    return TestSet(points, labels, np.asarray(true_probability(oracle, points, Fidelity.H), dtype=float))


def initial_design(config: ExperimentConfig, rng: np.random.Generator) -> LabeledDataset:
    oracle = config.oracle
    if not oracle.is_toy:
        raise ConfigurationError("external oracles need a supplied initial dataset")
    if config.init_lf < 1 or config.init_hf < 1:
        raise ConfigurationError("initial design needs at least one point per fidelity")
    bounds = oracle.domain_bounds
    lf_x = uniform_points(rng, config.init_lf, bounds)
    hf_x = uniform_points(rng, config.init_hf, bounds)
    lf_y = sample_labels(oracle, [(x, Fidelity.L) for x in lf_x], rng)
    hf_y = sample_labels(oracle, [(x, Fidelity.H) for x in hf_x], rng)
    return LabeledDataset(lf_x, lf_y, hf_x, hf_y)


def fit(data: LabeledDataset, bounds: np.ndarray, training: TrainingConfig, seed: int) -> BfgpcModel:
    """Fresh model on ``data``: default inducing counts, seeded init, restarts per ``training``."""
    n_lf, n_delta = default_inducing_counts(data)
    model = init_model(bounds.shape[0], bounds, n_lf, n_delta, seed)
    trained, _ = train(model, data, replace(training, seed=seed))
    return trained


def apply_batch(oracle: OracleSpec, data: LabeledDataset, batch: QueryBatch, rng: np.random.Generator) -> LabeledDataset:
    """Label every repeat copy of every query and return the grown dataset."""
    requests = [(x, q.fidelity) for q in batch.queries for x in q.copies]
    labels = sample_labels(oracle, requests, rng)
    for fid in Fidelity:
        idx = [i for i, (_, m) in enumerate(requests) if m is fid]
        if idx:
            data = data.extend(fid, np.vstack([requests[i][0] for i in idx]), labels[idx])
    return data


def evaluate(model: BfgpcModel, test: TestSet) -> tuple[float, float | None]:
    p = predict_proba(model, test.points, Fidelity.H)
    return elpp(p, test.labels), (None if test.true_probs is None else mse_prob(p, test.true_probs))


def run_repeat(config: ExperimentConfig, repeat: int) -> RunLog:
    streams = _repeat_streams(config.seed, repeat)
    test = make_test_set(config, np.random.default_rng(streams["test"]))
    data = initial_design(config, np.random.default_rng(streams["design"]))
    acq = config.resolved_acquisition()
    bounds = config.oracle.domain_bounds
    round_seeds = streams["rounds"].generate_state(3 * (config.rounds + 1)).reshape(-1, 3)

    run = RunLog(repeat, config.seed, config.config_hash())
    cost = 0.0
    batch: QueryBatch | None = None
    for k in range(config.rounds + 1):
        train_seed, acq_seed, label_seed = (int(s) for s in round_seeds[k])
        t0 = time.perf_counter()
        try:
            model = fit(data, bounds, config.training, train_seed)
        except TrainingFailureError as exc:
            log.warning("repeat %d round %d: %s", repeat, k, exc)
            run.failed, run.failure = True, f"round {k}: {exc}"
            return run
        e, m = evaluate(model, test)
        n_lf, n_hf = data.n_lf, data.n_hf
        if k < config.rounds:
            next_batch = greedy_batch(model, config.strategy, replace(acq, seed=acq_seed))
            data = apply_batch(config.oracle, data, next_batch, np.random.default_rng(label_seed))
        wall = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else 0.0
        run.records.append(
            RoundRecord(
                round_index=k,
                cumulative_cost=cost,
                elpp=e,
                mse=m,
                n_lf_queries=batch.count(Fidelity.L) if batch else 0,
                n_hf_queries=batch.count(Fidelity.H) if batch else 0,
                mean_repeats=batch.mean_repeats() if batch else 0.0,
                wall_ms=wall,
                n_lf=n_lf,
                n_hf=n_hf,
            )
        )
        if k < config.rounds:
            batch = next_batch
            run.batches.append(batch)
            cost += batch.total_cost
        log.info("repeat %d round %d: elpp %.4f mse %s", repeat, k, e, m)
    return run


def run_experiment(config: ExperimentConfig) -> list[RunLog]:
    if not config.oracle.is_toy:
        raise ConfigurationError("run_experiment drives toy oracles; use the suggest/ingest workflow for external ones")
    return [run_repeat(config, r) for r in range(config.n_repeats_of_experiment)]


def summarize(runs: list[RunLog]) -> list[dict]:
    """Per-round mean and (population) standard deviation of ELPP and MSE over non-failed runs."""
    if not runs:
        raise InvalidArgumentError("summarize needs at least one run")
    by_round: dict[int, list[RoundRecord]] = {}
    for run in runs:
        if run.failed:
            continue
        for rec in run.records:
            by_round.setdefault(rec.round_index, []).append(rec)
    rows = []
    for k in sorted(by_round):
        recs = by_round[k]
        e = np.array([r.elpp for r in recs])
        row = {"round": k, "n_runs": len(recs), "elpp_mean": float(e.mean()), "elpp_std": float(e.std())}
        if all(r.mse is not None for r in recs):
            m = np.array([r.mse for r in recs])
            row.update(mse_mean=float(m.mean()), mse_std=float(m.std()))
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# persistence


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def runs_to_csv(runs: list[RunLog]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for run in runs:
        for r in run.records:
            writer.writerow(
                [_fmt(v) for v in (run.repeat, r.round_index, r.cumulative_cost, r.elpp, r.mse, r.n_lf_queries, r.n_hf_queries, r.mean_repeats, r.wall_ms)]
            )
    return buf.getvalue()


def write_results(runs: list[RunLog], config: ExperimentConfig, out_dir, stem: str | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{config.oracle.kind.value.lower()}_{config.strategy.value.lower()}"
    csv_path = out / f"{stem}.csv"
    side_path = out / f"{stem}.json"
    csv_path.write_text(runs_to_csv(runs), encoding="utf-8")
    sidecar = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "failures": [{"repeat": r.repeat, "reason": r.failure} for r in runs if r.failed],
        "summary": summarize(runs),
    }
    side_path.write_text(json.dumps(sidecar, indent=1) + "\n", encoding="utf-8")
    return csv_path, side_path


# --------------------------------------------------------------------------
# strict dict <-> config conversion (the JSON sidecar and CLI config share this shape)


def _strict(doc, allowed: set[str], where: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{where}: expected a JSON object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    return doc


def _fields(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def oracle_from_dict(doc) -> OracleSpec:
    doc = _strict(doc, {"kind", "alpha", "exchange_dir", "bounds"}, "oracle")
    if "kind" not in doc:
        raise ConfigurationError("oracle: 'kind' is required")
    try:
        bounds = doc.get("bounds")
        return OracleSpec(
            OracleKind(doc["kind"]),
            ToyParams(float(doc.get("alpha", ToyParams.alpha))),
            doc.get("exchange_dir"),
            None if bounds is None else tuple(tuple(b) for b in bounds),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"oracle: {exc}") from exc


def _build(cls, doc: dict, where: str, **overrides):
    _strict(doc, _fields(cls), where)
    kwargs = dict(doc)
    for key in ("costs", "theta_prior"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def experiment_config_from_dict(doc) -> ExperimentConfig:
    """Inverse of ``ExperimentConfig.to_dict``; unknown keys at any level are rejected."""
    doc = dict(_strict(doc, _fields(ExperimentConfig), "config"))
    nested = {}
    if "oracle" in doc:
        nested["oracle"] = oracle_from_dict(doc.pop("oracle"))
    if "training" in doc:
        nested["training"] = _build(TrainingConfig, doc.pop("training"), "training")
    if "acquisition" in doc:
        nested["acquisition"] = _build(AcquisitionConfig, doc.pop("acquisition"), "acquisition")
    return _build(ExperimentConfig, doc, "config", **nested)
