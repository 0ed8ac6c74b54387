"""Batch acquisition: MI scores in latent (LFMI) and linearized probability
(BPMI) space, the maximum-uncertainty and random baselines, cost-aware greedy
batch construction, adaptive repeats and jitter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .bfgpc import BfgpcModel, Fidelity, check_in_domain, joint_latent_posterior, predict_latent, predict_proba
from .errors import InvalidArgumentError
from .num_core import GaussianJoint, gaussian_mi, marginal_bernoulli_prob, probit_link, stabilized_cholesky

PHI_AT_ZERO = 1.0 / math.sqrt(2.0 * math.pi)
# relative slack when comparing accumulated costs with the budget (0.1 + 0.1 + 0.1 > 0.3 in binary)
_BUDGET_RTOL = 1e-9


class Strategy(str, Enum):
    BPMI = "BPMI"
    LFMI = "LFMI"
    MAXUNC = "MAXUNC"
    RANDOM = "RANDOM"


@dataclass(frozen=True)
class Query:
    x: np.ndarray
    fidelity: Fidelity
    repeats: int = 1
    # first row is ``x`` itself, the rest are jittered repeat locations
    copies: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "fidelity", Fidelity.parse(self.fidelity))
        if self.repeats < 1:
            raise InvalidArgumentError("repeats must be >= 1")
        copies = np.tile(x, (self.repeats, 1)) if self.copies is None else np.atleast_2d(np.asarray(self.copies, dtype=float))
        if copies.shape != (self.repeats, x.size):
            raise InvalidArgumentError("copies must hold one row per repeat")
        object.__setattr__(self, "copies", copies)


@dataclass
class QueryBatch:
    queries: list[Query] = field(default_factory=list)
    total_cost: float = 0.0
    # acquisition value of the selected set (MI strategies only)
    value: float | None = None

    def count(self, fidelity) -> int:
        fidelity = Fidelity.parse(fidelity)
        return sum(1 for q in self.queries if q.fidelity is fidelity)

    def mean_repeats(self) -> float:
        return float(np.mean([q.repeats for q in self.queries])) if self.queries else 0.0


@dataclass(frozen=True)
class AcquisitionConfig:
    costs: tuple[float, float] = (0.1, 1.0)
    budget: float = 100.0
    candidate_count: int = 256
    test_point_count: int = 100
    n_max: int = 13
    jitter_scale: float = 0.01
    beta: float = 0.5
    # variance floor on the linearized Bernoulli parameters (BPMI); LFMI uses
    # the same floor mapped to latent units at the probit's steepest point
    prob_noise: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        c_l, c_h = (float(c) for c in self.costs)
        object.__setattr__(self, "costs", (c_l, c_h))
        if not (c_l > 0 and c_h > 0):
            raise InvalidArgumentError("costs must be positive")
        if not self.budget > 0:
            raise InvalidArgumentError("budget must be positive")
        if self.candidate_count < 1 or self.test_point_count < 1:
            raise InvalidArgumentError("candidate_count and test_point_count must be >= 1")
        if self.n_max < 1:
            raise InvalidArgumentError("n_max must be >= 1")
        if self.jitter_scale < 0:
            raise InvalidArgumentError("jitter_scale must be nonnegative")
        if not 0 <= self.beta <= 1:
            raise InvalidArgumentError("beta must lie in [0, 1]")
        if not self.prob_noise > 0:
            raise InvalidArgumentError("prob_noise must be positive")

    def cost(self, fidelity) -> float:
        return self.costs[0] if Fidelity.parse(fidelity) is Fidelity.L else self.costs[1]


# --------------------------------------------------------------------------
# mutual-information scores


def latent_noise(prob_noise: float) -> float:
    """LFMI floor: the BPMI floor divided by phi(0)^2."""
    return prob_noise / PHI_AT_ZERO**2


def linearize(joint: GaussianJoint) -> GaussianJoint:
    """First-order probit push-forward: N(Phi(mu), D Sigma D) with D = diag(phi(mu))."""
    p, dp = probit_link(joint.mean)
    dp = np.atleast_1d(dp)
    return GaussianJoint(np.atleast_1d(p), joint.cov * np.outer(dp, dp))


def _with_floor(joint: GaussianJoint, noise: float) -> GaussianJoint:
    return GaussianJoint(joint.mean, joint.cov + noise * np.eye(joint.dim))


def lfmi_from_joint(joint: GaussianJoint, n_queries: int, prob_noise: float = AcquisitionConfig.prob_noise) -> float:
    """Latent MI between the first ``n_queries`` entries and the rest."""
    floored = _with_floor(joint, latent_noise(prob_noise))
    return gaussian_mi(floored, range(n_queries), range(n_queries, joint.dim))


def bpmi_from_joint(joint: GaussianJoint, n_queries: int, prob_noise: float = AcquisitionConfig.prob_noise) -> float:
    """MI of the linearized Bernoulli parameters; the floor is added after scaling.

    Without the floor the diagonal scaling would cancel out of the MI exactly;
    with it, entries whose probability variance falls below ``prob_noise``
    (saturated latents) carry almost no information.
    """
    floored = _with_floor(linearize(joint), prob_noise)
    return gaussian_mi(floored, range(n_queries), range(n_queries, joint.dim))


def lfmi_score(model: BfgpcModel, batch_queries: Sequence, test_points, prob_noise: float = AcquisitionConfig.prob_noise) -> float:
    _require_nonempty(batch_queries, test_points)
    joint = joint_latent_posterior(model, batch_queries, test_points)
    return lfmi_from_joint(joint, len(batch_queries), prob_noise)


def bpmi_score(model: BfgpcModel, batch_queries: Sequence, test_points, prob_noise: float = AcquisitionConfig.prob_noise) -> float:
    _require_nonempty(batch_queries, test_points)
    joint = joint_latent_posterior(model, batch_queries, test_points)
    return bpmi_from_joint(joint, len(batch_queries), prob_noise)


def _require_nonempty(batch_queries, test_points) -> None:
    if len(batch_queries) == 0 or len(test_points) == 0:
        raise InvalidArgumentError("MI scores need at least one query and one test point")


# --------------------------------------------------------------------------
# non-MI baselines


def max_uncertainty_from_moments(mean, var, beta: float):
    """beta * delta-method Var[p] + (1 - beta) * Bernoulli entropy (nats)."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    _, dp = probit_link(mean)
    epistemic = dp**2 * var
    p = np.clip(marginal_bernoulli_prob(mean, var), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(p < 1, (1 - p) * np.log1p(-p), 0.0))
    out = beta * epistemic + (1.0 - beta) * entropy
    return float(out) if out.ndim == 0 else out


def max_uncertainty_score(model: BfgpcModel, x, fidelity, beta: float) -> float:
    mean, var = predict_latent(model, np.atleast_2d(x), fidelity)
    return float(max_uncertainty_from_moments(mean[0], var[0], beta))


# --------------------------------------------------------------------------
# repeats and jitter


def repeats_for(p_pred: float, n_max: int) -> int:
    """round(((n_max - 1) / 4) * (p (1 - p) + 1)), half away from zero, clamped to [1, n_max]."""
    raw = (n_max - 1) / 4.0 * (p_pred * (1.0 - p_pred) + 1.0)
    rounded = int(math.floor(raw + 0.5))
    return min(max(rounded, 1), n_max)


def apply_jitter(x, jitter_scale: float, domain_bounds, rng: np.random.Generator) -> np.ndarray:
    """Uniform jitter of +/- jitter_scale domain widths per axis, clamped to the domain."""
    x = np.asarray(x, dtype=float).reshape(-1)
    bounds = np.asarray(domain_bounds, dtype=float).reshape(-1, 2)
    width = bounds[:, 1] - bounds[:, 0]
    noise = rng.uniform(-jitter_scale, jitter_scale, size=x.size) * width
    return np.clip(x + noise, bounds[:, 0], bounds[:, 1])


def _make_query(model: BfgpcModel, x: np.ndarray, fidelity: Fidelity, n_max: int | None, jitter_scale: float, rng) -> Query:
    if n_max is None:
        return Query(x, fidelity, 1)
    p_pred = float(predict_proba(model, x[None, :], fidelity)[0])
    n = repeats_for(p_pred, n_max)
    copies = [x] + [apply_jitter(x, jitter_scale, model.domain_bounds, rng) for _ in range(n - 1)]
    return Query(x, fidelity, n, np.vstack(copies))


# --------------------------------------------------------------------------
# greedy batch construction


@dataclass(frozen=True)
class _Streams:
    pool: np.random.Generator
    test: np.random.Generator
    jitter: np.random.Generator
    choice: np.random.Generator


def _streams(seed: int) -> _Streams:
    return _Streams(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)))


def uniform_points(rng: np.random.Generator, n: int, bounds: np.ndarray) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    return bounds[:, 0] + rng.random((n, bounds.shape[0])) * (bounds[:, 1] - bounds[:, 0])


def candidate_pool(model: BfgpcModel, config: AcquisitionConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, Fidelity]]:
    lf = uniform_points(rng, config.candidate_count, model.domain_bounds)
    hf = uniform_points(rng, config.candidate_count, model.domain_bounds)
    return [(x, Fidelity.L) for x in lf] + [(x, Fidelity.H) for x in hf]


class GreedyMI:
    """Incremental MI gains for a fixed candidate pool and test set.

    For a Gaussian vector with floor noise on its diagonal, the marginal gain
    of adding candidate ``q`` to the selected set ``Q`` is::

        I(q; X' | Q) = 0.5 * log(Var[q | Q] / Var[q | Q, X'])

    Both conditional covariances over the pool are kept and downdated by one
    rank-one step per selection, so a whole batch costs O(steps * pool^2).
    """

    def __init__(self, joint: GaussianJoint, n_candidates: int, strategy: Strategy, prob_noise: float):
        if strategy is Strategy.BPMI:
            joint = _with_floor(linearize(joint), prob_noise)
        else:
            joint = _with_floor(joint, latent_noise(prob_noise))
        factor = stabilized_cholesky(joint.cov)
        cov = joint.cov + factor.nugget_used * np.eye(joint.dim)
        self.noise_cov = cov
        n = n_candidates
        c_cc, c_ct, c_tt = cov[:n, :n], cov[:n, n:], cov[n:, n:]
        lt = np.linalg.cholesky(c_tt)
        v = np.linalg.solve(lt, c_ct.T)
        self.prior = c_cc.copy()
        self.post = c_cc - v.T @ v
        self.value = 0.0

    def gains(self) -> np.ndarray:
        num = np.clip(np.diag(self.prior), 1e-300, None)
        den = np.clip(np.diag(self.post), 1e-300, None)
        return 0.5 * np.log(num / den)

    def select(self, j: int) -> float:
        gain = float(self.gains()[j])
        for cov in (self.prior, self.post):
            col = cov[:, j].copy()
            cov -= np.outer(col, col) / col[j]
        self.value += gain
        return gain


def _exceeds(total: float, budget: float) -> bool:
    return total > budget * (1.0 + _BUDGET_RTOL)


def greedy_batch(
    model: BfgpcModel,
    strategy,
    config: AcquisitionConfig,
    rng: np.random.Generator | int | None = None,
    candidates: Sequence | None = None,
    test_points=None,
    pin_repeats: bool = False,
) -> QueryBatch:
    """Build one batch under ``config.budget``.

    Selection stops right after the first query whose charge pushes the total
    past the budget; that query stays in the batch. ``candidates`` and
    ``test_points`` override the seeded uniform pool and test set.
    """
    strategy = Strategy(strategy)
    seed = config.seed if rng is None else (rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2**63)))
    streams = _streams(int(seed))
    if candidates is None:
        candidates = candidate_pool(model, config, streams.pool)
    candidates = [(np.asarray(x, dtype=float).reshape(-1), Fidelity.parse(m)) for x, m in candidates]
    if not candidates:
        raise InvalidArgumentError("candidate pool is empty")
    check_in_domain(np.vstack([x for x, _ in candidates]), model.domain_bounds)
    n_max = None if pin_repeats else config.n_max

    if strategy in (Strategy.BPMI, Strategy.LFMI):
        if test_points is None:
            test_points = uniform_points(streams.test, config.test_point_count, model.domain_bounds)
        return _greedy_mi(model, strategy, config, candidates, np.asarray(test_points, dtype=float), n_max, streams)
    if strategy is Strategy.MAXUNC:
        return _alternating(model, config, candidates, _maxunc_order(model, candidates, config.beta), streams)
    return _alternating(model, config, candidates, _random_order(candidates, streams.choice), streams)


def _greedy_mi(model, strategy, config, candidates, test_points, n_max, streams) -> QueryBatch:
    joint = joint_latent_posterior(model, candidates, test_points)
    state = GreedyMI(joint, len(candidates), strategy, config.prob_noise)
    cost = np.array([config.cost(m) for _, m in candidates])
    available = np.ones(len(candidates), dtype=bool)
    batch = QueryBatch()
    while available.any():
        ratio = np.where(available, state.gains() / cost, -np.inf)
        j = int(np.argmax(ratio))
        state.select(j)
        available[j] = False
        x, m = candidates[j]
        query = _make_query(model, x, m, n_max, config.jitter_scale, streams.jitter)
        batch.queries.append(query)
        batch.total_cost += query.repeats * cost[j]
        if _exceeds(batch.total_cost, config.budget):
            break
    batch.value = state.value
    return batch


def _maxunc_order(model, candidates, beta) -> dict[Fidelity, list[int]]:
    order = {}
    for fid in Fidelity:
        idx = [i for i, (_, m) in enumerate(candidates) if m is fid]
        if not idx:
            order[fid] = []
            continue
        mean, var = predict_latent(model, np.vstack([candidates[i][0] for i in idx]), fid)
        score = max_uncertainty_from_moments(mean, var, beta)
        # stable sort: ties keep pool order
        order[fid] = [idx[k] for k in np.argsort(-np.atleast_1d(score), kind="stable")]
    return order


def _random_order(candidates, rng: np.random.Generator) -> dict[Fidelity, list[int]]:
    order = {}
    for fid in Fidelity:
        idx = np.array([i for i, (_, m) in enumerate(candidates) if m is fid], dtype=int)
        order[fid] = idx[rng.permutation(idx.size)].tolist()
    return order


def _alternating(model, config, candidates, order: dict[Fidelity, list[int]], streams) -> QueryBatch:
    """Take the next candidate from L, then H, then L, ..., skipping empty pools."""
    queues = {fid: list(order[fid]) for fid in Fidelity}
    batch = QueryBatch()
    turn = 0
    fids = [Fidelity.L, Fidelity.H]
    while any(queues.values()):
        fid = fids[turn % 2]
        turn += 1
        if not queues[fid]:
            continue
        j = queues[fid].pop(0)
        x, m = candidates[j]
        batch.queries.append(Query(x, m, 1))
        batch.total_cost += config.cost(m)
        if _exceeds(batch.total_cost, config.budget):
            break
    return batch
