"""Bi-fidelity Gaussian process classifier.

The high-fidelity latent is ``f_H = rho * f_L + delta`` with independent sparse
variational GPs for ``f_L`` and ``delta``, each with a constant mean and an RBF
kernel, both linked to Bernoulli labels through the probit function.

All heavy algebra runs through a single set of torch routines (float64) so
that training, prediction and joint-posterior assembly share one code path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.stats import qmc

from .errors import InvalidArgumentError, ParseError, TrainingFailureError
from .num_core import (
    DEFAULT_GH_ORDER,
    GaussianJoint,
    KernelParams,
    gauss_hermite,
    marginal_bernoulli_prob,
)

DTYPE = torch.float64
# relative jitter on K_uu; part of the model definition, not a tuning knob
PRIOR_JITTER = 1e-6
FORMAT_VERSION = "1.0"


class Fidelity(str, Enum):
    L = "L"
    H = "H"

    @classmethod
    def parse(cls, value) -> "Fidelity":
        if isinstance(value, Fidelity):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise InvalidArgumentError(f"unknown fidelity {value!r}; expected 'L' or 'H'") from None


@dataclass(frozen=True)
class LatentGpConfig:
    kernel: KernelParams
    mean_const: float
    inducing_points: np.ndarray

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.inducing_points, dtype=float))
        if z.shape[0] < 1:
            raise InvalidArgumentError("at least one inducing point is required")
        object.__setattr__(self, "inducing_points", z)


@dataclass(frozen=True)
class VariationalState:
    var_mean: np.ndarray
    var_chol: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.var_mean, dtype=float).reshape(-1)
        chol = np.tril(np.asarray(self.var_chol, dtype=float))
        if chol.shape != (m.size, m.size):
            raise InvalidArgumentError("variational Cholesky shape does not match the mean")
        if not np.all(np.diag(chol) > 0):
            raise InvalidArgumentError("variational Cholesky must have a strictly positive diagonal")
        object.__setattr__(self, "var_mean", m)
        object.__setattr__(self, "var_chol", chol)


@dataclass(frozen=True)
class LatentGp:
    config: LatentGpConfig
    state: VariationalState

    @property
    def num_inducing(self) -> int:
        return self.state.var_mean.size


@dataclass(frozen=True)
class BfgpcModel:
    lf: LatentGp
    delta: LatentGp
    rho: float
    input_dim: int
    domain_bounds: np.ndarray

    def __post_init__(self):
        bounds = np.asarray(self.domain_bounds, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "domain_bounds", bounds)
        object.__setattr__(self, "rho", float(self.rho))
        if bounds.shape[0] != self.input_dim:
            raise InvalidArgumentError("domain_bounds must have one [lo, hi] row per input dimension")
        for latent in (self.lf, self.delta):
            if latent.config.inducing_points.shape[1] != self.input_dim:
                raise InvalidArgumentError("inducing points do not match input_dim")

    def default_theta_prior(self) -> tuple[float, float, float, float]:
        return default_theta_prior(self.domain_bounds)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    steps: int = 500
    restarts: int = 3
    reg_lambda: float = 1e-2
    # (log s2_L, log l_L, log s2_delta, log l_delta); None centres on the initial values
    theta_prior: tuple[float, float, float, float] | None = None
    gh_order: int = DEFAULT_GH_ORDER
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.restarts < 1:
            raise InvalidArgumentError(f"restarts must be >= 1, got {self.restarts}")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if self.reg_lambda < 0:
            raise InvalidArgumentError("reg_lambda must be nonnegative")
        if self.gh_order < 1:
            raise InvalidArgumentError("gh_order must be >= 1")
        if self.theta_prior is not None:
            if len(self.theta_prior) != 4:
                raise InvalidArgumentError("theta_prior needs four entries")
            object.__setattr__(self, "theta_prior", tuple(float(t) for t in self.theta_prior))


@dataclass
class LabeledDataset:
    """Observations per fidelity, stored as ``(n, d)`` inputs and 0/1 labels."""

    lf_x: np.ndarray
    lf_y: np.ndarray
    hf_x: np.ndarray
    hf_y: np.ndarray

    def __post_init__(self):
        self.lf_x, self.lf_y = _as_xy(self.lf_x, self.lf_y)
        self.hf_x, self.hf_y = _as_xy(self.hf_x, self.hf_y)
        if self.lf_x.size and self.hf_x.size and self.lf_x.shape[1] != self.hf_x.shape[1]:
            raise InvalidArgumentError("low- and high-fidelity inputs have different dimensions")

    @classmethod
    def from_pairs(cls, lf_points: Iterable, hf_points: Iterable) -> "LabeledDataset":
        lf = list(lf_points)
        hf = list(hf_points)
        return cls([x for x, _ in lf], [y for _, y in lf], [x for x, _ in hf], [y for _, y in hf])

    @property
    def n_lf(self) -> int:
        return self.lf_y.size

    @property
    def n_hf(self) -> int:
        return self.hf_y.size

    def extend(self, fidelity: Fidelity, x: np.ndarray, y: np.ndarray) -> "LabeledDataset":
        x, y = _as_xy(x, y)
        if Fidelity.parse(fidelity) is Fidelity.L:
            return LabeledDataset(_vstack(self.lf_x, x), np.concatenate([self.lf_y, y]), self.hf_x, self.hf_y)
        return LabeledDataset(self.lf_x, self.lf_y, _vstack(self.hf_x, x), np.concatenate([self.hf_y, y]))

    def check_in_domain(self, bounds: np.ndarray) -> None:
        for x in (self.lf_x, self.hf_x):
            if x.size:
                check_in_domain(x, bounds)


def _vstack(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size == 0:
        return b
    if b.size == 0:
        return a
    return np.vstack([a, b])


def _as_xy(x, y) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size == 0:
        x = np.asarray(x, dtype=float)
        d = x.shape[1] if x.ndim == 2 else 0
        return np.zeros((0, d)), y
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(y.size, -1)
    if x.shape[0] != y.size:
        raise InvalidArgumentError(f"{x.shape[0]} inputs but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgumentError("labels must be binary 0/1")
    return x, y


def default_theta_prior(domain_bounds) -> tuple[float, float, float, float]:
    log_ls = math.log(_initial_lengthscale(np.asarray(domain_bounds, dtype=float)))
    return (0.0, log_ls, 0.0, log_ls)


def _initial_lengthscale(bounds: np.ndarray) -> float:
    return 0.5 * float(np.mean(bounds[:, 1] - bounds[:, 0]))


def check_in_domain(points: np.ndarray, bounds: np.ndarray) -> None:
    points = np.atleast_2d(points)
    if points.shape[1] != bounds.shape[0]:
        raise InvalidArgumentError(f"points have dimension {points.shape[1]}, domain has {bounds.shape[0]}")
    bad = np.any((points < bounds[:, 0]) | (points > bounds[:, 1]) | ~np.isfinite(points), axis=1)
    if np.any(bad):
        raise InvalidArgumentError(f"point {points[np.argmax(bad)].tolist()} lies outside the domain {bounds.tolist()}")


def _validate_bounds(input_dim: int, domain_bounds) -> np.ndarray:
    if input_dim < 1:
        raise InvalidArgumentError("input_dim must be >= 1")
    bounds = np.asarray(domain_bounds, dtype=float)
    if bounds.size != 2 * input_dim:
        raise InvalidArgumentError(f"expected {input_dim} [lo, hi] pairs, got {bounds.tolist()}")
    bounds = bounds.reshape(input_dim, 2)
    if not np.all(np.isfinite(bounds)) or not np.all(bounds[:, 1] > bounds[:, 0]):
        raise InvalidArgumentError(f"invalid domain bounds {bounds.tolist()}")
    return bounds


def init_model(input_dim: int, domain_bounds, lf_inducing_count: int, delta_inducing_count: int, seed: int) -> BfgpcModel:
    """Fresh model with Latin-hypercube inducing points and neutral parameters."""
    bounds = _validate_bounds(input_dim, domain_bounds)
    if lf_inducing_count < 1 or delta_inducing_count < 1:
        raise InvalidArgumentError("inducing counts must be >= 1")
    lf_seed, delta_seed = np.random.SeedSequence(seed).spawn(2)
    lengthscale = _initial_lengthscale(bounds)

    def latent(count: int, seq: np.random.SeedSequence) -> LatentGp:
        unit = qmc.LatinHypercube(d=input_dim, seed=np.random.default_rng(seq)).random(count)
        z = qmc.scale(unit, bounds[:, 0], bounds[:, 1])
        return LatentGp(
            LatentGpConfig(KernelParams(1.0, lengthscale), 0.0, z),
            VariationalState(np.zeros(count), 0.1 * np.eye(count)),
        )

    return BfgpcModel(latent(lf_inducing_count, lf_seed), latent(delta_inducing_count, delta_seed), 1.0, input_dim, bounds)


def default_inducing_counts(data: LabeledDataset) -> tuple[int, int]:
    """64 / 32 inducing points, reduced for small datasets."""
    return max(1, min(64, data.n_lf + data.n_hf)), max(1, min(32, data.n_hf))


# --------------------------------------------------------------------------
# torch parameterization


def _latent_to_params(latent: LatentGp) -> dict[str, torch.Tensor]:
    chol = latent.state.var_chol
    return {
        "m": torch.tensor(latent.state.var_mean, dtype=DTYPE),
        "chol_off": torch.tensor(np.tril(chol, -1), dtype=DTYPE),
        "chol_logdiag": torch.tensor(np.log(np.diag(chol)), dtype=DTYPE),
        "log_s2": torch.tensor(math.log(latent.config.kernel.output_scale), dtype=DTYPE),
        "log_ls": torch.tensor(math.log(latent.config.kernel.lengthscale), dtype=DTYPE),
        "c": torch.tensor(latent.config.mean_const, dtype=DTYPE),
    }


def model_to_params(model: BfgpcModel) -> dict[str, torch.Tensor]:
    """Flat dict of trainable leaf tensors, keyed ``lf.*``, ``delta.*`` and ``rho``."""
    params = {f"lf.{k}": v for k, v in _latent_to_params(model.lf).items()}
    params.update({f"delta.{k}": v for k, v in _latent_to_params(model.delta).items()})
    params["rho"] = torch.tensor(model.rho, dtype=DTYPE)
    return params


def params_to_model(params: dict[str, torch.Tensor], template: BfgpcModel) -> BfgpcModel:
    def latent(prefix: str, old: LatentGp) -> LatentGp:
        p = {k.split(".", 1)[1]: v.detach().numpy().copy() for k, v in params.items() if k.startswith(prefix + ".")}
        chol = np.tril(p["chol_off"], -1) + np.diag(np.exp(p["chol_logdiag"]))
        kernel = KernelParams(float(np.exp(p["log_s2"])), float(np.exp(p["log_ls"])))
        return LatentGp(
            LatentGpConfig(kernel, float(p["c"]), old.config.inducing_points),
            VariationalState(p["m"], chol),
        )

    return replace(
        template,
        lf=latent("lf", template.lf),
        delta=latent("delta", template.delta),
        rho=float(params["rho"].detach()),
    )


def _sqdist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return d.clamp_min(0.0)


def _kern(a: torch.Tensor, b: torch.Tensor, log_s2, log_ls) -> torch.Tensor:
    ls = torch.exp(log_ls)
    return torch.exp(log_s2) * torch.exp(-0.5 * _sqdist(a / ls, b / ls))


class _LatentPosterior:
    """Cached factorizations for one whitened sparse variational GP.

    Inducing values are ``u = c + Lk v`` with ``K_uu + jitter I = Lk Lk^T`` and
    ``q(v) = N(m, Ls Ls^T)``; writing ``W = Lk^{-1} K_ux``::

        mean(x)   = c + W^T m
        cov(x,x') = k(x,x') - W^T W' + W^T Ls Ls^T W'
    """

    def __init__(self, p: dict[str, torch.Tensor], z: torch.Tensor):
        self.p = p
        self.z = z
        m = z.shape[0]
        s2 = torch.exp(p["log_s2"])
        kuu = _kern(z, z, p["log_s2"], p["log_ls"]) + PRIOR_JITTER * s2 * torch.eye(m, dtype=DTYPE)
        self.lk = torch.linalg.cholesky(kuu)
        self.ls = torch.tril(p["chol_off"], -1) + torch.diag(torch.exp(p["chol_logdiag"]))

    def _w(self, x: torch.Tensor) -> torch.Tensor:
        kux = _kern(self.z, x, self.p["log_s2"], self.p["log_ls"])
        return torch.linalg.solve_triangular(self.lk, kux, upper=False)

    def marginals(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        w = self._w(x)
        mean = self.p["c"] + w.T @ self.p["m"]
        lw = self.ls.T @ w
        var = torch.exp(self.p["log_s2"]) - (w * w).sum(0) + (lw * lw).sum(0)
        return mean, var

    def joint(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        w = self._w(x)
        mean = self.p["c"] + w.T @ self.p["m"]
        lw = self.ls.T @ w
        cov = _kern(x, x, self.p["log_s2"], self.p["log_ls"]) - w.T @ w + lw.T @ lw
        return mean, 0.5 * (cov + cov.T)

    def kl(self) -> torch.Tensor:
        """KL[q(v) || N(0, I)], equal to KL[q(u) || p(u)]."""
        m = self.ls.shape[0]
        trace = (self.ls * self.ls).sum()
        maha = (self.p["m"] * self.p["m"]).sum()
        logdet_s = 2.0 * self.p["chol_logdiag"].sum()
        return 0.5 * (trace + maha - m - logdet_s)


def _split(params: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    return {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith(prefix + ".")}


class _Posteriors:
    def __init__(self, params: dict[str, torch.Tensor], z_lf: torch.Tensor, z_delta: torch.Tensor):
        self.lf = _LatentPosterior(_split(params, "lf"), z_lf)
        self.delta = _LatentPosterior(_split(params, "delta"), z_delta)
        self.rho = params["rho"]


def _t(x) -> torch.Tensor:
    return torch.tensor(np.asarray(x, dtype=float), dtype=DTYPE)


class _GhLoglik(torch.autograd.Function):
    """Sum over points of E[log Phi(sign * f)], f ~ N(mean, var), by Gauss-Hermite.

    The backward pass uses the analytic derivatives
    ``d/dmean = sum_k w_k sign r(z_k)`` and
    ``d/dvar = sum_k w_k sign r(z_k) x_k / sqrt(2 var)`` with the inverse Mills
    ratio ``r(z) = phi(z) / Phi(z)``, which is much cheaper than differentiating
    the quadrature graph.
    """

    @staticmethod
    def forward(ctx, mean, var, sign, nodes, weights):
        scale = torch.sqrt(2.0 * var)
        z = sign[:, None] * (mean[:, None] + scale[:, None] * nodes)
        logcdf = torch.special.log_ndtr(z)
        ctx.save_for_backward(z, logcdf, scale, sign, nodes, weights)
        return (logcdf @ weights).sum()

    @staticmethod
    def backward(ctx, grad_out):
        z, logcdf, scale, sign, nodes, weights = ctx.saved_tensors
        ratio = torch.exp(-0.5 * z * z - logcdf - _HALF_LOG_2PI)
        grad_mean = sign * (ratio @ weights)
        grad_var = sign * ((ratio * nodes) @ weights) / scale
        return grad_out * grad_mean, grad_out * grad_var, None, None, None


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _gh_loglik_t(mean: torch.Tensor, var: torch.Tensor, y: torch.Tensor, order: int) -> torch.Tensor:
    nodes, weights = gauss_hermite(order)
    sign = 2.0 * y - 1.0
    # clamp keeps d/dvar finite when a variance rounds to zero
    return _GhLoglik.apply(mean, var.clamp_min(1e-12), sign, _t(nodes), _t(weights))


class _Objective:
    """ELBO and regularized loss as torch functions of the trainable parameters."""

    def __init__(self, model: BfgpcModel, data: LabeledDataset, gh_order: int):
        if data.n_lf == 0 and data.n_hf == 0:
            raise InvalidArgumentError("dataset is empty in both fidelities")
        data.check_in_domain(model.domain_bounds)
        self.z_lf = _t(model.lf.config.inducing_points)
        self.z_delta = _t(model.delta.config.inducing_points)
        self.n_lf = data.n_lf
        self.x_all = _t(_vstack(data.lf_x, data.hf_x))
        self.x_hf = _t(data.hf_x)
        self.y_lf = _t(data.lf_y)
        self.y_hf = _t(data.hf_y)
        self.gh_order = gh_order

    def elbo(self, params: dict[str, torch.Tensor]) -> torch.Tensor:
        post = _Posteriors(params, self.z_lf, self.z_delta)
        mean_l, var_l = post.lf.marginals(self.x_all)
        total = post.lf.kl().neg() - post.delta.kl()
        if self.n_lf:
            total = total + _gh_loglik_t(mean_l[: self.n_lf], var_l[: self.n_lf], self.y_lf, self.gh_order)
        if self.y_hf.numel():
            mean_d, var_d = post.delta.marginals(self.x_hf)
            rho = post.rho
            mean_h = rho * mean_l[self.n_lf :] + mean_d
            var_h = rho * rho * var_l[self.n_lf :] + var_d
            total = total + _gh_loglik_t(mean_h, var_h, self.y_hf, self.gh_order)
        return total


def _penalty(params: dict[str, torch.Tensor], theta_prior, reg_lambda: float) -> torch.Tensor:
    theta = torch.stack([params["lf.log_s2"], params["lf.log_ls"], params["delta.log_s2"], params["delta.log_ls"]])
    return reg_lambda * ((theta - _t(theta_prior)) ** 2).sum()


def elbo(model: BfgpcModel, data: LabeledDataset, gh_order: int = DEFAULT_GH_ORDER) -> float:
    objective = _Objective(model, data, gh_order)
    with torch.no_grad():
        return float(objective.elbo(model_to_params(model)))


def regularized_loss(model: BfgpcModel, data: LabeledDataset, config: TrainingConfig) -> float:
    """Negative ELBO plus an L2 penalty on the log kernel hyperparameters."""
    objective = _Objective(model, data, config.gh_order)
    prior = config.theta_prior or model.default_theta_prior()
    with torch.no_grad():
        params = model_to_params(model)
        return float(-objective.elbo(params) + _penalty(params, prior, config.reg_lambda))


def loss_and_grad(model: BfgpcModel, data: LabeledDataset, config: TrainingConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Regularized loss with its gradient for every trainable parameter."""
    objective = _Objective(model, data, config.gh_order)
    prior = config.theta_prior or model.default_theta_prior()
    params = {k: v.requires_grad_() for k, v in model_to_params(model).items()}
    loss = -objective.elbo(params) + _penalty(params, prior, config.reg_lambda)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, value), g in zip(params.items(), grads):
        g = torch.zeros_like(value) if g is None else g
        if name.endswith("chol_off"):
            g = torch.tril(g, -1)
        out[name] = g.detach().numpy().copy()
    return float(loss.detach()), out


class Adam:
    """Adam with bias-corrected moments on a single flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = torch.zeros(size, dtype=DTYPE)
        self.v = torch.zeros(size, dtype=DTYPE)

    @torch.no_grad()
    def step(self, param: torch.Tensor, grad: torch.Tensor) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        self.m.mul_(self.beta1).add_(grad, alpha=1.0 - self.beta1)
        self.v.mul_(self.beta2).addcmul_(grad, grad, value=1.0 - self.beta2)
        param.sub_(self.lr / bc1 * self.m / ((self.v / bc2).sqrt() + self.eps))


class _FlatParams:
    """All trainable parameters packed in one leaf vector, exposed as named views."""

    def __init__(self, params: dict[str, torch.Tensor]):
        self.names = list(params)
        self.shapes = [params[k].shape for k in self.names]
        self.sizes = [params[k].numel() for k in self.names]
        self.flat = torch.cat([params[k].reshape(-1) for k in self.names]).requires_grad_()

    def views(self) -> dict[str, torch.Tensor]:
        parts = torch.split(self.flat, self.sizes)
        return {k: part.view(shape) for k, part, shape in zip(self.names, parts, self.shapes)}

    def detached(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.views().items()}


@dataclass
class _RestartResult:
    model: BfgpcModel
    trace: list[float]
    final_elbo: float


def _optimize(model: BfgpcModel, data: LabeledDataset, config: TrainingConfig) -> _RestartResult | None:
    objective = _Objective(model, data, config.gh_order)
    prior = config.theta_prior or model.default_theta_prior()
    flat = _FlatParams(model_to_params(model))
    opt = Adam(flat.flat.numel(), config.learning_rate)
    trace: list[float] = []
    for _ in range(config.steps):
        params = flat.views()
        value = objective.elbo(params)
        loss = -value + _penalty(params, prior, config.reg_lambda)
        if not torch.isfinite(loss):
            return None
        trace.append(float(value.detach()))
        (grad,) = torch.autograd.grad(loss, flat.flat)
        if not torch.isfinite(grad).all():
            return None
        opt.step(flat.flat, grad)
    with torch.no_grad():
        try:
            final = float(objective.elbo(flat.views()))
        except torch.linalg.LinAlgError:
            return None
    if not math.isfinite(final):
        return None
    trace.append(final)
    return _RestartResult(params_to_model(flat.detached(), model), trace, final)


def train(model: BfgpcModel, data: LabeledDataset, config: TrainingConfig) -> tuple[BfgpcModel, list[float]]:
    """Maximize the regularized ELBO from several initializations.

    Restart 0 starts from ``model``; later restarts re-draw the inducing
    points with seeds derived from ``config.seed``. The restart with the
    highest final ELBO wins. The trace holds the ELBO before every step plus
    the final value.
    """
    counts = (model.lf.num_inducing, model.delta.num_inducing)
    seeds = np.random.SeedSequence(config.seed).generate_state(config.restarts)
    best: _RestartResult | None = None
    for r in range(config.restarts):
        start = model if r == 0 else init_model(model.input_dim, model.domain_bounds, *counts, int(seeds[r]))
        try:
            result = _optimize(start, data, config)
        except torch.linalg.LinAlgError:
            result = None
        if result is not None and (best is None or result.final_elbo > best.final_elbo):
            best = result
    if best is None:
        raise TrainingFailureError(f"all {config.restarts} restarts produced non-finite losses")
    return best.model, best.trace


# --------------------------------------------------------------------------
# prediction


def _posteriors(model: BfgpcModel) -> _Posteriors:
    return _Posteriors(model_to_params(model), _t(model.lf.config.inducing_points), _t(model.delta.config.inducing_points))


def _points(model: BfgpcModel, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, model.input_dim)
    check_in_domain(pts, model.domain_bounds)
    return pts


@torch.no_grad()
def predict_latent(model: BfgpcModel, points, fidelity) -> tuple[np.ndarray, np.ndarray]:
    """Marginal latent mean and variance at ``points`` for one fidelity."""
    fidelity = Fidelity.parse(fidelity)
    x = _t(_points(model, points))
    post = _posteriors(model)
    mean, var = post.lf.marginals(x)
    if fidelity is Fidelity.H:
        mean_d, var_d = post.delta.marginals(x)
        mean = post.rho * mean + mean_d
        var = post.rho**2 * var + var_d
    return mean.numpy().copy(), var.clamp_min(0.0).numpy().copy()


def predict_proba(model: BfgpcModel, points, fidelity) -> np.ndarray:
    mean, var = predict_latent(model, points, fidelity)
    return marginal_bernoulli_prob(mean, var)


def _unique_rows(rows: list[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    index: dict[bytes, int] = {}
    order: list[np.ndarray] = []
    positions = []
    for row in rows:
        key = np.ascontiguousarray(row, dtype=float).tobytes()
        if key not in index:
            index[key] = len(order)
            order.append(row)
        positions.append(index[key])
    d = rows[0].size if rows else 0
    return (np.vstack(order) if order else np.zeros((0, d))), positions


@torch.no_grad()
def joint_latent_posterior(model: BfgpcModel, queries: Sequence, test_points=()) -> GaussianJoint:
    """Joint Gaussian over query latents followed by high-fidelity test latents.

    Builds the base vector over unique ``f_L`` and ``delta`` locations (block
    diagonal covariance) and maps it through the autoregressive assembly: an
    L row picks ``f_L``; an H row is ``rho * f_L + delta``.
    """
    queries = [(np.asarray(x, dtype=float).reshape(-1), Fidelity.parse(m)) for x, m in queries]
    tests = [np.asarray(x, dtype=float).reshape(-1) for x in np.asarray(test_points, dtype=float).reshape(-1, model.input_dim)] if len(test_points) else []
    rows = queries + [(x, Fidelity.H) for x in tests]
    if not rows:
        raise InvalidArgumentError("need at least one query or test point")
    _points(model, np.vstack([x for x, _ in rows]))

    lf_locs, lf_pos = _unique_rows([x for x, _ in rows])
    hf_rows = [i for i, (_, m) in enumerate(rows) if m is Fidelity.H]
    delta_locs, delta_pos_h = _unique_rows([rows[i][0] for i in hf_rows])

    post = _posteriors(model)
    mu_l, cov_l = post.lf.joint(_t(lf_locs))
    mu_l, cov_l = mu_l.numpy(), cov_l.numpy()
    n = len(rows)
    coef_l = np.ones(n)
    coef_d = np.zeros(n)
    delta_pos = np.zeros(n, dtype=int)
    rho = model.rho
    for j, i in enumerate(hf_rows):
        coef_l[i] = rho
        coef_d[i] = 1.0
        delta_pos[i] = delta_pos_h[j]
    lf_pos = np.asarray(lf_pos)
    mean = coef_l * mu_l[lf_pos]
    cov = np.outer(coef_l, coef_l) * cov_l[np.ix_(lf_pos, lf_pos)]
    if hf_rows:
        mu_d, cov_d = post.delta.joint(_t(delta_locs))
        mu_d, cov_d = mu_d.numpy(), cov_d.numpy()
        mean = mean + coef_d * mu_d[delta_pos]
        cov = cov + np.outer(coef_d, coef_d) * cov_d[np.ix_(delta_pos, delta_pos)]
    return GaussianJoint(mean, 0.5 * (cov + cov.T))


# --------------------------------------------------------------------------
# serialization


def model_to_document(model: BfgpcModel) -> str:
    def latent(lat: LatentGp) -> dict:
        return {
            "output_scale": lat.config.kernel.output_scale,
            "lengthscale": lat.config.kernel.lengthscale,
            "mean_const": lat.config.mean_const,
            "inducing_points": lat.config.inducing_points.tolist(),
            "var_mean": lat.state.var_mean.tolist(),
            "var_chol": lat.state.var_chol.tolist(),
        }

    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "bfgpc_model",
        "input_dim": model.input_dim,
        "domain_bounds": model.domain_bounds.tolist(),
        "rho": model.rho,
        "lf": latent(model.lf),
        "delta": latent(model.delta),
    }
    return json.dumps(doc, indent=1)


def check_format_version(doc: dict, what: str) -> None:
    version = str(doc.get("format_version", ""))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise ParseError(f"{what}: unsupported format_version {version!r} (expected {FORMAT_VERSION})")


def model_from_document(text: str) -> BfgpcModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"model document is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "bfgpc_model":
        raise ParseError("not a bfgpc model document")
    check_format_version(doc, "model document")
    try:

        def latent(d: dict) -> LatentGp:
            return LatentGp(
                LatentGpConfig(KernelParams(float(d["output_scale"]), float(d["lengthscale"])), float(d["mean_const"]), np.array(d["inducing_points"], dtype=float)),
                VariationalState(np.array(d["var_mean"], dtype=float), np.array(d["var_chol"], dtype=float)),
            )

        return BfgpcModel(latent(doc["lf"]), latent(doc["delta"]), float(doc["rho"]), int(doc["input_dim"]), np.array(doc["domain_bounds"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"model document is incomplete or malformed: {exc}") from exc
