"""Numerical primitives: RBF kernel, probit link, Gauss-Hermite expectations,
nugget-stabilized Cholesky and closed-form Gaussian mutual information."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr

from .errors import InvalidArgumentError, NumericalFailureError

DEFAULT_GH_ORDER = 20
NUGGET_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class KernelParams:
    output_scale: float
    lengthscale: float

    def __post_init__(self):
        if not (self.output_scale > 0 and self.lengthscale > 0):
            raise InvalidArgumentError(
                f"kernel parameters must be positive, got {self.output_scale}, {self.lengthscale}"
            )


@dataclass(frozen=True)
class GaussianJoint:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise InvalidArgumentError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        _check_symmetric(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    nugget_used: float

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def _check_symmetric(cov: np.ndarray, rtol: float = 1e-8) -> None:
    scale = max(float(np.max(np.abs(cov))) if cov.size else 0.0, np.finfo(float).tiny)
    if cov.size and float(np.max(np.abs(cov - cov.T))) > rtol * scale:
        raise InvalidArgumentError("matrix is not symmetric within relative tolerance 1e-8")


def rbf_kernel(x, x_prime, params: KernelParams) -> float:
    """Scaled squared-exponential kernel between two points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != x_prime.shape or x.ndim != 1:
        raise InvalidArgumentError(f"dimension mismatch: {x.shape} vs {x_prime.shape}")
    sq = float(np.sum((x - x_prime) ** 2))
    return params.output_scale * math.exp(-0.5 * sq / params.lengthscale**2)


def rbf_gram(xa: np.ndarray, xb: np.ndarray, params: KernelParams) -> np.ndarray:
    """Kernel matrix between the rows of ``xa`` and ``xb``."""
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    xb = np.atleast_2d(np.asarray(xb, dtype=float))
    if xa.shape[1] != xb.shape[1]:
        raise InvalidArgumentError(f"dimension mismatch: {xa.shape[1]} vs {xb.shape[1]}")
    sq = np.sum((xa[:, None, :] - xb[None, :, :]) ** 2, axis=-1)
    return params.output_scale * np.exp(-0.5 * sq / params.lengthscale**2)


def probit_link(z):
    """Return ``(Phi(z), phi(z))``; works on scalars and arrays."""
    z_arr = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z_arr)):
        raise InvalidArgumentError("probit_link requires finite input")
    p = ndtr(z_arr)
    dp = np.exp(-0.5 * z_arr**2) / _SQRT_2PI
    if z_arr.ndim == 0:
        return float(p), float(dp)
    return p, dp


@lru_cache(maxsize=32)
def gauss_hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Physicists' Gauss-Hermite nodes and weights, weights divided by sqrt(pi)."""
    if order < 1:
        raise InvalidArgumentError(f"quadrature order must be >= 1, got {order}")
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    weights = weights / math.sqrt(math.pi)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gh_expected_bernoulli_loglik(mean, var, y, order: int = DEFAULT_GH_ORDER):
    """E_{f ~ N(mean, var)} [log p(y | f)] under the probit likelihood.

    ``log(1 - Phi(f))`` is evaluated as ``log Phi(-f)`` so confident
    mislabels stay finite.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    y = np.asarray(y)
    if np.any(var < 0):
        raise InvalidArgumentError("variance must be nonnegative")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgumentError("labels must be 0 or 1")
    nodes, weights = gauss_hermite(order)
    sign = 2.0 * y - 1.0
    f = mean[..., None] + np.sqrt(2.0 * var)[..., None] * nodes
    out = log_ndtr(sign[..., None] * f) @ weights
    return float(out) if out.ndim == 0 else out


def marginal_bernoulli_prob(mean, var):
    """Integral of Phi(f) N(f; mean, var) df, exact for the probit link."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise InvalidArgumentError("variance must be nonnegative")
    out = ndtr(mean / np.sqrt(1.0 + var))
    return float(out) if out.ndim == 0 else out


def stabilized_cholesky(cov, min_nugget: float = 0.0) -> CholeskyFactor:
    """Cholesky of ``cov + nugget * I`` with a deterministic escalation ladder.

    Nuggets are tried in the order of ``NUGGET_LADDER`` times the mean
    diagonal; ``min_nugget`` is an absolute floor applied to every rung.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {cov.shape}")
    _check_symmetric(cov)
    n = cov.shape[0]
    if n == 0:
        return CholeskyFactor(np.zeros((0, 0)), 0.0)
    scale = abs(float(np.mean(np.diag(cov))))
    eye = np.eye(n)
    for rung in NUGGET_LADDER:
        nugget = max(rung * scale, min_nugget)
        try:
            lower = np.linalg.cholesky(cov + nugget * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(lower) > 0) and np.all(np.isfinite(lower)):
            return CholeskyFactor(lower, nugget)
    min_eig = float(np.linalg.eigvalsh(0.5 * (cov + cov.T))[0])
    raise NumericalFailureError(
        f"Cholesky failed at maximum nugget {NUGGET_LADDER[-1]:g} x mean diagonal "
        f"(mean diagonal {scale:.3e}, min eigenvalue {min_eig:.3e})",
        min_eigenvalue=min_eig,
    )


def _validate_split(n: int, a: Sequence[int], b: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(list(a), dtype=int)
    b = np.asarray(list(b), dtype=int)
    if a.size == 0 or b.size == 0:
        raise InvalidArgumentError("index sets must be nonempty")
    if len(set(a.tolist())) != a.size or len(set(b.tolist())) != b.size:
        raise InvalidArgumentError("index sets contain duplicates")
    if set(a.tolist()) & set(b.tolist()):
        raise InvalidArgumentError("index sets overlap")
    if sorted(a.tolist() + b.tolist()) != list(range(n)):
        raise InvalidArgumentError("index sets must cover every index of the joint")
    return a, b


def gaussian_mi(joint: GaussianJoint, a: Sequence[int], b: Sequence[int], min_nugget: float = 0.0) -> float:
    """Mutual information in nats between blocks ``a`` and ``b`` of a Gaussian.

    The nugget selected for the full joint is reused for both marginal blocks,
    so the result is the exact MI of ``cov + nugget * I`` and never negative.
    """
    a, b = _validate_split(joint.dim, a, b)
    cov = joint.cov
    if not np.any(cov[np.ix_(a, b)]):
        return 0.0
    idx = np.concatenate([a, b])
    full = stabilized_cholesky(cov[np.ix_(idx, idx)], min_nugget=min_nugget)
    nugget = full.nugget_used
    logdet_a = _logdet_with_nugget(cov[np.ix_(a, a)], nugget)
    logdet_b = _logdet_with_nugget(cov[np.ix_(b, b)], nugget)
    mi = 0.5 * (logdet_a + logdet_b - full.logdet())
    return max(mi, 0.0)


def _logdet_with_nugget(block: np.ndarray, nugget: float) -> float:
    try:
        lower = np.linalg.cholesky(block + nugget * np.eye(block.shape[0]))
    except np.linalg.LinAlgError:
        # principal blocks of a PD matrix are PD; this only triggers on rounding
        return stabilized_cholesky(block, min_nugget=nugget).logdet()
    return 2.0 * float(np.sum(np.log(np.diag(lower))))
