"""Diagonal Gaussian embeddings and their distance / mixing algebra.

An embedding is stored as a mean vector plus a per-dimension log-variance.
Variances below ``exp(LOG_VAR_FLOOR)`` are clamped at construction so that
a "point" embedding (zero variance) never produces a division by zero in
the inclusion coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import InvalidArgumentError

LOG_VAR_FLOOR = -30.0
NORM_TOL = 1e-9
SIMPLEX_TOL = 1e-8


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianEmbedding:
    """N(mu, diag(exp(log_var))).

    Use :meth:`from_variance` to build from variances and
    :meth:`normalized_from` to build an L2-normalized embedding.
    """

    mu: np.ndarray
    log_var: np.ndarray
    id: Any = None
    normalized: bool = False
    modality: str | None = None
    log_var_floor: float = field(default=LOG_VAR_FLOOR, repr=False)

    def __post_init__(self):
        mu = _frozen(self.mu)
        log_var = np.array(self.log_var, dtype=np.float64).reshape(-1)
        if mu.size < 1:
            raise InvalidArgumentError("embedding dimension must be >= 1")
        if mu.shape != log_var.shape:
            raise InvalidArgumentError(
                f"mu has dimension {mu.size} but log_var has {log_var.size}")
        if not np.all(np.isfinite(mu)):
            raise InvalidArgumentError("mu contains non-finite entries")
        if np.any(np.isnan(log_var)) or np.any(log_var == np.inf):
            raise InvalidArgumentError("log_var contains NaN or +inf")
        log_var = _frozen(np.maximum(log_var, self.log_var_floor))
        if self.normalized:
            norm = float(np.linalg.norm(mu))
            if abs(norm - 1.0) > NORM_TOL:
                raise InvalidArgumentError(
                    f"embedding flagged normalized has |mu| = {norm!r}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", log_var)

    @classmethod
    def from_variance(cls, mu, var, **kwargs) -> "GaussianEmbedding":
        var = np.asarray(var, dtype=np.float64)
        if np.any(var < 0):
            raise InvalidArgumentError("variance must be nonnegative")
        with np.errstate(divide="ignore"):
            log_var = np.log(var)
        return cls(mu=mu, log_var=log_var, **kwargs)

    @classmethod
    def normalized_from(cls, mu, log_var, **kwargs) -> "GaussianEmbedding":
        mu = np.asarray(mu, dtype=np.float64)
        norm = np.linalg.norm(mu)
        if norm == 0:
            raise InvalidArgumentError("cannot normalize a zero mean vector")
        return cls(mu=mu / norm, log_var=log_var, normalized=True, **kwargs)

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def degenerate(self) -> bool:
        """True when any dimension sits on the variance floor."""
        return bool(np.any(self.log_var <= self.log_var_floor))

    def with_id(self, id) -> "GaussianEmbedding":
        return GaussianEmbedding(self.mu, self.log_var, id=id,
                                 normalized=self.normalized,
                                 modality=self.modality,
                                 log_var_floor=self.log_var_floor)


@dataclass(frozen=True)
class LossParams:
    """Scalar hyperparameters of the training objective.

    ``eps_inc`` is the multiplier applied to every 1/sigma^2 inside the
    inclusion coefficients; build it from a log-space value with
    :meth:`from_eps_log`.
    """

    a: float = 10.0
    b: float = -10.0
    c: float = 10.0
    eps_inc: float = float(np.exp(-10.0))
    alpha1: float = 1e-7
    alpha2: float = 1e-3
    beta: float = 0.0

    def __post_init__(self):
        if not self.a > 0:
            raise InvalidArgumentError(f"a must be positive, got {self.a}")
        if not self.c > 0:
            raise InvalidArgumentError(f"c must be positive, got {self.c}")
        if not self.eps_inc > 0:
            raise InvalidArgumentError(
                f"eps_inc must be positive, got {self.eps_inc}")
        for name in ("alpha1", "alpha2", "beta"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be nonnegative")

    @classmethod
    def from_eps_log(cls, eps_log: float = -10.0, **kwargs) -> "LossParams":
        return cls(eps_inc=float(np.exp(eps_log)), **kwargs)

    @property
    def eps_log(self) -> float:
        return float(np.log(self.eps_inc))


@dataclass(frozen=True, eq=False)
class PromptWeights:
    """Mixing proportions over N prompts for one class."""

    pi: np.ndarray
    class_id: Any = None

    def __post_init__(self):
        pi = _frozen(self.pi)
        if pi.size == 0:
            raise InvalidArgumentError("prompt weights must be nonempty")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidArgumentError(
                f"weights are not on the simplex (sum={pi.sum()!r})")
        object.__setattr__(self, "pi", pi)

    def __len__(self):
        return self.pi.size


def _check_same_dim(z1: GaussianEmbedding, z2: GaussianEmbedding):
    if z1.dim != z2.dim:
        raise InvalidArgumentError(
            f"dimension mismatch: {z1.dim} vs {z2.dim}")


def csd(z1: GaussianEmbedding, z2: GaussianEmbedding) -> float:
    """Closed-form sampled distance E||Z1 - Z2||^2."""
    _check_same_dim(z1, z2)
    diff = z1.mu - z2.mu
    return float(diff @ diff + np.sum(z1.var + z2.var))


def csd_similarity(z1: GaussianEmbedding, z2: GaussianEmbedding) -> float:
    """Inner-product form of CSD for unit means: mu1.mu2 - tr(S1 + S2)/2."""
    _check_same_dim(z1, z2)
    if not (z1.normalized and z2.normalized):
        raise InvalidArgumentError("csd_similarity requires normalized embeddings")
    return float(z1.mu @ z2.mu - 0.5 * np.sum(z1.var + z2.var))


def total_uncertainty(z: GaussianEmbedding) -> float:
    return float(np.sum(z.var))


def _stack(zs: Sequence[GaussianEmbedding]):
    if len(zs) == 0:
        raise InvalidArgumentError("need at least one embedding")
    dims = {z.dim for z in zs}
    if len(dims) != 1:
        raise InvalidArgumentError(f"embeddings have mixed dimensions {sorted(dims)}")
    return np.stack([z.mu for z in zs]), np.stack([z.var for z in zs])


def weighted_average(zs, weights, *, renormalize=False, id=None) -> GaussianEmbedding:
    mus, vars_ = _stack(zs)
    w = np.asarray(weights, dtype=np.float64)
    mu = w @ mus
    var = w @ vars_
    if renormalize:
        return GaussianEmbedding.from_variance(mu / np.linalg.norm(mu), var,
                                               id=id, normalized=True)
    return GaussianEmbedding.from_variance(mu, var, id=id)


def mix_prompts(zs: Sequence[GaussianEmbedding], *, renormalize=False,
                id=None) -> GaussianEmbedding:
    """Prompt ensemble: average the means and average the variances.

    The variance is the plain mean of the variances, not divided by N again.
    """
    n = len(zs)
    if n == 0:
        raise InvalidArgumentError("mix_prompts needs a nonempty list")
    if n == 1 and not renormalize:
        return zs[0] if id is None else zs[0].with_id(id)
    return weighted_average(zs, np.full(n, 1.0 / n), renormalize=renormalize, id=id)


def weighted_mix(zs: Sequence[GaussianEmbedding], pi: PromptWeights | Sequence[float],
                 *, renormalize=False, id=None) -> GaussianEmbedding:
    """Parameter average sum_i pi_i Z_i (means and variances both weighted by pi)."""
    if not isinstance(pi, PromptWeights):
        pi = PromptWeights(np.asarray(pi, dtype=np.float64))
    if len(pi) != len(zs):
        raise InvalidArgumentError(
            f"{len(pi)} weights for {len(zs)} embeddings")
    nz = np.flatnonzero(pi.pi)
    if nz.size == 1 and pi.pi[nz[0]] == 1.0 and not renormalize:
        z = zs[int(nz[0])]
        return z if id is None else z.with_id(id)
    return weighted_average(zs, pi.pi, renormalize=renormalize, id=id)
