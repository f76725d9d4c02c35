"""Bayesian prompt re-weighting.

MAP expectation-maximization for the mixing proportions of a mixture whose
components are the (fixed) prompt Gaussians of one class, with a symmetric
Dirichlet prior on the proportions. Observations are points sampled from
image embeddings.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, NumericError
from .gauss import GaussianEmbedding, PromptWeights, csd, mix_prompts, total_uncertainty
from .seeding import rng

FEW_SHOT_TOTAL = 100

__all__ = [
    "PromptWeights", "BprwConfig", "BprwResult", "gaussian_logpdf", "log_densities",
    "e_step", "m_step", "init_weights", "stabilize", "collect_observations",
    "penalized_log_posterior", "run_bprw", "reweight_classes",
]


class BprwWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class BprwConfig:
    """EM settings. Zero-shot defaults: alpha=5, M=5 images, K=20 draws each."""

    alpha: float = 5.0
    eps_cov: float = 0.02
    M: int = 5
    K: int = 20
    max_iters: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgumentError("alpha must be positive")
        if not self.eps_cov > 0:
            raise InvalidArgumentError("eps_cov must be positive")
        if not self.tol > 0:
            raise InvalidArgumentError("tol must be positive")
        if self.M < 1 or self.K < 1 or self.max_iters < 1:
            raise InvalidArgumentError("M, K and max_iters must be >= 1")

    @classmethod
    def few_shot(cls, **kwargs) -> "BprwConfig":
        kwargs.setdefault("alpha", 2.0)
        return cls(**kwargs)


def gaussian_logpdf(x, z: GaussianEmbedding) -> float:
    """Log density of a diagonal Gaussian at point x."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != z.dim:
        raise InvalidArgumentError(f"point has dimension {x.size}, embedding {z.dim}")
    return float(np.sum(-0.5 * (np.log(2.0 * np.pi) + z.log_var)
                        - (x - z.mu) ** 2 / (2.0 * z.var)))


def log_densities(points, prompts: Sequence[GaussianEmbedding]) -> np.ndarray:
    """(M', N) matrix of log f_n(x_j)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    mus = np.stack([p.mu for p in prompts])
    lvs = np.stack([p.log_var for p in prompts])
    if points.shape[1] != mus.shape[1]:
        raise InvalidArgumentError("observation and prompt dimensions differ")
    inv = np.exp(-lvs)
    # one prompt at a time: no (M', N, D) temporary, no expanded-square cancellation
    quad = np.stack([((points - m) ** 2) @ w for m, w in zip(mus, inv)], axis=1)
    return -0.5 * (mus.shape[1] * np.log(2.0 * np.pi) + lvs.sum(axis=1)) - 0.5 * quad


def _as_pi(pi) -> np.ndarray:
    return pi.pi if isinstance(pi, PromptWeights) else np.asarray(pi, dtype=np.float64)


def e_step(obs, prompts: Sequence[GaussianEmbedding], pi, return_flags=False):
    """Responsibilities gamma[j, n], computed in log space with a row max-shift.

    Rows whose weighted densities are all zero (every component has pi = 0
    or -inf log density) fall back to uniform and are flagged.
    """
    if len(prompts) == 0:
        raise InvalidArgumentError("need at least one prompt")
    pi = _as_pi(pi)
    if pi.size != len(prompts):
        raise InvalidArgumentError(f"{pi.size} weights for {len(prompts)} prompts")
    with np.errstate(divide="ignore"):
        logw = log_densities(obs, prompts) + np.log(pi)[None, :]
    shift = logw.max(axis=1, keepdims=True)
    degenerate = ~np.isfinite(shift[:, 0])
    shift[degenerate] = 0.0
    w = np.exp(logw - shift)
    with np.errstate(invalid="ignore"):
        gamma = w / w.sum(axis=1, keepdims=True)
    gamma[degenerate] = 1.0 / len(prompts)
    return (gamma, degenerate) if return_flags else gamma


def m_step(gamma, alpha: float, class_id: Any = None, return_flags=False):
    """MAP update (N_n + alpha - 1) / (M' + N (alpha - 1)), clamped onto the simplex.

    When the denominator is not positive the maximum-likelihood update
    N_n / M' is used instead and the fallback is flagged.
    """
    gamma = np.atleast_2d(np.asarray(gamma, dtype=np.float64))
    m_prime, n = gamma.shape
    counts = gamma.sum(axis=0)
    denom = m_prime + n * (alpha - 1.0)
    fallback = denom <= 0
    if fallback:
        warnings.warn("non-positive MAP denominator; using the ML update",
                      BprwWarning, stacklevel=2)
        pi = counts / m_prime
    else:
        pi = (counts + (alpha - 1.0)) / denom
        # the update already sums to one; only clamped entries need a renormalization
        if np.any(pi < 0):
            pi = np.maximum(pi, 0.0)
            s = pi.sum()
            if s <= 0:
                pi = counts / m_prime
                fallback = True
            else:
                pi = pi / s
    out = PromptWeights(pi, class_id)
    return (out, fallback) if return_flags else out


def init_weights(prompts: Sequence[GaussianEmbedding], class_id=None) -> PromptWeights:
    """Initial proportions proportional to 1 / tr(Sigma_n)."""
    inv = np.array([1.0 / total_uncertainty(p) for p in prompts])
    return PromptWeights(inv / inv.sum(), class_id)


def stabilize(prompts: Sequence[GaussianEmbedding], eps_cov: float) -> list:
    """Sigma + eps_cov * I for every prompt."""
    return [GaussianEmbedding.from_variance(p.mu, p.var + eps_cov, id=p.id,
                                            modality=p.modality)
            for p in prompts]


def penalized_log_posterior(obs, prompts, pi, alpha) -> float:
    """Mixture log-likelihood plus the unnormalized Dirichlet log-prior."""
    pi = _as_pi(pi)
    with np.errstate(divide="ignore"):
        logw = log_densities(obs, prompts) + np.log(pi)[None, :]
        shift = logw.max(axis=1, keepdims=True)
        ll = float(np.sum(shift[:, 0] + np.log(np.exp(logw - shift).sum(axis=1))))
        if alpha == 1.0:
            prior = 0.0
        else:
            prior = float((alpha - 1.0) * np.sum(np.log(pi)))
    return ll + prior


@dataclass
class BprwResult:
    weights: PromptWeights
    log_posterior: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    fallback_used: bool = False
    degenerate_rows: int = 0


def run_bprw(prompts: Sequence[GaussianEmbedding], obs, cfg: BprwConfig = BprwConfig(),
             class_id=None) -> BprwResult:
    """Alternate E and M steps until max |delta pi| < tol or max_iters.

    The initial proportions come from the raw prompt covariances; the
    covariances are inflated by ``eps_cov`` before any density is evaluated.
    """
    if len(prompts) == 0:
        raise InvalidArgumentError("need at least one prompt")
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if obs.shape[0] < 1 or not np.all(np.isfinite(obs)):
        raise InvalidArgumentError("observations must be a nonempty finite array")
    pi = init_weights(prompts, class_id)
    comps = stabilize(prompts, cfg.eps_cov)
    result = BprwResult(pi, [penalized_log_posterior(obs, comps, pi, cfg.alpha)])
    for it in range(1, cfg.max_iters + 1):
        gamma, degenerate = e_step(obs, comps, pi, return_flags=True)
        new, fallback = m_step(gamma, cfg.alpha, class_id, return_flags=True)
        lp = penalized_log_posterior(obs, comps, new, cfg.alpha)
        if math.isnan(lp) or lp == math.inf:
            raise NumericError(f"non-finite log-posterior at iteration {it}", index=it)
        result.log_posterior.append(lp)
        result.fallback_used |= fallback
        result.degenerate_rows += int(degenerate.sum())
        delta = float(np.max(np.abs(new.pi - pi.pi)))
        pi = new
        result.iterations = it
        if delta < cfg.tol:
            result.converged = True
            break
    result.weights = pi
    return result


def collect_observations(class_mix: GaussianEmbedding, image_pool: Sequence[GaussianEmbedding],
                         cfg: BprwConfig = BprwConfig(), seed: int = 0, *,
                         labels: Sequence | None = None, class_id=None) -> np.ndarray:
    """Sample observation points for one class.

    Zero-shot (``labels`` is None): the ``cfg.M`` pool embeddings nearest to
    the class mix by CSD, ``cfg.K`` draws each. Few-shot: every pool entry
    labelled ``class_id``, ``floor(100 / K_true)`` draws each.
    """
    if len(image_pool) == 0:
        raise InvalidArgumentError("image pool is empty")
    gen = rng(seed)
    if labels is None:
        m = cfg.M
        if m > len(image_pool):
            warnings.warn(f"only {len(image_pool)} candidates for M={m}; shrinking M",
                          BprwWarning, stacklevel=2)
            m = len(image_pool)
        d = np.array([csd(class_mix, z) for z in image_pool])
        chosen = [image_pool[i] for i in np.argsort(d, kind="stable")[:m]]
        per = cfg.K
    else:
        if len(labels) != len(image_pool):
            raise InvalidArgumentError("labels must align with the image pool")
        chosen = [z for z, lab in zip(image_pool, labels) if lab == class_id]
        if not chosen:
            raise InvalidArgumentError(f"no labelled images for class {class_id!r}")
        per = max(1, FEW_SHOT_TOTAL // len(chosen))
    pts = []
    for z in chosen:
        sd = np.where(z.log_var <= z.log_var_floor, 0.0, np.exp(0.5 * z.log_var))
        pts.append(z.mu + sd * gen.standard_normal((per, z.dim)))
    return np.concatenate(pts, axis=0)


def reweight_classes(class_prompts: Mapping[Any, Sequence[GaussianEmbedding]],
                     image_pool: Sequence[GaussianEmbedding], cfg: BprwConfig = BprwConfig(),
                     seed: int = 0, labels: Sequence | None = None) -> dict:
    """Run BPRW independently for every class; returns class_id -> BprwResult."""
    out = {}
    for k, (cid, prompts) in enumerate(class_prompts.items()):
        obs = collect_observations(mix_prompts(prompts), image_pool, cfg, seed + k,
                                   labels=labels, class_id=cid)
        out[cid] = run_bprw(prompts, obs, cfg, class_id=cid)
    return out
