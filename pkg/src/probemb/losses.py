"""Probabilistic contrastive loss, Gaussian inclusion measure and the
composite training objective, with analytic gradients.

Everything here works on plain arrays; the ``GaussianEmbedding`` wrappers
at the top of the module are thin conveniences over the array kernels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError, NumericError
from .gauss import GaussianEmbedding, LossParams, csd_similarity

# log of the parameter-independent factor dropped from each 1-D
# log-integral: 1/(2 pi) * 1/sqrt(2 pi) * sqrt(pi)
INC_LOG_CONSTANT = -math.log(2.0 * math.pi) - 0.5 * math.log(2.0)

# per-dimension (log var1, log var2) coefficients of the log-integral
_LOG_VAR_COEFS = {
    "derived": (1.0, 0.5),
    "printed": (2.0, 1.0),
}


class DegenerateVarianceWarning(RuntimeWarning):
    pass


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


class InclusionCoefficients(NamedTuple):
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray


def inclusion_coefficients(mu1, log_var1, mu2, log_var2, eps_inc=1.0):
    """Per-dimension A, B, C of the squared-first-density integral."""
    p1 = eps_inc * np.exp(-np.asarray(log_var1, dtype=np.float64))
    p2 = eps_inc * np.exp(-np.asarray(log_var2, dtype=np.float64))
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    return InclusionCoefficients(A=p1 + 0.5 * p2,
                                 B=2.0 * mu1 * p1 + mu2 * p2,
                                 C=mu1 ** 2 * p1 + 0.5 * mu2 ** 2 * p2)


def _check_variant(variant):
    try:
        return _LOG_VAR_COEFS[variant]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown coefficient variant {variant!r}; use 'derived' or 'printed'"
        ) from None


def _inc_terms(mu1, lv1, mu2, lv2, eps_inc, variant):
    """Per-dimension log-inclusion values and their partial derivatives.

    Works on arrays of shape (..., D). ``B^2/(4A) - C`` is evaluated as
    ``-(mu1 - mu2)^2 a1 a2 / (a1 + a2)``, which is the same quantity without
    the cancellation.
    """
    k1, k2 = _check_variant(variant)
    # overflow surfaces as non-finite values, reported by _check_finite_dims
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        a1 = eps_inc * np.exp(-lv1)
        a2 = 0.5 * eps_inc * np.exp(-lv2)
        A = a1 + a2
        delta = mu1 - mu2
        h = a1 * a2 / A
        val = -k1 * lv1 - k2 * lv2 - 0.5 * np.log(A) - delta ** 2 * h
        d2 = delta ** 2 / A ** 2
        g_lv1 = -k1 + 0.5 * a1 / A + d2 * a1 * a2 ** 2
        g_lv2 = -k2 + 0.5 * a2 / A + d2 * a2 * a1 ** 2
        g_mu1 = -2.0 * delta * h
    return val, g_mu1, -g_mu1, g_lv1, g_lv2


def _check_finite_dims(val, what):
    bad = ~np.isfinite(val)
    if np.any(bad):
        idx = int(np.flatnonzero(bad.reshape(-1, val.shape[-1]).any(axis=0))[0])
        raise NumericError(f"non-finite {what} in dimension {idx}", index=idx)


def inc_measure_arrays(mu1, lv1, mu2, lv2, eps_inc=1.0, variant="derived"):
    mu1, lv1, mu2, lv2 = (np.asarray(x, dtype=np.float64) for x in (mu1, lv1, mu2, lv2))
    if mu1.shape != mu2.shape:
        raise InvalidArgumentError(f"dimension mismatch: {mu1.shape} vs {mu2.shape}")
    val = _inc_terms(mu1, lv1, mu2, lv2, eps_inc, variant)[0]
    _check_finite_dims(val, "inclusion measure")
    return val.sum(axis=-1)


def hypothesis_arrays(mu1, lv1, mu2, lv2, eps_inc=1.0, variant="derived"):
    return (inc_measure_arrays(mu1, lv1, mu2, lv2, eps_inc, variant)
            - inc_measure_arrays(mu2, lv2, mu1, lv1, eps_inc, variant))


def inc_measure(z1: GaussianEmbedding, z2: GaussianEmbedding, eps_inc=1.0,
                variant="derived") -> float:
    """log of the integral of p1^2 p2, summed over dimensions, constants dropped.

    ``variant='printed'`` uses log-variance coefficients (2, 1) instead of
    the (1, 1/2) that the closed-form integral actually produces; it exists
    only for auditing the difference.
    """
    if not eps_inc > 0:
        raise InvalidArgumentError("eps_inc must be positive")
    if z1.dim != z2.dim:
        raise InvalidArgumentError(f"dimension mismatch: {z1.dim} vs {z2.dim}")
    return float(inc_measure_arrays(z1.mu, z1.log_var, z2.mu, z2.log_var,
                                    eps_inc, variant))


def inclusion_hypothesis(z1, z2, eps_inc=1.0, variant="derived") -> float:
    """H(Z1 in Z2); positive when Z1 is judged included in Z2."""
    return inc_measure(z1, z2, eps_inc, variant) - inc_measure(z2, z1, eps_inc, variant)


def inclusion_loss(z1, z2, params: LossParams, variant="derived") -> float:
    h = inclusion_hypothesis(z1, z2, params.eps_inc, variant)
    return softplus(-params.c * h)


def ppcl(z_v: GaussianEmbedding, z_t: GaussianEmbedding, y: int, a: float,
         b: float) -> float:
    if y not in (1, -1):
        raise InvalidArgumentError(f"match label must be +1 or -1, got {y!r}")
    if not a > 0:
        raise InvalidArgumentError("a must be positive")
    s = csd_similarity(z_v, z_t)
    return softplus(y * (-a * s + b))


def vib_loss(z: GaussianEmbedding) -> float:
    """KL(N(mu, diag var) || N(0, I))."""
    if z.degenerate:
        warnings.warn("embedding has floor-capped log-variance; VIB term is "
                      "dominated by the floor", DegenerateVarianceWarning,
                      stacklevel=2)
    return float(0.5 * np.sum(z.mu ** 2 + z.var - z.log_var - 1.0))


@dataclass
class PairBatch:
    """Free-parameter item table plus the index structure of one batch.

    raw_mu holds the un-normalized means; the objective sees
    ``raw_mu / ||raw_mu||``. ``labels[i, j]`` is the +1/-1 match label of
    ``image_idx[i]`` against ``text_idx[j]``. Each row of ``masked_links``
    is ``(original, masked)``; the pair counts as an image link when the
    original is in ``image_idx``, otherwise as a text link.
    """

    raw_mu: np.ndarray
    log_var: np.ndarray
    image_idx: np.ndarray
    text_idx: np.ndarray
    labels: np.ndarray
    masked_links: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))

    def __post_init__(self):
        self.raw_mu = np.asarray(self.raw_mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        self.image_idx = np.asarray(self.image_idx, dtype=np.intp).reshape(-1)
        self.text_idx = np.asarray(self.text_idx, dtype=np.intp).reshape(-1)
        self.labels = np.asarray(self.labels)
        self.masked_links = np.asarray(self.masked_links, dtype=np.intp).reshape(-1, 2)
        n = self.raw_mu.shape[0]
        if self.raw_mu.ndim != 2 or self.log_var.shape != self.raw_mu.shape:
            raise InvalidArgumentError("raw_mu and log_var must be matching (n, D) arrays")
        if self.labels.shape != (self.image_idx.size, self.text_idx.size):
            raise InvalidArgumentError(
                f"labels shape {self.labels.shape} does not match "
                f"({self.image_idx.size}, {self.text_idx.size})")
        if not np.all(np.isin(self.labels, (-1, 1))):
            raise InvalidArgumentError("labels must be +1 or -1")
        for name in ("image_idx", "text_idx", "masked_links"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise InvalidArgumentError(f"{name} indexes outside the item table")
        if np.intersect1d(self.image_idx, self.text_idx).size:
            raise InvalidArgumentError("an item cannot be both image and text")
        if np.any(np.linalg.norm(self.raw_mu, axis=1) == 0):
            raise InvalidArgumentError("zero raw mean vector cannot be normalized")

    @property
    def mu(self) -> np.ndarray:
        return self.raw_mu / np.linalg.norm(self.raw_mu, axis=1, keepdims=True)


@dataclass
class ObjectiveGrad:
    raw_mu: np.ndarray
    log_var: np.ndarray
    a: float
    b: float


TERMS = ("ppcl", "inc_vt", "inc_mask", "vib")


def _inclusion_pairs(mu, lv, i1, i2, params, variant):
    """Weighted-free inclusion loss over index pairs and its gradients."""
    m1, l1, m2, l2 = mu[i1], lv[i1], mu[i2], lv[i2]
    f12 = _inc_terms(m1, l1, m2, l2, params.eps_inc, variant)
    f21 = _inc_terms(m2, l2, m1, l1, params.eps_inc, variant)
    _check_finite_dims(f12[0], "inclusion measure")
    _check_finite_dims(f21[0], "inclusion measure")
    h = f12[0].sum(axis=1) - f21[0].sum(axis=1)
    loss = softplus(-params.c * h)
    dh = (-params.c * sigmoid(-params.c * h))[:, None]
    # f21 has the roles swapped: its (mu1, mu2) are our (mu2, mu1)
    g_m1 = dh * (f12[1] - f21[2])
    g_m2 = dh * (f12[2] - f21[1])
    g_l1 = dh * (f12[3] - f21[4])
    g_l2 = dh * (f12[4] - f21[3])
    return np.sum(loss), g_m1, g_m2, g_l1, g_l2


def objective_value_and_grad(batch: PairBatch, params: LossParams,
                             variant="derived", need_grad=True):
    """Composite objective, its per-term breakdown, and (optionally) gradients.

    Returns ``(total, breakdown, grad)``; ``grad`` is None when
    ``need_grad`` is false.
    """
    mu = batch.mu
    lv = batch.log_var
    var = np.exp(lv)
    n, _ = mu.shape
    g_mu = np.zeros_like(mu)
    g_lv = np.zeros_like(lv)
    iv, it = batch.image_idx, batch.text_idx
    y = batch.labels.astype(np.float64)
    a, b = params.a, params.b

    # contrastive term over every (image, text) pair
    tr = var.sum(axis=1)
    s = mu[iv] @ mu[it].T - 0.5 * (tr[iv][:, None] + tr[it][None, :])
    logits = y * (-a * s + b)
    ppcl_total = float(np.sum(softplus(logits)))
    sig = sigmoid(logits)
    w = sig * (-a * y)
    g_a = float(np.sum(sig * (-y * s)))
    g_b = float(np.sum(sig * y))
    np.add.at(g_mu, iv, w @ mu[it])
    np.add.at(g_mu, it, w.T @ mu[iv])
    np.add.at(g_lv, iv, -0.5 * var[iv] * w.sum(axis=1)[:, None])
    np.add.at(g_lv, it, -0.5 * var[it] * w.sum(axis=0)[:, None])

    def add_inclusion(i1, i2, weight):
        if weight == 0 or i1.size == 0:
            return 0.0
        loss, gm1, gm2, gl1, gl2 = _inclusion_pairs(mu, lv, i1, i2, params, variant)
        np.add.at(g_mu, i1, weight * gm1)
        np.add.at(g_mu, i2, weight * gm2)
        np.add.at(g_lv, i1, weight * gl1)
        np.add.at(g_lv, i2, weight * gl2)
        return weight * float(loss)

    pi, pj = np.nonzero(batch.labels == 1)
    inc_vt = add_inclusion(iv[pi], it[pj], params.alpha1)
    links = batch.masked_links
    inc_mask = add_inclusion(links[:, 0], links[:, 1], params.alpha2)

    vib = 0.0
    if params.beta:
        vib = params.beta * float(0.5 * np.sum(mu ** 2 + var - lv - 1.0))
        g_mu += params.beta * mu
        g_lv += params.beta * 0.5 * (var - 1.0)

    breakdown = {"ppcl": ppcl_total, "inc_vt": inc_vt, "inc_mask": inc_mask, "vib": vib}
    total = ppcl_total + inc_mask + vib + inc_vt
    for name in TERMS:
        if not math.isfinite(breakdown[name]):
            raise NumericError(f"non-finite objective term {name!r}")
    if not need_grad:
        return total, breakdown, None

    # chain through mu = raw / ||raw||
    norms = np.linalg.norm(batch.raw_mu, axis=1, keepdims=True)
    radial = np.sum(g_mu * mu, axis=1, keepdims=True)
    g_raw = (g_mu - mu * radial) / norms
    return total, breakdown, ObjectiveGrad(raw_mu=g_raw, log_var=g_lv, a=g_a, b=g_b)


def total_objective(batch: PairBatch, params: LossParams, variant="derived"):
    """Return ``(total, breakdown)`` for the composite objective."""
    total, breakdown, _ = objective_value_and_grad(batch, params, variant, need_grad=False)
    return total, breakdown


def objective_grad(batch: PairBatch, params: LossParams, variant="derived") -> ObjectiveGrad:
    return objective_value_and_grad(batch, params, variant)[2]
