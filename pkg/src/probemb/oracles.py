"""Brute-force reference computations.

None of these share code with the analytic paths they are used to check:
the inclusion integral is done by trapezoid quadrature, expectations by
Monte Carlo, gradients by central differences and mixture
responsibilities by extended-precision arithmetic without log-space tricks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import mpmath
import numpy as np

from .errors import InvalidArgumentError, NumericError
from .gauss import GaussianEmbedding
from .seeding import rng

MC_CHUNK = 100_000


@dataclass(frozen=True)
class QuadratureConfig:
    half_width_sigmas: float = 12.0
    points: int = 20001

    def __post_init__(self):
        if self.points < 101 or self.points % 2 == 0:
            raise InvalidArgumentError("points must be odd and >= 101")
        if self.half_width_sigmas < 6:
            raise InvalidArgumentError("half_width_sigmas must be >= 6")


def _log_normal_pdf(x, mu, var):
    return -0.5 * np.log(2.0 * np.pi * var) - (x - mu) ** 2 / (2.0 * var)


def quadrature_log_inc(mu1: float, var1: float, mu2: float, var2: float,
                       cfg: QuadratureConfig = QuadratureConfig()) -> float:
    """log of the integral of p1(x)^2 p2(x) dx by composite trapezoid rule."""
    if not (var1 > 0 and var2 > 0):
        raise InvalidArgumentError("variances must be positive")
    if not all(map(math.isfinite, (mu1, var1, mu2, var2))):
        raise InvalidArgumentError("parameters must be finite")
    # p1^2 has precision 2/var1, p2 has 1/var2
    prec = 2.0 / var1 + 1.0 / var2
    center = (2.0 * mu1 / var1 + mu2 / var2) / prec
    w = cfg.half_width_sigmas / math.sqrt(prec)
    x = np.linspace(center - w, center + w, cfg.points)
    log_f = 2.0 * _log_normal_pdf(x, mu1, var1) + _log_normal_pdf(x, mu2, var2)
    shift = log_f.max()
    integral = np.trapezoid(np.exp(log_f - shift), x)
    result = float(shift + math.log(integral))
    if result < math.log(1e-300):
        raise NumericError("inclusion integral underflows 1e-300; widen the variances")
    return result


class MCEstimate(NamedTuple):
    estimate: float
    std_error: float


def _chunked_mean(sample_fn, n, seed):
    """Mean and standard error of per-draw values, generated in fixed chunks.

    Chunk k always uses stream k of the seed, so a parallel evaluation over
    chunks reproduces the serial one.
    """
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk = 0
    while done < n:
        m = min(MC_CHUNK, n - done)
        vals = sample_fn(rng(seed, chunk), m)
        total += float(np.sum(vals))
        total_sq += float(np.sum(vals * vals))
        done += m
        chunk += 1
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return MCEstimate(mean, math.sqrt(var / n))


def _sampling_sd(z: GaussianEmbedding):
    # dimensions on the variance floor are treated as exact points
    return np.where(z.log_var <= z.log_var_floor, 0.0, np.exp(0.5 * z.log_var))


def mc_csd(z1: GaussianEmbedding, z2: GaussianEmbedding, n: int = 1_000_000,
           seed: int = 0) -> MCEstimate:
    """Monte-Carlo estimate of E||Z1 - Z2||^2 with its standard error."""
    if z1.dim != z2.dim:
        raise InvalidArgumentError("dimension mismatch")
    sd1, sd2 = _sampling_sd(z1), _sampling_sd(z2)

    def draw(gen, m):
        x1 = z1.mu + sd1 * gen.standard_normal((m, z1.dim))
        x2 = z2.mu + sd2 * gen.standard_normal((m, z2.dim))
        d = x1 - x2
        return np.einsum("ij,ij->i", d, d)

    est = _chunked_mean(draw, int(n), seed)
    if not (np.any(sd1) or np.any(sd2)):
        return MCEstimate(est.estimate, 0.0)
    return est


def mc_kl_to_standard_normal(z: GaussianEmbedding, n: int = 200_000,
                             seed: int = 0) -> MCEstimate:
    """Monte-Carlo estimate of KL(z || N(0, I)) = E_z[log q(x) - log phi(x)]."""
    sd = np.exp(0.5 * z.log_var)
    var = sd ** 2

    def draw(gen, m):
        x = z.mu + sd * gen.standard_normal((m, z.dim))
        log_q = np.sum(-0.5 * np.log(2 * np.pi * var) - (x - z.mu) ** 2 / (2 * var), axis=1)
        log_p = np.sum(-0.5 * np.log(2 * np.pi) - x ** 2 / 2, axis=1)
        return log_q - log_p

    return _chunked_mean(draw, int(n), seed)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not 1e-7 <= step <= 1e-3:
        raise InvalidArgumentError("step must lie in [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}", index=i)
        g[i] = (fp - fm) / (2.0 * step)
    return grad


def direct_responsibilities(points, mus, variances, pi, dps: int = 60) -> np.ndarray:
    """Mixture responsibilities from plain densities in extended precision."""
    points = np.asarray(points, dtype=np.float64)
    with mpmath.workdps(dps):
        dens = []
        for x in points:
            row = []
            for mu, var, p in zip(mus, variances, pi):
                f = mpmath.mpf(1)
                for xd, md, vd in zip(x, mu, var):
                    vd = mpmath.mpf(float(vd))
                    f *= mpmath.exp(-(mpmath.mpf(float(xd)) - float(md)) ** 2 / (2 * vd))
                    f /= mpmath.sqrt(2 * mpmath.pi * vd)
                row.append(mpmath.mpf(float(p)) * f)
            s = mpmath.fsum(row)
            dens.append([float(r / s) for r in row])
    return np.array(dens)
