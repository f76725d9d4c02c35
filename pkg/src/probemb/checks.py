"""Oracle-versus-analytic checks run by ``probemb oracle-check``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import oracles
from .bprw import e_step
from .gauss import GaussianEmbedding, LossParams, csd
from .losses import PairBatch, hypothesis_arrays, inc_measure, objective_value_and_grad, vib_loss
from .seeding import rng

CLOSED_FORM_N01 = 1.0 / (2.0 * math.sqrt(3.0) * math.pi)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def check_inclusion_vs_quadrature(seed=0, draws=50):
    gen = rng(seed, 10)
    diffs = []
    for _ in range(draws):
        m1, m2 = gen.uniform(-3, 3, 2)
        v1, v2 = gen.uniform(0.05, 5, 2)
        z1 = GaussianEmbedding.from_variance([m1], [v1])
        z2 = GaussianEmbedding.from_variance([m2], [v2])
        diffs.append(inc_measure(z1, z2, 1.0) - oracles.quadrature_log_inc(m1, v1, m2, v2))
    spread = float(np.ptp(diffs))
    return CheckResult("inc_measure - quadrature constant", spread < 1e-6, spread, 1e-6,
                       f"{draws} draws")


def check_closed_form_n01():
    val = math.exp(oracles.quadrature_log_inc(0.0, 1.0, 0.0, 1.0))
    rel = abs(val - CLOSED_FORM_N01) / CLOSED_FORM_N01
    return CheckResult("quadrature N(0,1)^3 = 1/(2 sqrt(3) pi)", rel < 1e-6, rel, 1e-6)


def check_nested_sign(grid=10):
    s1, s2 = np.meshgrid(np.geomspace(0.01, 10, grid), np.geomspace(0.01, 10, grid))
    s1, s2 = s1.ravel(), s2.ravel()
    lo, hi = np.minimum(s1, s2), np.maximum(s1, s2) * 1.5
    h = hypothesis_arrays(np.zeros((lo.size, 1)), np.log(lo)[:, None],
                          np.zeros((hi.size, 1)), np.log(hi)[:, None], 1.0)
    frac = float(np.mean(h > 0))
    return CheckResult("H > 0 on nested pairs", frac == 1.0, frac, 1.0, f"{lo.size} pairs")


def check_csd_mc(seed=0, pairs=10, n=1_000_000, dim=4):
    gen = rng(seed, 11)
    worst = 0.0
    for i in range(pairs):
        z1 = GaussianEmbedding(gen.normal(size=dim), gen.uniform(-3, 0, dim))
        z2 = GaussianEmbedding(gen.normal(size=dim), gen.uniform(-3, 0, dim))
        est = oracles.mc_csd(z1, z2, n, seed + i)
        worst = max(worst, abs(est.estimate - csd(z1, z2)) / est.std_error)
    return CheckResult("csd vs Monte Carlo (std errors)", worst < 3.0, worst, 3.0,
                       f"{pairs} pairs, n={n}")


def check_vib_mc(seed=0, count=20, n=200_000, dim=3):
    gen = rng(seed, 12)
    worst = 0.0
    for i in range(count):
        z = GaussianEmbedding(gen.normal(scale=0.7, size=dim), gen.uniform(-1, 1, dim))
        est = oracles.mc_kl_to_standard_normal(z, n, seed + i)
        worst = max(worst, abs(est.estimate - vib_loss(z)) / est.std_error)
    return CheckResult("vib_loss vs Monte-Carlo KL (std errors)", worst < 3.0, worst, 3.0,
                       f"{count} embeddings")


def random_batch(gen, n_items=8, dim=6):
    """Random PairBatch: images, texts and masked extras drawn from one table."""
    n_img = max(1, n_items // 3)
    n_txt = max(1, n_items // 3)
    extra = n_items - n_img - n_txt
    labels = np.where(gen.random((n_img, n_txt)) < 0.5, 1, -1)
    links = []
    for e in range(extra):
        links.append((int(gen.integers(0, n_img + n_txt)), n_img + n_txt + e))
    return PairBatch(gen.normal(size=(n_items, dim)), gen.uniform(-2.5, 0.5, (n_items, dim)),
                     np.arange(n_img), n_img + np.arange(n_txt), labels,
                     np.array(links, dtype=int).reshape(-1, 2))


def random_params(gen):
    return LossParams(a=float(gen.uniform(1, 10)), b=float(gen.uniform(-5, 5)),
                      c=float(gen.uniform(0.5, 5)), eps_inc=float(gen.uniform(0.1, 1)),
                      alpha1=float(gen.uniform(0, 1)), alpha2=float(gen.uniform(0, 1)),
                      beta=float(gen.uniform(0, 1)))


def flat_objective(batch, params):
    """(f, x0, analytic gradient) over the packed vector [raw_mu, log_var, a, b]."""
    n, d = batch.raw_mu.shape

    def f(x):
        b = PairBatch(x[:n * d].reshape(n, d), x[n * d:2 * n * d].reshape(n, d),
                      batch.image_idx, batch.text_idx, batch.labels, batch.masked_links)
        p = LossParams(a=x[-2], b=x[-1], c=params.c, eps_inc=params.eps_inc,
                       alpha1=params.alpha1, alpha2=params.alpha2, beta=params.beta)
        return objective_value_and_grad(b, p, need_grad=False)[0]

    x0 = np.concatenate([batch.raw_mu.ravel(), batch.log_var.ravel(), [params.a, params.b]])
    g = objective_value_and_grad(batch, params)[2]
    an = np.concatenate([g.raw_mu.ravel(), g.log_var.ravel(), [g.a, g.b]])
    return f, x0, an


def gradient_rel_error(fd, an, floor=1e-2):
    """Relative error with a denominator floor for near-zero coordinates."""
    return np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)


def check_gradients(seed=0, batches=20, step=1e-5):
    gen = rng(seed, 13)
    worst = 0.0
    for _ in range(batches):
        batch = random_batch(gen, int(gen.integers(3, 9)), int(gen.integers(1, 17)))
        f, x0, an = flat_objective(batch, random_params(gen))
        fd = oracles.finite_diff_grad(f, x0, step)
        worst = max(worst, float(np.max(gradient_rel_error(fd, an))))
    return CheckResult("objective_grad vs finite differences", worst < 1e-4, worst, 1e-4,
                       f"{batches} batches, h={step}")


def check_e_step(seed=0):
    gen = rng(seed, 14)
    n, dim = 3, 2
    prompts = [GaussianEmbedding(gen.normal(scale=3, size=dim), gen.uniform(-1, 0.5, dim))
               for _ in range(n)]
    pi = gen.dirichlet(np.ones(n))
    obs = gen.normal(scale=4, size=(5, dim))
    fast = e_step(obs, prompts, pi)
    slow = oracles.direct_responsibilities(obs, [p.mu for p in prompts],
                                           [p.var for p in prompts], pi)
    err = float(np.max(np.abs(fast - slow)))
    return CheckResult("e_step vs extended-precision brute force", err < 1e-10, err, 1e-10)


def run_all(seed=0, mc_samples=1_000_000):
    return [
        check_inclusion_vs_quadrature(seed),
        check_closed_form_n01(),
        check_nested_sign(),
        check_csd_mc(seed, n=mc_samples),
        check_vib_mc(seed),
        check_gradients(seed),
        check_e_step(seed),
    ]
