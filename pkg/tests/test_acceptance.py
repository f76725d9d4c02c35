"""Acceptance criteria, one PASS/FAIL line each.

Run under pytest (lines are printed in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""

import math
import time

import numpy as np

from probemb import oracles
from probemb.bprw import BprwConfig, m_step, penalized_log_posterior, run_bprw, stabilize
from probemb.checks import (CLOSED_FORM_N01, flat_objective, gradient_rel_error, random_batch,
                            random_params)
from probemb.cli import main
from probemb.gauss import GaussianEmbedding, LossParams, csd, csd_similarity
from probemb.inference import traversal_metrics, traverse
from probemb.losses import hypothesis_arrays, inc_measure, inclusion_hypothesis, ppcl
from probemb.synth import TrainerConfig, ablation_report, generate_corpus, hierarchy_corpus

RESULTS = []


def record(name, ok, elapsed, limit, detail):
    ok = bool(ok) and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({elapsed:.1f}s, limit {limit:g}s)"
    RESULTS.append(line)
    assert ok, line


def test_inclusion_oracle():
    t0 = time.perf_counter()
    gen = np.random.default_rng(0)
    diffs = []
    for _ in range(60):
        m1, m2 = gen.uniform(-3, 3, 2)
        v1, v2 = gen.uniform(0.05, 5, 2)
        z1 = GaussianEmbedding.from_variance([m1], [v1])
        z2 = GaussianEmbedding.from_variance([m2], [v2])
        diffs.append(inc_measure(z1, z2, 1.0) - oracles.quadrature_log_inc(m1, v1, m2, v2))
    spread = float(np.ptp(diffs))
    n01 = math.exp(oracles.quadrature_log_inc(0.0, 1.0, 0.0, 1.0))
    rel = abs(n01 - CLOSED_FORM_N01) / CLOSED_FORM_N01
    record("inclusion oracle", spread < 1e-6 and rel < 1e-6, time.perf_counter() - t0, 10,
           f"spread {spread:.2e} over 60 draws, N(0,1)^3 rel err {rel:.2e}")


def test_hypothesis_signs():
    t0 = time.perf_counter()
    lo, hi = np.meshgrid(np.geomspace(0.01, 5, 10), np.geomspace(1.1, 20, 10))
    lo, hi = lo.ravel(), lo.ravel() * hi.ravel()
    mu = np.random.default_rng(1).uniform(-3, 3, (lo.size, 1))
    h = hypothesis_arrays(mu, np.log(lo)[:, None], mu, np.log(hi)[:, None], 1.0)
    frac = float(np.mean(h > 0))

    gen = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        a = GaussianEmbedding(gen.normal(size=4), gen.uniform(-3, 2, 4))
        b = GaussianEmbedding(gen.normal(size=4), gen.uniform(-3, 2, 4))
        worst = max(worst, abs(inclusion_hypothesis(a, b) + inclusion_hypothesis(b, a)))
    self_zero = all(inclusion_hypothesis(z, z) == 0.0 for z in (a, b))
    record("hypothesis signs", frac == 1.0 and worst < 1e-10 and self_zero,
           time.perf_counter() - t0, 5,
           f"H>0 on {frac:.0%} of {lo.size} nested pairs, antisymmetry {worst:.1e}, "
           f"H(Z,Z)=0 {self_zero}")


def test_gradients():
    t0 = time.perf_counter()
    gen = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        batch = random_batch(gen, int(gen.integers(3, 9)), int(gen.integers(1, 17)))
        f, x0, an = flat_objective(batch, random_params(gen))
        fd = oracles.finite_diff_grad(f, x0, 1e-5)
        worst = max(worst, float(np.max(gradient_rel_error(fd, an))))
    record("gradient correctness", worst < 1e-4, time.perf_counter() - t0, 30,
           f"max relative error {worst:.2e} over 20 batches")


def test_loss_algebra():
    t0 = time.perf_counter()
    gen = np.random.default_rng(4)
    zero_err = 0.0
    for _ in range(50):
        zv = GaussianEmbedding.normalized_from(gen.normal(size=5), gen.uniform(-4, 1, 5))
        zt = GaussianEmbedding.normalized_from(gen.normal(size=5), gen.uniform(-4, 1, 5))
        a = float(gen.uniform(0.1, 20))
        b = a * csd_similarity(zv, zt)
        for y in (1, -1):
            zero_err = max(zero_err, abs(ppcl(zv, zt, y, a, b) - math.log(2.0)))

    sim_err = 0.0
    for _ in range(1000):
        d = int(gen.integers(1, 17))
        z1 = GaussianEmbedding.normalized_from(gen.normal(size=d), gen.uniform(-6, 1, d))
        z2 = GaussianEmbedding.normalized_from(gen.normal(size=d), gen.uniform(-6, 1, d))
        sim_err = max(sim_err, abs(csd_similarity(z1, z2) - (1 - 0.5 * csd(z1, z2))))

    worst_se = 0.0
    for i in range(10):
        z1 = GaussianEmbedding(gen.normal(size=4), gen.uniform(-3, 0, 4))
        z2 = GaussianEmbedding(gen.normal(size=4), gen.uniform(-3, 0, 4))
        est = oracles.mc_csd(z1, z2, 1_000_000, i)
        worst_se = max(worst_se, abs(est.estimate - csd(z1, z2)) / est.std_error)
    record("loss algebra", zero_err <= 1e-12 and sim_err <= 1e-12 and worst_se < 3,
           time.perf_counter() - t0, 60,
           f"ppcl zero-logit err {zero_err:.1e}, similarity err {sim_err:.1e}, "
           f"csd vs MC {worst_se:.2f} SE")


def test_em_suite():
    t0 = time.perf_counter()
    gen = np.random.default_rng(5)
    exact = True
    for _ in range(200):
        m, n = int(gen.integers(1, 60)), int(gen.integers(1, 8))
        gam = gen.dirichlet(np.ones(n), size=m)
        exact &= bool(np.array_equal(m_step(gam, 1.0).pi, gam.sum(axis=0) / m))

    worst_drop = 0.0
    for alpha in (2.0, 5.0):
        for _ in range(20):
            k, dim = int(gen.integers(2, 5)), 2
            prompts = [GaussianEmbedding(gen.normal(scale=2, size=dim),
                                         gen.uniform(-1.5, 0.5, dim)) for _ in range(k)]
            obs = gen.normal(scale=2, size=(30, dim))
            lp = run_bprw(prompts, obs, BprwConfig(alpha=alpha, max_iters=100)).log_posterior
            worst_drop = max(worst_drop, float(-np.min(np.diff(lp), initial=0.0)))

    prompts = [GaussianEmbedding.from_variance([0.0, 0.0], [0.1, 0.1]),
               GaussianEmbedding.from_variance([10.0, 0.0], [0.1, 0.1])]
    obs = np.random.default_rng(7).normal(scale=0.3, size=(60, 2))
    cfg = BprwConfig(alpha=2.0)
    pi1 = float(run_bprw(prompts, obs, cfg).weights.pi[0])
    comps = stabilize(prompts, cfg.eps_cov)
    grid = np.linspace(0.0, 1.0, 1001)[1:-1]
    lp = [penalized_log_posterior(obs, comps, [p, 1 - p], cfg.alpha) for p in grid]
    best = float(grid[int(np.argmax(lp))])
    record("EM suite", exact and worst_drop <= 1e-9 and pi1 > 0.9 and abs(best - pi1) <= 1e-3,
           time.perf_counter() - t0, 30,
           f"alpha=1 exact {exact}, worst log-posterior drop {worst_drop:.1e}, "
           f"pi_1 {pi1:.4f} vs grid {best:.3f}")


def test_synthetic_training_direction():
    t0 = time.perf_counter()
    corpus = generate_corpus(32, 32, 8, seed=0)
    losses = {"base": LossParams(beta=1e-3, alpha1=0.0, alpha2=0.0),
              "vt": LossParams(beta=1e-3, alpha1=1.0, alpha2=0.0),
              "mask": LossParams(beta=1e-3, alpha1=0.0, alpha2=1.0),
              "both": LossParams(beta=1e-3, alpha1=1.0, alpha2=1.0)}
    cfgs = [TrainerConfig(steps=2000, seed=0, loss=p) for p in losses.values()]
    rows, results = ablation_report(corpus, cfgs, list(losses), return_results=True)
    by = {r["name"]: r for r in rows}
    totals = np.array([r["total"] for r in results[3].trace])
    upticks = float(np.mean(totals[1:] > totals[:-1]))
    vt, both = by["vt"], by["both"]
    ok = (vt["mean_var_text"] > vt["mean_var_image"]
          and both["mean_var_text"] > both["mean_var_image"]
          and by["base"]["var_ratio_text_image"] <= vt["var_ratio_text_image"]
          and both["masked_inclusion_fraction"] >= 0.7
          and by["mask"]["masked_inclusion_fraction"] >= 0.7
          and upticks <= 0.05)
    record("synthetic training direction", ok, time.perf_counter() - t0, 300,
           f"text/image variance ratio {by['base']['var_ratio_text_image']:.3g} (base) vs "
           f"{vt['var_ratio_text_image']:.3g} (alpha1=1), masked inclusion "
           f"{by['mask']['masked_inclusion_fraction']:.2f}/{both['masked_inclusion_fraction']:.2f}"
           f", loss upticks {upticks:.1%}")


def test_traversal_direction():
    t0 = time.perf_counter()
    hc = hierarchy_corpus()
    inc = traversal_metrics([traverse(z, hc.captions, hc.null_text, root="inclusion")
                             for z in hc.images], hc.ground_truth)
    null = traversal_metrics([traverse(z, hc.captions, hc.null_text, root="null")
                              for z in hc.images], hc.ground_truth)
    ok = inc.precision > null.precision and inc.root_recall > 0 and null.root_recall == 0
    record("traversal direction", ok, time.perf_counter() - t0, 60,
           f"precision {inc.precision:.4f} (inclusion) vs {null.precision:.4f} (null), "
           f"root recall {inc.root_recall:.2f} vs {null.root_recall:.2f}")


def _snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


def test_cli_determinism(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("PROBEMB_OUTPUT_DIR", raising=False)
    train = ["train-synthetic", "--steps", "200", "--n-classes", "4", "--seed", "3"]
    data = ["--prompts", "train/texts.jsonl", "--classes", "train/classes.json"]
    runs = [
        train + ["--out", "train"],
        ["oracle-check", "--mc-samples", "200000", "--seed", "0", "--out", "oc"],
        ["bprw", *data, "--images", "train/images.jsonl", "--seed", "3", "--out", "bprw"],
        ["bprw", *data, "--images", "train/images.jsonl", "--few-shot-labels",
         "train/labels.json", "--seed", "3", "--out", "bprw_fs"],
        ["zsc", *data, "--input", "train/images.jsonl", "--labels", "train/labels.json",
         "--weights", "bprw/weights.json", "--filter", "sigma_stats", "--out", "zsc"],
        ["traverse", "--demo", "--seed", "3", "--out", "trav"],
        ["hier-eval", "--demo", "--seed", "3", "--out", "hier"],
        ["report", "--steps", "100", "--seed", "3", "--out", "rep"],
    ]
    mismatched = []
    for argv in runs:
        codes = [main(argv)]
        first = _snapshot(tmp_path / argv[-1])
        codes.append(main(argv))
        if codes != [0, 0] or _snapshot(tmp_path / argv[-1]) != first or not first:
            mismatched.append(argv[0] + ":" + argv[-1])
    record("CLI determinism", not mismatched, time.perf_counter() - t0, 600,
           f"{len(runs) - len(mismatched)}/{len(runs)} runs byte-identical"
           + (f", differing: {', '.join(mismatched)}" if mismatched else ""))


if __name__ == "__main__":
    import sys

    import pytest

    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
