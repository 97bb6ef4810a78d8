import csv
import math

import numpy as np
import pytest
from scipy import stats

from atomprior import infotheory as it
from atomprior import mcmc
from atomprior import models as M
from atomprior.priors import AtomicPrior, LogDensity, jeffreys_prior, lognormal_prior, uniform_prior

from oracles import conjugate_log_evidence, hypercone_ml


def std_normal(d):
    return LogDensity(lambda th: -0.5 * np.sum(th**2, axis=1), M.Domain.box(d, -30, 30))


def conjugate_setup(width=2.0, sigma=1.0, d=2):
    model = M.linear(np.eye(d), sigma=sigma)
    return model, lognormal_prior(model, 0.0, width)


# ---------------------------------------------------------------------------
# sampler

def test_standard_normal_moments():
    res = mcmc.ensemble_sample(std_normal(1), seed=0, n_draws=4000)
    x = res.samples[:, 0]
    n = x.size
    assert abs(x.mean()) < 4 / math.sqrt(n)
    assert abs(x.var() - 1) < 4 * math.sqrt(2 / n)
    assert 0.05 < res.acceptance < 0.95


def test_sampler_deterministic():
    a = mcmc.ensemble_sample(std_normal(2), steps=50, burn_in=10, seed=7)
    b = mcmc.ensemble_sample(std_normal(2), steps=50, burn_in=10, seed=7)
    np.testing.assert_array_equal(a.chain, b.chain)


def test_affine_invariance():
    # sampling f(A t + b) and mapping back matches sampling f directly
    A = np.array([[3.0, 1.0], [0.0, 0.2]])
    b = np.array([1.0, -2.0])
    skewed = LogDensity(lambda th: -0.5 * np.sum((th @ A.T + b) ** 2, axis=1),
                        M.Domain.box(2, -100, 100))
    res = mcmc.ensemble_sample(skewed, seed=1, n_draws=4000, moves="stretch", transform=None)
    mapped = res.samples @ A.T + b
    n = mapped.shape[0]
    np.testing.assert_allclose(mapped.mean(axis=0), 0.0, atol=5 / math.sqrt(n))
    np.testing.assert_allclose(np.cov(mapped.T), np.eye(2), atol=10 / math.sqrt(n))


@pytest.mark.parametrize("ordered", [False, True])
def test_logit_jacobian_matches_finite_differences(ordered):
    domain = M.Domain.box(3, -2.0, 4.0, ordered=ordered)
    target = mcmc.LogitTarget(None, domain)
    z = np.array([0.3, -1.2, 2.0])
    h = 1e-6
    J = np.column_stack([(target.theta(z + h * e) - target.theta(z - h * e)) / (2 * h)
                         for e in np.eye(3)])
    assert target.log_jacobian(z) == pytest.approx(math.log(abs(np.linalg.det(J))), rel=1e-7)
    np.testing.assert_allclose(target.z(target.theta(z)), z, rtol=1e-9)


def test_uniform_on_wedge():
    # the ordered wedge in 2-D: max and min of two uniforms on [0, 1]
    domain = M.Domain.box(2, 0.0, 1.0, ordered=True)
    flat = LogDensity(lambda th: np.zeros(th.shape[0]), domain)
    s = mcmc.ensemble_sample(flat, seed=2, n_draws=6000).samples
    n = s.shape[0]
    np.testing.assert_allclose(s.mean(axis=0), [2 / 3, 1 / 3], atol=5 * math.sqrt(1 / 18 / n))
    assert np.all(s[:, 0] >= s[:, 1])


@pytest.mark.parametrize("moves", ["stretch", "de", "mix"])
def test_moves_sample_box_marginal(moves):
    # theta_1 ~ Beta(6, 1) scaled to [0, 5]; the rest uniform
    domain = M.Domain((0.0, 0.0, 0.0, 0.0, 0.0, 0.0), (5.0, 1.0, 1.0, 1.0, 1.0, 1.0))
    target = LogDensity(lambda th: 5 * np.log(th[:, 0]), domain)
    s = mcmc.ensemble_sample(target, seed=3, n_draws=4000, moves=moves).samples
    assert stats.kstest(s[:, 0] / 5, stats.beta(6, 1).cdf).statistic < 0.05
    assert abs(s[:, 1:].mean() - 0.5) < 0.02


def test_bad_move_or_transform():
    with pytest.raises(ValueError):
        mcmc.ensemble_sample(std_normal(1), steps=5, burn_in=0, moves="walk")
    with pytest.raises(ValueError):
        mcmc.ensemble_sample(std_normal(1), steps=5, burn_in=0, transform="probit")


def test_integrated_time_ar1():
    rho = 0.8
    rng = np.random.default_rng(0)
    x = np.zeros((20000, 4))
    for t in range(1, len(x)):
        x[t] = rho * x[t - 1] + rng.standard_normal(4)
    assert mcmc.integrated_time(x) == pytest.approx((1 + rho) / (1 - rho), rel=0.15)
    assert mcmc.integrated_time(rng.standard_normal(5000)) == pytest.approx(1.0, abs=0.2)


def test_walker_checks():
    with pytest.raises(ValueError):
        mcmc.ensemble_sample(std_normal(3), W=4, steps=5, burn_in=0)
    assert mcmc.default_walkers(3) == 32 and mcmc.default_walkers(20) == 42


def test_stagnation_flag():
    # finite only at the starting points, so no stretch move is ever accepted
    init = np.linspace(-1, 1, 32)[:, None]
    spike = LogDensity(lambda th: np.where(np.isin(th[:, 0], init[:, 0]), 0.0, -np.inf),
                       M.Domain.box(1, -2, 2))
    res = mcmc.ensemble_sample(spike, steps=150, burn_in=0, init=init, seed=0, transform=None)
    assert res.stagnated and res.acceptance == 0.0


def test_to_csv(tmp_path):
    res = mcmc.ensemble_sample(std_normal(2), W=8, steps=3, burn_in=2, seed=0)
    path = tmp_path / "s.csv"
    res.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["walker_id", "step", "theta_1", "theta_2", "log_density"]
    assert len(rows) == 1 + 3 * 8
    assert float(rows[1][2]) == res.chain[0, 0, 0]


def test_acceptance_on_paper_models():
    for model in (M.fig1_model(), M.hypercone(4, 50.0)):
        res = mcmc.ensemble_sample(jeffreys_prior(model), steps=200, seed=0)
        assert 0.05 <= res.acceptance <= 0.95


# ---------------------------------------------------------------------------
# tempering

def test_tempered_flat_prior_posterior():
    model = M.linear(np.eye(2), sigma=0.5, bounds=(-20, 20))
    x = np.array([1.0, -2.0])
    res = mcmc.sample_tempered(uniform_prior(model.domain), model, x, 1.0, seed=0, steps=3000)
    s = res.samples
    n = s.shape[0] / 20
    np.testing.assert_allclose(s.mean(axis=0), x, atol=5 * 0.5 / math.sqrt(n))
    np.testing.assert_allclose(s.std(axis=0), 0.5, rtol=0.1)


@pytest.mark.parametrize("alpha", [0.0, 0.1, 0.5])
def test_tempered_mean_interpolates(alpha):
    w, sigma = 2.0, 1.0
    model, prior = conjugate_setup(w, sigma, d=1)
    x = np.array([3.0])
    res = mcmc.sample_tempered(prior, model, x, alpha, seed=1, steps=3000)
    prec = 1 / w**2 + alpha / sigma**2
    want = alpha * x[0] / sigma**2 / prec
    assert res.samples.mean() == pytest.approx(want, abs=0.15)


def test_tempered_rejects_bad_alpha():
    model, prior = conjugate_setup()
    with pytest.raises(ValueError):
        mcmc.TemperedTarget(prior, model, np.zeros(2), 1.5)


def test_joint_and_plain_targets_agree():
    model = M.fig1_model()
    prior = jeffreys_prior(model)
    plain = LogDensity(prior.fn, prior.domain)
    x = M.predict(model, np.array([1.0, -1.0]))
    th = model.domain.sample(np.random.default_rng(0), 50)
    th = np.vstack([th, [[-1.0, 0.0]]])
    np.testing.assert_allclose(mcmc.TemperedTarget(prior, model, x, 0.3)(th),
                               mcmc.TemperedTarget(plain, model, x, 0.3)(th), rtol=1e-12)


# ---------------------------------------------------------------------------
# ladders

def test_schedule_validation():
    with pytest.raises(ValueError):
        mcmc.BennettSchedule((0.0, 0.5))
    with pytest.raises(ValueError):
        mcmc.BennettSchedule((0.0, 0.6, 0.5, 1.0))
    sch = mcmc.BennettSchedule.geometric(n=30)
    assert sch.n == 30 and sch.alphas[1] == pytest.approx(1e-4)


def test_schedule_from_sigmas():
    sch = mcmc.BennettSchedule.from_sigmas([0.4, 0.2, 0.1], 0.1)
    np.testing.assert_allclose(sch.alphas, [0.0, 1 / 16, 1 / 4, 1.0])


def test_conjugate_evidence_bracketed():
    model, prior = conjugate_setup()
    sch = mcmc.BennettSchedule.geometric(n=10, alpha_min=1e-2, samples_per_rung=4000)
    hits = 0
    for seed in range(10):
        x = np.random.default_rng(100 + seed).normal(0, math.sqrt(5), 2)
        res = mcmc.bennett_log_evidence(prior, model, x, sch, seed)
        truth = conjugate_log_evidence(x, 2.0, 1.0)
        hits += res.lower <= truth <= res.upper
        assert res.lower <= min(res.forward, res.backward)
    assert hits >= 9


def test_single_rung_forward_is_naive_estimator():
    model, prior = conjugate_setup()
    x = np.array([1.5, -0.5])
    sch = mcmc.BennettSchedule((0.0, 1.0), samples_per_rung=20000, burn_in=300)
    res = mcmc.bennett_log_evidence(prior, model, x, sch, seed=3)
    rng = np.random.default_rng(4)
    th = rng.normal(0, 2.0, (200000, 2))
    ll = mcmc.loglike_from_predictions(model, x, th)
    direct = float(np.log(np.mean(np.exp(ll))))
    assert res.forward == pytest.approx(direct, abs=0.05)
    # the backward form is the harmonic-mean estimator at n = 1
    assert np.isfinite(res.backward)


def test_gap_shrinks_with_more_samples():
    model, prior = conjugate_setup()
    x = np.array([2.0, 1.0])
    gaps = []
    for spr in (400, 6400):
        sch = mcmc.BennettSchedule.geometric(n=6, alpha_min=1e-2, samples_per_rung=spr)
        g = [abs(r.forward - r.backward) for r in
             (mcmc.bennett_log_evidence(prior, model, x, sch, seed) for seed in range(6))]
        gaps.append(np.mean(g))
    assert gaps[1] < gaps[0]


def test_bennett_report_dict():
    model, prior = conjugate_setup()
    sch = mcmc.BennettSchedule.geometric(n=3, alpha_min=0.1, samples_per_rung=200, burn_in=50)
    doc = mcmc.bennett_log_evidence(prior, model, np.zeros(2), sch).to_dict()
    assert set(doc) >= {"alphas", "per_rung_ess", "lower", "upper"}
    assert len(doc["per_rung_ess"]) == 4


def test_kl_bennett_conjugate():
    # D_KL[N(y, s^2) || N(0, w^2 + s^2)] per coordinate in closed form
    w, s = 2.0, 1.0
    model, prior = conjugate_setup(w, s)
    phi = np.array([1.0, -3.0])
    v = w**2 + s**2
    truth = 0.5 * (2 * s**2 / v + phi @ phi / v - 2 + 2 * math.log(v / s**2))
    sch = mcmc.BennettSchedule.geometric(n=8, alpha_min=1e-2, samples_per_rung=3000)
    lo, hi, f, b, ess, warn = mcmc.kl_bennett(phi, prior, model, sch, n_x=128, seed=0)
    assert lo <= truth <= hi
    assert hi - lo < 1.5


def test_bias_bridge_atomic_vs_continuous():
    # a fine grid weighted by the Gaussian prior stands in for the density
    model, prior = conjugate_setup(2.0, 1.0, d=1)
    grid = np.linspace(-10, 10, 401)[:, None]
    atomic = AtomicPrior(grid, np.exp(-grid[:, 0] ** 2 / 8))
    phi = np.array([4.0])
    mc = it.bias_pressure_mc(phi, atomic, model, n=20000)
    mi = it.mi_monte_carlo(atomic, model, n=20000)
    sch = mcmc.BennettSchedule.geometric(n=8, alpha_min=1e-2, samples_per_rung=3000)
    b = mcmc.bias_pressure_bennett(phi, prior, model, sch, n_x=128, seed=0,
                                   mi=(mi.value - 3 * mi.stderr, mi.value + 3 * mi.stderr))
    assert b.lower <= mc.upper and mc.lower <= b.upper


def test_mixture_mi_point_mass():
    model = M.fig1_model()
    draws = np.array([1.0, -1.0]) + 1e-6 * np.random.default_rng(0).standard_normal((500, 2))
    res = mcmc.mi_continuous_mixture(draws, model, seed=0)
    assert res.lower == 0.0
    assert it.to_bits(res.upper) < 0.1


def test_mixture_mi_two_clusters():
    model = M.linear(np.eye(1), sigma=1.0)
    rng = np.random.default_rng(1)
    draws = np.concatenate([rng.normal(0, 1e-3, 2000), rng.normal(40, 1e-3, 2000)])[:, None]
    res = mcmc.mi_continuous_mixture(draws, model, seed=0)
    assert res.lower <= math.log(2) <= res.upper


# ---------------------------------------------------------------------------
# maximum likelihood and posterior deviation

def test_ml_identity():
    model = M.linear(np.eye(3), sigma=1.0)
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(mcmc.max_likelihood_point(model, x, [np.zeros(3)]), x, atol=1e-8)


def test_ml_on_manifold():
    model = M.fig1_model()
    truth = np.array([0.7, -1.3])
    x = M.predict(model, truth)
    th = mcmc.max_likelihood_point(model, x, [[0.0, -3.0], [2.0, 1.0]])
    assert np.linalg.norm(M.predict(model, th) - x) < 1e-6


def test_ml_hypercone_projection():
    d, L = 4, 50.0
    model = M.hypercone(d, L)
    x = np.array([20.0, 30.0, 2.0, -1.0])
    starts = [[25.0, 0.5, 0.5, 0.5], [40.0, 0.9, 0.1, 0.1]]
    th = mcmc.max_likelihood_point(model, x, starts)
    np.testing.assert_allclose(M.predict(model, th), hypercone_ml(d, L, x), atol=2e-3)


def test_ml_needs_start():
    with pytest.raises(ValueError):
        mcmc.max_likelihood_point(M.fig1_model(), np.zeros(2), np.empty((0, 2)))


def test_deviation_uniform_identity():
    model = M.linear(np.eye(2), sigma=1.0, bounds=(-30, 30))
    dev = mcmc.posterior_deviation(np.array([0.5, -1.0]), uniform_prior(model.domain), model,
                                   seed=0, steps=3000)
    assert dev.value < 3 * dev.stderr + 0.05


def test_deviation_atomic():
    model = M.linear(np.eye(1), sigma=1.0)
    prior = AtomicPrior([[0.0], [2.0]])
    x = np.array([0.0])
    dev = mcmc.posterior_deviation(x, prior, model)
    w = np.array([1.0, math.exp(-2.0)])
    w /= w.sum()
    assert dev.value == pytest.approx(w[1] * 2.0, rel=1e-9)
    assert dev.stderr == 0.0
