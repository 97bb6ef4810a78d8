import math

import numpy as np
import pytest

from atomprior import infotheory as it
from atomprior import models as M
from atomprior import optimizer as O
from atomprior.priors import AtomicPrior

from oracles import binary_mi_quadrature, bsc_capacity_bits


def small_exp():
    return M.exp_decay(1, np.linspace(1, 5, 5), sigma=0.1)


# ---------------------------------------------------------------------------
# Blahut-Arimoto

@pytest.mark.parametrize("p", [0.0, 0.05, 0.2, 0.5])
def test_discrete_ba_binary_symmetric_channel(p):
    channel = np.array([[1 - p, p], [p, 1 - p]])
    res = O.blahut_arimoto_discrete(channel)
    assert res.converged
    assert it.to_bits(res.capacity) == pytest.approx(bsc_capacity_bits(p), abs=1e-9)
    np.testing.assert_allclose(res.weights, 0.5, atol=1e-6)


def test_discrete_ba_z_channel():
    # Z-channel with crossover 1/2 has capacity log2(5/4) at P(1) = 2/5
    channel = np.array([[1.0, 0.0], [0.5, 0.5]])
    res = O.blahut_arimoto_discrete(channel, tol=1e-12)
    assert it.to_bits(res.capacity) == pytest.approx(math.log2(1.25), abs=1e-9)
    assert res.weights[1] == pytest.approx(0.4, abs=1e-5)


def test_discrete_ba_rejects_bad_channel():
    with pytest.raises(ValueError):
        O.blahut_arimoto_discrete([[0.5, 0.4], [0.5, 0.5]])


def test_ba_two_points_equal_weights():
    model = M.linear(np.eye(1), sigma=1.0)
    res = O.blahut_arimoto_weights(model, [[0.0], [2.0]], tol=1e-4, n_mc=8192)
    # Monte Carlo noise in D_a tilts the weights slightly
    np.testing.assert_allclose(res.weights, 0.5, atol=5e-3)
    assert res.capacity == pytest.approx(binary_mi_quadrature(2.0), abs=0.02)
    w, cap = res
    assert cap == res.capacity


def test_ba_equalizer_and_useless_atom():
    # an atom in the middle of two distant ones gets weight; a duplicate shares it
    model = M.linear(np.eye(1), sigma=1.0)
    res = O.blahut_arimoto_weights(model, [[0.0], [10.0], [10.0]], tol=1e-4)
    assert res.converged
    assert res.weights[1] == pytest.approx(res.weights[2])
    support = res.weights > 1e-6
    assert np.ptp(res.divergences[support]) < 2e-4


# ---------------------------------------------------------------------------
# KDE ascent and support handling

def test_best_candidate_spreads_points():
    model = small_exp()
    pts = O.best_candidate_init(model, 8, seed=0)
    assert pts.shape == (8, 1)
    y = M.predict(model, pts) / model.sigma
    gaps = np.linalg.norm(y[:, None] - y[None], axis=-1) + np.eye(8) * 1e9
    rand = model.domain.sample(np.random.default_rng(0), 8)
    yr = M.predict(model, rand) / model.sigma
    gr = np.linalg.norm(yr[:, None] - yr[None], axis=-1) + np.eye(8) * 1e9
    assert gaps.min() > gr.min()


def test_default_K_bounds():
    assert 8 <= O.default_K(M.fig1_model()) <= 256
    assert O.default_K(M.linear(np.eye(1), sigma=100.0, bounds=(0, 1))) == 8


def test_kde_ascent_improves_surrogate():
    model = small_exp()
    init = O.best_candidate_init(model, 12, seed=1)
    cfg = O.OptimizerConfig(max_iters=300)
    res = O.maximize_kde_mi(model, init, cfg, refine=False)
    assert res.history[-1] >= res.history[0]
    assert np.all(np.diff(res.history) >= -1e-9)
    assert np.all(model.domain.contains(res.prior.atoms, tol=1e-9))


def test_kde_ascent_rejects_outside_init():
    with pytest.raises(ValueError):
        O.maximize_kde_mi(small_exp(), [[9.0]])


def test_merge_close_atoms():
    model = M.linear(np.eye(1), sigma=1.0)
    prior = AtomicPrior([[0.0], [0.1], [5.0]], [0.25, 0.25, 0.5])
    merged = O.merge_close_atoms(prior, model, radius=0.5)
    assert merged.K == 2
    np.testing.assert_allclose(sorted(merged.atoms[:, 0]), [0.05, 5.0])
    np.testing.assert_allclose(sorted(merged.weights), [0.5, 0.5])


def test_refine_support_prunes():
    model = M.linear(np.eye(1), sigma=1.0, bounds=(-10, 10))
    prior = AtomicPrior([[-5.0], [5.0], [0.0]], [0.4995, 0.4995, 0.001 - 1e-6])
    out = O.refine_support(prior, model)
    assert out.K == 2


def test_config_validation():
    with pytest.raises(ValueError):
        O.OptimizerConfig(K_init=1)
    with pytest.raises(ValueError):
        O.OptimizerConfig(prune_weight=0.5)


def test_fit_one_dimensional_exp_decay():
    model = small_exp()
    res = O.fit_optimal_prior(model, O.OptimizerConfig(seed=0))
    worst = it.worst_case_bias(res.prior, model, n=2048, seed=3)
    assert it.to_bits(worst.value) < 0.3
    mi = it.mi_monte_carlo(res.prior, model, n=4096, seed=4)
    # MI cannot exceed log K, and must beat a uniform grid of the same size
    grid = AtomicPrior(np.linspace(-6, 6, res.prior.K)[:, None])
    assert mi.value > it.mi_monte_carlo(grid, model, n=4096, seed=4).value
    assert mi.value <= math.log(res.prior.K) + 3 * mi.stderr


def test_fit_is_deterministic():
    model = small_exp()
    cfg = O.OptimizerConfig(seed=5, max_iters=100, augment_rounds=1)
    a = O.fit_optimal_prior(model, cfg).prior
    b = O.fit_optimal_prior(model, cfg).prior
    assert a == b
