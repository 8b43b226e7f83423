import numpy as np
import pytest
from scipy import stats

from conftest import grad_check
from flowmix.autodiff import Adam, Tensor, backward, no_grad
from flowmix.encoder import ShapePosterior, posterior_entropy, reparam_sample
from flowmix.exceptions import ConfigurationError
from flowmix.flows import randomize_output_layers
from flowmix.mixture import mixture_sample
from flowmix.prior import PriorFlow, prior_loss, prior_sample
from test_flows import energy_test


def mc_prior_loss(prior, mu, lv, n, rng, condition=None):
    post = ShapePosterior(Tensor(np.tile(mu, (n, 1))), Tensor(np.tile(lv, (n, 1))))
    z = reparam_sample(post, rng)
    with no_grad():
        vals = prior_loss(prior, post, z, condition).data
    return vals.mean(), vals.std() / np.sqrt(n)


def test_fresh_prior_samples_are_standard_normal():
    prior = PriorFlow(4, np.random.default_rng(0), n_layers=6, hidden=16)
    z = prior_sample(prior, 10_000, np.random.default_rng(1))
    for k in range(4):
        assert stats.kstest(z[:, k], "norm").pvalue > 0.01


def test_fresh_prior_log_prob_is_gaussian(rng):
    prior = PriorFlow(3, rng, n_layers=4, hidden=8)
    z = rng.normal(size=(20, 3))
    ref = stats.multivariate_normal(np.zeros(3), np.eye(3)).logpdf(z)
    np.testing.assert_allclose(prior.log_prob(Tensor(z)).data, ref, atol=1e-12)


def test_matching_posterior_has_zero_expected_loss():
    prior = PriorFlow(3, np.random.default_rng(0), n_layers=4, hidden=8)
    mean, se = mc_prior_loss(prior, np.zeros(3), np.zeros(3), 200_000, np.random.default_rng(2))
    assert abs(mean) < 4 * se + 1e-12


def test_fresh_prior_loss_is_gaussian_cross_entropy(rng):
    prior = PriorFlow(2, rng, n_layers=2, hidden=4)
    mu, lv = np.array([[0.5, -1.0]]), np.array([[0.3, -0.2]])
    post = ShapePosterior(Tensor(mu), Tensor(lv))
    z = np.array([[0.2, 0.1]])
    expect = -posterior_entropy(post).data + 0.5 * np.sum(z * z) + np.log(2 * np.pi)
    np.testing.assert_allclose(prior_loss(prior, post, Tensor(z)).data, expect, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_prior_loss_is_a_non_negative_kl(seed):
    rng = np.random.default_rng(seed)
    prior = PriorFlow(3, rng, n_layers=4, hidden=8)
    randomize_output_layers(prior, rng, 1.0)
    mean, se = mc_prior_loss(prior, rng.normal(size=3), rng.uniform(-1, 1, 3), 50_000, rng)
    assert mean > -4 * se


def test_own_samples_round_trip(rng):
    prior = PriorFlow(3, rng, n_layers=4, hidden=8)
    randomize_output_layers(prior, rng, 1.0)
    prior.eval()
    z = prior_sample(prior, 50, np.random.default_rng(5))
    eps = np.random.default_rng(5).standard_normal((50, 3))
    _, logdet_f = prior.flow.forward(Tensor(eps))
    expect = stats.multivariate_normal(np.zeros(3), np.eye(3)).logpdf(eps) - logdet_f.data
    np.testing.assert_allclose(prior.log_prob(Tensor(z)).data, expect, atol=1e-9)


def test_prior_gradients():
    rng = np.random.default_rng(0)
    prior = PriorFlow(3, rng, n_layers=3, hidden=5)
    randomize_output_layers(prior, rng, 1.0)
    mu = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    lv = Tensor(rng.normal(size=(4, 3)) * 0.3, requires_grad=True)
    eps = rng.standard_normal((4, 3))

    def loss():
        post = ShapePosterior(mu, lv)
        return prior_loss(prior, post, reparam_sample(post, None, eps)).mean()

    assert grad_check(loss, prior.parameters() + [mu, lv]) < 1e-3


def test_prior_fits_frozen_posteriors():
    """Two shapes: the optimum is the entropy of the posterior mixture, ~log 2 nats here."""
    rng = np.random.default_rng(0)
    prior = PriorFlow(2, rng, n_layers=6, hidden=32)
    mus = np.array([[2.0, 1.0], [-2.0, -1.0]])
    lv = np.full((2, 2), np.log(0.3**2))
    opt = Adam(prior.parameters(), lr=3e-3)
    eps_rng = np.random.default_rng(1)

    def batch_loss(n=128):
        idx = np.arange(n) % 2
        post = ShapePosterior(Tensor(mus[idx]), Tensor(lv[idx]))
        return prior_loss(prior, post, reparam_sample(post, eps_rng)).mean()

    with no_grad():
        initial = np.mean([batch_loss(2000).item() for _ in range(3)])
    for _ in range(600):
        opt.zero_grad()
        backward(batch_loss())
        opt.step()
    with no_grad():
        final = np.mean([batch_loss(2000).item() for _ in range(3)])
    target = np.log(2.0)
    assert final < initial
    assert final - target < 0.25 * (initial - target)


def test_condition_contract(rng):
    prior = PriorFlow(2, rng, n_layers=2, hidden=4)
    with pytest.raises(ConfigurationError):
        prior_sample(prior, 3, rng, condition=np.ones(2))
    cond = PriorFlow(2, rng, n_layers=2, hidden=4, cond_dim=3)
    with pytest.raises(ConfigurationError):
        prior_sample(cond, 3, rng)
    with pytest.raises(ConfigurationError):
        prior_sample(prior, 0, rng)


def test_conditional_prior_separates_conditions():
    rng = np.random.default_rng(0)
    prior = PriorFlow(2, rng, n_layers=4, hidden=16, cond_dim=2)
    conds = np.eye(2)
    centers = np.array([[1.5, 0.0], [-1.5, 0.0]])
    opt = Adam(prior.parameters(), lr=5e-3)
    for _ in range(200):
        idx = rng.integers(0, 2, 128)
        z = centers[idx] + 0.3 * rng.standard_normal((128, 2))
        opt.zero_grad()
        backward(-prior.log_prob(Tensor(z), conds[idx]).mean())
        opt.step()
    a = prior_sample(prior, 300, np.random.default_rng(1), condition=conds[0])
    b = prior_sample(prior, 300, np.random.default_rng(2), condition=conds[1])
    assert energy_test(a, b, np.random.default_rng(3)) < 0.01
    assert np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)) > 1.0


def test_generation_pipeline_stays_finite(trained_vae):
    model, _, _ = trained_vae
    rng = np.random.default_rng(0)
    zs = prior_sample(model.prior, 10, rng)
    total = 0
    for z in zs:
        pts, ids = mixture_sample(model.decoder, z, 100_000, rng)
        assert np.all(np.isfinite(pts))
        total += len(pts)
    assert total == 1_000_000
