import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import grad_check
from flowmix.autodiff import Adam, Tensor, backward, no_grad
from flowmix.autodiff.nn import BatchNorm1d
from flowmix.exceptions import ConfigurationError, NumericError
from flowmix.flows import (
    LOG_2PI,
    ConditionalGaussianBase,
    CouplingLayer,
    FlowStack,
    build_film_coupling,
    flow_log_prob,
    flow_sample,
    parity_split,
    randomize_output_layers,
)


def set_affine(layer, log_s, t):
    """Make a coupling layer apply a constant scale ``exp(log_s)`` and shift ``t``."""
    for net in (layer.scale_net, layer.shift_net):
        net.out.weight.data[:] = 0.0
    layer.scale_net.out.bias.data[:] = layer.scale_bound * np.arctanh(np.asarray(log_s) /
                                                                      layer.scale_bound)
    layer.shift_net.out.bias.data[:] = t


def random_flow(d, n_layers, seed, cond_dim=None, hidden=8, scale=1.0):
    rng = np.random.default_rng(seed)
    flow = FlowStack(d, n_layers, hidden, rng, cond_dim=cond_dim)
    randomize_output_layers(flow, rng, scale)
    for mod in flow.modules():
        if isinstance(mod, BatchNorm1d):
            mod.set_buffer("running_mean", rng.normal(0, 0.3, mod.running_mean.shape))
            mod.set_buffer("running_var", rng.uniform(0.5, 2.0, mod.running_var.shape))
    return flow.eval()


def energy_test(A, B, rng, n_perm=200):
    """Permutation p-value of the two-sample energy statistic."""
    Z = np.concatenate([A, B])
    D = np.linalg.norm(Z[:, None] - Z[None], axis=-1)
    n = len(A)

    def stat(idx):
        a, b = idx[:n], idx[n:]
        return 2 * D[np.ix_(a, b)].mean() - D[np.ix_(a, a)].mean() - D[np.ix_(b, b)].mean()

    base = stat(np.arange(len(Z)))
    perms = [stat(rng.permutation(len(Z))) for _ in range(n_perm)]
    return (1 + sum(p >= base for p in perms)) / (n_perm + 1)


# -- single coupling layer --------------------------------------------------------


def test_fresh_layer_is_identity(rng):
    layer = CouplingLayer(3, 8, 0, rng)
    y = rng.normal(size=(10, 3))
    x, ld = layer.forward(y)
    np.testing.assert_array_equal(x.data, y)
    np.testing.assert_array_equal(ld.data, 0.0)
    back, ld_inv = layer.inverse(y)
    np.testing.assert_array_equal(back.data, y)
    np.testing.assert_array_equal(ld_inv.data, 0.0)


def test_hand_set_layer():
    layer = CouplingLayer(2, 4, 0, np.random.default_rng(0), batchnorm=False)
    set_affine(layer, [np.log(2.0)], [1.0])
    x, ld = layer.forward(Tensor([[0.5, 3.0]]))
    np.testing.assert_allclose(x.data, [[0.5, 7.0]], rtol=1e-14)
    assert ld.data[0] == pytest.approx(np.log(2.0), rel=1e-14)
    y, ld_inv = layer.inverse(Tensor([[0.5, 7.0]]))
    np.testing.assert_allclose(y.data, [[0.5, 3.0]], rtol=1e-14)
    assert ld_inv.data[0] == pytest.approx(-np.log(2.0), rel=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_layer_round_trip_and_logdets(seed):
    rng = np.random.default_rng(seed)
    layer = CouplingLayer(3, 8, seed % 2, rng)
    randomize_output_layers(layer, rng, 1.0)
    layer.eval()
    y = rng.normal(size=(50, 3))
    x, ld_f = layer.forward(y)
    back, ld_i = layer.inverse(x)
    assert np.max(np.abs(back.data - y)) < 1e-9
    assert np.max(np.abs(ld_f.data + ld_i.data)) < 1e-10


def test_passed_coordinates_untouched(rng):
    layer = CouplingLayer(3, 8, 0, rng)
    randomize_output_layers(layer, rng, 1.0)
    y = rng.normal(size=(20, 3))
    x, _ = layer.eval().forward(y)
    np.testing.assert_array_equal(x.data[:, [0, 2]], y[:, [0, 2]])
    assert not np.allclose(x.data[:, 1], y[:, 1])


def test_scale_is_bounded(rng):
    layer = CouplingLayer(2, 4, 0, rng, batchnorm=False)
    layer.scale_net.out.bias.data[:] = 1e6
    _, ld = layer.forward(rng.normal(size=(3, 2)))
    np.testing.assert_allclose(ld.data, 5.0)


def test_missing_condition_is_a_configuration_error(rng):
    layer = build_film_coupling(2, 8, 4, 8, rng)
    with pytest.raises(ConfigurationError):
        layer.forward(rng.normal(size=(3, 2)))
    plain = CouplingLayer(2, 8, 0, rng)
    with pytest.raises(ConfigurationError):
        plain.forward(rng.normal(size=(3, 2)), rng.normal(size=4))


# -- FiLM conditioning --------------------------------------------------------------


def test_film_with_zero_modulation_ignores_condition(rng):
    layer = build_film_coupling(2, 8, 4, 8, rng)
    for net in (layer.scale_net, layer.shift_net):
        net.out.weight.data = rng.normal(size=net.out.weight.shape)
    layer.eval()
    y = rng.normal(size=(6, 2))
    x0, ld0 = layer.forward(y, np.zeros((6, 4)))
    x1, ld1 = layer.forward(y, rng.normal(size=(6, 4)))
    np.testing.assert_array_equal(x0.data, x1.data)
    np.testing.assert_array_equal(ld0.data, ld1.data)
    assert not np.allclose(x0.data, y)


def test_film_distinct_conditions_separate_after_training(rng):
    # zero-initialized output and FiLM layers sit on a saddle of this
    # symmetric objective, so start from random output layers as training does
    layer = build_film_coupling(2, 8, 2, 8, rng)
    randomize_output_layers(layer, rng, 1.0)
    za, zb = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    Y = rng.normal(size=(64, 2))
    targets = {0: Y + [0, 2.0], 1: Y - [0, 2.0]}
    opt = Adam(layer.parameters(), lr=1e-2)
    for _ in range(20):
        opt.zero_grad()
        xa, _ = layer.forward(Y, np.tile(za, (64, 1)))
        xb, _ = layer.forward(Y, np.tile(zb, (64, 1)))
        loss = ((xa - targets[0]) * (xa - targets[0])).mean() + \
            ((xb - targets[1]) * (xb - targets[1])).mean()
        backward(loss)
        opt.step()
    layer.eval()
    with no_grad():
        xa, _ = layer.forward(Y, np.tile(za, (64, 1)))
        xb, _ = layer.forward(Y, np.tile(zb, (64, 1)))
    assert np.mean(np.linalg.norm(xa.data - xb.data, axis=1)) > 0.5


def test_film_parameter_count_by_hand():
    # d=3, parity 0: two passed coordinates feed nets producing one output.
    # per branch: in 2*8+8, bn 2*8, mid 8*8+8, gamma 4x... -> cond features 8
    # gamma 8*8+8, beta 8*8+8, out 8*1+1  => 24+16+72+72+72+9 = 265
    # condition encoder: 4*8+8 + 8*8+8 = 112
    layer = build_film_coupling(3, 8, 4, 8, np.random.default_rng(0))
    assert layer.num_parameters() == 2 * 265 + 112 == 642
    assert CouplingLayer.count(3, 8, 0, cond_width=8, cond_dim=4) == 642


@pytest.mark.parametrize("d,n,h,c", [(2, 3, 8, None), (3, 4, 16, 5), (1, 2, 4, 3)])
def test_stack_count_matches_built(d, n, h, c):
    flow = FlowStack(d, n, h, np.random.default_rng(0), cond_dim=c)
    assert flow.num_parameters() == FlowStack.count(d, n, h, c)


def test_conditioning_reaches_the_base(rng):
    base = ConditionalGaussianBase(2, rng, cond_dim=3, hidden=8)
    randomize = np.random.default_rng(5)
    base.mu_out.weight.data = randomize.normal(size=base.mu_out.weight.shape)
    base.logvar_out.weight.data = randomize.normal(size=base.logvar_out.weight.shape)
    mu_a, lv_a = base.params(np.ones((1, 3)))
    mu_b, lv_b = base.params(-np.ones((1, 3)))
    assert not np.allclose(mu_a.data, mu_b.data)
    assert not np.allclose(lv_a.data, lv_b.data)


def test_fresh_conditional_base_is_standard_normal(rng):
    base = ConditionalGaussianBase(3, rng, cond_dim=4)
    mu, lv = base.params(rng.normal(size=(5, 4)))
    np.testing.assert_array_equal(mu.data, 0.0)
    np.testing.assert_array_equal(lv.data, 0.0)


# -- stacked flows ------------------------------------------------------------------


def test_empty_flow_log_prob():
    flow = FlowStack(3, 0, 8, np.random.default_rng(0))
    base = ConditionalGaussianBase(3, np.random.default_rng(0))
    lp = flow_log_prob(flow, base, Tensor(np.zeros((1, 3))))
    assert lp.data[0] == pytest.approx(-1.5 * LOG_2PI, abs=1e-12)
    assert lp.data[0] == pytest.approx(-2.7568, abs=1e-4)


def affine_1d_flow():
    """One layer moving the single coordinate: ``x = 2 y + 1``."""
    flow = FlowStack(1, 1, 4, np.random.default_rng(0), batchnorm=False)
    set_affine(flow.layers[0], [np.log(2.0)], [1.0])
    return flow, ConditionalGaussianBase(1, np.random.default_rng(0))


def test_closed_form_gaussian():
    flow, base = affine_1d_flow()
    x = np.linspace(-6, 8, 57)[:, None]
    lp = flow_log_prob(flow, base, Tensor(x)).data
    ref = -0.5 * np.log(2 * np.pi * 4.0) - (x[:, 0] - 1.0) ** 2 / 8.0
    assert np.max(np.abs(lp - ref)) < 1e-8


def test_hand_set_layer_grid_mass():
    flow = FlowStack(2, 1, 4, np.random.default_rng(0), batchnorm=False)
    set_affine(flow.layers[0], [np.log(2.0)], [0.0])
    base = ConditionalGaussianBase(2, np.random.default_rng(0))
    g = np.linspace(-8, 8, 321)
    X = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    with no_grad():
        p = np.exp(flow_log_prob(flow, base, Tensor(X)).data).reshape(321, 321)
    # where the map doubles coord 1 the density is half the base density
    assert p[160, 160] == pytest.approx(0.5 / (2 * np.pi), rel=1e-12)
    mass = np.trapezoid(np.trapezoid(p, g, axis=1), g)
    assert abs(mass - 1.0) < 0.02


@pytest.mark.parametrize("seed", range(3))
def test_random_flow_density_integrates_to_one(seed):
    flow = random_flow(2, 4, seed, scale=0.5)
    base = ConditionalGaussianBase(2, np.random.default_rng(0))
    pts = flow_sample(flow, base, 20000, np.random.default_rng(seed))
    lo, hi = pts.min(axis=0) - 1.0, pts.max(axis=0) + 1.0
    gx, gy = np.linspace(lo[0], hi[0], 401), np.linspace(lo[1], hi[1], 401)
    X = np.stack(np.meshgrid(gx, gy, indexing="ij"), -1).reshape(-1, 2)
    with no_grad():
        p = np.exp(flow_log_prob(flow, base, Tensor(X)).data).reshape(401, 401)
    mass = np.trapezoid(np.trapezoid(p, gy, axis=1), gx)
    assert abs(mass - 1.0) < 0.02


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("d", [1, 2, 3])
def test_flow_round_trip(seed, d):
    flow = random_flow(d, 5, seed)
    rng = np.random.default_rng(seed + 100)
    x = rng.normal(size=(40, d))
    y, _ = flow.inverse(x)
    assert np.max(np.abs(flow.forward(y)[0].data - x)) < 1e-8
    assert np.max(np.abs(flow.inverse(flow.forward(x)[0])[0].data - x)) < 1e-8


def test_conditional_flow_round_trip(rng):
    flow = random_flow(3, 4, 0, cond_dim=5)
    x = rng.normal(size=(2, 30, 3))
    z = rng.normal(size=(2, 5))
    y, ld_i = flow.inverse(x, z)
    back, ld_f = flow.forward(y, z)
    assert np.max(np.abs(back.data - x)) < 1e-8
    assert np.max(np.abs(ld_f.data + ld_i.data)) < 1e-10


@pytest.mark.parametrize("d", [1, 2, 3])
def test_logdet_matches_numeric_jacobian(d):
    flow = random_flow(d, 4, d)
    rng = np.random.default_rng(d)
    y = rng.normal(size=(5, d))
    _, logdet = flow.forward(y)
    h = 1e-6
    for i in range(len(y)):
        J = np.empty((d, d))
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            fp = flow.forward(y[i:i + 1] + e)[0].data[0]
            fm = flow.forward(y[i:i + 1] - e)[0].data[0]
            J[:, k] = (fp - fm) / (2 * h)
        ref = np.log(abs(np.linalg.det(J)))
        assert abs(logdet.data[i] - ref) / abs(ref) < 1e-3


@given(st.integers(1, 12))
def test_alternating_parities(n_layers):
    for d in (2, 3):
        flow = FlowStack(d, n_layers, 4, np.random.default_rng(0))
        moved = [parity_split(d, p)[1] for p in flow.parities]
        for a, b in zip(moved, moved[1:]):
            assert set(a).isdisjoint(b) and set(a) | set(b) == set(range(d))
        counts = np.bincount(np.concatenate(moved), minlength=d)
        assert counts.min() >= n_layers // 2


def test_non_finite_input_names_the_layer():
    flow = random_flow(2, 3, 0)
    with pytest.raises(NumericError) as exc:
        flow.inverse(np.array([[np.nan, 0.0]]))
    assert "layer 2" in exc.value.where


def test_flow_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    flow = FlowStack(2, 3, 6, rng, cond_dim=3)
    randomize_output_layers(flow, rng, 1.0)
    base = ConditionalGaussianBase(2, rng, cond_dim=3, hidden=6)
    X = rng.normal(size=(2, 8, 2))
    z = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    params = flow.parameters() + base.parameters() + [z]
    loss = lambda: -flow_log_prob(flow, base, X, z).mean()  # noqa: E731
    assert grad_check(loss, params) < 1e-3


# -- sampling ------------------------------------------------------------------------


def test_identity_flow_sample_mean():
    flow = FlowStack(2, 4, 8, np.random.default_rng(0)).eval()
    base = ConditionalGaussianBase(2, np.random.default_rng(0))
    n = 10000
    pts = flow_sample(flow, base, n, np.random.default_rng(1))
    assert np.all(np.abs(pts.mean(axis=0)) < 3 / np.sqrt(n))


def test_affine_flow_monte_carlo_entropy():
    flow = FlowStack(2, 2, 4, np.random.default_rng(0), batchnorm=False)
    set_affine(flow.layers[0], [0.7], [1.0])
    set_affine(flow.layers[1], [-0.3], [-2.0])
    base = ConditionalGaussianBase(2, np.random.default_rng(0))
    pts = flow_sample(flow, base, 10000, np.random.default_rng(3))
    nll = -flow_log_prob(flow, base, Tensor(pts)).data.mean()
    entropy = 1.0 + LOG_2PI + 0.7 - 0.3
    assert abs(nll - entropy) / entropy < 0.02


def test_one_point_and_many_points_share_a_distribution():
    flow = random_flow(2, 4, 7)
    base = ConditionalGaussianBase(2, np.random.default_rng(0))
    singles = np.concatenate([flow_sample(flow, base, 1, np.random.default_rng(s))
                              for s in range(300)])
    many = flow_sample(flow, base, 100000, np.random.default_rng(12345))
    assert singles.shape == (300, 2) and many.shape == (100000, 2)
    p = energy_test(singles, many[:300], np.random.default_rng(0))
    assert p > 0.01


def test_sampling_uses_running_statistics(rng):
    flow = random_flow(2, 3, 1).train()
    base = ConditionalGaussianBase(2, rng)
    a = flow_sample(flow, base, 5, np.random.default_rng(0))
    b = flow_sample(flow, base, 50, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b[:5])
