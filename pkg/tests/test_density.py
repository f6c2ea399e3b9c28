import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from actorgrasp import autodiff as ad
from actorgrasp.autodiff import Tensor
from actorgrasp.density import (
    GMM, BoxDensity, CouplingLayer, FlowModel, MofModel, argmax_sample, build_model, coupling_forward,
    coupling_inverse, flow_log_prob, flow_sample, gmm_log_prob, gmm_sample, load_model, mof_log_prob,
    mof_sample,
)

from conftest import numeric_grad
from helpers import (
    ONE, flow_layers, make_gmm, make_identity, randomize_last_layers, set_constant_layer, set_gmm,
)


def ones(n):
    return np.ones((n, 1))


# -- GMM ----------------------------------------------------------------------------------
def test_gmm_standard_normal_at_zero():
    g = make_gmm([0.0], [1.0], [1.0])
    assert gmm_log_prob(g, ONE, np.zeros((1, 1))).item() == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_gmm_identical_components_equal_single(rng):
    x = rng.standard_normal((7, 1))
    one = make_gmm([0.3], [0.7], [1.0]).log_prob_np(ones(7), x)
    two = make_gmm([0.3, 0.3], [0.7, 0.7], [0.5, 0.5]).log_prob_np(ones(7), x)
    np.testing.assert_allclose(one, two, atol=1e-12)


def test_gmm_direct_summation():
    g = make_gmm([0.0, 1.0], [0.5, 0.5], [0.3, 0.7])
    expect = math.log(0.3 * stats.norm.pdf(0.5, 0, 0.5) + 0.7 * stats.norm.pdf(0.5, 1, 0.5))
    assert g.log_prob_np(ONE, [[0.5]])[0] == pytest.approx(expect, abs=1e-12)


def test_gmm_dimension_mismatch():
    g = make_gmm([0.0], [1.0], [1.0])
    with pytest.raises(ValueError, match="dimension"):
        g.log_prob_np(ONE, np.zeros((1, 2)))
    with pytest.raises(ValueError, match="condition width"):
        g.log_prob_np(np.ones((1, 3)), np.zeros((1, 1)))


def test_gmm_narrow_sample_mean(rng):
    g = make_gmm([2.0], [math.exp(-5.0)], [1.0])
    g.log_std_bounds = (-5.0, 2.0)
    x, _ = g.sample_n(ONE[0], 1000, rng)
    assert abs(x.mean() - 2.0) < 3 * math.exp(-5.0) / math.sqrt(1000)


def test_gmm_degenerate_weights(rng):
    g = make_gmm([-5.0, 5.0], [0.1, 0.1], [1.0, 0.0])
    x, _ = gmm_sample(g, ONE[0], 500, rng)
    assert np.all(x < 0)


def test_gmm_component_frequencies(rng):
    w = np.array([0.2, 0.5, 0.3])
    g = make_gmm([-10.0, 0.0, 10.0], [0.1, 0.1, 0.1], w)
    n = 10_000
    x, _ = g.sample_n(ONE[0], n, rng)
    freq = np.array([(x < -5).mean(), (np.abs(x) < 5).mean(), (x > 5).mean()])
    assert np.all(np.abs(freq - w) < 3 * np.sqrt(w * (1 - w) / n))


def test_gmm_fixed_std(rng):
    g = GMM(2, 3, k=2, fixed_std=0.5, rng=rng)
    mu, log_std, _ = g.mixture_params(rng.standard_normal((4, 3)))
    np.testing.assert_allclose(log_std.data, math.log(0.5))
    assert len(g.parameters()) == 2


def test_gmm_init_std(rng):
    g = GMM(2, 3, k=4, init_std=10.0, log_std_bounds=(-5, 3), rng=rng)
    _, log_std, log_w = g.mixture_params(rng.standard_normal((4, 3)))
    np.testing.assert_allclose(log_std.data, math.log(10.0))
    np.testing.assert_allclose(log_w.data, math.log(0.25))


def test_gmm_gradients_match_finite_differences(rng):
    g = GMM(2, 3, k=3, hidden=(5,), rng=rng)
    cond, x = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    loss = ad.neg(g.log_prob(cond, x).mean())
    loss.backward()
    for p in g.parameters():
        def f(v, p=p):
            old, p.data = p.data, v
            val = -g.log_prob_np(cond, x).mean()
            p.data = old
            return val
        num = numeric_grad(f, p.data.copy())
        assert np.max(np.abs(num - p.grad)) / max(1e-8, np.max(np.abs(num))) < 1e-4


# -- coupling layers --------------------------------------------------------------------------
def _layer(rng, dim=4, feat=3, pass_first=True):
    layer = CouplingLayer(dim, feat, pass_first, hidden=8, rng=rng)
    for net in (layer.s_net, layer.t_net):
        net.weights[-1].data[...] = 0.5 * rng.standard_normal(net.weights[-1].shape)
    return layer


def test_identity_layer(rng):
    layer = CouplingLayer(4, 3, True, hidden=8, rng=rng)
    set_constant_layer(layer, 0.0, 0.0)
    y = Tensor(rng.standard_normal((1, 5, 4)))
    out, ld = coupling_forward(layer, y, Tensor(rng.standard_normal((1, 5, 3))))
    np.testing.assert_array_equal(out.data, y.data)
    np.testing.assert_array_equal(ld.data, 0.0)


def test_constant_scale_layer(rng):
    layer = CouplingLayer(2, 3, True, hidden=8, rng=rng)
    set_constant_layer(layer, 0.7, 0.0)
    y = rng.standard_normal((1, 5, 2))
    out, ld = coupling_forward(layer, Tensor(y), Tensor(rng.standard_normal((1, 5, 3))))
    np.testing.assert_allclose(out.data[..., 0], y[..., 0])
    np.testing.assert_allclose(out.data[..., 1], y[..., 1] * math.exp(0.7))
    np.testing.assert_allclose(ld.data, 0.7)


def test_constant_shift_inverse(rng):
    layer = CouplingLayer(2, 3, False, hidden=8, rng=rng)
    set_constant_layer(layer, 0.0, 1.5)
    y = rng.standard_normal((1, 5, 2))
    out, _ = coupling_inverse(layer, Tensor(y), Tensor(rng.standard_normal((1, 5, 3))))
    np.testing.assert_allclose(out.data[..., 0], y[..., 0] - 1.5)
    np.testing.assert_allclose(out.data[..., 1], y[..., 1])


@pytest.mark.parametrize("pass_first", [True, False])
@pytest.mark.parametrize("dim", [2, 3, 5])
def test_layer_round_trip_and_log_det(rng, dim, pass_first):
    layer = _layer(rng, dim, 3, pass_first)
    y = rng.standard_normal((1, 50, dim))
    feats = Tensor(rng.standard_normal((1, 50, 3)))
    out, ld = layer.forward(Tensor(y), feats)
    back, ld_inv = layer.inverse(out, feats)
    assert np.max(np.abs(back.data - y)) < 1e-9
    np.testing.assert_allclose(ld_inv.data, -ld.data, atol=1e-12)


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_layer_log_det_matches_numerical_jacobian(rng, dim):
    layer = _layer(rng, dim, 3)
    f = Tensor(rng.standard_normal((1, 1, 3)))
    for _ in range(5):
        y = rng.standard_normal(dim)
        jac = np.zeros((dim, dim))
        for i in range(dim):
            jac[i] = numeric_grad(lambda v, i=i: layer.forward(Tensor(v[None, None]), f)[0].data[0, 0, i], y)
        _, ld = layer.forward(Tensor(y[None, None]), f)
        assert abs(np.linalg.slogdet(jac)[1] - ld.data[0, 0]) < 1e-5


# -- flows -----------------------------------------------------------------------------------
def test_identity_flow_is_standard_normal(rng):
    m = make_identity(FlowModel(3, 2, n_layers=4, hidden=8, feat_dim=4, encoder_hidden=8, rng=rng))
    x = rng.standard_normal((20, 3))
    expect = stats.norm.logpdf(x).sum(axis=1)
    np.testing.assert_allclose(flow_log_prob(m, rng.standard_normal((20, 2)), x).data, expect, atol=1e-12)


def test_identity_flow_samples_pass_ks(rng):
    m = make_identity(FlowModel(2, 1, n_layers=4, hidden=8, feat_dim=4, encoder_hidden=8, rng=rng))
    x, _ = flow_sample(m, ONE[0], 10_000, rng)
    for j in range(2):
        assert stats.kstest(x[:, j], "norm").pvalue > 0.01


def test_constant_shift_flow_mean(rng):
    m = make_identity(FlowModel(2, 1, n_layers=2, hidden=8, feat_dim=4, encoder_hidden=8, rng=rng))
    for layer in flow_layers(m):
        set_constant_layer(layer, 0.0, 0.8)
    n = 5000
    x, _ = m.sample_n(ONE[0], n, rng)
    assert np.all(np.abs(x.mean(axis=0) - 0.8) < 3 / math.sqrt(n))


def test_single_constant_scale_flow_by_hand(rng):
    m = make_identity(FlowModel(2, 1, n_layers=1, hidden=8, feat_dim=4, encoder_hidden=8, rng=rng))
    set_constant_layer(flow_layers(m)[0], 0.4, 0.0)
    x = rng.standard_normal((10, 2))
    z = x.copy()
    z[:, 1] *= math.exp(-0.4)
    expect = stats.norm.logpdf(z).sum(axis=1) - 0.4
    np.testing.assert_allclose(m.log_prob_np(ones(10), x), expect, atol=1e-12)


def test_flow_sample_densities_are_self_consistent(rng):
    m = randomize_last_layers(FlowModel(3, 2, n_layers=4, hidden=8, feat_dim=4, encoder_hidden=8, rng=rng), rng)
    cond = rng.standard_normal((64, 2))
    x, lp = m.sample(cond, rng)
    np.testing.assert_allclose(lp, m.log_prob_np(cond, x), atol=1e-9)


def _grid_integral(model, lo=-6.0, hi=6.0, h=0.05):
    axis = np.arange(lo + h / 2, hi, h)
    xx, yy = np.meshgrid(axis, axis)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return np.exp(model.log_prob_np(ones(len(pts)), pts)).sum() * h * h


def test_flow_density_integrates_to_one(rng):
    m = randomize_last_layers(FlowModel(2, 1, n_layers=4, hidden=8, feat_dim=4, encoder_hidden=8, rng=rng),
                              rng, scale=0.05)
    x, _ = m.sample_n(ONE[0], 20_000, rng)
    assert np.mean(np.all(np.abs(x) < 6, axis=1)) > 0.999
    assert _grid_integral(m) == pytest.approx(1.0, abs=0.01)


def test_flow_gradients_match_finite_differences(rng):
    m = randomize_last_layers(FlowModel(2, 2, n_layers=2, hidden=5, feat_dim=3, encoder_hidden=4, rng=rng), rng)
    cond, x = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    ad.neg(m.log_prob(cond, x).mean()).backward()
    for p in m.parameters():
        def f(v, p=p):
            old, p.data = p.data, v
            val = -m.log_prob_np(cond, x).mean()
            p.data = old
            return val
        num = numeric_grad(f, p.data.copy())
        assert np.max(np.abs(num - p.grad)) / max(1e-8, np.max(np.abs(num))) < 1e-4


# -- mixture of flows -------------------------------------------------------------------------
def _mof(rng, d=2, k=2, **kw):
    return MofModel(d, 1, k=k, n_layers=4, hidden=8, feat_dim=4, encoder_hidden=8, rng=rng, **kw)


def test_mof_k1_identity_reduces_to_gaussian(rng):
    m = make_identity(_mof(rng, k=1))
    set_gmm(m.latent, [[0.3, -0.2]], [[0.6, 1.4]], [1.0])
    g = make_gmm([[0.3, -0.2]], [[0.6, 1.4]], [1.0], action_dim=2)
    x = rng.standard_normal((10, 2))
    np.testing.assert_allclose(mof_log_prob(m, ones(10), x).data, g.log_prob_np(ones(10), x), atol=1e-12)


def test_mof_identity_flows_equal_latent_gmm(rng):
    m = make_identity(_mof(rng, k=3))
    x = rng.standard_normal((10, 2))
    cond = rng.standard_normal((10, 1))
    np.testing.assert_allclose(m.log_prob_np(cond, x), m.latent.log_prob_np(cond, x), atol=1e-12)


def test_mof_density_integrates_to_one(rng):
    m = randomize_last_layers(_mof(rng), rng, scale=0.05)
    set_gmm(m.latent, [[-1.0, 0.5], [1.0, -0.5]], [[0.7, 0.5], [0.4, 0.8]], [0.4, 0.6])
    x, _ = m.sample_n(ONE[0], 20_000, rng)
    assert np.mean(np.all(np.abs(x) < 6, axis=1)) > 0.999
    assert _grid_integral(m) == pytest.approx(1.0, abs=0.01)


def test_mof_identity_samples_pass_ks(rng):
    m = make_identity(_mof(rng, k=1))
    set_gmm(m.latent, [[0.0, 0.0]], [[1.0, 1.0]], [1.0])
    x, _ = mof_sample(m, ONE[0], 10_000, rng)
    for j in range(2):
        assert stats.kstest(x[:, j], "norm").pvalue > 0.01


def test_mof_degenerate_weights(rng):
    m = make_identity(_mof(rng))
    set_gmm(m.latent, [[-4.0, 0.0], [4.0, 0.0]], [[0.3, 0.3], [0.3, 0.3]], [1.0, 0.0])
    x, _ = m.sample_n(ONE[0], 500, rng)
    assert np.all(x[:, 0] < 0)


def test_mof_sample_density_is_mixture_not_component(rng):
    m = randomize_last_layers(_mof(rng), rng)
    set_gmm(m.latent, [[0.0, 0.0], [0.1, 0.0]], [[1.0, 1.0], [1.0, 1.0]], [0.5, 0.5])
    cond = ones(32)
    x, lp = m.sample(cond, rng)
    np.testing.assert_allclose(lp, m.log_prob_np(cond, x), atol=1e-9)


def test_mof_invertibility(rng):
    m = randomize_last_layers(_mof(rng, d=3, k=3), rng)
    cond = rng.standard_normal((1000, 1))
    z = rng.standard_normal((3, 1000, 3))
    feats = m.encoder(cond)
    x, _ = m.flows.forward(Tensor(z), feats)
    back, _ = m.flows.inverse(x, feats)
    assert np.max(np.abs(back.data - z)) < 1e-9


def test_mof_gradients_match_finite_differences(rng):
    m = randomize_last_layers(MofModel(2, 2, k=2, n_layers=2, hidden=4, feat_dim=3, encoder_hidden=4, rng=rng), rng)
    cond, x = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    ad.neg(m.log_prob(cond, x).mean()).backward()
    for p in m.parameters():
        def f(v, p=p):
            old, p.data = p.data, v
            val = -m.log_prob_np(cond, x).mean()
            p.data = old
            return val
        num = numeric_grad(f, p.data.copy())
        assert np.max(np.abs(num - p.grad)) / max(1e-8, np.max(np.abs(num))) < 1e-4


def test_one_dimensional_mof(rng):
    m = randomize_last_layers(MofModel(1, 1, k=2, n_layers=2, hidden=4, feat_dim=3, encoder_hidden=4, rng=rng), rng)
    axis = np.linspace(-12, 12, 24001)
    p = np.exp(m.log_prob_np(ones(len(axis)), axis[:, None]))
    assert p.sum() * (axis[1] - axis[0]) == pytest.approx(1.0, abs=1e-3)


# -- bounded density ----------------------------------------------------------------------------
def test_box_density_integrates_and_stays_inside(rng):
    m = BoxDensity(GMM(1, 1, k=3, init_std=1.0, rng=rng), 0.0, 1.0)
    grid = (np.arange(20_000) + 0.5) / 20_000
    p = np.exp(m.log_prob_np(ones(len(grid)), grid[:, None]))
    assert p.mean() == pytest.approx(1.0, abs=2e-3)
    x, lp = m.sample_n(ONE[0], 1000, rng)
    assert np.all((x > 0) & (x < 1))
    np.testing.assert_allclose(lp, m.log_prob_np(ones(1000), x), atol=1e-9)


def test_entropy_term_of_standard_normal(rng):
    m = make_identity(FlowModel(2, 1, n_layers=2, hidden=4, feat_dim=3, encoder_hidden=4, rng=rng))
    est = np.array([m.entropy_term(ones(50), 20, rng).item() for _ in range(20)])
    se = est.std(ddof=1) / math.sqrt(len(est))
    assert abs(est.mean() - (-(1 + math.log(2 * math.pi)))) < 3 * max(se, 1e-3)


# -- plumbing ------------------------------------------------------------------------------------
@pytest.mark.parametrize("tag", ["gmm", "flow", "mof"])
def test_save_and_load(tmp_path, rng, tag):
    kw = {} if tag == "gmm" else {"n_layers": 2, "hidden": 4, "feat_dim": 3, "encoder_hidden": 4}
    m = build_model(tag, 3, 2, rng=rng, **kw)
    m.save(tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    cond, x = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    np.testing.assert_array_equal(m.log_prob_np(cond, x), back.log_prob_np(cond, x))


def test_build_model_unknown():
    with pytest.raises(ValueError, match="unknown model type"):
        build_model("vae", 2, 2)


def test_argmax_ties_take_lowest_index():
    assert argmax_sample(None, [0.1, 0.5, 0.5, 0.2]) == 1
    assert argmax_sample(None, [0.9, 0.5, 0.5], feasible=[False, True, True]) == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_property_flow_invertibility(dim, seed):
    r = np.random.default_rng(seed)
    m = randomize_last_layers(FlowModel(dim, 2, n_layers=4, hidden=6, feat_dim=3, encoder_hidden=5, rng=r), r, 0.5)
    cond = r.standard_normal((30, 2))
    feats = m.encoder(cond)
    x = Tensor(r.standard_normal((1, 30, dim)) * 3)
    z, ld_inv = m.flow.inverse(x, feats)
    back, ld = m.flow.forward(z, feats)
    assert np.max(np.abs(back.data - x.data)) < 1e-9
    np.testing.assert_allclose(ld.data, -ld_inv.data, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_property_sample_log_prob_consistency(seed):
    r = np.random.default_rng(seed)
    m = randomize_last_layers(_mof(r, d=3, k=3), r)
    cond = r.standard_normal((16, 1))
    x, lp = m.sample(cond, r)
    assert np.all(np.isfinite(lp))
    np.testing.assert_allclose(lp, m.log_prob_np(cond, x), atol=1e-9)
