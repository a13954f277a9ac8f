import numpy as np
import pytest

from xiplus import DataError, ShapeError, StaleCacheError
from xiplus.momentprop import (BnState, FcParams, ProjectedGaussian, TwinBranch, bn_forward,
                               bn_var_forward, fc_forward, fc_var_forward, momentprop_backward)

from _oracles import central_diff, cov_standard_error, mc_pushforward, rel_err


def _state(rng, d, eps=1e-5):
    return BnState(1 + 0.3 * rng.normal(size=d), rng.normal(size=d), rng.normal(size=d),
                   rng.uniform(0.5, 2, size=d), eps)


def test_bn_identity_normalization():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3))
    x = (x - x.mean(0)) / x.std(0)
    state = BnState(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=1e-300)
    out, _ = bn_forward(state, x)
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_bn_train_output_moments():
    rng = np.random.default_rng(1)
    state = _state(rng, 4)
    x = rng.normal(2, 3, size=(64, 4))
    out, _ = bn_forward(state, x)
    np.testing.assert_allclose(out.mean(0), state.beta, atol=1e-10)
    # biased variance, shrunk by var / (var + eps)
    v = x.var(0)
    np.testing.assert_allclose(out.var(0), state.gamma**2 * v / (v + state.eps), atol=1e-10)


def test_bn_infer_uses_running_stats_only():
    rng = np.random.default_rng(3)
    state = _state(rng, 3)
    x = rng.normal(size=(5, 3))
    a, _ = bn_forward(state, x, "infer")
    b, _ = bn_forward(state, np.vstack([x, rng.normal(size=(7, 3)) * 100]), "infer")
    np.testing.assert_array_equal(a, b[:5])
    single, _ = bn_forward(state, x[:1], "infer")
    np.testing.assert_array_equal(single, a[:1])


def test_bn_running_update():
    rng = np.random.default_rng(4)
    state = _state(rng, 2)
    rm, rv = state.running_mean.copy(), state.running_var.copy()
    x = rng.normal(size=(10, 2))
    bn_forward(state, x)
    np.testing.assert_allclose(state.running_mean, 0.9 * rm + 0.1 * x.mean(0))
    np.testing.assert_allclose(state.running_var, 0.9 * rv + 0.1 * x.var(0))


def test_bn_train_needs_two():
    with pytest.raises(DataError):
        bn_forward(BnState.identity(3), np.zeros((1, 3)))


def test_bn_var_unit_scale_and_zero():
    d = 3
    eps = 1e-5
    state = BnState(np.ones(d), np.zeros(d), np.zeros(d), np.full(d, 1 - eps), eps)
    _, stats = bn_forward(state, np.zeros((2, d)), "infer")
    cov = bn_var_forward(state, np.array([[2.0, 4.0, 0.5]]), stats)
    np.testing.assert_allclose(cov, [[0.5, 0.25, 2.0]], rtol=1e-15)
    # L^-1 = 0 is the L -> inf limit
    np.testing.assert_array_equal(bn_var_forward(state, np.full((1, d), np.inf), stats), 0.0)


def test_bn_var_rejects_foreign_stats():
    rng = np.random.default_rng(5)
    a, b = _state(rng, 2), _state(rng, 2)
    _, stats = bn_forward(a, rng.normal(size=(4, 2)))
    with pytest.raises(DataError):
        bn_var_forward(b, np.ones((4, 2)), stats)
    with pytest.raises(DataError):
        bn_var_forward(a, np.ones((3, 2)), stats)


def test_fc_forward_cases():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(fc_forward(FcParams(np.eye(3), np.zeros(3)), x), x)
    b = rng.normal(size=2)
    np.testing.assert_array_equal(fc_forward(FcParams(np.zeros((2, 3)), b), x), np.tile(b, (4, 1)))
    w = rng.normal(size=(5, 3))
    ref = np.array([[sum(w[j, k] * x[i, k] for k in range(3)) + b[0] for j in range(5)] for i in range(4)])
    assert rel_err(fc_forward(FcParams(w, np.full(5, b[0])), x), ref) < 1e-12
    with pytest.raises(ShapeError):
        fc_forward(FcParams(w, np.zeros(5)), np.zeros((2, 4)))


def test_fc_var_cases():
    rng = np.random.default_rng(7)
    c = rng.uniform(0.1, 2, size=3)
    np.testing.assert_array_equal(fc_var_forward(FcParams(np.eye(3), np.zeros(3)), c), np.diag(c))
    w = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(fc_var_forward(FcParams(w, np.zeros(4)), np.zeros(3)), 0.0)
    full = fc_var_forward(FcParams(w, np.zeros(4)), c)
    np.testing.assert_allclose(full, w @ np.diag(c) @ w.T, rtol=1e-13)
    np.testing.assert_allclose(fc_var_forward(FcParams(w, np.zeros(4)), c, diagonal=True), np.diag(full), rtol=1e-13)


def test_projected_covariance_symmetric_psd():
    rng = np.random.default_rng(8)
    for _ in range(20):
        d, d_out = rng.integers(1, 8, size=2)
        w = rng.normal(size=(d_out, d)) * rng.uniform(0.01, 10)
        cov = fc_var_forward(FcParams(w, np.zeros(d_out)), rng.uniform(0, 5, size=(6, d)))
        assert np.abs(cov - np.swapaxes(cov, 1, 2)).max() <= 1e-10
        for s in cov:
            assert np.linalg.eigvalsh(s)[0] >= -1e-8 * max(1.0, np.abs(s).max())
            ProjectedGaussian(np.ones(d_out), s)


def test_projected_gaussian_validation():
    with pytest.raises(DataError):
        ProjectedGaussian(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]))
    with pytest.raises(DataError):
        ProjectedGaussian(np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(ShapeError):
        ProjectedGaussian(np.zeros(2), np.zeros(3), diagonal=True)


def test_monte_carlo_pushforward():
    rng = np.random.default_rng(9)
    n = 200_000
    for _ in range(3):
        d, d_out = 4, 3
        state = _state(rng, d)
        fc = FcParams(rng.normal(size=(d_out, d)), rng.normal(size=d_out))
        phi = rng.normal(size=(6, d))
        prec = rng.uniform(0.5, 4, size=(6, d))
        _, stats = bn_forward(state, phi, update_running=False)
        cov_bn = bn_var_forward(state, prec, stats)
        sigma = fc_var_forward(fc, cov_bn)[0]
        var_s, sigma_s = mc_pushforward(phi[0], prec[0], stats.mean, stats.var, state.gamma, state.beta,
                                        state.eps, fc.weight, fc.bias, n, rng)
        assert np.all(np.abs(var_s - cov_bn[0]) <= 3 * cov_bn[0] * np.sqrt(2 / (n - 1)))
        assert np.all(np.abs(sigma_s - sigma) <= 3 * cov_standard_error(sigma, n))


def test_branches_share_parameters():
    rng = np.random.default_rng(10)
    twin = TwinBranch(_state(rng, 3), FcParams(rng.normal(size=(2, 3)), np.zeros(2)))
    phi, prec = rng.normal(size=(4, 3)), rng.uniform(1, 2, size=(4, 3))
    _, cov_a, _ = twin.forward(phi, prec, update_running=False)
    twin.bn.gamma *= 2.0  # touch the mean-branch batch norm only
    _, cov_b, _ = twin.forward(phi, prec, update_running=False)
    np.testing.assert_allclose(cov_b, 4.0 * cov_a, rtol=1e-13)
    twin.fc.weight *= 3.0
    _, cov_c, _ = twin.forward(phi, prec, update_running=False)
    np.testing.assert_allclose(cov_c, 9.0 * cov_b, rtol=1e-13)


def _twin_objective(twin, phi, prec, gm, gc, mode, diagonal):
    def f():
        m, c, _ = twin.forward(phi, prec, mode, diagonal, update_running=False)
        return float(np.sum(gm * m) + np.sum(gc * c))
    return f


@pytest.mark.parametrize("mode,diagonal", [("train", False), ("train", True), ("infer", False)])
def test_backward_matches_finite_differences(mode, diagonal):
    rng = np.random.default_rng(11)
    B, d, d_out = 5, 4, 3
    twin = TwinBranch(_state(rng, d), FcParams(rng.normal(size=(d_out, d)), rng.normal(size=d_out)))
    phi = rng.normal(size=(B, d))
    prec = rng.uniform(0.5, 3, size=(B, d))
    gm = rng.normal(size=(B, d_out))
    gc = rng.normal(size=(B, d_out) if diagonal else (B, d_out, d_out))
    _, _, cache = twin.forward(phi, prec, mode, diagonal, update_running=False)
    g = twin.backward(cache, gm, gc)
    f = _twin_objective(twin, phi, prec, gm, gc, mode, diagonal)
    for key, arr in (("phi", phi), ("precision", prec), ("gamma", twin.bn.gamma),
                     ("beta", twin.bn.beta), ("weight", twin.fc.weight), ("bias", twin.fc.bias)):
        assert rel_err(g[key], central_diff(f, arr)) < 1e-5, key


def test_weight_gradient_hand_formula():
    rng = np.random.default_rng(12)
    w = rng.normal(size=(2, 2))
    c = rng.uniform(0.5, 2, size=2)
    up = rng.normal(size=(2, 2))
    twin = TwinBranch(BnState.identity(2), FcParams(w.copy(), np.zeros(2)))
    eps = twin.bn.eps
    # choose the precision so that the batch-norm stage yields exactly c
    _, stats = bn_forward(twin.bn, np.zeros((1, 2)), "infer")
    prec = (1.0 / (c * (stats.var + eps)))[None, :]
    _, _, cache = twin.forward(np.zeros((1, 2)), prec, "infer")
    g = twin.backward(cache, np.zeros((1, 2)), up[None])
    np.testing.assert_allclose(g["weight"], (up + up.T) @ w @ np.diag(cache.cov_bn[0]), rtol=1e-12)


def test_zero_upstream_zero_gradients():
    rng = np.random.default_rng(13)
    twin = TwinBranch(_state(rng, 3), FcParams(rng.normal(size=(2, 3)), np.zeros(2)))
    _, _, cache = twin.forward(rng.normal(size=(4, 3)), np.ones((4, 3)))
    g = twin.backward(cache, np.zeros((4, 2)), np.zeros((4, 2, 2)))
    for v in g.values():
        np.testing.assert_array_equal(v, 0.0)


def test_stale_cache_rejected():
    rng = np.random.default_rng(14)
    twin = TwinBranch(_state(rng, 3), FcParams(rng.normal(size=(2, 3)), np.zeros(2)))
    _, _, cache = twin.forward(rng.normal(size=(4, 3)), np.ones((4, 3)))
    twin.fc.bump()
    with pytest.raises(StaleCacheError):
        momentprop_backward(cache, np.zeros((4, 2)), None)
