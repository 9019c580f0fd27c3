import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_layer, random_model
from nestedgp.deep import (AUTOENCODER, DeepGpModel, deep_bound, deep_bound_minibatch, encode, evaluate,
                           layer_penalties, predict, propagate_message)
from nestedgp.errors import DimensionMismatch, EmptyBatch, InvalidLayerIndex
from nestedgp.kernels import eq, gram, linear
from nestedgp.linalg import cholesky_with_jitter
from nestedgp.optim import OptimizerConfig, maximize
from nestedgp.psi import GaussianMessage
from nestedgp.sparse import VariationalLayer, svi_bound


def _data(rng, n, q_in, q_out):
    return rng.standard_normal((n, q_in)), rng.standard_normal((n, q_out))


@given(st.integers(0, 10_000), st.sampled_from(["eq", "linear"]))
def test_single_layer_equals_svi(seed, family):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 3)) if family == "linear" else int(rng.integers(1, 8))
    layer = random_layer(rng, 2, 2, m, family)
    X, Y = _data(rng, int(rng.integers(1, 20)), 2, 2)
    a = deep_bound(DeepGpModel((layer,)), X, Y).total
    b = svi_bound(layer, X, Y).total
    assert abs(a - b) <= 1e-10 * max(1.0, abs(b))


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_term_accounting(seed, depth):
    rng = np.random.default_rng(seed)
    dims = [1] + [2] * (depth - 1) + [2]
    model = random_model(rng, dims, [3] * depth)
    X, Y = _data(rng, 7, 1, 2)
    r = deep_bound(model, X, Y)
    parts = r.likelihood_term - r.kl_terms.sum() - r.compression_terms.sum() - r.propagation_terms.sum()
    assert abs(r.total - parts) <= 1e-10 * max(1.0, abs(r.total))
    assert abs(r.per_datum_partials.sum() - r.data_term) <= 1e-10 * max(1.0, abs(r.data_term))
    assert len(r.kl_terms) == depth and len(r.propagation_terms) == depth - 1
    assert np.all(r.kl_terms >= -1e-10) and np.all(r.compression_terms >= -1e-8)
    assert np.all(r.propagation_terms >= -1e-8)


def test_interpolation_limit_of_message():
    X = np.linspace(-2, 2, 6)[:, None]
    k = eq(1.0, [0.7])
    targets = np.sin(2 * X)
    # Z = X, so K^-1 M = K^-1 targets reproduces the targets at X
    for scale in (1e-2, 1e-4, 1e-6):
        layer = VariationalLayer(X.copy(), targets, scale * np.eye(6), 1e-3, k)
        q = propagate_message(layer, GaussianMessage.deterministic(X))
        np.testing.assert_allclose(q.means, targets, atol=1e-8)
    np.testing.assert_allclose(q.variances, 1e-3, rtol=1e-4)


def test_message_matches_monte_carlo():
    rng = np.random.default_rng(3)
    layer = random_layer(rng, 1, 1, 4)
    q = GaussianMessage(rng.standard_normal((3, 1)), rng.uniform(0.05, 0.5, (3, 1)))
    out = propagate_message(layer, q)
    K = layer.kuu()
    N = 200_000
    for i in range(3):
        h = q.means[i, 0] + np.sqrt(q.variances[i, 0]) * rng.standard_normal(N)
        u = layer.M[:, 0] + rng.standard_normal((N, layer.m)) @ layer.L.T
        kh = gram(layer.kernel, h[:, None], layer.Z)
        W = K.solve(kh.T).T
        cond_var = layer.kernel.variance - np.einsum("nj,nj->n", kh, W)
        f = np.einsum("nj,nj->n", W, u) + np.sqrt(cond_var + layer.noise_var) * rng.standard_normal(N)
        se_mean = f.std() / np.sqrt(N)
        se_var = np.sqrt(np.mean((f - f.mean()) ** 4) - f.var() ** 2) / np.sqrt(N)
        assert abs(out.means[i, 0] - f.mean()) < 3.5 * se_mean
        assert abs(out.variances[i, 0] - f.var()) < 3.5 * se_var


def test_linear_message_matches_bayesian_linear_model(rng):
    Q = 3
    Z = rng.standard_normal((Q, Q))
    M = rng.standard_normal((Q, 2))
    L = np.tril(0.3 * rng.standard_normal((Q, Q)), -1) + np.diag(rng.uniform(0.3, 1, Q))
    layer = VariationalLayer(Z, M, L, 0.2, linear(1.7, Q))
    X = rng.standard_normal((5, Q))
    q = propagate_message(layer, GaussianMessage.deterministic(X))
    # with Z square and invertible, f(x) = x Z^-1 u exactly
    P = X @ np.linalg.inv(Z)
    np.testing.assert_allclose(q.means, P @ M, rtol=1e-8)
    var = 0.2 + np.einsum("nj,jl,nl->n", P, L @ L.T, P)
    np.testing.assert_allclose(q.variances, np.repeat(var[:, None], 2, 1), rtol=1e-8)


def test_deterministic_warp_limit():
    X = np.linspace(-2, 2, 6)[:, None]
    rng = np.random.default_rng(0)
    Y = np.cos(X) + 0.1 * rng.standard_normal((6, 1))
    k1 = eq(1.0, [0.7])
    assert cholesky_with_jitter(gram(k1, X)).jitter_applied == 0.0
    h = np.sin(X)
    layer2 = random_layer(rng, 1, 1, 3)
    target = svi_bound(layer2, h, Y).total
    gaps = []
    for s2 in (1e-2, 1e-4, 1e-6, 1e-8, 1e-10):
        layer1 = VariationalLayer(X.copy(), h, 1e-7 * np.eye(6), s2, k1)
        r = deep_bound(DeepGpModel((layer1, layer2)), X, Y)
        gaps.append(abs(r.total + r.kl_terms[0] + r.compression_terms[0] - target))
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-4


def test_large_layer_noise_hurts_trained_model():
    rng = np.random.default_rng(4)
    X = np.linspace(-1, 1, 15)[:, None]
    Y = np.tanh(3 * X) + 0.05 * rng.standard_normal((15, 1))
    from nestedgp.optim import LayerSpec, initialize
    model = initialize(X, Y, [LayerSpec(m=5, output_dim=1), LayerSpec(m=5)], seed=0)
    model = maximize(model, (X, Y), OptimizerConfig(max_iters=150)).model
    base = deep_bound(model, X, Y).total
    for i, layer in enumerate(model.layers):
        layers = list(model.layers)
        layers[i] = layer.replace(noise_var=layer.noise_var * 1e4)
        worse = deep_bound(DeepGpModel(tuple(layers)), X, Y).total
        assert np.isfinite(worse) and worse < base


def test_minibatch_identities(rng):
    model = random_model(rng, (1, 2, 1), (3, 3))
    X, Y = _data(rng, 8, 1, 1)
    full = deep_bound(model, X, Y)
    allb = deep_bound_minibatch(model, np.arange(8), X, Y)
    assert abs(allb.total - full.total) <= 1e-12 * abs(full.total)
    parts = np.array_split(rng.permutation(8), 4)
    data = sum(deep_bound_minibatch(model, p, X, Y, n_total=8).data_term * len(p) / 8 for p in parts)
    assert abs(data - full.kl_terms.sum() * 0 - full.data_term) <= 1e-10 * abs(full.data_term)
    with pytest.raises(EmptyBatch):
        deep_bound_minibatch(model, [], X, Y)


def test_minibatch_enumeration(rng):
    model = random_model(rng, (1, 2, 1), (3, 3))
    X, Y = _data(rng, 6, 1, 1)
    est = [deep_bound_minibatch(model, list(b), X, Y, n_total=6).total for b in itertools.combinations(range(6), 2)]
    full = deep_bound(model, X, Y).total
    assert abs(np.mean(est) - full) <= 1e-10 * abs(full)


def test_predict_calibration():
    rng = np.random.default_rng(2)
    X = rng.uniform(-3, 3, (40, 1))
    Y = np.sin(X) + 0.1 * rng.standard_normal((40, 1))
    from nestedgp.optim import LayerSpec, initialize
    model = initialize(X, Y, [LayerSpec(m=10)], seed=0)
    model = maximize(model, (X, Y), OptimizerConfig(max_iters=500)).model
    q = predict(model, X)
    inside = np.abs(q.means - Y) <= 3 * np.sqrt(q.variances)
    assert inside.mean() >= 0.95
    again = predict(model, X)
    np.testing.assert_array_equal(q.means, again.means)
    np.testing.assert_array_equal(q.variances, again.variances)


def test_identity_linear_stack(rng):
    Q = 2
    Z = np.eye(Q)
    layers = tuple(VariationalLayer(Z, Z.copy(), 1e-6 * np.eye(Q), 1e-8, linear(1.0, Q)) for _ in range(3))
    model = DeepGpModel(layers)
    X = rng.standard_normal((5, Q))
    np.testing.assert_allclose(predict(model, X).means, X, atol=1e-6)


def test_encode(rng):
    model = random_model(rng, (2, 1, 2), (3, 3), mode=AUTOENCODER)
    Y = rng.standard_normal((6, 2))
    top = encode(model, Y, layer=2)
    pred = predict(model, Y)
    np.testing.assert_array_equal(top.means, pred.means)
    np.testing.assert_array_equal(encode(model, Y).means, encode(model, Y).means)
    assert encode(model, Y).Q == 1
    for bad in (0, 3):
        with pytest.raises(InvalidLayerIndex):
            encode(model, Y, layer=bad)
    r = deep_bound(model, None, Y)
    assert np.isfinite(r.total)


def test_shape_errors(rng):
    model = random_model(rng, (1, 2, 1), (3, 3))
    with pytest.raises(DimensionMismatch):
        deep_bound(model, np.zeros((4, 2)), np.zeros((4, 1)))
    with pytest.raises(DimensionMismatch):
        predict(model, np.zeros((4, 3)))
    with pytest.raises(DimensionMismatch):
        DeepGpModel((random_layer(rng, 1, 2, 3), random_layer(rng, 1, 1, 3)))


def test_chunked_evaluation_matches_serial(rng):
    model = random_model(rng, (2, 2, 1), (3, 4))
    X, Y = _data(rng, 13, 2, 1)
    full = deep_bound(model, X, Y)
    for parts in (2, 5, 13):
        chunks = np.array_split(np.arange(13), parts)
        r, _ = evaluate(model, X, Y, chunks)
        assert abs(r.total - full.total) <= 1e-12 * abs(full.total)
        np.testing.assert_allclose(r.per_datum_partials, full.per_datum_partials, rtol=1e-12)


@given(st.integers(0, 10_000))
def test_propagation_grows_as_lengthscale_shrinks(seed):
    # q(u) = p(u): the penalty measures the prior function's roughness over the input spread
    rng = np.random.default_rng(seed)
    q = GaussianMessage(rng.uniform(-1, 1, (10, 1)), rng.uniform(0.01, 0.2, (10, 1)))
    Z = np.linspace(-2, 2, 25)[:, None]
    props = []
    for ls in (2.0, 1.0, 0.5, 0.25):
        k = eq(1.0, [ls])
        C = cholesky_with_jitter(gram(k, Z)).chol
        props.append(layer_penalties(VariationalLayer(Z, np.zeros((25, 1)), C, 0.1, k), q)[1])
    assert all(b >= a for a, b in zip(props, props[1:]))


@given(st.integers(0, 10_000))
def test_compression_grows_with_distance_single_inducing_input(seed):
    rng = np.random.default_rng(seed)
    Q = int(rng.integers(1, 3))
    ls = rng.uniform(0.3, 2.0)
    k = eq(rng.uniform(0.5, 2.0), np.full(Q, ls))
    z = rng.standard_normal((1, Q))
    d = rng.standard_normal(Q)
    d /= np.linalg.norm(d)
    var = rng.uniform(0.01, 1.0, (1, Q)) * ls**2
    layer = VariationalLayer(z, np.zeros((1, 1)), np.eye(1), 0.1, k)
    comps = [layer_penalties(layer, GaussianMessage(z + t * ls * d, var))[0] for t in np.linspace(0, 5, 11)]
    assert all(b >= a - 1e-12 for a, b in zip(comps, comps[1:]))
