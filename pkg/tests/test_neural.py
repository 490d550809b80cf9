import numpy as np
import pytest

from conftest import random_channel
from uwmmse import autodiff as ad
from uwmmse.errors import ConfigurationError
from uwmmse.neural import (
    A_EPS,
    GcnParams,
    ModelParams,
    ReductionFilter,
    affine_weights,
    gcn_forward,
    init_params,
    parameter_census,
    reduce_channel,
    unfolded_forward,
)
from uwmmse.wmmse import InterferenceMode, ProblemConfig, wmmse_solve

CLASSICAL = InterferenceMode.CLASSICAL_INCLUDE_SELF


def test_reduce_selector_filter(rng):
    H = random_channel(rng, 4, 2, 3)
    w = np.zeros((2, 3))
    w[0, 0] = 1.0
    raw, _ = reduce_channel(H, ReductionFilter(w, np.zeros(())))
    np.testing.assert_array_equal(raw, H[:, :, 0, 0])


def test_reduce_constant_filter(rng):
    H = random_channel(rng, 5, 2, 2)
    raw, hbar = reduce_channel(H, ReductionFilter(np.zeros((2, 2)), np.array(0.7)))
    np.testing.assert_allclose(raw, 0.7)
    np.testing.assert_allclose(hbar, 1 / 5)


def test_reduce_loop_oracle(rng):
    H = random_channel(rng, 3, 2, 3)
    w, c = rng.standard_normal((2, 3)), rng.standard_normal()
    raw, hbar = reduce_channel(H, ReductionFilter(w, np.array(c)))
    M, _, R, T = H.shape
    expect = np.zeros((M, M))
    for i in range(M):
        for j in range(M):
            for r in range(R):
                for t in range(T):
                    expect[i, j] += w[r, t] * H[i, j, r, t]
            expect[i, j] += c
    np.testing.assert_allclose(raw, expect, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(hbar.sum(axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(hbar, np.abs(expect) / np.abs(expect).sum(1, keepdims=True), rtol=1e-12)


def test_reduce_zero_row_left_alone():
    H = np.zeros((2, 2, 1, 1))
    H[0, 1] = 1.0
    _, hbar = reduce_channel(H, ReductionFilter(np.ones((1, 1)), np.zeros(())))
    np.testing.assert_array_equal(hbar[1], 0.0)
    np.testing.assert_array_equal(hbar[0], [0.0, 1.0])


def test_reduce_rejects_wrong_filter(rng):
    with pytest.raises(ConfigurationError):
        reduce_channel(random_channel(rng, 2, 2, 2), ReductionFilter(np.ones((3, 2)), np.zeros(())))


def test_zero_network_gives_constant_heads(rng):
    params = ModelParams(GcnParams.zeros(5), GcnParams.zeros(5), ReductionFilter(np.ones((2, 2)), np.zeros(())))
    a, b = affine_weights(random_channel(rng, 4, 2, 2), params)
    np.testing.assert_allclose(a, A_EPS + (2.0 - A_EPS) * 0.5)
    np.testing.assert_allclose(b, 1.0)


def test_gcn_decoupled_without_mixing(rng):
    g = init_params(1, 1, hidden=5, seed=3).theta_a
    x = rng.standard_normal(6)
    p = rng.permutation(6)
    out = gcn_forward(np.zeros((6, 6)), x, g)
    np.testing.assert_allclose(gcn_forward(np.zeros((6, 6)), x[p], g), out[p], atol=1e-15)


def test_gcn_permutation_equivariant(rng):
    g = init_params(1, 1, hidden=5, seed=4).theta_b
    hbar = rng.random((6, 6))
    x = rng.standard_normal(6)
    p = rng.permutation(6)
    P = np.eye(6)[p]
    np.testing.assert_allclose(gcn_forward(P @ hbar @ P.T, P @ x, g), P @ gcn_forward(hbar, x, g), atol=1e-9)


def test_gcn_layer_formula(rng):
    g = init_params(1, 1, hidden=3, seed=5).theta_a
    hbar = rng.random((4, 4))
    x = rng.standard_normal(4)
    X = x[:, None]
    hidden = np.maximum(X @ g.w_self1 + hbar @ X @ g.w_nbr1 + g.bias1, 0)
    expect = (hidden @ g.w_self2 + hbar @ hidden @ g.w_nbr2 + g.bias2)[:, 0]
    np.testing.assert_allclose(gcn_forward(hbar, x, g), expect, atol=1e-14)


def test_head_ranges(rng):
    params = init_params(2, 2, seed=6)
    big = params.with_arrays({"theta_a.bias2": np.array([80.0]), "theta_b.bias2": np.array([-80.0])})
    small = params.with_arrays({"theta_a.bias2": np.array([-80.0]), "theta_b.bias2": np.array([80.0])})
    H = random_channel(rng, 5, 2, 2)
    for p in (params, big, small):
        a, b = affine_weights(H, p)
        assert np.all(a > 0) and np.all(a <= p.a_max)
        assert np.all(b >= 0) and np.all(b <= p.b_max)


def test_parameter_census():
    for h, (R, T) in [(5, (3, 5)), (7, (2, 2))]:
        c = parameter_census(init_params(R, T, hidden=h))
        assert c["total"] == 2 * c["per_gcn"] + R * T + 1 == c["total_formula"]
        assert c["per_gcn"] == 5 * h + 1
        assert c["paper_formula"] == 12 * h + R * T + 6
        assert c["total"] != c["paper_formula"]


def test_model_params_validation():
    g = GcnParams.zeros(2)
    omega = ReductionFilter(np.ones((1, 1)), np.zeros(()))
    with pytest.raises(ConfigurationError):
        ModelParams(g, g, omega, K=0)
    with pytest.raises(ConfigurationError):
        ModelParams(g, g, omega, a_max=0.0)


def test_vector_round_trip():
    p = init_params(2, 3, hidden=4, seed=7)
    vec = p.to_vector()
    assert vec.size == p.size == len(p.vector_paths())
    np.testing.assert_array_equal(p.with_vector(vec).to_vector(), vec)
    with pytest.raises(ConfigurationError):
        p.with_vector(vec[:-1])


def forced_wmmse_params(R, T, K, h=5):
    """Parameters whose heads give a == 1 and b == 0 for every input."""
    z = np.log((1 - A_EPS) / (2.0 - 1.0))  # sigmoid(z) = (1 - eps) / (2 - eps)
    theta_a = GcnParams.zeros(h)
    theta_a = GcnParams(*(getattr(theta_a, f) for f in ("w_self1", "w_nbr1", "bias1", "w_self2", "w_nbr2")), np.array([z]))
    omega = ReductionFilter(np.full((R, T), 1.0 / (R * T)), np.zeros(()))
    return ModelParams(theta_a, GcnParams.zeros(h), omega, K=K, a_max=2.0, b_max=0.0)


def test_forced_heads_are_classical():
    p = forced_wmmse_params(2, 2, 4)
    a, b = affine_weights(np.ones((3, 3, 2, 2)), p)
    np.testing.assert_allclose(a, 1.0, rtol=1e-15)
    np.testing.assert_array_equal(b, 0.0)


def test_unfolded_reproduces_wmmse(rng):
    H = random_channel(rng, 4, 3, 2)
    cfg = ProblemConfig(d=2, sigma=0.05, interference_mode=CLASSICAL)
    V, rates = unfolded_forward(H, forced_wmmse_params(3, 2, 3), cfg, trace=True)
    Vref, trace = wmmse_solve(H, cfg, max_iters=3, tol=0)
    np.testing.assert_allclose(V, Vref, atol=1e-12)
    np.testing.assert_allclose(rates, trace.sum_rates, rtol=1e-12)


def test_unfolded_large_shape_and_feasibility():
    from uwmmse.channels import ChannelSpec, generate

    H = generate(ChannelSpec("rayleigh", 20, 5, 3, seed=2), 1)[0]
    cfg = ProblemConfig(d=2)
    V, rates = unfolded_forward(H, init_params(3, 5, seed=1), cfg)
    assert V.shape == (20, 5, 2) and rates == []
    assert np.all(np.sum(V**2, axis=(-2, -1)) <= cfg.p_max * (1 + 1e-12))


def test_unfolded_batch_matches_single(rng):
    Hs = np.stack([random_channel(rng, 3, 2, 2) for _ in range(4)])
    p = init_params(2, 2, seed=9)
    cfg = ProblemConfig(sigma=0.1)
    Vb, _ = unfolded_forward(Hs, p, cfg)
    for k in range(4):
        np.testing.assert_allclose(Vb[k], unfolded_forward(Hs[k], p, cfg)[0], atol=1e-12)


def test_unfolded_size_independent_params(rng):
    p = init_params(2, 2, seed=10)
    for M in (3, 7):
        V, _ = unfolded_forward(random_channel(rng, M, 2, 2), p, ProblemConfig())
        assert V.shape == (M, 2, 1)


def test_tracked_forward_matches_plain(rng):
    H = random_channel(rng, 3, 2, 2)
    p = init_params(2, 2, seed=11)
    cfg = ProblemConfig(sigma=0.2)
    plain, _ = unfolded_forward(H, p, cfg)
    tracked, _ = unfolded_forward(H, p.tracked(), cfg)
    assert isinstance(tracked, ad.Var)
    np.testing.assert_array_equal(tracked.value, plain)
