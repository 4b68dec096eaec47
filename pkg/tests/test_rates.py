import math

import numpy as np
import pytest

from cfnoma import autodiff as ad
from cfnoma import rates
from cfnoma.channel import NetworkConfig, sample_channels
from cfnoma.rates import SchedulingDecision

from oracles import eq5_rate, literal_rates, valid_patterns


def _instance(rng, M=2, K=3, N=2):
    net = NetworkConfig(M=M, K=K, N_T=N)
    h = sample_channels(net, rng).h
    W = (rng.standard_normal((M, N, K)) + 1j * rng.standard_normal((M, N, K))) * 3
    return net, h, W


def _random_valid_beta(rng, M, K):
    pats = valid_patterns(K)
    return np.array([pats[rng.integers(len(pats))] for _ in range(M)])


def test_ici_hand_value():
    h = np.ones((2, 2, 1, 1), dtype=complex)
    W = np.full((2, 1, 1), 2.0 + 0j)
    assert rates.ici(W, h, 0, 0) == pytest.approx(4.0)


def test_ici_trivial_cases():
    rng = np.random.default_rng(0)
    net, h, W = _instance(rng, M=1)
    assert rates.ici(W, h, 0, 1) == 0.0
    net, h, W = _instance(rng)
    assert rates.ici(np.zeros_like(W), h, 1, 2) == 0.0
    with pytest.raises(ValueError):
        rates.ici(W[:1], h, 0, 0)


def test_intf_zero_beta_is_full_interference():
    rng = np.random.default_rng(1)
    _, h, W = _instance(rng)
    b = np.zeros((3, 3))
    m, i, k = 0, 2, 1
    full = sum(abs(h[m, m, i] @ W[m][:, u]) ** 2 for u in range(3) if u != k) + rates.ici(W, h, m, i)
    assert rates.intf_decode(b, W, h, m, i, k) == pytest.approx(full, rel=1e-12)


def test_intf_weaker_user_cancelled():
    rng = np.random.default_rng(2)
    _, h, W = _instance(rng)
    m, i, k, u = 0, 2, 1, 0
    b = np.zeros((3, 3))
    b[i, u] = 1.0
    full = rates.intf_decode(np.zeros((3, 3)), W, h, m, i, k)
    cut = rates.intf_decode(b, W, h, m, i, k)
    assert full - cut == pytest.approx(abs(h[m, m, i] @ W[m][:, u]) ** 2, rel=1e-10)


def test_intf_self_full_sic_is_ici():
    rng = np.random.default_rng(3)
    _, h, W = _instance(rng)
    k = 1
    b = np.zeros((3, 3))
    b[k, [0, 2]] = 1.0
    assert rates.intf_self(b, W, h, 0, k) == pytest.approx(rates.ici(W, h, 0, k), rel=1e-12)


def test_decode_rate_cases():
    rng = np.random.default_rng(4)
    _, h, W = _instance(rng)
    W0 = W.copy()
    W0[0][:, 1] = 0
    assert rates.decode_rate(np.zeros((3, 3)), W0, h, 0, 2, 1, 1.0) == 0.0
    h1 = np.ones((1, 1, 1, 1), dtype=complex)
    assert rates.decode_rate(np.zeros((1, 1)), np.ones((1, 1, 1)), h1, 0, 0, 0, 1.0) == pytest.approx(1.0)


def test_literal_oracle_agreement():
    rng = np.random.default_rng(5)
    for _ in range(30):
        M, K, N = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 3)
        net, h, W = _instance(rng, M, K, N)
        b = _random_valid_beta(rng, M, K)
        out = rates.evaluate(h, W, b, 1.0)
        intf, r, R = literal_rates(h, W, b, 1.0)
        assert np.allclose(out["intf"], intf, rtol=1e-12, atol=1e-12)
        assert np.allclose(out["r"], r, rtol=1e-12, atol=1e-12)
        assert np.allclose(out["R"], R, rtol=1e-12, atol=1e-12)
        for m in range(M):
            for i in range(K):
                for k in range(K):
                    assert rates.decode_rate(b[m], W, h, m, i, k, 1.0) == pytest.approx(r[m, i, k], rel=1e-12, abs=1e-12)


def test_effective_rate_cases():
    r = np.array([[2.0, 0.5], [0.7, 1.5]])
    assert rates.effective_rate(np.zeros((2, 2)), r, 0) == 2.0
    b = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert rates.effective_rate(b, r, 0) == 0.7


def test_eq5_eq6_exhaustive_k3():
    rng = np.random.default_rng(6)
    for _ in range(5):
        r = rng.uniform(0, 5, (3, 3))
        for b in valid_patterns(3):
            for k in range(3):
                assert rates.effective_rate(b, r, k) == eq5_rate(b, r, k)


def test_sum_rate_single_user():
    h = np.array([[[[0.6 + 0.8j]]]])
    P = 10.0
    dec = SchedulingDecision(np.array([[[math.sqrt(P)]]]), np.zeros((1, 1, 1)))
    rep = rates.sum_rate(dec, h, 1.0)
    assert rep.sum_rate == pytest.approx(math.log2(1 + P))


def test_sum_rate_zero_power():
    rng = np.random.default_rng(7)
    _, h, W = _instance(rng)
    rep = rates.sum_rate(SchedulingDecision(np.zeros_like(W), np.zeros((2, 3, 3))), h, 1.0)
    assert rep.sum_rate == 0.0


def test_sum_rate_report_json():
    rng = np.random.default_rng(8)
    net, h, W = _instance(rng)
    dec = SchedulingDecision(W, _random_valid_beta(rng, 2, 3))
    rep = rates.sum_rate(dec, h, 1.0, net)
    assert rep.sum_rate == pytest.approx(rep.R.sum())
    assert '"sum_rate"' in rep.to_json()
    assert rep.sic_complexity == dec.beta.sum()


def test_rates_monotone_in_ici():
    rng = np.random.default_rng(9)
    _, h, W = _instance(rng)
    b = _random_valid_beta(rng, 2, 3)
    base = rates.evaluate(h, W, b, 1.0)
    h2 = h.copy()
    h2[0, 1] *= 1.5  # more leakage from BS 1 into cell 0
    more = rates.evaluate(h2, W, b, 1.0)
    assert np.all(more["r"] <= base["r"] + 1e-12)
    assert np.all(more["R"] <= base["R"] + 1e-12)
    assert np.all(base["intf"] >= 0) and np.all(base["r"] >= 0)


def test_feasibility_flags():
    net = NetworkConfig(M=1, K=2, N_T=1, p_max_override=1.0)
    W = np.array([[[math.sqrt(1.01 / 2), math.sqrt(1.01 / 2)]]])
    b = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    f = rates.check_feasibility(SchedulingDecision(W, b), net)
    assert f["power"]["violation"] == pytest.approx(0.01)
    assert not f["mutual_sic"]["ok"]
    assert f["binary"]["ok"]
    b = np.array([[[0.0, 0.0], [1.0, 0.0]]])
    f = rates.check_feasibility(SchedulingDecision(W / 2, b), net)
    assert f["power"]["ok"] and f["mutual_sic"]["ok"]


def test_traced_matches_plain():
    rng = np.random.default_rng(10)
    net, h, W = _instance(rng)
    b = np.stack([_random_valid_beta(rng, 2, 3) for _ in range(2)])
    Wb = np.stack([W, 0.5 * W])
    hb = np.stack([h, h])
    tape = ad.Tape()
    Wr, Wi = tape.variable(Wb.real), tape.variable(Wb.imag)
    R, r = rates.traced_rates(hb, Wr, Wi, b, 1.0)
    plain = rates.evaluate(hb, Wb, b, 1.0)
    assert np.allclose(R.value, plain["R"], atol=1e-12)
    assert np.allclose(r.value, plain["r"], atol=1e-12)
    bt = tape.variable(b)
    R2, _ = rates.traced_rates(hb, Wr, Wi, bt, 1.0)
    assert np.allclose(R2.value, plain["R"], atol=1e-12)


def test_traced_gradient_finite_difference():
    rng = np.random.default_rng(11)
    net, h, W = _instance(rng, M=2, K=2, N=2)
    b = np.array([[[0.0, 0.0], [1.0, 0.0]]] * 2)[None]
    hb = h[None]

    def f(x):
        Wr = x[: W.size].reshape((1,) + W.shape)
        Wi = x[W.size:].reshape((1,) + W.shape)
        return rates.evaluate(hb, Wr + 1j * Wi, b, 1.0)["R"].sum()

    x0 = np.concatenate([W.real.ravel(), W.imag.ravel()])
    tape = ad.Tape()
    Wr = tape.variable(W.real[None])
    Wi = tape.variable(W.imag[None])
    R, _ = rates.traced_rates(hb, Wr, Wi, b, 1.0)
    g = ad.gradient(ad.tsum(R), [Wr, Wi])
    assert np.allclose(g, ad.numeric_gradient(f, x0), rtol=1e-5, atol=1e-7)


def test_training_loss_values():
    tape = ad.Tape()
    R = tape.variable(np.array([[[1.0, 0.2]]]))
    assert rates.training_loss(R, 0.3, 0.0).value == pytest.approx(-1.2)
    assert rates.training_loss(R, 0.2, 10.0).value == pytest.approx(-1.2)
    # one user short by 0.1: 10 * 0.1^2 = 0.1
    assert rates.training_loss(R, 0.3, 10.0).value == pytest.approx(-1.2 + 0.1)
    assert rates.plain_training_loss(R.value, 0.3, 10.0) == pytest.approx(-1.1)


def test_soft_min_approaches_min():
    rng = np.random.default_rng(12)
    net, h, W = _instance(rng)
    b = _random_valid_beta(rng, 2, 3)[None]
    tape = ad.Tape()
    R_hard, _ = rates.traced_rates(h[None], tape.variable(W.real[None]), tape.variable(W.imag[None]), b, 1.0)
    R_soft, _ = rates.traced_rates(h[None], tape.variable(W.real[None]), tape.variable(W.imag[None]), b, 1.0,
                                   soft_min=1e-4)
    assert np.all(R_soft.value <= R_hard.value + 1e-12)
    assert np.allclose(R_soft.value, R_hard.value, atol=1e-3)
