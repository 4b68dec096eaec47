import numpy as np
import pytest

from cfnoma import bilevel
from cfnoma.bilevel import (
    QuadraticToy,
    SpectralConditionError,
    TrainConfig,
    TrainingDiverged,
    inner_train,
    neumann_hypergradient,
    neumann_inverse,
    truncated_hypergradient,
    unrolled_hypergradient,
)
from cfnoma.channel import NetworkConfig, make_dataset
from cfnoma.gnn import AutoGNN, GnnConfig


def _toy(seed=0, n=8, m=4):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, m))
    return QuadraticToy(M), rng.standard_normal(m)


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(T=0)
    with pytest.raises(ValueError):
        TrainConfig(kappa=0.0)
    with pytest.raises(ValueError):
        TrainConfig(N_G=-1)
    with pytest.raises(ValueError):
        TrainConfig(inner_optimizer="lbfgs")


def test_inner_train_basics():
    toy, alpha = _toy()
    theta = np.ones(8)
    assert np.array_equal(inner_train(toy, theta, alpha, None, 5, 0.0), theta)
    one = inner_train(toy, theta, alpha, None, 1, 0.3)
    assert np.allclose(one, theta - 0.3 * (theta - toy.M @ alpha))
    far = inner_train(toy, theta, alpha, None, 500, 0.3)
    assert np.allclose(far, toy.M @ alpha, atol=1e-10)


def test_inner_train_nan_aborts():
    class Bad:
        def train_grads(self, th, al, b):
            return float("nan"), th, al

    with pytest.raises(TrainingDiverged):
        inner_train(Bad(), np.ones(2), np.ones(1), None, 3, 0.1)


def test_neumann_matches_ift():
    toy, alpha = _toy(1)
    th = toy.theta_star(alpha)
    lam = np.linalg.eigvalsh(toy.A).max()
    kappa = 0.1 / lam
    hg = neumann_hypergradient(toy, th, alpha, None, None, 100, kappa)
    exact = toy.M.T @ th
    assert np.allclose(toy.ift_hypergradient(alpha), exact)
    assert _rel(hg, exact) <= 1e-4


def test_neumann_geometric_decay():
    rng = np.random.default_rng(2)
    M = rng.standard_normal((8, 4))
    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    A = Q @ np.diag(np.linspace(0.5, 2.0, 8)) @ Q.T
    toy = QuadraticToy(M, A=A)
    alpha = rng.standard_normal(4)
    th = toy.theta_star(alpha)
    kappa, mu = 0.1 / 2.0, 0.5
    exact = toy.ift_hypergradient(alpha)
    Ns = np.arange(150, 301, 25)  # late range, where the slowest mode dominates
    errs = [np.linalg.norm(neumann_hypergradient(toy, th, alpha, None, None, int(n), kappa) - exact) for n in Ns]
    slope = np.polyfit(Ns, np.log(errs), 1)[0]
    assert slope == pytest.approx(np.log(1 - kappa * mu), rel=0.1)


def test_zero_val_gradient_gives_direct_term():
    class Toy(QuadraticToy):
        def val_grads(self, theta, alpha, batch=None):
            return 0.0, np.zeros_like(theta), np.arange(len(alpha), dtype=float)

    toy = Toy(np.eye(3))
    hg = neumann_hypergradient(toy, np.ones(3), np.ones(3), None, None, 10, 0.1)
    assert np.allclose(hg, [0.0, 1.0, 2.0])


def test_single_term_expansion():
    toy, alpha = _toy(3)
    th = toy.theta_star(alpha) + 0.3
    kappa = 0.2
    hg = neumann_hypergradient(toy, th, alpha, None, None, 0, kappa)
    v0 = th  # dLv/dtheta with c = 0
    # direct (zero) - kappa * (d2L/dalpha dtheta) v0 = kappa M^T A v0
    assert np.allclose(hg, kappa * toy.M.T @ (toy.A @ v0))


def test_neumann_blowup_detected():
    toy, alpha = _toy(4)
    with pytest.raises(SpectralConditionError, match="spectral condition violated"):
        neumann_hypergradient(toy, toy.theta_star(alpha) + 1, alpha, None, None, 100, 3.0)


def test_neumann_inverse_identity():
    rng = np.random.default_rng(5)
    B = rng.standard_normal((5, 5))
    G = B @ B.T + 0.5 * np.eye(5)
    kappa = 1.0 / np.linalg.eigvalsh(G).max()
    inv = neumann_inverse(G, kappa, 3000)
    assert np.linalg.norm(inv - np.linalg.inv(G)) <= 1e-6
    with pytest.raises(SpectralConditionError):
        neumann_inverse(G, 2.5 * kappa, 10)


def test_unrolled_and_truncated():
    toy, alpha = _toy(6)
    th0 = np.zeros(8)
    direct = toy.val_grads(th0, alpha)[2]
    assert np.array_equal(unrolled_hypergradient(toy, th0, alpha, 0, 0.1, None, None), direct)
    full = unrolled_hypergradient(toy, th0, alpha, 7, 0.1, None, None)
    assert np.allclose(truncated_hypergradient(toy, th0, alpha, 7, 0.1, None, None, 7), full)
    thT = inner_train(toy, th0, alpha, None, 7, 0.1)
    assert np.array_equal(truncated_hypergradient(toy, th0, alpha, 7, 0.1, None, None, 0),
                          toy.val_grads(thT, alpha)[2])
    with pytest.raises(MemoryError):
        unrolled_hypergradient(toy, th0, alpha, 20000, 0.1, None, None)
    with pytest.raises(ValueError):
        truncated_hypergradient(toy, th0, alpha, 3, 0.1, None, None, 4)


def test_truncated_single_step_hand():
    toy, alpha = _toy(7)
    th0 = np.ones(8)
    k = 0.1
    thT = inner_train(toy, th0, alpha, None, 3, k)
    # one step back: -kappa * (d2L/dalpha dtheta) thT = kappa M^T thT  (A = I)
    want = k * toy.M.T @ thT
    assert np.allclose(truncated_hypergradient(toy, th0, alpha, 3, k, None, None, 1), want)


def test_bilinear_unroll_symbolic():
    # T steps of theta <- theta - k (theta - M alpha) give theta_T = (1-k)^T theta0 + (1 - (1-k)^T) M alpha
    toy, alpha = _toy(8)
    th0 = np.random.default_rng(8).standard_normal(8)
    k, T = 0.2, 6
    c = 1 - (1 - k) ** T
    thT = (1 - k) ** T * th0 + c * toy.M @ alpha
    assert np.allclose(unrolled_hypergradient(toy, th0, alpha, T, k, None, None), c * toy.M.T @ thT)


def test_estimator_agreement_and_ift_limit():
    toy, alpha = _toy(9)
    th0 = np.zeros(8)
    k = 0.05
    un = unrolled_hypergradient(toy, th0, alpha, 600, k, None, None)
    ift = toy.ift_hypergradient(alpha)
    assert _rel(un, ift) <= 1e-3
    nm = neumann_hypergradient(toy, toy.theta_star(alpha), alpha, None, None, 400, k)
    assert _rel(nm, un) <= 1e-3


def test_stochastic_consistency():
    rng = np.random.default_rng(10)
    Ms = [rng.standard_normal((6, 3)) for _ in range(3)]
    cs = [rng.standard_normal(6) for _ in range(2)]
    toy = QuadraticToy(np.mean(Ms, axis=0), Ms=Ms, cs=cs)
    alpha = rng.standard_normal(3)
    th = toy.theta_star(alpha)
    parts = [neumann_hypergradient(toy, th, alpha, i, j, 30, 0.1) for i in range(3) for j in range(2)]
    full = neumann_hypergradient(toy, th, alpha, None, None, 30, 0.1)
    assert np.max(np.abs(np.mean(parts, axis=0) - full)) <= 1e-6


def _toy_outer_loop(toy, alpha, theta, U, T, kappa, lr0, decay, N_G=30):
    losses = []
    for u in range(U):
        theta = inner_train(toy, theta, alpha, None, T, kappa)
        losses.append(toy.val_grads(theta, alpha)[0])
        hg = neumann_hypergradient(toy, theta, alpha, None, None, N_G, kappa)
        alpha = alpha - lr0 / (1 + u / decay) * hg
    return alpha, theta, losses


def test_toy_validation_loss_trend_and_stationarity():
    rng = np.random.default_rng(11)
    M = rng.standard_normal((8, 3))
    toy = QuadraticToy(M, cs=[rng.standard_normal(8)])
    alpha, _, losses = _toy_outer_loop(toy, rng.standard_normal(3), np.zeros(8), 400, 20, 0.3, 0.05, 200)
    sm = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert sm[-1] < sm[0]
    assert np.all(np.diff(sm[::10]) <= 1e-12)
    assert np.linalg.norm(toy.ift_hypergradient(alpha)) <= 1e-3


@pytest.fixture(scope="module")
def tiny_gnn():
    net = NetworkConfig(M=2, K=2, N_T=1)
    model = AutoGNN(net, GnnConfig(L=2, D=4, hidden=8, head_hidden=8))
    tr = make_dataset(net, 2, 3, seed=1)
    va = make_dataset(net, 2, 3, seed=2, split="val")
    return model, tr, va


def test_zero_outer_lr_keeps_alpha(tiny_gnn):
    model, tr, va = tiny_gnn
    cfg = TrainConfig(T=2, epochs=1, kappa_out=0.0, N_G=2)
    th, al, log = bilevel.train(model, tr, va, cfg)
    assert np.array_equal(al.flatten(), model.init_arch().flatten())
    assert len(log.rows) == tr.n_batches and len(log.epochs) == 1


def test_train_runs_and_logs(tiny_gnn, tmp_path):
    model, tr, va = tiny_gnn
    cfg = TrainConfig(T=2, epochs=2, N_G=3)
    th0 = model.init_params(np.random.default_rng(cfg.seed))
    th, al, log = bilevel.train(model, tr, va, cfg)
    assert not np.array_equal(th.flatten(), th0.flatten())
    assert not np.array_equal(al.flatten(), model.init_arch().flatten())
    assert {"train_loss", "val_loss", "hypergrad_norm", "active_layers"} <= set(log.rows[0])
    log.to_csv(tmp_path / "log.csv")
    assert len((tmp_path / "log.csv").read_text().splitlines()) == len(log.rows) + 1
    th2, al2, _ = bilevel.train(model, tr, va, cfg)
    assert np.array_equal(th.flatten(), th2.flatten()) and np.array_equal(al.flatten(), al2.flatten())


def test_spectral_failure_skips_or_raises(tiny_gnn):
    model, tr, va = tiny_gnn
    cfg = TrainConfig(T=1, epochs=1, N_G=40, kappa_hg=1e4)
    _, al, log = bilevel.train(model, tr, va, cfg)
    assert all(np.isnan(r["hypergrad_norm"]) for r in log.rows)
    assert np.array_equal(al.flatten(), model.init_arch().flatten())
    with pytest.raises(TrainingDiverged):
        bilevel.train(model, tr, va, TrainConfig(T=1, epochs=1, N_G=40, kappa_hg=1e4, skip_spectral=False))
