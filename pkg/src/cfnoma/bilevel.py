"""Bi-level training of GNN weights (inner) and architecture logits (outer).

The inner problem runs plain gradient steps ``theta <- theta - kappa * dL/dtheta``.
The outer gradient (hypergradient) through the inner solution is estimated
with a truncated Neumann series of Hessian-vector products. Unrolled and
truncated back-propagation through the inner steps are provided as
reference estimators.

A *problem* is any object with ``train_grads(theta, alpha, batch)`` and
``val_grads(theta, alpha, batch)``, each returning ``(loss, g_theta, g_alpha)``
on flat float64 vectors.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rates
from .autodiff import ParamVector, hvp, mixed_vjp
from .channel import Dataset, renew

log = logging.getLogger(__name__)


class SpectralConditionError(RuntimeError):
    """The Neumann recurrence diverged: ``||I - kappa G|| < 1`` does not hold."""


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, theta=None, alpha=None):
        super().__init__(msg)
        self.theta = theta
        self.alpha = alpha


@dataclass
class TrainConfig:
    T: int = 5
    kappa: float = 1e-3
    kappa_out: float = 3e-3
    decay: float = 100.0  # outer lr = kappa_out / (1 + u / decay)
    N_G: int = 20
    eps: float | None = None
    epochs: int = 30
    lam_rate: float = 10.0
    seed: int = 0
    inner_optimizer: str = "sgd"  # or "adam"
    adam_betas: tuple = (0.9, 0.999)
    s_temp_final: float | None = None  # linear anneal target, None keeps it constant
    renew_data: bool = True
    soft_min: float | None = None
    kappa_hg: float | None = None  # Neumann step, defaults to kappa
    skip_spectral: bool = True  # drop the alpha step when the Neumann series diverges

    def __post_init__(self):
        if self.T < 1 or self.N_G < 0:
            raise ValueError("need T >= 1 and N_G >= 0")
        if self.kappa <= 0 or self.kappa_out < 0 or (self.kappa_hg is not None and self.kappa_hg <= 0):
            raise ValueError("learning rates must be positive")
        if self.inner_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown inner optimizer {self.inner_optimizer!r}")


# core estimators ---------------------------------------------------------------

def _batch_at(batches, t):
    if batches is None:
        return None
    if isinstance(batches, (list, tuple)):
        return batches[t % len(batches)]
    return batches


def inner_train(problem, theta, alpha, batches, T: int, kappa: float, trajectory=False):
    """``T`` gradient steps on the training loss; ``batches`` is cycled in order."""
    theta = np.array(theta, dtype=float)
    traj = [theta.copy()] if trajectory else None
    for t in range(T):
        loss, g, _ = problem.train_grads(theta, alpha, _batch_at(batches, t))
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite training loss at inner step {t}", theta, alpha)
        theta = theta - kappa * g
        if trajectory:
            traj.append(theta.copy())
    return (theta, traj) if trajectory else theta


def _theta_grad_fn(problem, alpha, batch):
    return lambda th: problem.train_grads(th, alpha, batch)[1]


def _alpha_grad_fn(problem, batch):
    return lambda th, al: problem.train_grads(th, al, batch)[2]


def neumann_hypergradient(problem, theta, alpha, train_batch, val_batch, N_G: int, kappa: float,
                          eps=None, blowup: float = 1e6, return_info=False):
    """``dLv/dalpha - kappa * (dLv/dtheta) [sum_n (I - kappa G)^n] d2L/(dalpha dtheta)``."""
    _, v0, direct = problem.val_grads(theta, alpha, val_batch)
    gfn = _theta_grad_fn(problem, alpha, train_batch)
    p = v0.copy()
    s = v0.copy()
    n0 = float(np.linalg.norm(v0))
    norms = [n0]
    for n in range(N_G):
        p = p - kappa * hvp(gfn, theta, p, eps)
        s += p
        pn = float(np.linalg.norm(p))
        norms.append(pn)
        if not np.isfinite(pn) or (n0 > 0 and pn > blowup * n0):
            raise SpectralConditionError(
                f"spectral condition violated: Neumann term {n + 1} grew by {pn / max(n0, 1e-300):.3g}x")
    hg = direct - kappa * mixed_vjp(_alpha_grad_fn(problem, train_batch), theta, alpha, s, eps)
    if return_info:
        return hg, {"direct": direct, "term_norms": norms}
    return hg


def unrolled_hypergradient(problem, theta0, alpha, T: int, kappa: float, batches, val_batch,
                           tau: int | None = None, eps=None, max_steps: int = 10000):
    """Reverse-mode differentiation through ``T`` inner steps (last ``tau`` of them if given).

    Keeps the whole inner trajectory in memory, hence the ``max_steps`` guard.
    """
    if T > max_steps:
        raise MemoryError(f"T={T} exceeds the unrolling guard max_steps={max_steps}")
    tau = T if tau is None else tau
    if not 0 <= tau <= T:
        raise ValueError("need 0 <= tau <= T")
    thetaT, traj = inner_train(problem, theta0, alpha, batches, T, kappa, trajectory=True)
    _, g_th, g_al = problem.val_grads(thetaT, alpha, val_batch)
    g_al = g_al.copy()
    for t in range(T, T - tau, -1):
        batch = _batch_at(batches, t - 1)
        th = traj[t - 1]
        g_al -= kappa * mixed_vjp(_alpha_grad_fn(problem, batch), th, alpha, g_th, eps)
        g_th = g_th - kappa * hvp(_theta_grad_fn(problem, alpha, batch), th, g_th, eps)
    return g_al


def truncated_hypergradient(problem, theta0, alpha, T, kappa, batches, val_batch, tau, eps=None,
                            max_steps: int = 10000):
    return unrolled_hypergradient(problem, theta0, alpha, T, kappa, batches, val_batch,
                                  tau=tau, eps=eps, max_steps=max_steps)


def neumann_inverse(G, kappa: float, N: int) -> np.ndarray:
    """``kappa * sum_{n=0}^N (I - kappa G)^n`` for an explicit matrix ``G``."""
    G = np.asarray(G, dtype=float)
    A = np.eye(len(G)) - kappa * G
    rho = np.linalg.norm(A, 2)
    if rho >= 1.0:
        raise SpectralConditionError(f"spectral condition violated: ||I - kappa G|| = {rho:.6g} >= 1")
    term = np.eye(len(G))
    acc = term.copy()
    for _ in range(N):
        term = term @ A
        acc += term
    return kappa * acc


# toy problems ------------------------------------------------------------------

class QuadraticToy:
    """``L^i = 1/2 (theta - M_i alpha)^T A (theta - M_i alpha)``, ``Lv^j = 1/2 ||theta - c_j||^2``.

    Train batches are indices into ``Ms``, validation batches into ``cs``;
    ``None`` selects the full-batch average. The analytic hypergradient at
    the inner optimum is available through :meth:`ift_hypergradient`.
    """

    def __init__(self, M, A=None, Ms=None, cs=None):
        self.M = np.asarray(M, dtype=float)
        n = self.M.shape[0]
        self.A = np.eye(n) if A is None else np.asarray(A, dtype=float)
        self.Ms = [self.M] if Ms is None else [np.asarray(x, dtype=float) for x in Ms]
        self.cs = [np.zeros(n)] if cs is None else [np.asarray(x, dtype=float) for x in cs]

    def _M(self, batch):
        return np.mean(self.Ms, axis=0) if batch is None else self.Ms[batch]

    def _c(self, batch):
        return np.mean(self.cs, axis=0) if batch is None else self.cs[batch]

    def train_grads(self, theta, alpha, batch=None):
        M = self._M(batch)
        r = theta - M @ alpha
        Ar = self.A @ r
        return 0.5 * float(r @ Ar), Ar, -M.T @ Ar

    def val_grads(self, theta, alpha, batch=None):
        d = theta - self._c(batch)
        return 0.5 * float(d @ d), d, np.zeros_like(alpha)

    def theta_star(self, alpha, batch=None):
        return self._M(batch) @ alpha

    def ift_hypergradient(self, alpha):
        """``-(d2L/dalpha dtheta) G^{-1} dLv/dtheta`` at ``theta* = M alpha``; here ``M^T (theta* - c)``."""
        M = self._M(None)
        th = M @ alpha
        G = self.A
        mixed = -M.T @ self.A  # d2L / dalpha dtheta
        return -mixed @ np.linalg.solve(G, th - self._c(None))


# GNN training --------------------------------------------------------------------

class GnnProblem:
    """Bi-level problem wrapper around a GNN with fixed sampling noise."""

    def __init__(self, model, theta: ParamVector, alpha: ParamVector, sigma2: float, R_min: float,
                 lam_rate: float = 10.0, mode: str = "auto", soft_min=None):
        self.model = model
        self.theta_pv = theta
        self.alpha_pv = alpha
        self.sigma2 = sigma2
        self.R_min = R_min
        self.lam_rate = lam_rate
        self.mode = mode
        self.soft_min = soft_min
        self.noise = None
        self.s_temp = None

    def loss_grads(self, theta, alpha, h):
        tape = ad.Tape()
        tp = self.theta_pv.unflatten(theta).attach(tape)
        ap = self.alpha_pv.unflatten(alpha).attach(tape)
        noise = self.noise
        if noise is not None and noise.sic.shape[0] != h.shape[0]:
            noise = None
        out = self.model.forward(h, tp, ap, mode=self.mode, sample_mode="soft", noise=noise,
                                 s_temp=self.s_temp)
        R, _ = rates.traced_rates(h, out.Wr, out.Wi, out.beta, self.sigma2, self.soft_min)
        loss = rates.training_loss(R, self.R_min, self.lam_rate)
        g = ad.gradient(loss, list(tp.values()) + list(ap.values()))
        nt = len(theta)
        return float(loss.value), g[:nt], g[nt:]

    train_grads = loss_grads
    val_grads = loss_grads


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def to_csv(self, path):
        path = Path(path)
        if not self.rows:
            path.write_text("")
            return path
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)
        return path

    def summary(self) -> dict:
        return {
            "iterations": len(self.rows),
            "epochs": self.epochs,
            "final": self.rows[-1] if self.rows else None,
        }

    def to_json(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, default=float))
        return path


def evaluate_loss(model, theta, alpha, h_batches, sigma2, R_min, lam_rate, mode="auto"):
    """Noise-free soft training loss averaged over batches (the monitored validation loss)."""
    vals = []
    for h in h_batches:
        out = model.forward(h, theta, alpha, mode=mode, sample_mode="soft")
        R, _ = rates.traced_rates(h, out.Wr, out.Wi, out.beta, sigma2)
        vals.append(rates.plain_training_loss(R, R_min, lam_rate))
    return float(np.mean(vals))


def train(model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, mode: str = "auto",
          theta: ParamVector | None = None, alpha: ParamVector | None = None, monitor: Dataset | None = None,
          callback=None):
    """Alternate ``T`` inner steps on theta with one hypergradient step on alpha.

    With ``mode='fixed'`` (or ``kappa_out=0``) the architecture stays put and
    this reduces to plain weight training. Train and validation sets are
    redrawn every epoch when ``cfg.renew_data``; the per-epoch monitored loss
    uses the fixed ``monitor`` set (the initial validation set by default).
    """
    rng = np.random.default_rng(cfg.seed)
    theta = theta if theta is not None else model.init_params(rng)
    alpha = alpha if alpha is not None else model.init_arch()
    net = model.net
    prob = GnnProblem(model, theta, alpha, net.sigma2, net.R_min, cfg.lam_rate, mode, cfg.soft_min)
    th, al = theta.flatten(), alpha.flatten()
    monitor = monitor or val_ds
    mon_batches = [monitor.batch_array(i) for i in range(monitor.n_batches)]
    log_ = TrainLog()
    adam_m = np.zeros_like(th)
    adam_v = np.zeros_like(th)
    step = 0
    u = 0
    k_hg = cfg.kappa_hg or cfg.kappa
    total_iters = cfg.epochs * train_ds.n_batches
    s0 = model.cfg.s_temp
    t_start = time.time()
    for epoch in range(cfg.epochs):
        if epoch > 0 and cfg.renew_data:
            train_ds = renew(train_ds, rng)
            val_ds = renew(val_ds, rng)
        for i in range(train_ds.n_batches):
            if cfg.s_temp_final is not None:
                frac = u / max(1, total_iters - 1)
                prob.s_temp = s0 + (cfg.s_temp_final - s0) * frac
            prob.noise = model.sample_noise(rng, train_ds.batch_size)
            batches = [train_ds.batch_array((i + t) % train_ds.n_batches) for t in range(cfg.T)]
            try:
                for t in range(cfg.T):
                    loss, g, _ = prob.train_grads(th, al, batches[t])
                    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                        raise FloatingPointError("non-finite training loss")
                    if cfg.inner_optimizer == "adam":
                        step += 1
                        b1, b2 = cfg.adam_betas
                        adam_m = b1 * adam_m + (1 - b1) * g
                        adam_v = b2 * adam_v + (1 - b2) * g * g
                        mh = adam_m / (1 - b1 ** step)
                        vh = adam_v / (1 - b2 ** step)
                        th = th - cfg.kappa * mh / (np.sqrt(vh) + 1e-8)
                    else:
                        th = th - cfg.kappa * g
                hg_norm = 0.0
                val_loss = float("nan")
                if mode == "auto" and cfg.kappa_out > 0:
                    j = int(rng.integers(val_ds.n_batches))
                    vb = val_ds.batch_array(j)
                    val_loss = prob.val_grads(th, al, vb)[0]
                    try:
                        hg = neumann_hypergradient(prob, th, al, batches[-1], vb, cfg.N_G, k_hg, cfg.eps)
                    except SpectralConditionError as e:
                        if not cfg.skip_spectral:
                            raise
                        log.warning("iteration %d: %s; alpha step skipped", u, e)
                        hg = None
                        hg_norm = float("nan")
                    if hg is not None:
                        lr = cfg.kappa_out / (1.0 + u / cfg.decay)
                        al = al - lr * hg
                        hg_norm = float(np.linalg.norm(hg))
            except (FloatingPointError, SpectralConditionError, TrainingDiverged) as e:
                raise TrainingDiverged(f"training stopped at epoch {epoch}, iteration {i}: {e}",
                                       theta.unflatten(th), alpha.unflatten(al)) from e
            arch = alpha.unflatten(al)
            act = _hard_arch_summary(model, arch, mode)
            log_.rows.append({
                "iteration": u, "epoch": epoch, "train_loss": loss, "val_loss": val_loss,
                "hypergrad_norm": hg_norm, **act,
            })
            u += 1
        mon = evaluate_loss(model, theta.unflatten(th), alpha.unflatten(al), mon_batches,
                            net.sigma2, net.R_min, cfg.lam_rate, mode)
        log_.epochs.append({"epoch": epoch, "monitor_val_loss": mon, "elapsed_s": time.time() - t_start})
        log.info("epoch %d monitor loss %.4f", epoch, mon)
        if callback is not None:
            callback(epoch, theta.unflatten(th), alpha.unflatten(al), log_)
    return theta.unflatten(th), alpha.unflatten(al), log_


def _hard_arch_summary(model, alpha: ParamVector, mode):
    c = model.cfg
    M = model.net.M
    if mode == "fixed":
        return {"active_layers": c.L, "active_neurons": c.L * c.D, "bits": model.fixed_bits()}
    on = alpha["alpha_o"] > 0
    neurons = [c.D] + [int(np.count_nonzero(alpha["alpha_i"][l] > 0)) for l in range(c.L - 1)]
    n_act = int(sum(n for n, a in zip(neurons, on) if a))
    return {"active_layers": int(on.sum()), "active_neurons": n_act,
            "bits": M * (M - 1) * n_act * 32}


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["adam_betas"] = list(cfg.adam_betas)
    return d
