"""Consensus ADMM baselines for joint beamforming and SIC selection.

Each BS m keeps local variables: beamformers W^m, relaxed SIC indicators
beta^m with complements beta_t^m (beta + beta_t = 1 and beta * beta_t = 0
at convergence), slack rates Gamma^m, and local copies of the inter-cell
interference (ICI) bounds it causes (``xo``) and receives (``xi``). The
ICI copies are driven to agree with shared values ``xi_hat`` through
scaled dual variables. Rates enter through the MMSE lower bound

    f_ik = log2 a_ik + 1/ln2 - a_ik * mse_ik / ln2

which is tight at the auxiliary values returned by :func:`mmse_update`.

Shapes (batched over instances ``B``):
    h      (B, M, M, K, N)       W   (B, M, N, K)
    beta   (B, M, K, K)          xo, xi, xi_hat, nu_o, nu_i   (B, M, M, K)
``xo[b, m, n, k]`` bounds the ICI from BS m to user k of cell n;
``xi[b, m, n, k]`` bounds the ICI from BS n to user k of cell m.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from . import kernels, rates
from .channel import ChannelSet, NetworkConfig
from .rates import SchedulingDecision

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass
class AdmmConfig:
    rho: float = 1.0
    rho_decay: float = 0.95
    rho_min: float = 1e-3
    max_iters: int = 200
    tol_consensus: float = 1e-3
    tol_binary: float = 1e-2
    inner_steps: int = 20
    inner_tol: float = 1e-7
    smooth: float = 0.02
    lam_rate: float = 10.0
    polish_iters: int = 10
    n_init: int = 5  # centralized restarts; j > 0 start from a random SIC order
    init_iters: int = 10
    beta_init: str | float = "gain"  # "gain": lean towards stronger-decodes-weaker; float: uniform start
    beta_lean: float = 0.45
    bf_iters: int = 20  # outer MMSE rounds of the fixed-beta beamforming solver
    seed: int = 0


@dataclass
class AdmmReport:
    iterations: int = 0
    consensus: list = field(default_factory=list)
    binary_sum: list = field(default_factory=list)
    binary_prod: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    feasibility: dict = field(default_factory=dict)
    bits: int = 0
    sum_rate: float = float("nan")
    converged: bool = False

    def to_dict(self):
        return asdict(self)

    def to_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "consensus", "binary_sum", "binary_prod", "objective"])
            for j in range(len(self.objective)):
                w.writerow([j, self.consensus[j], self.binary_sum[j], self.binary_prod[j], self.objective[j]])
        return path


def distributed_bits(iters: int, M: int, K: int) -> int:
    """Each directed BS pair exchanges 2K reals per iteration."""
    return iters * M * (M - 1) * 2 * K * 32


def centralized_bits(M: int, K: int, N_T: int) -> int:
    """CSI uplink plus decision downlink (our accounting, not a reproduction target)."""
    return M * (M * K * N_T) * 64 + M * (N_T * K * 64 + 2 * K * K * 32)


# MMSE and interference ------------------------------------------------------------

def _h(channels):
    return channels.h if isinstance(channels, ChannelSet) else np.asarray(channels)


def intra_ici(h, W):
    """Intra-cell signal amplitudes ``D[..., m, i, u] = h_mi^m w_u^m`` and exact ICI."""
    A = np.einsum("...mnit,...ntu->...minu", h, W)
    D = np.einsum("...mimu->...miu", A)
    g = A.real ** 2 + A.imag ** 2
    M = h.shape[-4]
    ici = np.einsum("...minu,mn->...mi", g, 1.0 - np.eye(M))
    return D, ici


def ici_out(h, W):
    """``out[..., m, n, k]``: power from BS m at user k of cell n (zero for n = m)."""
    A = np.einsum("...mnit,...ntu->...minu", h, W)
    p = (A.real ** 2 + A.imag ** 2).sum(-1)  # [..., cell, k, tx]
    out = np.moveaxis(p, -1, -3)  # [..., tx, cell, k]
    M = h.shape[-4]
    return out * (1.0 - np.eye(M))[:, :, None]


def convex_intf(beta_t_m, W, H, m: int, i: int, k: int) -> float:
    """Max-form (convex in ``beta_t``) interference for decoder i of user k in cell m."""
    h = _h(H)
    D, ici = intra_ici(h, np.asarray(W))
    S = np.abs(D[m]) ** 2
    return float(kernels.convex_interference(S[None], ici[m][None], np.asarray(beta_t_m, float)[None])[0, i, k])


def mmse_update(W, h, beta_t, ici, sigma2):
    """Optimal MMSE auxiliaries ``(a, c)``; ``ici=None`` uses the exact ICI."""
    D, ici_exact = intra_ici(h, W)
    if ici is None:
        ici = ici_exact
    S = D.real ** 2 + D.imag ** 2
    K = S.shape[-1]
    lead = S.shape[:-2]
    intf = kernels.convex_interference(S.reshape(-1, K, K), np.reshape(ici, (-1, K)),
                                       np.reshape(beta_t, (-1, K, K))).reshape(lead + (K, K))
    den = S + intf + sigma2
    a = den / (intf + sigma2)
    c = np.conj(D) / den
    return a, c


def mmse_bracket(a, c, W, h, beta_t, ici, sigma2):
    """``log2 a - a * mse / ln2 + 1/ln2`` at (a, c); equals the decode rate when (a, c) are optimal."""
    D, ici_exact = intra_ici(h, W)
    if ici is None:
        ici = ici_exact
    S = D.real ** 2 + D.imag ** 2
    K = S.shape[-1]
    lead = S.shape[:-2]
    intf = kernels.convex_interference(S.reshape(-1, K, K), np.reshape(ici, (-1, K)),
                                       np.reshape(beta_t, (-1, K, K))).reshape(lead + (K, K))
    mse = 1.0 - 2.0 * np.real(c * D) + np.abs(c) ** 2 * (S + intf + sigma2)
    return np.log2(a) - a * mse / LN2 + 1.0 / LN2


def update_global(xo, xi, nu_o, nu_i, rho):
    """Consensus values ``xi_hat[m, n] = (xo^m + xi^n + rho (nu_o^m + nu_i^n)) / 2``."""
    xo, xi, nu_o, nu_i = (np.asarray(x, dtype=float) for x in (xo, xi, nu_o, nu_i))
    return 0.5 * (xo + np.swapaxes(xi, -3, -2) + rho * (nu_o + np.swapaxes(nu_i, -3, -2)))


def update_duals(duals: dict, beta, beta_t, xo, xi, xi_hat, rho):
    K = beta.shape[-1]
    off = 1.0 - np.eye(K)
    out = dict(duals)
    out["lam"] = duals["lam"] + off * (beta + beta_t - 1.0) / rho
    out["lamt"] = duals["lamt"] + off * beta_t * beta / rho
    if xo is not None:
        out["nu_o"] = duals["nu_o"] + (xo - xi_hat) / rho
        out["nu_i"] = duals["nu_i"] + (xi - np.swapaxes(xi_hat, -3, -2)) / rho
    return out


# block 2: (Gamma, W, beta_t, xi_in) by projected gradient ascent ----------------------

def _smax(x, y, s):
    if s:
        return y + s * ad.softplus((x - y) / s)
    return ad.maximum(x, y)


def _block2_objective(X, C, smooth):
    """Per-BS objective ``J[b, m]`` and slack rates ``Gamma[b, m, k]``.

    ``X`` maps variable names (``Vr``, ``Vi`` and optionally ``bt``, ``xin``)
    to tape tensors or plain arrays; ``C`` holds the constants.
    """
    h = C["h"]
    B, M, _, K, N = h.shape
    sP = math.sqrt(C["P"])
    Wr, Wi = X["Vr"] * sP, X["Vi"] * sP
    bt = X.get("bt", C.get("bt"))
    Dr = ad.matmul(C["hdr"], Wr) - ad.matmul(C["hdi"], Wi)  # [b, m, i, u]
    Di = ad.matmul(C["hdr"], Wi) + ad.matmul(C["hdi"], Wr)
    S = ad.cabs2(Dr, Di)
    offM = (1.0 - np.eye(M))[:, :, None]
    p = None
    if C["ici"] is None or C["out_target"] is not None:
        Wr5 = ad.reshape(Wr, (B, 1, M, N, K))
        Wi5 = ad.reshape(Wi, (B, 1, M, N, K))
        Are = ad.matmul(C["hr"], Wr5) - ad.matmul(C["hi"], Wi5)  # [b, m, n, i, u]
        Aim = ad.matmul(C["hr"], Wi5) + ad.matmul(C["hi"], Wr5)
        p = ad.tsum(ad.cabs2(Are, Aim), axis=-1) * offM  # [b, cell, tx, i]
    if "xin" in X:
        ici = C["xscale"] * ad.tsum(X["xin"], axis=-2)
    elif C["ici"] is not None:
        ici = C["ici"]
    else:
        ici = ad.tsum(p, axis=2)

    idx = np.arange(K)
    lower = (idx[None, :] < idx[:, None]).astype(float)
    upper = (idx[None, :] > idx[:, None]).astype(float)
    eye = np.eye(K)
    off = 1.0 - eye
    if isinstance(bt, ad.Tensor):
        b_iu = ad.reshape(bt, (B, M, K, 1, K))
        b_uk = ad.reshape(ad.swapaxes(bt, -1, -2), (B, M, 1, K, K))
        b_ku = ad.reshape(bt, (B, M, 1, K, K))
    else:
        b_iu = bt[:, :, :, None, :]
        b_uk = np.swapaxes(bt, -1, -2)[:, :, None, :, :]
        b_ku = bt[:, :, None, :, :]
    coef = lower * _smax(b_iu, 1.0 - b_uk, smooth) + upper * _smax(b_iu, b_ku, smooth)
    cross = ad.einsum("bmiku,bmiu->bmik", coef, S)
    own = ad.reshape(ad.tsum(off * bt * S, axis=-1), (B, M, 1, K))
    intf = off * cross + eye * own + ad.reshape(ici, (B, M, K, 1))

    a, cr, ci = C["a"], C["c"].real, C["c"].imag
    mse = 1.0 - 2.0 * (cr * Dr - ci * Di) + (cr * cr + ci * ci) * (S + intf + C["sigma2"])
    f = np.log2(a) + 1.0 / LN2 - (a / LN2) * mse

    beta = C["beta"]
    f_own = ad.reshape(ad.tsum(eye * f, axis=-2), (B, M, 1, K))
    cand = (1.0 - beta) * f_own + beta * f  # diagonal of beta is zero, so row k gives f_kk
    if smooth:
        s = C.get("soft_min", 0.05)
        Gamma = -s * ad.logsumexp(-cand / s, axis=-2)
    else:
        Gamma = ad.tmin(cand, axis=-2)
    gap = ad.relu(C["R_min"] - Gamma)
    J = ad.tsum(Gamma, axis=-1) - C["lam_rate"] * ad.tsum(gap * gap, axis=-1)
    rho = C["rho"]
    if C.get("pen") is not None:
        lam, lamt = C["pen"]
        q1 = off * (beta + bt - 1.0 + rho * lam)
        q2 = off * (beta * bt + rho * lamt)
        J = J - (0.5 / rho) * (ad.tsum(q1 * q1, axis=(-2, -1)) + ad.tsum(q2 * q2, axis=(-2, -1)))
    if "xin" in X:
        d = (X["xin"] - C["in_target"]) * offM
        J = J - (0.5 / rho) * ad.tsum(d * d, axis=(-2, -1))
    if C["out_target"] is not None:
        out = ad.swapaxes(p, 1, 2)  # [b, tx, cell, k]
        v = ad.relu(out / C["xscale"] - C["out_target"]) * offM
        J = J - (0.5 / rho) * ad.tsum(v * v, axis=(-2, -1))
    return J, Gamma


def _project(X):
    out = dict(X)
    nrm = np.sum(X["Vr"] ** 2 + X["Vi"] ** 2, axis=(-2, -1), keepdims=True)
    sc = np.minimum(1.0, 1.0 / np.sqrt(np.maximum(nrm, 1e-300)))
    out["Vr"], out["Vi"] = X["Vr"] * sc, X["Vi"] * sc
    if "bt" in X:
        K = X["bt"].shape[-1]
        out["bt"] = np.where(np.eye(K) > 0, 1.0, np.clip(X["bt"], 0.0, 1.0))
    if "xin" in X:
        M = X["xin"].shape[-2]
        out["xin"] = np.maximum(X["xin"], 0.0) * (1.0 - np.eye(M))[:, :, None]
    return out


def _pgd(X, C, joint: bool, steps: int, tol: float, smooth):
    """Projected gradient ascent with per-group backtracking.

    Groups are single BSs (``joint=False``) or whole instances (``joint=True``);
    every group keeps its own step size, so results for one instance never
    depend on which other instances share the batch.
    """
    names = list(X)

    def grp(J):
        return J.sum(axis=1) if joint else J

    def value(X_):
        return grp(_block2_objective(X_, C, smooth)[0])

    def value_grad(X_):
        tape = ad.Tape()
        T = {k: tape.variable(v) for k, v in X_.items()}
        J, _ = _block2_objective(T, C, smooth)
        gflat = ad.gradient(ad.tsum(J), [T[k] for k in names])
        G, o = {}, 0
        for k in names:
            n = X_[k].size
            G[k] = gflat[o:o + n].reshape(X_[k].shape)
            o += n
        return grp(J.value), G

    def gsum(x):  # reduce per group
        s = x.sum(axis=(-2, -1))
        return s.sum(axis=1) if joint else s

    def bcast(t):  # group-shaped array -> broadcastable over (B, M, ., .)
        return t[:, None, None, None] if joint else t[:, :, None, None]

    J0, G = value_grad(X)
    t = np.ones(J0.shape)
    for _ in range(steps):
        done = np.zeros(J0.shape, dtype=bool)
        new = {k: v.copy() for k, v in X.items()}
        tt = t.copy()
        for _ls in range(30):
            cand = _project({k: X[k] + bcast(tt) * G[k] for k in names})
            Jc = value(cand)
            lin = sum(gsum(G[k] * (cand[k] - X[k])) for k in names)
            sq = sum(gsum((cand[k] - X[k]) ** 2) for k in names)
            ok = (Jc >= J0 + lin - sq / (2 * tt) - 1e-12 * np.abs(J0)) & ~done & np.isfinite(Jc)
            if ok.any():
                m = bcast(ok)
                for k in names:
                    new[k] = np.where(m, cand[k], new[k])
                done |= ok
            if done.all():
                break
            tt = np.where(done, tt, 0.5 * tt)
        step = np.sqrt(sum(gsum((new[k] - X[k]) ** 2) for k in names))
        X = new
        t = np.minimum(np.where(done, 1.5 * tt, tt), 1e3)
        if np.all(step <= tol):
            break
        J0, G = value_grad(X)
    return X


def _consts(h, P, sigma2, beta, a, c, R_min, lam_rate, ici=None, bt=None, pen=None,
            in_target=None, out_target=None, rho=1.0, xscale=1.0):
    return {
        "h": h, "hr": np.ascontiguousarray(h.real), "hi": np.ascontiguousarray(h.imag),
        "hdr": np.ascontiguousarray(_hdiag(h).real), "hdi": np.ascontiguousarray(_hdiag(h).imag),
        "P": P, "sigma2": sigma2, "beta": beta, "a": a, "c": c, "ici": ici, "bt": bt,
        "pen": pen, "in_target": in_target, "out_target": out_target, "rho": rho,
        "xscale": xscale, "R_min": R_min, "lam_rate": lam_rate,
    }


def _hdiag(h):
    idx = np.arange(h.shape[-4])
    return h[..., idx, idx, :, :]


def _split_W(W, P):
    V = W / math.sqrt(P)
    return {"Vr": V.real.copy(), "Vi": V.imag.copy()}


def _join_W(X, P):
    return (X["Vr"] + 1j * X["Vi"]) * math.sqrt(P)


# block 1: (beta, Gamma) as a small concave QP per BS -----------------------------------

def update_block1(f, beta, beta_t, Gamma, lam, lamt, rho, R_min=0.0, lam_rate=0.0):
    """One BS: maximise ``sum Gamma - lam_rate |relu(R_min - Gamma)|^2`` minus the
    beta penalty terms, subject to ``Gamma_k <= (1 - beta_ik) f_kk + beta_ik f_ik``,
    ``beta_ik + beta_ki <= 1`` and ``0 <= beta <= 1``.

    ``f`` is the MMSE bracket (K, K) at the current beamformers. Returns (beta, Gamma).
    """
    K = f.shape[-1]
    pairs = [(i, k) for i in range(K) for k in range(K) if i != k]
    nb = len(pairs)
    I = np.array([p[0] for p in pairs], dtype=int)
    Kk = np.array([p[1] for p in pairs], dtype=int)
    bt_v, lam_v, lamt_v = beta_t[I, Kk], lam[I, Kk], lamt[I, Kk]
    f_own = np.diag(f)
    d_v = f[I, Kk] - f_own[Kk]  # gain (or loss) from decoding k at i
    x0 = np.concatenate([beta[I, Kk], np.minimum(Gamma, f_own)])
    # keep the start feasible
    x0[nb:] = np.minimum(x0[nb:], np.array([min([f_own[k]] + [f_own[k] + x0[j] * d_v[j]
                                                               for j in range(nb) if Kk[j] == k])
                                            for k in range(K)]))
    half = 0.5 / rho

    def obj(x):
        b, G = x[:nb], x[nb:]
        r1 = b + bt_v - 1.0 + rho * lam_v
        r2 = b * bt_v + rho * lamt_v
        gap = np.maximum(R_min - G, 0.0)
        val = -G.sum() + lam_rate * gap @ gap + half * (r1 @ r1 + r2 @ r2)
        g = np.concatenate([half * (2 * r1 + 2 * r2 * bt_v), -1.0 - 2 * lam_rate * gap])
        return val, g

    # rows: Gamma_k - f_kk - beta_j d_j <= 0 ; Gamma_k <= f_kk ; beta_ik + beta_ki <= 1
    A, ub = [], []
    for j in range(nb):
        row = np.zeros(nb + K)
        row[nb + Kk[j]] = 1.0
        row[j] = -d_v[j]
        A.append(row)
        ub.append(f_own[Kk[j]])
    for k in range(K):
        row = np.zeros(nb + K)
        row[nb + k] = 1.0
        A.append(row)
        ub.append(f_own[k])
    for i in range(K):
        for k in range(i + 1, K):
            row = np.zeros(nb + K)
            row[pairs.index((i, k))] = 1.0
            row[pairs.index((k, i))] = 1.0
            A.append(row)
            ub.append(1.0)
    A, ub = np.array(A), np.array(ub)
    cons = {"type": "ineq", "fun": lambda x: ub - A @ x, "jac": lambda x: -A}
    bounds = [(0.0, 1.0)] * nb + [(None, None)] * K
    res = minimize(obj, x0, jac=True, method="SLSQP", bounds=bounds, constraints=[cons],
                   options={"maxiter": 200, "ftol": 1e-12})
    x = res.x
    if not np.all(np.isfinite(x)) or (ub - A @ x).min() < -1e-7:
        log.debug("block-1 solver: %s", res.message)
        x = x0
    b = np.zeros((K, K))
    b[I, Kk] = np.clip(x[:nb], 0.0, 1.0)
    s = b + b.T
    b = np.where(s > 1.0, b / np.maximum(s, 1.0), b)
    return b, x[nb:]


# initialisation and rounding --------------------------------------------------------

def matched_filter(h, P):
    """``w_k^m = sqrt(P/K) * conj(h_mk^m) / |h_mk^m|``."""
    M, K = h.shape[-4], h.shape[-2]
    idx = np.arange(M)
    d = h[..., idx, idx, :, :]  # (..., M, K, N)
    nrm = np.linalg.norm(d, axis=-1, keepdims=True)
    W = np.conj(d) / np.maximum(nrm, 1e-300) * math.sqrt(P / K)
    return np.swapaxes(W, -1, -2)


def round_beta(beta, threshold: float = 0.5):
    """Binary SIC pattern; if both directions of a pair pass, keep the larger (lower decoder index on ties)."""
    beta = np.asarray(beta, dtype=float)
    K = beta.shape[-1]
    b = (beta > threshold).astype(float)
    b = b * (1.0 - np.eye(K))
    both = (b * np.swapaxes(b, -1, -2)) > 0
    keep = (beta > np.swapaxes(beta, -1, -2)) | ((beta == np.swapaxes(beta, -1, -2))
                                                  & (np.arange(K)[:, None] < np.arange(K)[None, :]))
    return np.where(both, keep.astype(float), b)


def initial_beta(h, cfg: AdmmConfig):
    """Fractional SIC start. With ``"gain"`` each BS leans towards the classic order
    (stronger user decodes weaker) using only its own users' channel norms."""
    h = _h(h)
    K = h.shape[-2]
    off = 1.0 - np.eye(K)
    if cfg.beta_init != "gain":
        return np.broadcast_to(float(cfg.beta_init) * off, (h.shape[0], K, K)).copy()
    g = np.linalg.norm(_hdiag(h), axis=-1)  # (M, K)
    stronger = (g[:, :, None] > g[:, None, :]).astype(float)
    return (0.5 + cfg.beta_lean * (2.0 * stronger - 1.0)) * off


def _random_beta(rng, M, K, lean):
    """Start leaning towards a random SIC order per BS pair, like the gain start."""
    up = np.triu(np.ones((K, K)), 1) > 0
    d = (rng.uniform(size=(M, K, K)) < 0.5) & up
    st = d | np.swapaxes(~d & up, -1, -2)
    return (0.5 + lean * (2.0 * st - 1.0)) * (1.0 - np.eye(K))


def _full_bt(beta):
    K = beta.shape[-1]
    return np.where(np.eye(K) > 0, 1.0, 1.0 - beta)


# fixed-beta beamforming (shared subsolver) --------------------------------------------

def solve_beamforming(h, beta, net: NetworkConfig, cfg: AdmmConfig | None = None, W0=None,
                      iters: int | None = None):
    """Beamformers for fixed binary patterns by alternating MMSE updates and
    projected-gradient W steps with exact ICI.

    ``h`` (B, M, M, K, N) or one instance; ``beta`` broadcastable to (B, M, K, K).
    Returns ``(W, sum_rate)`` with one entry per batch element.
    """
    cfg = cfg or AdmmConfig()
    h = np.asarray(h)
    single = h.ndim == 4
    if single:
        h = h[None]
    beta = np.asarray(beta, dtype=float)
    if beta.ndim == 3:
        beta = beta[None]
    B = max(h.shape[0], beta.shape[0])
    h = np.broadcast_to(h, (B,) + h.shape[1:])
    beta = np.broadcast_to(beta, (B,) + beta.shape[1:]).copy()
    P, s2 = net.P_max, net.sigma2
    W = matched_filter(h, P) if W0 is None else np.broadcast_to(W0, (B,) + np.shape(W0)[-3:]).copy()
    bt = _full_bt(beta)
    for _ in range(cfg.bf_iters if iters is None else iters):
        a, c = mmse_update(W, h, bt, None, s2)
        C = _consts(h, P, s2, beta, a, c, net.R_min, cfg.lam_rate, bt=bt)
        X = _pgd(_split_W(W, P), C, True, cfg.inner_steps, cfg.inner_tol, cfg.smooth)
        W = _join_W(X, P)
    sr = rates.evaluate(h, W, beta, s2)["R"].sum(axis=(-2, -1))
    if single:
        return W[0], float(sr[0])
    return W, sr


# SIC pattern enumeration ----------------------------------------------------------------

def all_patterns(K: int) -> np.ndarray:
    """Every binary ``beta`` with ``beta_ik + beta_ki <= 1``: 3^(K(K-1)/2) patterns."""
    pairs = [(i, k) for i in range(K) for k in range(i + 1, K)]
    out = []
    for choice in itertools.product(range(3), repeat=len(pairs)):
        b = np.zeros((K, K))
        for (i, k), c in zip(pairs, choice):
            if c == 1:
                b[i, k] = 1.0
            elif c == 2:
                b[k, i] = 1.0
        out.append(b)
    return np.array(out)


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for j in range(len(part)):
            yield part[:j] + [[first] + part[j]] + part[j + 1:]
        yield [[first]] + part


def cluster_patterns(K: int) -> np.ndarray:
    """Cluster-based SIC: within each user cluster, stronger users decode all weaker ones."""
    out = []
    for part in _set_partitions(list(range(K))):
        b = np.zeros((K, K))
        for cl in part:
            for i in cl:
                for k in cl:
                    if i > k:  # users are sorted by gain: higher index = stronger
                        b[i, k] = 1.0
        out.append(b)
    return np.array(out)


def network_patterns(cell_patterns, M: int) -> np.ndarray:
    """Cartesian product of per-cell patterns: shape (P^M, M, K, K)."""
    cell_patterns = np.asarray(cell_patterns)
    idx = itertools.product(range(len(cell_patterns)), repeat=M)
    return np.array([cell_patterns[list(j)] for j in idx])


def best_over_patterns(h, patterns, net: NetworkConfig, cfg: AdmmConfig | None = None, chunk: int = 256):
    """Solve beamforming for every network pattern; returns (best_rate, best_pattern, all_rates)."""
    h = _h(h)
    patterns = np.asarray(patterns)
    rates_all = np.empty(len(patterns))
    for s in range(0, len(patterns), chunk):
        _, sr = solve_beamforming(h[None], patterns[s:s + chunk], net, cfg)
        rates_all[s:s + chunk] = sr
    j = int(np.argmax(rates_all))
    return float(rates_all[j]), patterns[j], rates_all


def brute_force(channels, net: NetworkConfig, cfg: AdmmConfig | None = None):
    """Exhaustive cluster-free optimum over all valid binary patterns."""
    return best_over_patterns(channels, network_patterns(all_patterns(net.K), net.M), net, cfg)


def beta_frozen(channels, net: NetworkConfig, cfg: AdmmConfig | None = None, patterns=None):
    """Best sum rate when every cell is restricted to cluster-based SIC patterns."""
    if patterns is None:
        patterns = network_patterns(cluster_patterns(net.K), net.M)
    patterns = np.asarray(patterns, dtype=float)
    if patterns.ndim == 3:
        patterns = patterns[None]
    _check_patterns(patterns)
    return best_over_patterns(channels, patterns, net, cfg)


def _check_patterns(patterns):
    if np.any((patterns != 0) & (patterns != 1)):
        raise ValueError("pattern entries must be 0/1")
    if np.any(np.diagonal(patterns, axis1=-2, axis2=-1) != 0):
        raise ValueError("pattern diagonal must be zero")
    if np.any(patterns + np.swapaxes(patterns, -1, -2) > 1):
        raise ValueError("pattern violates the mutual-SIC constraint")


# main solvers ---------------------------------------------------------------------

class AdmmState:
    """All ADMM variables for one instance (leading batch axis of length 1).

    ``beta``/``bt`` (1, M, K, K); ``Gamma`` (1, M, K); ``W`` (1, M, N, K);
    ``xo``, ``xi``, ``xi_hat`` (1, M, M, K) in units of ``xscale`` (``None``
    when there is no consensus split); ``duals`` holds ``lam``, ``lamt`` and,
    for the distributed solver, ``nu_o``, ``nu_i``.
    """

    def __init__(self, h, net, cfg, W, distributed: bool, beta0=None, rho=None):
        M, K = net.M, net.K
        self.h = np.asarray(h)[None]
        self.W = np.asarray(W, dtype=complex)[None]
        off = 1.0 - np.eye(K)
        if beta0 is None:
            beta0 = initial_beta(h, cfg)
        self.beta = np.broadcast_to(beta0, (1, M, K, K)).copy()
        self.bt = np.where(off > 0, 1.0 - self.beta, 1.0)
        self.distributed = distributed and M > 1
        self.rho = cfg.rho if rho is None else rho
        # ICI copies are kept in units of the per-user transmit SNR
        self.xscale = net.P_max / K
        self.duals = {"lam": np.zeros_like(self.beta), "lamt": np.zeros_like(self.beta)}
        self.xo = self.xi = self.xi_hat = None
        if self.distributed:
            out = ici_out(self.h, self.W) / self.xscale
            self.xo = out.copy()
            self.xi = np.swapaxes(out, -3, -2).copy()
            self.xi_hat = out.copy()
            self.duals["nu_o"] = np.zeros_like(out)
            self.duals["nu_i"] = np.zeros_like(out)
        self.a = self.c = None
        self.Gamma = None

    def local_ici(self):
        return self.xscale * self.xi.sum(axis=-2) if self.distributed else None

    def residuals(self):
        """(consensus, |beta + bt - 1|_inf, |beta * bt|_inf) over off-diagonal entries."""
        K = self.beta.shape[-1]
        off = 1.0 - np.eye(K)
        cons = 0.0
        if self.distributed:
            cons = float(max(np.abs(self.xo - self.xi_hat).max(),
                             np.abs(self.xi - np.swapaxes(self.xi_hat, -3, -2)).max()))
        bsum = float(np.abs(off * (self.beta + self.bt - 1.0)).max())
        bprod = float(np.abs(off * self.beta * self.bt).max())
        return cons, bsum, bprod


def _block2_setup(st: AdmmState, net, cfg, freeze_beta):
    X = _split_W(st.W, net.P_max)
    kw = {}
    if not freeze_beta:
        X["bt"] = st.bt
        kw["pen"] = (st.duals["lam"], st.duals["lamt"])
    else:
        kw["bt"] = st.bt
    if st.distributed:
        X["xin"] = st.xi
        kw["in_target"] = np.swapaxes(st.xi_hat, -3, -2) - st.rho * st.duals["nu_i"]
        kw["out_target"] = st.xi_hat - st.rho * st.duals["nu_o"]
    C = _consts(st.h, net.P_max, net.sigma2, st.beta, st.a, st.c, net.R_min, cfg.lam_rate,
                rho=st.rho, xscale=st.xscale, **kw)
    return X, C


def local_objective(st: AdmmState, net, cfg, freeze_beta=False):
    """Per-BS ``sum Gamma`` minus rate and augmented-Lagrangian penalties at the current
    point (exact min for Gamma), with the stored MMSE auxiliaries."""
    X, C = _block2_setup(st, net, cfg, freeze_beta)
    return _block2_objective(X, C, None)[0][0]


def update_local(st: AdmmState, net: NetworkConfig, cfg: AdmmConfig, freeze_beta: bool = False):
    """Every BS (in parallel): MMSE auxiliaries, block 1 (beta, Gamma),
    block 2 (Gamma, W, beta_t, incoming ICI copies), then the outgoing copies."""
    P, s2 = net.P_max, net.sigma2
    M = net.M
    ici = st.local_ici()
    st.a, st.c = mmse_update(st.W, st.h, st.bt, ici, s2)
    if st.Gamma is None:
        C0 = _consts(st.h, P, s2, st.beta, st.a, st.c, net.R_min, cfg.lam_rate, ici=ici, bt=st.bt)
        st.Gamma = _block2_objective(_split_W(st.W, P), C0, None)[1]
    if not freeze_beta:
        f = mmse_bracket(st.a, st.c, st.W, st.h, st.bt, ici, s2)
        for m in range(M):
            st.beta[0, m], st.Gamma[0, m] = update_block1(
                f[0, m], st.beta[0, m], st.bt[0, m], st.Gamma[0, m], st.duals["lam"][0, m],
                st.duals["lamt"][0, m], st.rho, net.R_min, cfg.lam_rate)
    X, C = _block2_setup(st, net, cfg, freeze_beta)
    X = _pgd(X, C, not st.distributed, cfg.inner_steps, cfg.inner_tol, cfg.smooth)
    st.W = _join_W(X, P)
    st.bt = X.get("bt", st.bt)
    st.Gamma = _block2_objective(X, C, None)[1]
    if st.distributed:
        offM = (1.0 - np.eye(M))[:, :, None]
        st.xi = X["xin"]
        st.xo = np.maximum(ici_out(st.h, st.W) / st.xscale, C["out_target"]) * offM
    return st


def _sweep(st: AdmmState, net: NetworkConfig, cfg: AdmmConfig, freeze_beta: bool):
    """Local updates, then the consensus (global) update, then the duals."""
    update_local(st, net, cfg, freeze_beta)
    if st.distributed:
        offM = (1.0 - np.eye(net.M))[:, :, None]
        st.xi_hat = update_global(st.xo, st.xi, st.duals["nu_o"], st.duals["nu_i"], st.rho) * offM
    st.duals = update_duals(st.duals, st.beta, st.bt, st.xo, st.xi, st.xi_hat, st.rho)
    return st.residuals() + (float(st.Gamma.sum()),)


def _run(channels, net: NetworkConfig, cfg: AdmmConfig, distributed: bool, W0=None, beta0=None):
    h = _h(channels)
    if h.shape != (net.M, net.M, net.K, net.N_T):
        raise ValueError("channel shape does not match the network config")
    if W0 is None:
        W0 = _initial_W(h, net, cfg, distributed)
    st = AdmmState(h, net, cfg, W0, distributed, beta0)
    rep = AdmmReport()

    def record(out):
        cons, bsum, bprod, obj = out
        rep.consensus.append(cons)
        rep.binary_sum.append(bsum)
        rep.binary_prod.append(bprod)
        rep.objective.append(obj)
        return cons, bsum, bprod

    it = 0
    for it in range(1, cfg.max_iters + 1):
        cons, bsum, bprod = record(_sweep(st, net, cfg, freeze_beta=False))
        if cons <= cfg.tol_consensus and bsum <= cfg.tol_binary and bprod <= cfg.tol_binary:
            rep.converged = True
            break
        st.rho = max(cfg.rho_min, st.rho * cfg.rho_decay)
    # binary extraction, then a few iterations with the pattern frozen
    st.beta = round_beta(st.beta)
    st.bt = _full_bt(st.beta)
    n_polish = cfg.polish_iters if st.distributed else 0
    for _ in range(n_polish):
        record(_sweep(st, net, cfg, freeze_beta=True))
    rep.iterations = it + n_polish
    W = st.W[0].copy()
    for m in range(net.M):  # no-op when the iterate is feasible
        pw = np.sum(np.abs(W[m]) ** 2)
        if pw > net.P_max:
            W[m] *= math.sqrt(net.P_max / pw)
    return SchedulingDecision(W, st.beta[0], None), rep


def _initial_W(h, net, cfg, distributed, rng=None):
    """Scaled matched filters (or random directions), then zero-SIC MMSE rounds.

    The distributed variant keeps the ICI fixed at its starting value so that
    each BS only uses local information.
    """
    P = net.P_max
    if rng is None:
        W = matched_filter(h, P)
    else:
        G = rng.standard_normal(h.shape[:1] + (net.N_T, net.K)) + 1j * rng.standard_normal(
            h.shape[:1] + (net.N_T, net.K))
        W = G * math.sqrt(P) / np.linalg.norm(G, axis=(1, 2), keepdims=True)
    beta0 = np.zeros((1, net.M, net.K, net.K))
    if not distributed or net.M == 1:
        return solve_beamforming(h[None], beta0, net, cfg, W0=W[None], iters=cfg.init_iters)[0][0]
    bt = _full_bt(beta0)
    hb, Wb = h[None], W[None]
    ici = intra_ici(hb, Wb)[1]
    for _ in range(cfg.init_iters):
        a, c = mmse_update(Wb, hb, bt, ici, net.sigma2)
        C = _consts(hb, P, net.sigma2, beta0, a, c, net.R_min, cfg.lam_rate, ici=ici, bt=bt)
        Wb = _join_W(_pgd(_split_W(Wb, P), C, False, cfg.inner_steps, cfg.inner_tol, cfg.smooth), P)
    return Wb[0]


def _finish(dec, rep, channels, net, distributed):
    h = _h(channels)
    report = rates.sum_rate(dec, h, net.sigma2, cfg=net)
    rep.sum_rate = report.sum_rate
    rep.feasibility = report.feasibility
    rep.bits = distributed_bits(rep.iterations, net.M, net.K) if distributed else \
        centralized_bits(net.M, net.K, net.N_T)
    if not report.feasibility.get("ok", True):
        log.info("rounded solution has violations: %s",
                 {k: v for k, v in report.feasibility.items() if k != "ok" and not v["ok"]})
    return dec, rep


def run_distributed(channels, net: NetworkConfig, cfg: AdmmConfig | None = None):
    """Consensus ADMM where BSs only exchange ICI bounds (2K reals per directed pair per iteration)."""
    cfg = cfg or AdmmConfig()
    dec, rep = _run(channels, net, cfg, distributed=True)
    return _finish(dec, rep, channels, net, True)


def run_centralized(channels, net: NetworkConfig, cfg: AdmmConfig | None = None):
    """ADMM on the full problem with exact ICI; the rounded pattern is re-optimized by
    :func:`solve_beamforming` from the ADMM iterate and from the default start.
    ``n_init`` restarts from random SIC orders keep the best rounded solution."""
    cfg = cfg or AdmmConfig()
    h = _h(channels)
    rng = np.random.default_rng(cfg.seed)
    best = None
    for j in range(max(1, cfg.n_init)):
        W0 = _initial_W(h, net, cfg, False, None if j == 0 else rng)
        beta0 = None if j == 0 else _random_beta(rng, net.M, net.K, cfg.beta_lean)
        dec, rep = _run(h, net, cfg, distributed=False, W0=W0, beta0=beta0)
        W1, r1 = solve_beamforming(h, dec.beta, net, cfg, W0=dec.W)
        W2, r2 = solve_beamforming(h, dec.beta, net, cfg)
        W = W1 if r1 >= r2 else W2
        cand = SchedulingDecision(W, dec.beta, None)
        cand, rep = _finish(cand, rep, h, net, False)
        if best is None or rep.sum_rate > best[1].sum_rate:
            best = (cand, rep)
    return best
