"""Interference, SINR and rate computations for cluster-free SIC.

Array conventions
-----------------
h     (M, M, K, N_T) complex, ``h[m, n, i]`` = channel from BS n to user i of cell m
W     (M, N_T, K) complex, column ``W[m][:, u]`` is the beam of user u in cell m
beta  (M, K, K), ``beta[m, i, k] = 1`` when user i decodes (and cancels) user k

Batched variants prepend a sample axis to each of the above.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .channel import ChannelSet, NetworkConfig


def _harr(H):
    return H.h if isinstance(H, ChannelSet) else np.asarray(H)


@dataclass
class SchedulingDecision:
    W: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray | None = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=complex)
        self.beta = np.asarray(self.beta, dtype=float)
        M, _, K = self.W.shape
        if self.beta.shape != (M, K, K):
            raise ValueError(f"beta shape {self.beta.shape} != {(M, K, K)}")
        if self.zeta is not None:
            self.zeta = np.asarray(self.zeta, dtype=float)

    @property
    def M(self):
        return self.W.shape[0]

    @property
    def K(self):
        return self.W.shape[2]

    def power(self) -> np.ndarray:
        """Transmit power per BS."""
        return np.sum(np.abs(self.W) ** 2, axis=(1, 2))

    def permuted(self, perm) -> "SchedulingDecision":
        perm = np.asarray(perm)
        z = None if self.zeta is None else self.zeta[perm]
        return SchedulingDecision(self.W[perm], self.beta[perm], z)


@dataclass
class RateReport:
    r: np.ndarray
    R: np.ndarray
    sum_rate: float
    sic_complexity: float
    feasibility: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "r": self.r.tolist(),
            "R": self.R.tolist(),
            "sum_rate": float(self.sum_rate),
            "sic_complexity": float(self.sic_complexity),
            "feasibility": self.feasibility,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# plain path -----------------------------------------------------------------

def gains(h, W) -> np.ndarray:
    """``g[..., m, i, n, u] = |h[..., m, n, i] . W[..., n, :, u]|^2``."""
    A = np.einsum("...mnit,...ntu->...minu", h, W)
    return A.real ** 2 + A.imag ** 2


def split_gains(g):
    """Intra-cell powers ``S[..., m, i, u]`` and ICI ``[..., m, i]`` from :func:`gains`."""
    M = g.shape[-2]
    eye = np.eye(M)
    S = np.einsum("...minu,mn->...miu", g, eye)
    ici = np.einsum("...minu,mn->...mi", g, 1.0 - eye)
    return S, ici


def evaluate(h, W, beta, sigma2: float, impl=None) -> dict:
    """Full rate pipeline on plain arrays; works with or without a leading batch axis."""
    h = _harr(h)
    W = np.asarray(W)
    beta = np.asarray(beta, dtype=float)
    S, ici_v = split_gains(gains(h, W))
    lead = S.shape[:-2]
    K = S.shape[-1]
    intf, r, R, arg = kernels.cell_rates(S.reshape(-1, K, K), ici_v.reshape(-1, K),
                                         beta.reshape(-1, K, K), sigma2, impl=impl)
    return {
        "S": S,
        "ici": ici_v,
        "intf": intf.reshape(lead + (K, K)),
        "r": r.reshape(lead + (K, K)),
        "R": R.reshape(lead + (K,)),
        "argmin": arg.reshape(lead + (K,)),
    }


def ici(W, H, m: int, i: int) -> float:
    h = _harr(H)
    W = np.asarray(W)
    if h.shape[0] != W.shape[0] or h.shape[3] != W.shape[1]:
        raise ValueError("W and H dimensions do not match")
    return float(split_gains(gains(h, W))[1][m, i])


def _cell(beta_m, W, H, m):
    h = _harr(H)
    W = np.asarray(W)
    S, ici_v = split_gains(gains(h, W))
    return S[m], ici_v[m], np.asarray(beta_m, dtype=float)


def intf_decode(beta_m, W, H, m: int, i: int, k: int) -> float:
    """Interference when user i decodes user k (i != k)."""
    if i == k:
        return intf_self(beta_m, W, H, m, k)
    S, c, b = _cell(beta_m, W, H, m)
    return float(kernels.cell_interference(S[None], c[None], b[None])[0, i, k])


def intf_self(beta_m, W, H, m: int, k: int) -> float:
    S, c, b = _cell(beta_m, W, H, m)
    return float(kernels.cell_interference(S[None], c[None], b[None])[0, k, k])


def decode_rate(beta_m, W, H, m: int, i: int, k: int, sigma2: float) -> float:
    S, c, b = _cell(beta_m, W, H, m)
    _, r, _, _ = kernels.cell_rates(S[None], c[None], b[None], sigma2)
    return float(r[0, i, k])


def effective_rate(beta_m, r_m, k: int) -> float:
    """``min_i beta_ik r_ik + (1 - beta_ik) r_kk``."""
    beta_m = np.asarray(beta_m, dtype=float)
    r_m = np.asarray(r_m, dtype=float)
    cand = beta_m[:, k] * r_m[:, k] + (1.0 - beta_m[:, k]) * r_m[k, k]
    return float(cand.min())


def sic_complexity(beta) -> float:
    """Number of SIC operations ``sum_{m, i != k} beta[m, i, k]`` (averaged over a leading batch axis if given)."""
    beta = np.asarray(beta, dtype=float)
    K = beta.shape[-1]
    tot = np.sum(beta * (1.0 - np.eye(K)), axis=(-3, -2, -1))
    return float(np.mean(tot))


def sum_rate(decision: SchedulingDecision, channels, sigma2: float | None = None,
             cfg: NetworkConfig | None = None) -> RateReport:
    if sigma2 is None:
        sigma2 = channels.sigma2 if isinstance(channels, ChannelSet) else 1.0
    out = evaluate(channels, decision.W, decision.beta, sigma2)
    R = out["R"]
    feas = check_feasibility(decision, cfg, rates=R) if cfg is not None else {}
    return RateReport(out["r"], R, float(R.sum()), sic_complexity(decision.beta), feas)


def batch_sum_rate(h, W, beta, sigma2: float) -> np.ndarray:
    """Per-sample sum rates for batched arrays."""
    return evaluate(h, W, beta, sigma2)["R"].sum(axis=(-2, -1))


def check_feasibility(decision: SchedulingDecision, cfg: NetworkConfig, channels=None,
                      rates=None, tol: float = 1e-9) -> dict:
    """Violation magnitudes for power, minimum rate, mutual SIC and binarity."""
    P = decision.power()
    p_excess = float(max(0.0, (P - cfg.P_max).max()))
    b = decision.beta
    K = b.shape[-1]
    off = 1.0 - np.eye(K)
    pair = (b + np.swapaxes(b, -1, -2)) * off
    mutual = float(max(0.0, pair.max() - 1.0))
    binary = float(np.max(np.minimum(np.abs(b), np.abs(1.0 - b)) * off))
    flags = {
        "power": {"ok": p_excess <= tol * cfg.P_max, "violation": p_excess},
        "mutual_sic": {"ok": mutual <= tol, "violation": mutual},
        "binary": {"ok": binary <= tol, "violation": binary},
    }
    if rates is None and channels is not None:
        rates = evaluate(channels, decision.W, decision.beta, cfg.sigma2)["R"]
    if rates is not None:
        gap = float(max(0.0, (cfg.R_min - np.asarray(rates)).max()))
        flags["min_rate"] = {"ok": gap <= tol, "violation": gap}
    flags["ok"] = all(v["ok"] for v in flags.values())
    return flags


# traced path ------------------------------------------------------------------

def traced_gains(h, Wr, Wi):
    """Received powers as a tensor; ``h`` (B, M, M, K, N) constant, ``Wr``/``Wi`` (B, M, N, K)."""
    hr, hi = np.ascontiguousarray(h.real), np.ascontiguousarray(h.imag)
    eq = "bmnit,bntu->bminu"
    Are = ad.einsum(eq, hr, Wr) - ad.einsum(eq, hi, Wi)
    Aim = ad.einsum(eq, hr, Wi) + ad.einsum(eq, hi, Wr)
    return ad.cabs2(Are, Aim)


def traced_rates(h, Wr, Wi, beta, sigma2: float, soft_min: float | None = None):
    """Effective rates ``R`` (B, M, K) and decode rates ``r`` on the tape.

    ``beta`` may be a tensor (soft, differentiable) or a constant array.
    With ``soft_min`` set, the min over decoders becomes ``-s logsumexp(-x/s)``.
    """
    h = np.asarray(h)
    M, K = h.shape[1], h.shape[3]
    g = traced_gains(h, Wr, Wi)
    eye_m = np.eye(M)
    S = ad.einsum("bminu,mn->bmiu", g, eye_m)
    c = ad.einsum("bminu,mn->bmi", g, 1.0 - eye_m)

    idx = np.arange(K)
    lower = (idx[None, :] < idx[:, None]).astype(float)  # [k, u]
    upper = (idx[None, :] > idx[:, None]).astype(float)
    eye = np.eye(K)
    if not isinstance(beta, ad.Tensor):
        beta = np.asarray(beta, dtype=float)
        b_iu = beta[..., :, None, :]
        b_uk = np.swapaxes(beta, -1, -2)[..., None, :, :]
        b_ku = beta[..., None, :, :]
    else:
        sh = beta.shape
        b_iu = ad.reshape(beta, sh[:-1] + (1, sh[-1]))
        b_uk = ad.reshape(ad.swapaxes(beta, -1, -2), sh[:-2] + (1, K, K))
        b_ku = ad.reshape(beta, sh[:-2] + (1, K, K))
    coef = lower * (1.0 - b_iu + b_iu * b_uk) + upper * (1.0 - b_iu * b_ku)
    cross = ad.einsum("bmiku,bmiu->bmik", coef, S)
    own = ad.tsum((1.0 - eye) * (1.0 - beta) * S, axis=-1)  # [b, m, k]
    own = ad.reshape(own, own.shape[:-1] + (1, K))
    intf = (1.0 - eye) * cross + eye * own + ad.reshape(c, c.shape + (1,))
    r = ad.log2(1.0 + S / (intf + sigma2))
    r_own = ad.tsum(eye * r, axis=-2)
    r_own = ad.reshape(r_own, r_own.shape[:-1] + (1, K))
    cand = beta * r + (1.0 - beta) * r_own
    if soft_min:
        R = -soft_min * ad.logsumexp(-cand / soft_min, axis=-2)
    else:
        R = ad.tmin(cand, axis=-2)
    return R, r


def training_loss(R, R_min: float, lam_rate: float = 10.0):
    """``-sum rate + lam * sum max(0, R_min - R)^2``, averaged over the batch axis."""
    per_sample = ad.tsum(R, axis=(-2, -1))
    loss = -ad.mean(per_sample)
    if lam_rate:
        gap = ad.relu(R_min - R)
        pen = ad.mean(ad.tsum(gap * gap, axis=(-2, -1)))
        loss = loss + lam_rate * pen
    return loss


def plain_training_loss(R, R_min: float, lam_rate: float = 10.0) -> float:
    R = np.asarray(R)
    per = R.sum(axis=(-2, -1))
    pen = (np.maximum(0.0, R_min - R) ** 2).sum(axis=(-2, -1))
    return float(-per.mean() + lam_rate * pen.mean())
