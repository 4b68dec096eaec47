"""Numpy implementations of the per-cell interference and rate kernels.

All kernels take a flat batch of cells:

``S[b, i, u]``
    intra-cell received power ``|h_{mi}^m w_u^m|^2`` at user ``i`` from beam ``u``.
``ici[b, i]``
    inter-cell interference at user ``i``.
``beta[b, i, k]``
    SIC indicator, user ``i`` decodes user ``k``.
"""
import numpy as np


def _triangles(K):
    idx = np.arange(K)
    lower = (idx[None, :] < idx[:, None]).astype(float)  # [k, u] = u < k
    upper = (idx[None, :] > idx[:, None]).astype(float)  # [k, u] = u > k
    return lower, upper


def cell_interference(S, ici, beta):
    K = S.shape[1]
    lower, upper = _triangles(K)
    b_iu = beta[:, :, None, :]
    b_uk = np.swapaxes(beta, 1, 2)[:, None, :, :]
    b_ku = beta[:, None, :, :]
    coef = lower * (1.0 - b_iu + b_iu * b_uk) + upper * (1.0 - b_iu * b_ku)
    intf = np.einsum("biku,biu->bik", coef, S)
    offdiag = 1.0 - np.eye(K)
    own = np.sum(offdiag * (1.0 - beta) * S, axis=2)
    idx = np.arange(K)
    intf[:, idx, idx] = own
    return intf + ici[:, :, None]


def convex_interference(S, ici, beta_t):
    K = S.shape[1]
    lower, upper = _triangles(K)
    bt_iu = beta_t[:, :, None, :]
    weak = np.maximum(bt_iu, 1.0 - np.swapaxes(beta_t, 1, 2)[:, None, :, :])
    strong = np.maximum(bt_iu, beta_t[:, None, :, :])
    coef = lower * weak + upper * strong
    intf = np.einsum("biku,biu->bik", coef, S)
    offdiag = 1.0 - np.eye(K)
    own = np.sum(offdiag * beta_t * S, axis=2)
    idx = np.arange(K)
    intf[:, idx, idx] = own
    return intf + ici[:, :, None]


def cell_rates(S, ici, beta, sigma2):
    intf = cell_interference(S, ici, beta)
    r = np.log2(1.0 + S / (intf + sigma2))
    K = S.shape[1]
    idx = np.arange(K)
    r_own = r[:, idx, idx]  # [b, k]
    cand = beta * r + (1.0 - beta) * r_own[:, None, :]
    arg = np.argmin(cand, axis=1)
    R = np.take_along_axis(cand, arg[:, None, :], axis=1)[:, 0, :]
    return intf, r, R, arg
