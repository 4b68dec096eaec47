"""Slow, loop-based reference implementations used only by the tests."""
import itertools
import math

import numpy as np


def literal_rates(h, W, beta, sigma2):
    """Scalar loops over the interference / SINR / min-over-decoders formulas.

    Returns (intf, r, R) with shapes (M, K, K), (M, K, K), (M, K).
    """
    M, _, K, _ = h.shape
    p = lambda m, i, n, u: abs(np.dot(h[m, n, i], W[n][:, u])) ** 2  # noqa: E731
    intf = np.zeros((M, K, K))
    r = np.zeros((M, K, K))
    R = np.zeros((M, K))
    for m in range(M):
        b = beta[m]
        for i in range(K):
            ici = 0.0
            for n in range(M):
                if n != m:
                    for u in range(K):
                        ici += p(m, i, n, u)
            for k in range(K):
                tot = ici
                if i == k:
                    for u in range(K):
                        if u != k:
                            tot += (1 - b[k, u]) * p(m, k, m, u)
                else:
                    for u in range(K):
                        if u == k:
                            continue
                        if u < k:
                            tot += (1 - b[i, u] + b[i, u] * b[u, k]) * p(m, i, m, u)
                        else:
                            tot += (1 - b[i, u] * b[k, u]) * p(m, i, m, u)
                intf[m, i, k] = tot
                r[m, i, k] = math.log2(1 + p(m, i, m, k) / (tot + sigma2))
        for k in range(K):
            R[m, k] = min(b[i, k] * r[m, i, k] + (1 - b[i, k]) * r[m, k, k] for i in range(K))
    return intf, r, R


def eq5_rate(b, r, k):
    """Min of r_ik over decoders with b_ik = 1, capped by r_kk."""
    vals = [r[k, k]] + [r[i, k] for i in range(len(b)) if i != k and b[i, k] == 1]
    return min(vals)


def valid_patterns(K):
    """Every binary K x K pattern with zero diagonal and no mutual SIC."""
    pairs = [(i, k) for i in range(K) for k in range(i + 1, K)]
    out = []
    for choice in itertools.product(range(3), repeat=len(pairs)):
        b = np.zeros((K, K))
        for (i, k), c in zip(pairs, choice):
            if c == 1:
                b[i, k] = 1
            elif c == 2:
                b[k, i] = 1
        out.append(b)
    return out
