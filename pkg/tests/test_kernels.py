import os
import subprocess
import sys

import numpy as np
import pytest

from cfnoma import kernels, rates

from oracles import literal_rates, valid_patterns


def _inputs(rng, B=20, K=3):
    S = rng.exponential(size=(B, K, K))
    ici = rng.exponential(size=(B, K))
    pats = np.array(valid_patterns(K))
    beta = pats[rng.integers(len(pats), size=B)]
    return S, ici, beta


impls = kernels.implementations()


@pytest.mark.parametrize("K", [1, 2, 3, 4])
def test_backends_agree(K):
    if "cython" not in impls:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(K)
    S, ici, beta = _inputs(rng, K=K)
    for name in ("cell_interference", "convex_interference"):
        x = rng.uniform(size=beta.shape) if name == "convex_interference" else beta
        a = getattr(kernels, name)(S, ici, x, impl=impls["numpy"])
        b = getattr(kernels, name)(S, ici, x, impl=impls["cython"])
        assert np.allclose(a, b, rtol=1e-13, atol=1e-13)
    a = kernels.cell_rates(S, ici, beta, 0.7, impl=impls["numpy"])
    b = kernels.cell_rates(S, ici, beta, 0.7, impl=impls["cython"])
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("name", sorted(impls))
def test_backend_matches_literal_oracle(name):
    rng = np.random.default_rng(11)
    for _ in range(10):
        M, K, N = 2, int(rng.integers(1, 4)), 2
        h = rng.standard_normal((M, M, K, N)) + 1j * rng.standard_normal((M, M, K, N))
        W = rng.standard_normal((M, N, K)) + 1j * rng.standard_normal((M, N, K))
        pats = np.array(valid_patterns(K))
        b = pats[rng.integers(len(pats), size=M)]
        out = rates.evaluate(h, W, b, 0.5, impl=impls[name])
        intf, r, R = literal_rates(h, W, b, 0.5)
        assert np.allclose(out["R"], R, rtol=1e-12, atol=1e-12)
        assert np.allclose(out["intf"], intf, rtol=1e-12, atol=1e-12)


def test_shape_errors():
    S = np.ones((2, 3, 3))
    with pytest.raises(ValueError):
        kernels.cell_interference(S, np.ones((2, 2)), S)
    with pytest.raises(ValueError):
        kernels.cell_interference(np.ones((2, 3)), np.ones((2, 3)), S)


def test_non_contiguous_inputs():
    rng = np.random.default_rng(3)
    S, ici, beta = _inputs(rng, B=10)
    a = kernels.cell_interference(S[::2], ici[::2], beta[::2])
    b = kernels.cell_interference(S[::2].copy(), ici[::2].copy(), beta[::2].copy())
    assert np.array_equal(a, b)


def test_pure_python_switch():
    env = dict(os.environ, CFNOMA_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import cfnoma; print(cfnoma.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"
