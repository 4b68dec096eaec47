"""Network topology and exponentially correlated Rayleigh channels.

Channel layout: ``h[m, n, k, :]`` is the row vector from BS ``n`` to the
``k``-th user served by BS ``m`` (length ``N_T``). Users of each cell are
sorted by ascending data-channel norm ``||h[m, m, k]||``.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    M: int = 3
    K: int = 6
    N_T: int = 4
    snr_db: float = 20.0
    sigma2: float = 1.0
    corr_D: float = 0.6
    corr_I: float = 0.5
    pathloss_exponent: float = 3.0
    d0: float = 1.0
    distances: tuple | None = None
    R_min: float = 0.3
    p_max_override: float | None = None

    def __post_init__(self):
        if self.M < 1 or self.K < 1 or self.N_T < 1:
            raise ValueError("M, K and N_T must be >= 1")
        for name in ("corr_D", "corr_I"):
            c = getattr(self, name)
            if not 0.0 <= c < 1.0:
                raise ValueError(f"{name}={c} outside [0, 1)")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.d0 <= 0:
            raise ValueError("d0 must be positive")
        if self.distances is not None:
            d = np.asarray(self.distances, dtype=float)
            if d.shape != (self.M, self.M) or np.any(d < 0):
                raise ValueError("distances must be a nonnegative M x M matrix")
            # freeze as nested tuples so the config stays hashable
            object.__setattr__(self, "distances", tuple(map(tuple, d.tolist())))
        if self.P_max <= 0:
            raise ValueError("P_max must be positive")

    @property
    def P_max(self) -> float:
        """Per-BS power budget; per-user SNR is ``snr_db`` when channels are unit gain."""
        if self.p_max_override is not None:
            return float(self.p_max_override)
        return self.K * 10.0 ** (self.snr_db / 10.0) * self.sigma2

    def distance_matrix(self) -> np.ndarray:
        if self.distances is None:
            return np.zeros((self.M, self.M))
        return np.asarray(self.distances, dtype=float)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["distances"] = None if self.distances is None else [list(r) for r in self.distances]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if d.get("distances") is not None:
            d["distances"] = tuple(map(tuple, d["distances"]))
        return cls(**d)


def hexagonal_distances(M: int, inter_site: float = 2.0) -> np.ndarray:
    """BS-to-cell-centre distances for BSs on a hexagonal grid (ring 0, ring 1, ...)."""
    pts = [(0.0, 0.0)]
    ring = 1
    while len(pts) < M:
        for j in range(6 * ring):
            side, step = divmod(j, ring)
            a0 = np.pi / 3 * side
            a1 = np.pi / 3 * (side + 1)
            p0 = ring * inter_site * np.array([np.cos(a0), np.sin(a0)])
            p1 = ring * inter_site * np.array([np.cos(a1), np.sin(a1)])
            pts.append(tuple(p0 + (p1 - p0) * step / ring))
        ring += 1
    P = np.array(pts[:M])
    return np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)


def pathloss(d, cfg: NetworkConfig):
    """Large-scale gain ``(1 + d/d0)^(-alpha)``."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    return (1.0 + d / cfg.d0) ** (-cfg.pathloss_exponent)


def correlation_matrix(K: int, corr: float, rng=None, phi: float | None = None) -> np.ndarray:
    """Hermitian ``R[i, k] = (corr e^{j phi})^(k-i)`` for ``k >= i``.

    ``phi`` is drawn uniformly from ``[0, 2 pi)`` when not given.
    """
    if not 0.0 <= corr < 1.0:
        raise ValueError(f"corr={corr} outside [0, 1)")
    if phi is None:
        if rng is None:
            raise ValueError("need rng or phi")
        phi = rng.uniform(0.0, 2.0 * np.pi)
    base = corr * np.exp(1j * phi)
    idx = np.arange(K)
    expo = idx[None, :] - idx[:, None]
    R = np.zeros((K, K), dtype=complex)
    up = expo >= 0
    R[up] = base ** expo[up]
    R = np.where(up, R, np.conj(R.T))
    return R


def psd_sqrt(R: np.ndarray) -> np.ndarray:
    """Hermitian square root via eigendecomposition, negative eigenvalues clipped."""
    vals, vecs = np.linalg.eigh(R)
    neg = vals.min()
    if neg < 0:
        log.debug("clipped eigenvalue %.3e in correlation sqrt", neg)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.conj().T


@dataclass(frozen=True)
class ChannelSet:
    """All channel vectors for one network realization."""

    h: np.ndarray
    sigma2: float = 1.0
    P_max: float = 1.0

    @property
    def M(self):
        return self.h.shape[0]

    @property
    def K(self):
        return self.h.shape[2]

    @property
    def N_T(self):
        return self.h.shape[3]

    def data_channels(self, m: int) -> np.ndarray:
        """Node feature of BS m: rows ``h_{mk}^m``, shape (K, N_T)."""
        return self.h[m, m]

    def permuted(self, perm) -> "ChannelSet":
        perm = np.asarray(perm)
        return ChannelSet(self.h[perm][:, perm], self.sigma2, self.P_max)


def _sort_users(h: np.ndarray) -> np.ndarray:
    M = h.shape[0]
    out = np.empty_like(h)
    for m in range(M):
        order = np.argsort(np.linalg.norm(h[m, m], axis=-1), kind="stable")
        out[m] = h[m][:, order]
    return out


def sample_channels(cfg: NetworkConfig, rng: np.random.Generator) -> ChannelSet:
    """One realization: ``H_mn = H~_mn (R_mn)^{1/2}`` scaled by sqrt(path loss).

    ``H_mn`` (N_T x K) stacks the channels from BS m to the users of BS n;
    data channels use ``corr_D``, interference channels ``corr_I``.
    """
    M, K, N = cfg.M, cfg.K, cfg.N_T
    dist = cfg.distance_matrix()
    h = np.empty((M, M, K, N), dtype=complex)
    for tx in range(M):
        for cell in range(M):
            corr = cfg.corr_D if tx == cell else cfg.corr_I
            R = correlation_matrix(K, corr, rng)
            Ht = (rng.standard_normal((N, K)) + 1j * rng.standard_normal((N, K))) / np.sqrt(2.0)
            H = Ht @ psd_sqrt(R)
            H *= np.sqrt(pathloss(dist[tx, cell], cfg))
            h[cell, tx] = H.T
    return ChannelSet(_sort_users(h), cfg.sigma2, cfg.P_max)


@dataclass
class Dataset:
    """Minibatches of channel realizations; ``h`` is (n_batches, batch_size, M, M, K, N_T)."""

    cfg: NetworkConfig
    h: np.ndarray
    seed: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    @property
    def n_batches(self):
        return self.h.shape[0]

    @property
    def batch_size(self):
        return self.h.shape[1]

    def __len__(self):
        return self.n_batches * self.batch_size

    def batch(self, i: int) -> list[ChannelSet]:
        return [ChannelSet(x, self.cfg.sigma2, self.cfg.P_max) for x in self.h[i]]

    def batch_array(self, i: int) -> np.ndarray:
        return self.h[i]

    def all_samples(self) -> np.ndarray:
        return self.h.reshape((-1,) + self.h.shape[2:])

    def samples(self) -> list[ChannelSet]:
        return [ChannelSet(x, self.cfg.sigma2, self.cfg.P_max) for x in self.all_samples()]


def make_dataset(cfg: NetworkConfig, n_batches: int, batch_size: int, seed: int,
                 split: str = "train") -> Dataset:
    """Each sample comes from its own spawned stream, so results do not depend on order."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_batches * batch_size)
    h = np.empty((n_batches * batch_size, cfg.M, cfg.M, cfg.K, cfg.N_T), dtype=complex)
    for j, child in enumerate(children):
        h[j] = sample_channels(cfg, np.random.default_rng(child)).h
    h = h.reshape((n_batches, batch_size) + h.shape[1:])
    return Dataset(cfg, h, seed, split)


def renew(dataset: Dataset, rng: np.random.Generator) -> Dataset:
    """Fresh draws with the same shape; the new seed comes from ``rng``."""
    seed = int(rng.integers(0, 2**63 - 1))
    return make_dataset(dataset.cfg, dataset.n_batches, dataset.batch_size, seed, dataset.split)


# Persistence: .npz with a JSON header and interleaved real/imag float64 data
# whose last axis has length 2 (real, imag).

def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "M": dataset.cfg.M,
        "K": dataset.cfg.K,
        "N_T": dataset.cfg.N_T,
        "seed": dataset.seed,
        "corr_D": dataset.cfg.corr_D,
        "corr_I": dataset.cfg.corr_I,
        "split": dataset.split,
        "network": dataset.cfg.to_dict(),
    }
    data = np.stack([dataset.h.real, dataset.h.imag], axis=-1).astype(np.float64)
    with open(path, "wb") as f:
        np.savez(f, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), h=data)
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    with np.load(path) as z:
        header = json.loads(z["header"].tobytes().decode())
        data = z["h"]
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {header.get('format_version')}")
    cfg = NetworkConfig.from_dict(header["network"])
    h = data[..., 0] + 1j * data[..., 1]
    return Dataset(cfg, h, header["seed"], header.get("split", "train"))
