"""Distributed message-passing GNN for cluster-free NOMA scheduling, with
learned message pruning and layer skipping.

Every BS is a graph node. Node feature = its own data channels
``h[m, m]``; the feature on edge ``n -> m`` is ``h[m, n]``, the channel
from BS n to the users of cell m, which BS n knows locally. Weights and
architecture logits are shared by all BSs, so the map is equivariant to
relabelling the BSs.

Complex inputs are split into real/imag parts. All tensors carry a batch
axis ``B`` and a BS axis ``M`` up front.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .channel import NetworkConfig
from .rates import SchedulingDecision

log = logging.getLogger(__name__)

BITS_PER_REAL = 32
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GnnConfig:
    L: int = 4
    D: int = 48  # message / hidden width
    hidden: int = 64
    head_hidden: int = 64
    s_temp: float = 1.0
    arch_init: float = 3.0  # initial logit for every alpha entry

    def __post_init__(self):
        if self.L < 1 or self.D < 1:
            raise ValueError("L and D must be >= 1")
        if self.s_temp <= 0:
            raise ValueError("s_temp must be positive")


@dataclass
class Noise:
    """Fixed sampling noise so a forward pass is a deterministic function of (theta, alpha).

    ``alpha_o`` (L,) and ``alpha_i`` (L-1, D) are logistic noise for the
    architecture masks, ``sic`` (B, M, K, K, 3) Gumbel noise for the SIC triples.
    """

    alpha_o: np.ndarray
    alpha_i: np.ndarray
    sic: np.ndarray

    @classmethod
    def sample(cls, rng, L, D, B, M, K):
        return cls(logistic_noise(rng, (L,)), logistic_noise(rng, (L - 1, D)),
                   -np.log(-np.log(_open_uniform(rng, (B, M, K, K, 3)))))

    @classmethod
    def zeros(cls, L, D, B, M, K):
        return cls(np.zeros(L), np.zeros((L - 1, D)), np.zeros((B, M, K, K, 3)))

    def permuted(self, perm):
        return Noise(self.alpha_o, self.alpha_i, self.sic[:, np.asarray(perm)])


@dataclass
class ForwardTrace:
    hidden: list = field(default_factory=list)  # X^(l), (B, M, D) arrays
    masks_o: np.ndarray | None = None
    masks_i: np.ndarray | None = None
    bits: int = 0
    active_layers: int = 0
    active_neurons: list = field(default_factory=list)

    @property
    def kbit(self):
        return self.bits / 1000.0


@dataclass
class ForwardOutput:
    Wr: object
    Wi: object
    beta: object
    zeta: object
    trace: ForwardTrace

    def decisions(self) -> list[SchedulingDecision]:
        Wr, Wi, b, z = (ad._val(x) for x in (self.Wr, self.Wi, self.beta, self.zeta))
        return [SchedulingDecision(Wr[j] + 1j * Wi[j], b[j], z[j]) for j in range(Wr.shape[0])]

    def arrays(self):
        Wr, Wi, b = (ad._val(x) for x in (self.Wr, self.Wi, self.beta))
        return Wr + 1j * Wi, b


# sampling --------------------------------------------------------------------

def _open_uniform(rng, shape):
    u = rng.random(shape)
    tiny = np.finfo(float).tiny
    return np.clip(u, tiny, 1.0 - np.finfo(float).eps)


def logistic_noise(rng, shape):
    u = _open_uniform(rng, shape)
    return np.log(u) - np.log1p(-u)


def gumbel(x, rng=None, s_temp: float = 1.0, hard: bool = False, noise=None):
    """Relaxed Bernoulli sample ``sigmoid((x + log U - log(1-U)) / s_temp)``.

    ``noise`` overrides the draw; without ``rng`` and ``noise`` the sample is
    noise-free. ``hard`` returns the 0/1 indicator of a positive argument.
    """
    if s_temp <= 0:
        raise ValueError("s_temp must be positive")
    shape = np.shape(ad._val(x))
    if noise is None:
        noise = logistic_noise(rng, shape) if rng is not None else np.zeros(shape)
    z = x + noise
    if hard:
        return (ad._val(z) > 0).astype(float)
    return ad.sigmoid(z / s_temp)


def sic_softmax(logits, axis=-1):
    """Softmax over the (beta_ik, beta_ki, zeta_ik) logit triple."""
    return ad.softmax(logits, axis=axis)


# building blocks ---------------------------------------------------------------

def _dense(x, p, name):
    return ad.matmul(x, p[name + ".W"]) + p[name + ".b"]


def mlp(x, p, prefix, n_layers, out_act=None):
    for j in range(n_layers):
        x = _dense(x, p, f"{prefix}.{j}")
        if j < n_layers - 1:
            x = ad.tanh(x)
    if out_act is not None:
        x = out_act(x)
    return x


def embed(X, O_edge, layer: int, params):
    """Message from the (hidden state, edge feature) pair."""
    return mlp(ad.concatenate([X, O_edge], axis=-1), params, f"enc{layer}", 3)


def prune_and_fill(message, mask):
    """Zero the pruned neurons; receivers see zeros there."""
    return message * mask


def message_bits(mask) -> int:
    return int(np.count_nonzero(np.asarray(mask) > 0.5)) * BITS_PER_REAL


def aggregate(messages, axis=0):
    """Mean over inbound messages; an empty set gives zeros."""
    v = ad._val(messages)
    if v.shape[axis] == 0:
        shape = list(v.shape)
        del shape[axis]
        return np.zeros(shape)
    return ad.mean(messages, axis=axis)


def combine(X_prev, agg, layer: int, params):
    return mlp(ad.concatenate([X_prev, agg], axis=-1), params, f"comb{layer}", 3, ad.tanh)


def layer_update(psi, X_prev, a_o):
    return a_o * psi + (1.0 - a_o) * X_prev


def decode_head(O_node, X, params):
    return mlp(ad.concatenate([O_node, X], axis=-1), params, "head", 2)


def project_power(W, P_max: float):
    """Scale ``W`` onto the ball ``||W||_F^2 <= P_max`` (no-op inside it)."""
    W = np.asarray(W)
    p = float(np.sum(np.abs(W) ** 2))
    if p <= P_max:
        return W.copy()
    return W * np.sqrt(P_max / p)


def _project_traced(Wr, Wi, P_max):
    pw = ad.tsum(ad.cabs2(Wr, Wi), axis=(-2, -1))
    scale = ad.minimum(1.0, ad.sqrt(P_max / (pw + 1e-300)))
    scale = ad.reshape(scale, ad._val(scale).shape + (1, 1))
    return Wr * scale, Wi * scale


def node_features(h):
    """(B, M, 2*K*N_T) real features from the data channels."""
    M = h.shape[1]
    idx = np.arange(M)
    d = h[:, idx, idx]  # (B, M, K, N)
    return np.concatenate([d.real.reshape(d.shape[:2] + (-1,)), d.imag.reshape(d.shape[:2] + (-1,))], axis=-1)


def edge_features(h):
    """(B, M, M, 2*K*N_T); entry [b, m, n] is the feature on edge n -> m."""
    return np.concatenate([h.real.reshape(h.shape[:3] + (-1,)), h.imag.reshape(h.shape[:3] + (-1,))], axis=-1)


# model -------------------------------------------------------------------------

class AutoGNN:
    """Shared-weight GNN; ``mode='fixed'`` ignores the architecture logits."""

    def __init__(self, net: NetworkConfig, cfg: GnnConfig | None = None):
        self.net = net
        self.cfg = cfg or GnnConfig()

    @property
    def feat(self):
        return 2 * self.net.K * self.net.N_T

    def _shapes(self):
        c, F = self.cfg, self.feat
        K, N = self.net.K, self.net.N_T
        shapes = {}

        def dense(name, i, o):
            shapes[name + ".W"] = (i, o)
            shapes[name + ".b"] = (o,)

        dense("inproj.0", F, c.D)
        for l in range(1, c.L + 1):
            x_in = F if l == 1 else c.D
            dims = [x_in + F, c.hidden, c.hidden, c.D]
            for j in range(3):
                dense(f"enc{l}.{j}", dims[j], dims[j + 1])
            dims = [2 * c.D, c.hidden, c.hidden, c.D]
            for j in range(3):
                dense(f"comb{l}.{j}", dims[j], dims[j + 1])
        dense("head.0", F + c.D, c.head_hidden)
        dense("head.1", c.head_hidden, 2 * N * K + 2 * K * K)
        return shapes

    def init_params(self, rng) -> ParamVector:
        arrays = {}
        for name, shape in self._shapes().items():
            if name.endswith(".W"):
                arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
            else:
                arrays[name] = np.zeros(shape)
        return ParamVector(arrays)

    def init_arch(self) -> ParamVector:
        c = self.cfg
        return ParamVector({
            "alpha_o": np.full(c.L, c.arch_init),
            "alpha_i": np.full((c.L - 1, c.D), c.arch_init),
        })

    def zero_noise(self, B):
        return Noise.zeros(self.cfg.L, self.cfg.D, B, self.net.M, self.net.K)

    def sample_noise(self, rng, B):
        return Noise.sample(rng, self.cfg.L, self.cfg.D, B, self.net.M, self.net.K)

    def forward(self, h, theta, alpha=None, mode: str = "auto", sample_mode: str = "soft",
                rng=None, noise: Noise | None = None, s_temp: float | None = None) -> ForwardOutput:
        """One scheduling pass for a batch ``h`` of shape (B, M, M, K, N_T).

        ``theta``/``alpha`` are dicts of arrays or tape tensors (see
        :meth:`ParamVector.attach`). Without ``rng`` and ``noise`` the pass is
        noise-free, which is the evaluation setting.
        """
        c, net = self.cfg, self.net
        s = c.s_temp if s_temp is None else s_temp
        hard = sample_mode == "hard"
        if sample_mode not in ("soft", "hard") or mode not in ("auto", "fixed"):
            raise ValueError(f"bad mode {mode!r}/{sample_mode!r}")
        h = np.asarray(h)
        B, M, K = h.shape[0], net.M, net.K
        if h.shape[1:] != (M, M, K, net.N_T):
            raise ValueError(f"channel batch shape {h.shape} does not match network")
        if noise is None:
            noise = self.sample_noise(rng, B) if rng is not None else self.zero_noise(B)
        p = theta.arrays if isinstance(theta, ParamVector) else theta
        trace = ForwardTrace()

        # architecture masks, sampled once for the whole pass
        if mode == "fixed":
            a_o = [1.0] * c.L
            a_i = [np.ones(c.D)] * c.L
        else:
            a = alpha.arrays if isinstance(alpha, ParamVector) else alpha
            a_o = [gumbel(a["alpha_o"][l], s_temp=s, hard=hard, noise=noise.alpha_o[l]) for l in range(c.L)]
            a_i = [np.ones(c.D)] + [gumbel(a["alpha_i"][l], s_temp=s, hard=hard, noise=noise.alpha_i[l])
                                    for l in range(c.L - 1)]
        trace.masks_o = np.array([float(ad._val(x)) for x in a_o])
        trace.masks_i = np.array([ad._val(x) for x in a_i])

        O_n = node_features(h)  # (B, M, F)
        O_e = edge_features(h)  # (B, M, M, F)
        off = (1.0 - np.eye(M))[None, :, :, None]
        X = ad.tanh(_dense(O_n, p, "inproj.0"))
        trace.hidden.append(ad._val(X))
        for l in range(1, c.L + 1):
            ao = a_o[l - 1]
            if ad._val(ao) <= 0.5:
                trace.active_neurons.append(0)
                if hard:  # skipped layer: nothing exchanged, state carried over
                    trace.hidden.append(ad._val(X))
                    continue
            else:
                trace.active_layers += 1
                n_act = int(np.count_nonzero(ad._val(a_i[l - 1]) > 0.5))
                trace.active_neurons.append(n_act)
                trace.bits += M * (M - 1) * n_act * BITS_PER_REAL
            src = O_n if l == 1 else X  # sender state
            src = ad.broadcast_to(ad.reshape(src, (B, 1, M, -1)), (B, M, M, ad._val(src).shape[-1])) \
                if isinstance(src, ad.Tensor) else np.broadcast_to(src[:, None], (B, M, M, src.shape[-1]))
            msg = prune_and_fill(embed(src, O_e, l, p), a_i[l - 1])  # [b, m, n]: n -> m
            if M > 1:
                agg = ad.tsum(msg * off, axis=2) / (M - 1)
            else:
                agg = np.zeros((B, M, c.D))
            psi = combine(X, agg, l, p)
            X = layer_update(psi, X, ao)
            trace.hidden.append(ad._val(X))

        out = decode_head(O_n, X, p)  # (B, M, 2NK + 2KK)
        NK = net.N_T * K
        scale = np.sqrt(net.P_max / NK)
        Wr = ad.reshape(out[..., :NK], (B, M, net.N_T, K)) * scale
        Wi = ad.reshape(out[..., NK:2 * NK], (B, M, net.N_T, K)) * scale
        Wr, Wi = _project_traced(Wr, Wi, net.P_max)

        bl = ad.reshape(out[..., 2 * NK:2 * NK + K * K], (B, M, K, K))
        zl = ad.reshape(out[..., 2 * NK + K * K:], (B, M, K, K))
        trip = ad.stack([bl, ad.swapaxes(bl, -1, -2), zl], axis=-1) + noise.sic
        up = np.triu(np.ones((K, K)), 1)
        if hard:
            choice = np.argmax(ad._val(trip), axis=-1)
            onehot = np.eye(3)[choice]
            q = onehot
        else:
            q = sic_softmax(trip / s)
        beta = up * q[..., 0] + np.swapaxes(up, 0, 1) * ad.swapaxes(q[..., 1], -1, -2)
        zeta = up * q[..., 2]
        return ForwardOutput(Wr, Wi, beta, zeta, trace)

    def fixed_bits(self) -> int:
        M = self.net.M
        return self.cfg.L * M * (M - 1) * self.cfg.D * BITS_PER_REAL


def fixed_gnn_bits(M: int, L: int, D: int) -> int:
    """Bits exchanged by an unpruned GNN: every layer, every directed edge, D reals."""
    return L * M * (M - 1) * D * BITS_PER_REAL


# checkpoints -------------------------------------------------------------------

def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, model: AutoGNN, theta: ParamVector, alpha: ParamVector, extra=None) -> Path:
    path = Path(path)
    cfgs = {"network": model.net.to_dict(), "gnn": asdict(model.cfg)}
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": cfgs,
        "config_hash": config_hash(cfgs),
        "theta": theta.to_json(),
        "alpha": alpha.to_json(),
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    net = NetworkConfig.from_dict(doc["config"]["network"])
    model = AutoGNN(net, GnnConfig(**doc["config"]["gnn"]))
    return model, ParamVector.from_json(doc["theta"]), ParamVector.from_json(doc["alpha"]), doc.get("extra", {})
