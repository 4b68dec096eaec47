"""Experiment orchestration: JSON configs, method runs, comparison tables and plot data."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, admm, bilevel, gnn, rates
from .channel import Dataset, NetworkConfig, load_dataset, make_dataset, save_dataset
from .kernels import BACKEND

log = logging.getLogger(__name__)

METHODS = ("autognn", "fixed_gnn", "admm_distributed", "admm_centralized", "beta_frozen_oracle")
LEARNED = ("autognn", "fixed_gnn")

TABLE_HEADERS = [
    "Method",
    "Test sum rate (bps/Hz)",
    "Execution time",
    "Number of GNN layers/iterations",
    "Information overhead (Kbit)",
    "SIC complexity",
]

LABELS = {
    "autognn": "AutoGNN",
    "fixed_gnn": "Fixed GNN",
    "admm_distributed": "Distributed ADMM",
    "admm_centralized": "Centralized ADMM",
    "beta_frozen_oracle": "Cluster-based oracle",
}

_num = {"type": "number"}
_int = {"type": "integer"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "M": {"type": "integer", "minimum": 1},
                "K": {"type": "integer", "minimum": 1},
                "N_T": {"type": "integer", "minimum": 1},
                "snr_db": _num,
                "sigma2": {"type": "number", "exclusiveMinimum": 0},
                "corr_D": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "corr_I": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "pathloss_exponent": _num,
                "d0": {"type": "number", "exclusiveMinimum": 0},
                "distances": {"type": ["array", "null"]},
                "R_min": _num,
                "p_max_override": {"type": ["number", "null"]},
            },
        },
        "method": {"enum": list(METHODS)},
        "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1},
        "gnn": {"type": "object"},
        "train": {"type": "object"},
        "admm": {"type": "object"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train_batches": {"type": "integer", "minimum": 1},
                "val_batches": {"type": "integer", "minimum": 1},
                "test_batches": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "dir": {"type": ["string", "null"]},
            },
        },
        "out": {"type": "string"},
        "seed": _int,
        "checkpoint": {"type": ["string", "null"]},
        "pattern": {"type": ["array", "null"]},
        "sweep_corr_D": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
        "test_snr_db": {"type": ["number", "null"]},
        "workers": {"type": "integer", "minimum": 1},
    },
}

# seed offsets so the three splits never share streams
_SPLIT_SEED = {"train": 0, "val": 1, "test": 2}


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(M=2, K=3, N_T=2))
    method: str = "autognn"
    methods: list = field(default_factory=lambda: list(METHODS[:4]))
    gnn: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    admm: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=lambda: {"train_batches": 10, "val_batches": 10,
                                                   "test_batches": 1, "batch_size": 8, "dir": None})
    out: str = "runs/default"
    seed: int = 0
    checkpoint: str | None = None
    pattern: list | None = None
    sweep_corr_D: list = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8])
    test_snr_db: float | None = None
    workers: int = 1

    # construction ---------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        jsonschema.validate(d, SCHEMA)
        d = dict(d)
        base = cls()
        net = NetworkConfig.from_dict({**base.network.to_dict(), **d.pop("network", {})})
        ds = {**base.dataset, **d.pop("dataset", {})}
        cfg = cls(network=net, dataset=ds, **d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["network"] = self.network.to_dict()
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def with_overrides(self, items) -> "ExperimentConfig":
        """Apply ``key=value`` strings; dotted keys reach into nested sections."""
        d = self.to_dict()
        for item in items or []:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    node[p] = {}
                node = node[p]
            node[parts[-1]] = val
        return ExperimentConfig.from_dict(d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # method-specific pieces -----------------------------------------------

    def validate(self):
        # each of these raises on unknown or bad fields
        self.gnn_config()
        self.train_config()
        self.admm_config()
        if self.method == "beta_frozen_oracle" and self.pattern is not None:
            self.pattern_array()

    def gnn_config(self) -> gnn.GnnConfig:
        return gnn.GnnConfig(**self.gnn)

    def train_config(self) -> bilevel.TrainConfig:
        kw = dict(self.train)
        if "adam_betas" in kw:
            kw["adam_betas"] = tuple(kw["adam_betas"])
        kw.setdefault("seed", self.seed)
        return bilevel.TrainConfig(**kw)

    def admm_config(self) -> admm.AdmmConfig:
        kw = dict(self.admm)
        kw.setdefault("seed", self.seed)
        return admm.AdmmConfig(**kw)

    def pattern_array(self) -> np.ndarray:
        """Network-wide frozen SIC pattern (M, K, K); a single (K, K) pattern is used in every cell."""
        net = self.network
        if self.pattern is None:
            return np.zeros((net.M, net.K, net.K))
        p = np.asarray(self.pattern, dtype=float)
        if p.shape == (net.K, net.K):
            p = np.broadcast_to(p, (net.M, net.K, net.K)).copy()
        if p.shape != (net.M, net.K, net.K):
            raise ValueError(f"pattern shape {p.shape} does not fit M={net.M}, K={net.K}")
        admm._check_patterns(p)
        return p


@dataclass
class RunResult:
    method: str
    per_sample: list
    config_hash: str
    provenance: str
    extra: dict = field(default_factory=dict)

    FIELDS = ("sum_rate", "overhead_kbit", "sic_complexity", "iterations", "runtime_s")

    @property
    def aggregate(self) -> dict:
        if not self.per_sample:
            return {k: float("nan") for k in self.FIELDS}
        return {k: float(np.mean([s[k] for s in self.per_sample])) for k in self.FIELDS}

    def deterministic_dict(self) -> dict:
        """Everything except wall-clock runtimes."""
        ps = [{k: v for k, v in s.items() if k != "runtime_s"} for s in self.per_sample]
        return {"method": self.method, "per_sample": ps, "config_hash": self.config_hash,
                "provenance": self.provenance, "extra": self.extra}

    def to_dict(self) -> dict:
        return {"method": self.method, "per_sample": self.per_sample, "aggregate": self.aggregate,
                "config_hash": self.config_hash, "provenance": self.provenance, "extra": self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(d["method"], d["per_sample"], d["config_hash"], d["provenance"], d.get("extra", {}))

    def table_row(self) -> dict:
        a = self.aggregate
        return {
            "Method": LABELS.get(self.method, self.method),
            "Test sum rate (bps/Hz)": f"{a['sum_rate']:.2f}",
            "Execution time": f"{a['runtime_s']:.3f} s/sample",
            "Number of GNN layers/iterations": f"{a['iterations']:.2f}",
            "Information overhead (Kbit)": f"{a['overhead_kbit']:.2f}",
            "SIC complexity": f"{a['sic_complexity']:.2f}",
        }


def provenance() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"cfnoma {__version__} backend={BACKEND} rev={rev or 'unknown'}"


# datasets -----------------------------------------------------------------------

def datasets(cfg: ExperimentConfig, net: NetworkConfig | None = None) -> dict[str, Dataset]:
    """Train/val/test sets; loaded from ``dataset.dir`` when files exist there."""
    net = net or cfg.network
    ds = cfg.dataset
    out = {}
    for split in ("train", "val", "test"):
        path = Path(ds["dir"]) / f"{split}.npz" if ds.get("dir") else None
        if path is not None and path.exists():
            d = load_dataset(path)
            if d.cfg != net:
                raise ValueError(f"dataset {path} was generated for a different network")
            out[split] = d
        else:
            out[split] = make_dataset(net, ds[f"{split}_batches"], ds["batch_size"],
                                      cfg.seed * 10 + _SPLIT_SEED[split], split)
    return out


def generate(cfg: ExperimentConfig, out: Path | None = None) -> dict[str, Path]:
    out = Path(out or cfg.out) / "data"
    out.mkdir(parents=True, exist_ok=True)
    sets = datasets(dataclasses.replace(cfg, dataset={**cfg.dataset, "dir": None}))
    return {k: save_dataset(v, out / f"{k}.npz") for k, v in sets.items()}


# training ----------------------------------------------------------------------

def train(cfg: ExperimentConfig, method: str | None = None, out: Path | None = None,
          net: NetworkConfig | None = None) -> Path:
    """Train a learned method and write ``checkpoint_<method>.json`` plus the training log."""
    method = method or cfg.method
    if method not in LEARNED:
        raise ValueError(f"method {method!r} is not trained")
    net = net or cfg.network
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sets = datasets(cfg, net)
    model = gnn.AutoGNN(net, cfg.gnn_config())
    tcfg = cfg.train_config()
    mode = "auto" if method == "autognn" else "fixed"
    theta, alpha, tlog = bilevel.train(model, sets["train"], sets["val"], tcfg, mode=mode)
    tlog.to_csv(out / f"trainlog_{method}.csv")
    tlog.to_json(out / f"trainlog_{method}.json")
    extra = {"method": method, "train": bilevel.config_dict(tcfg), "seed": cfg.seed}
    return gnn.save_checkpoint(out / f"checkpoint_{method}.json", model, theta, alpha, extra)


# evaluation ----------------------------------------------------------------------

def _check_network(a: NetworkConfig, b: NetworkConfig):
    if (a.M, a.K, a.N_T) != (b.M, b.K, b.N_T):
        raise ValueError(f"network mismatch: checkpoint has M,K,N_T={(a.M, a.K, a.N_T)}, "
                         f"test set has {(b.M, b.K, b.N_T)}")


def evaluate_gnn(checkpoint, test: Dataset, method: str = "autognn", cfg_hash: str = "") -> RunResult:
    model, theta, alpha, extra = gnn.load_checkpoint(checkpoint)
    _check_network(model.net, test.cfg)
    if model.net != test.cfg:
        # same graph, different radio scenario (e.g. SNR): run the trained weights there
        model = gnn.AutoGNN(test.cfg, model.cfg)
    mode = "auto" if method == "autognn" else "fixed"
    h = test.all_samples()
    t0 = time.perf_counter()
    fo = model.forward(h, theta, alpha, mode=mode, sample_mode="hard")
    dt = (time.perf_counter() - t0) / len(h)
    W, beta = fo.arrays()
    ev = rates.evaluate(h, W, beta, test.cfg.sigma2)
    sr = ev["R"].sum(axis=(-2, -1))
    bits = fo.trace.bits if mode == "auto" else model.fixed_bits()
    layers = fo.trace.active_layers if mode == "auto" else model.cfg.L
    per = [{"sum_rate": float(sr[j]), "overhead_kbit": bits / 1000.0,
            "sic_complexity": rates.sic_complexity(beta[j]), "iterations": float(layers),
            "runtime_s": dt} for j in range(len(h))]
    return RunResult(method, per, cfg_hash, provenance(), {"checkpoint": str(checkpoint)})


def _admm_one(args):
    h, net, acfg, method, pattern = args
    t0 = time.perf_counter()
    if method == "beta_frozen_oracle":
        best, _, _ = admm.beta_frozen(h, net, acfg, patterns=pattern)
        rec = {"sum_rate": best, "overhead_kbit": 0.0, "sic_complexity": rates.sic_complexity(pattern),
               "iterations": float(acfg.bf_iters)}
    else:
        fn = admm.run_distributed if method == "admm_distributed" else admm.run_centralized
        dec, rep = fn(h, net, acfg)
        rec = {"sum_rate": float(rep.sum_rate), "overhead_kbit": rep.bits / 1000.0,
               "sic_complexity": rates.sic_complexity(dec.beta), "iterations": float(rep.iterations),
               "feasible": bool(rep.feasibility.get("ok", False)) if isinstance(rep.feasibility, dict) else None}
    rec["runtime_s"] = time.perf_counter() - t0
    return rec


def evaluate_optimizer(test: Dataset, method: str, acfg: admm.AdmmConfig, pattern=None,
                       workers: int = 1, cfg_hash: str = "") -> RunResult:
    net = test.cfg
    if method == "beta_frozen_oracle":
        pattern = np.zeros((net.M, net.K, net.K)) if pattern is None else np.asarray(pattern, dtype=float)
        admm._check_patterns(pattern)
    jobs = [(h, net, acfg, method, pattern) for h in test.all_samples()]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            per = list(ex.map(_admm_one, jobs))
    else:
        per = [_admm_one(j) for j in jobs]
    return RunResult(method, per, cfg_hash, provenance())


def evaluate(cfg: ExperimentConfig, method: str | None = None, checkpoint=None,
             test: Dataset | None = None) -> RunResult:
    method = method or cfg.method
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    test = test or datasets(cfg)["test"]
    if method in LEARNED:
        ck = checkpoint or cfg.checkpoint or Path(cfg.out) / f"checkpoint_{method}.json"
        if not Path(ck).exists():
            raise FileNotFoundError(f"checkpoint not found: {ck}")
        return evaluate_gnn(ck, test, method, cfg.hash())
    pattern = cfg.pattern_array() if method == "beta_frozen_oracle" else None
    return evaluate_optimizer(test, method, cfg.admm_config(), pattern, cfg.workers, cfg.hash())


def beta_frozen_oracle(channels, pattern, net: NetworkConfig, acfg: admm.AdmmConfig | None = None) -> RunResult:
    """Sum rate with every cell's SIC pattern frozen; ``channels`` is one instance or a batch."""
    h = np.asarray(getattr(channels, "h", channels))
    if h.ndim == 4:
        h = h[None]
    acfg = acfg or admm.AdmmConfig()
    pattern = np.asarray(pattern, dtype=float)
    if pattern.shape == (net.K, net.K):
        pattern = np.broadcast_to(pattern, (net.M, net.K, net.K)).copy()
    if pattern.shape != (net.M, net.K, net.K):
        raise ValueError(f"pattern shape {pattern.shape} does not fit M={net.M}, K={net.K}")
    admm._check_patterns(pattern)
    test = Dataset(net, h[None], seed=-1, split="test")
    return evaluate_optimizer(test, "beta_frozen_oracle", acfg, pattern)


# comparisons ----------------------------------------------------------------------

def write_table(results: list[RunResult], path, extra_cols: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra_cols = extra_cols or {}
    heads = list(extra_cols) + TABLE_HEADERS
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=heads)
        w.writeheader()
        for j, r in enumerate(results):
            row = r.table_row()
            for k, v in extra_cols.items():
                row[k] = v[j]
            w.writerow(row)
    return path


def _run_methods(cfg: ExperimentConfig, out: Path) -> list[RunResult]:
    test = datasets(cfg)["test"]
    res = []
    for m in cfg.methods:
        log.info("running %s", m)
        ck = None
        if m in LEARNED:
            ck = Path(out) / f"checkpoint_{m}.json"
            if not ck.exists():
                train(cfg, m, out)
        res.append(evaluate(cfg, m, checkpoint=ck, test=test))
    return res


def compare(cfg: ExperimentConfig, out: Path | None = None) -> list[RunResult]:
    """One row per method in ``results.csv``; full records in ``summary.json``."""
    out = Path(out or cfg.out)
    res = _run_methods(cfg, out)
    write_table(res, out / "results.csv")
    _write_summary(out, cfg, res)
    return res


def sweep(cfg: ExperimentConfig, values=None, out: Path | None = None) -> list[tuple[float, RunResult]]:
    """Repeat :func:`compare` over ``corr_D`` values."""
    out = Path(out or cfg.out)
    values = list(values if values is not None else cfg.sweep_corr_D)
    rows = []
    for c in values:
        sub = dataclasses.replace(cfg, network=cfg.network.replace(corr_D=float(c)))
        for r in _run_methods(sub, out / f"corr_D_{c:g}"):
            rows.append((float(c), r))
    write_table([r for _, r in rows], out / "results.csv", {"corr_D": [c for c, _ in rows]})
    _write_summary(out, cfg, [r for _, r in rows], {"corr_D": [c for c, _ in rows]})
    export_plots(out)
    return rows


def _write_summary(out: Path, cfg: ExperimentConfig, results: list[RunResult], extra=None):
    doc = {"config": cfg.to_dict(), "config_hash": cfg.hash(), "provenance": provenance(),
           "results": [r.to_dict() for r in results]}
    if extra:
        doc.update(extra)
    (Path(out) / "summary.json").write_text(json.dumps(doc, indent=2))


def load_summary(out) -> dict:
    path = Path(out) / "summary.json"
    if not path.exists():
        raise FileNotFoundError(f"summary not found: {path}")
    return json.loads(path.read_text())


def _write_tsv(path: Path, xs, ys):
    with open(path, "w") as f:
        for x, y in zip(xs, ys):
            f.write(f"{x:.10g}\t{y:.10g}\n")


def export_plots(out) -> list[Path]:
    """Two-column x/y files under ``plotdata/`` from a summary and any training logs."""
    out = Path(out)
    pd = out / "plotdata"
    pd.mkdir(parents=True, exist_ok=True)
    written = []
    summ = load_summary(out)
    res = [RunResult.from_dict(r) for r in summ["results"]]
    if "corr_D" in summ:
        by = {}
        for c, r in zip(summ["corr_D"], res):
            by.setdefault(r.method, []).append((c, r.aggregate))
        for m, pts in by.items():
            for key, name in (("sum_rate", "sum_rate"), ("overhead_kbit", "overhead")):
                p = pd / f"{name}_vs_corr_D_{m}.tsv"
                _write_tsv(p, [c for c, _ in pts], [a[key] for _, a in pts])
                written.append(p)
    else:
        for r in res:
            p = pd / f"sum_rate_per_sample_{r.method}.tsv"
            _write_tsv(p, range(len(r.per_sample)), [s["sum_rate"] for s in r.per_sample])
            written.append(p)
    for tl in sorted(out.glob("trainlog_*.json")):
        m = tl.stem.removeprefix("trainlog_")
        ep = json.loads(tl.read_text())["epochs"]
        p = pd / f"val_loss_vs_epoch_{m}.tsv"
        _write_tsv(p, [e["epoch"] for e in ep], [e["monitor_val_loss"] for e in ep])
        written.append(p)
    return written


# generalization -----------------------------------------------------------------------

def generalization_run(checkpoint, snr_b: float, cfg: ExperimentConfig, out: Path | None = None):
    """(trained-at-a tested-at-b, retrained-at-b tested-at-b) pair of results.

    When the checkpoint was trained at ``snr_b`` already it serves as the retrained model.
    """
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model, _, _, extra = gnn.load_checkpoint(checkpoint)
    _check_network(model.net, cfg.network)
    method = extra.get("method", cfg.method if cfg.method in LEARNED else "autognn")
    net_b = model.net.replace(snr_db=float(snr_b))
    test = datasets(cfg, net_b)["test"]
    gen = evaluate_gnn(checkpoint, test, method, cfg.hash())
    if model.net.snr_db == float(snr_b):
        return gen, gen
    out = Path(out or cfg.out) / f"retrain_snr_{snr_b:g}"
    ck_b = train(cfg, method, out, net_b)
    return gen, evaluate_gnn(ck_b, test, method, cfg.hash())
