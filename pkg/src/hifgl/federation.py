"""Training loop: device gradients, silo updates, server aggregation, baselines.

Schemes
-------
hifgl    SecMP over the full graph (cross-client edges kept), FedAvg at the server.
fedavg   every silo trains on its own subgraph (cross edges dropped), FedAvg.
fedprox  as fedavg, plus a proximal pull toward the last global model.
local    as fedavg without any server step; silos never share.
global   one centralized model on the full graph (the unconstrained reference).

Metrics in a history record describe the model *after* that round's update.
"""
from __future__ import annotations

import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .graph import FederatedGraph, normalize_structure
from .nn import (ARCHS, GraphOps, ModelParams, batch_local_gradients, centralized_forward,
                 exact_gradients, init_params, mean_loss)
from .secmp import DEVICE_SILO, SILO_SERVER, AuditLog, CommLedger, SecMPNetwork, SiloState

log = logging.getLogger(__name__)

SCHEMES = ("local", "fedavg", "fedprox", "global", "hifgl")
OPTIMIZERS = ("sgd", "adam")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class TrainConfig:
    arch: str = "gcn"
    num_layers: int = 2
    hidden_dim: int = 64
    epochs: int = 50
    lr: float = 0.01
    lr_gamma: float = 0.9
    lr_step: int = 4
    optimizer: str = "adam"
    fed_scheme: str = "hifgl"
    fedprox_mu: float = 0.01
    local_steps: int = 1
    t_privacy: int = 1
    seed: int = 0
    dp_sigma: float = 0.0
    patience: int = 0
    symmetrize: bool = True
    self_loops: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            ("arch", self.arch in ARCHS, f"must be one of {ARCHS}"),
            ("fed_scheme", self.fed_scheme in SCHEMES, f"must be one of {SCHEMES}"),
            ("optimizer", self.optimizer in OPTIMIZERS, f"must be one of {OPTIMIZERS}"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("num_layers", self.num_layers >= 1, "must be >= 1"),
            ("hidden_dim", self.hidden_dim >= 1, "must be >= 1"),
            ("lr", self.lr > 0, "must be > 0"),
            ("lr_gamma", self.lr_gamma > 0, "must be > 0"),
            ("lr_step", self.lr_step >= 1, "must be >= 1"),
            ("t_privacy", self.t_privacy >= 1, "must be >= 1"),
            ("dp_sigma", self.dp_sigma >= 0, "must be >= 0"),
            ("fedprox_mu", self.fedprox_mu >= 0, "must be >= 0"),
            ("local_steps", self.local_steps >= 1, "must be >= 1"),
            ("patience", self.patience >= 0, "must be >= 0 (0 disables early stopping)"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, f"{msg}, got {getattr(self, name)!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def sub_seed(seed: int, name: str) -> int:
    """Independent, named seed stream derived from the run seed."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class ServerState:
    global_params: ModelParams
    round: int = 0
    history: list[dict] = field(default_factory=list)


# -- optimizer steps ------------------------------------------------------------

class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: ModelParams | None = None
        self.v: ModelParams | None = None
        self.t = 0

    def step(self, params: ModelParams, grad: ModelParams, lr: float) -> ModelParams:
        if self.m is None:
            self.m, self.v = params.zeros_like(), params.zeros_like()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = self.m.map(lambda m, g: b1 * m + (1 - b1) * g, grad)
        self.v = self.v.map(lambda v, g: b2 * v + (1 - b2) * g * g, grad)
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        return params.map(lambda p, m, v: p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps),
                          self.m, self.v)


def average_gradients(grads: list[ModelParams]) -> ModelParams:
    if not grads:
        raise ValueError("no gradients to average")
    total = grads[0].copy()
    for g in grads[1:]:
        total = total.map(np.add, g)
    return total.map(lambda x: x / len(grads))


def apply_update(model: ModelParams, grad: ModelParams, cfg: TrainConfig, lr: float,
                 opt: Adam | None = None) -> ModelParams:
    if cfg.optimizer == "sgd":
        return model.map(lambda p, g: p - lr * g, grad)
    if opt is None:
        raise ValueError("adam needs optimizer state")
    return opt.step(model, grad, lr)


def silo_local_update(silo: SiloState, grads: list[ModelParams], cfg: TrainConfig,
                      opt: Adam | None = None, lr: float | None = None) -> ModelParams:
    """Average the devices' gradients and take one optimizer step."""
    avg = average_gradients(grads)
    new = apply_update(silo.model, avg, cfg, cfg.lr if lr is None else lr, opt)
    silo.model = new
    return new


def fedavg(models: list[ModelParams]) -> ModelParams:
    """Unweighted element-wise mean."""
    if not models:
        raise ValueError("no models to average")
    total = models[0].copy()
    for m in models[1:]:
        total = total.map(np.add, m)
    return total.map(lambda x: x / len(models))


def fedprox_regularize(local_grad: ModelParams, local: ModelParams, global_: ModelParams,
                       mu: float) -> ModelParams:
    return local_grad.map(lambda g, l, w: g + mu * (l - w), local, global_)


# -- evaluation ---------------------------------------------------------------------

@dataclass
class EvalResult:
    global_acc: float
    per_silo_acc: list[float]


def accuracy(logits: np.ndarray, g: FederatedGraph, split: str) -> EvalResult:
    """Pooled accuracy over every node of ``split``, plus the per-silo view."""
    mask = g.split_mask(split)
    if not mask.any():
        raise ValueError(f"split {split!r} is empty")
    correct = logits.argmax(axis=1) == g.labels
    per_silo = []
    for s in range(g.num_silos):
        m = mask & (g.silo_of == s)
        per_silo.append(float(correct[m].mean()) if m.any() else float("nan"))
    return EvalResult(float(correct[mask].mean()), per_silo)


def evaluate(models, g: FederatedGraph, split: str = "test", drop_cross_edges: bool = False) -> EvalResult:
    """Predict each node with its silo's model and score ``split``."""
    if isinstance(models, ModelParams):
        models = [models] * g.num_silos
    view = g.intra_silo_graph() if drop_cross_edges else g
    ops = GraphOps.from_graph(view)
    logits = np.empty((g.num_nodes, models[0].dims[-1]))
    for s in range(g.num_silos):
        rows = g.silo_of == s
        out, _ = centralized_forward(ops, g.features, models[s])
        logits[rows] = out[rows]
    return accuracy(logits, g, split)


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    config: TrainConfig
    models: list[ModelParams]
    history: list[dict]
    ledger: CommLedger
    best: dict
    final: dict
    timings: list[dict]
    audit: dict | None = None

    @property
    def global_model(self) -> ModelParams:
        """Server model (the only model for ``global``; silo 0's for ``local``)."""
        return self.models[0]


class _SubgraphTrainer:
    """Exact-gradient training on each silo's own subgraph (or the whole graph)."""

    def __init__(self, g: FederatedGraph, groups: list[np.ndarray]):
        self.g = g
        self.groups = groups
        self.ops = []
        for nodes in groups:
            index = -np.ones(g.num_nodes, dtype=np.int64)
            index[nodes] = np.arange(len(nodes))
            keep = (index[g.edges[:, 0]] >= 0) & (index[g.edges[:, 1]] >= 0)
            sub = FederatedGraph(
                features=g.features[nodes], labels=g.labels[nodes],
                edges=index[g.edges[keep]], class_names=g.class_names,
            )
            self.ops.append(GraphOps.from_graph(sub))

    def forward(self, models):
        logits = np.empty((self.g.num_nodes, models[0].dims[-1]))
        caches = []
        for i, nodes in enumerate(self.groups):
            out, cache = centralized_forward(self.ops[i], self.g.features[nodes], models[i])
            logits[nodes] = out
            caches.append(cache)
        return logits, caches

    def grad_sums(self, models, caches, train_mask):
        sums, counts = [], []
        for i, nodes in enumerate(self.groups):
            w = train_mask[nodes].astype(np.float64)
            sums.append(exact_gradients(self.ops[i], models[i], caches[i], self.g.labels[nodes], w))
            counts.append(int(w.sum()))
        return sums, counts


def train(cfg: TrainConfig, g: FederatedGraph, workers: int = 1, audit: AuditLog | None = None,
          secmp_mode: str = "batched") -> TrainResult:
    if not g.is_partitioned:
        raise ValueError("train needs a partitioned graph")
    g = normalize_structure(g, cfg.symmetrize, cfg.self_loops)
    dims = [g.num_features] + [cfg.hidden_dim] * (cfg.num_layers - 1) + [g.num_classes]
    theta0 = init_params(cfg.arch, dims, sub_seed(cfg.seed, "init"))
    scheme = cfg.fed_scheme
    n_silos = g.num_silos
    ledger = CommLedger()
    train_mask = g.split_mask("train")
    labels = g.labels

    if scheme == "global":
        n_groups = 1
        trainer = _SubgraphTrainer(g, [np.arange(g.num_nodes)])
    elif scheme == "hifgl":
        n_groups = n_silos
        net = SecMPNetwork(g, t=cfg.t_privacy, seed=sub_seed(cfg.seed, "masks"),
                           dp_sigma=cfg.dp_sigma, workers=workers, ledger=ledger, audit=audit)
        silo_rows = [np.flatnonzero((g.silo_of == s) & train_mask) for s in range(n_silos)]
    else:
        n_groups = n_silos
        trainer = _SubgraphTrainer(g, [g.silo_nodes(s) for s in range(n_silos)])

    models = [theta0.copy() for _ in range(n_groups)]
    global_model = theta0.copy()
    opts = [Adam() if cfg.optimizer == "adam" else None for _ in range(n_groups)]
    xi = theta0.num_scalars
    n_train = int(train_mask.sum())

    def forward(ms, rnd):
        if scheme == "hifgl":
            trace = net.forward(ms, rnd, secmp_mode)
            return trace.logits, trace
        return trainer.forward(ms)

    def grads_of(ms, state):
        if scheme == "hifgl":
            sums, counts = [], []
            for s in range(n_silos):
                rows = silo_rows[s]
                sums.append(batch_local_gradients(state.rows(rows), labels[rows], ms[s]))
                counts.append(len(rows))
            ledger.charge(DEVICE_SILO, "gradients", xi * n_train)
            return sums, counts
        return trainer.grad_sums(ms, state, train_mask)

    history: list[dict] = []
    timings: list[dict] = []
    best = {"round": 0, "val_acc": -1.0, "test_acc": 0.0}
    stale = 0
    logits, state = forward(models, 0)
    for rnd in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = cfg.lr * cfg.lr_gamma ** ((rnd - 1) // cfg.lr_step)
        train_loss = mean_loss(logits, labels, train_mask)
        anchor = [m.copy() for m in models]
        if scheme == "hifgl":
            # every device pulls its silo's current model once per round
            ledger.charge(DEVICE_SILO, "model", xi * g.num_nodes)
        for step in range(cfg.local_steps):
            if step > 0:
                logits, state = forward(models, rnd)
            sums, counts = grads_of(models, state)
            for i in range(n_groups):
                if counts[i] == 0:
                    continue
                grad = sums[i].map(lambda x, c=counts[i]: x / c)
                if scheme == "fedprox":
                    grad = fedprox_regularize(grad, models[i], anchor[i], cfg.fedprox_mu)
                models[i] = apply_update(models[i], grad, cfg, lr, opts[i])
        if scheme in ("fedavg", "fedprox", "hifgl"):
            global_model = fedavg(models)
            ledger.charge(SILO_SERVER, "local_model", xi * n_silos)
            ledger.charge(SILO_SERVER, "global_model", xi * n_silos)
            models = [global_model.copy() for _ in range(n_groups)]
        ledger.rounds += 1
        if not all(m.is_finite() for m in models):
            raise FloatingPointError(f"non-finite parameters after round {rnd}")

        logits, state = forward(models, rnd)
        val = accuracy(logits, g, "val")
        test = accuracy(logits, g, "test")
        rec = {
            "round": rnd,
            "lr": lr,
            "train_loss": train_loss,
            "val_acc": val.global_acc,
            "test_acc": test.global_acc,
            "per_silo_acc": test.per_silo_acc,
        }
        history.append(rec)
        timings.append({"round": rnd, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)})
        log.info("round %d loss %.4f val %.4f test %.4f", rnd, train_loss, val.global_acc, test.global_acc)
        if val.global_acc > best["val_acc"]:
            best = {"round": rnd, "val_acc": val.global_acc, "test_acc": test.global_acc}
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                log.info("early stop after round %d", rnd)
                break

    final = {
        "round": history[-1]["round"],
        "train_loss": mean_loss(logits, labels, train_mask),
        "val_acc": history[-1]["val_acc"],
        "test_acc": history[-1]["test_acc"],
        "per_silo_acc": history[-1]["per_silo_acc"],
    }
    return TrainResult(cfg, models, history, ledger, best, final, timings,
                       audit.summary() if audit is not None else None)
