"""Dense kernels for the split-form GNN layers, oracles and gradients.

Conventions used throughout:

* ``H @ W`` with row-vector embeddings; ``W`` is (in, out).
* A GCN layer on node ``u`` is ``b + (1/sqrt|N_u|) * sum_v (h_v / sqrt|N_v|) W``.
  The source scales by its own degree, the target by its own, so neither end
  needs the other's degree.
* GraphSage uses a full mean aggregator: ``[h_u, mean_v h_v] W + b``.
* ReLU between layers, softmax after the last one.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import FederatedGraph

ARCHS = ("gcn", "sage", "mlp")
PROB_FLOOR = 1e-12


class ModelError(ValueError):
    pass


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray


@dataclass
class ModelParams:
    arch: str
    layers: list[Layer]

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ModelError(f"unknown arch {self.arch!r}")
        dims = self.dims
        for k, layer in enumerate(self.layers):
            fan_in = layer.W.shape[0] // 2 if self.arch == "sage" else layer.W.shape[0]
            if fan_in != dims[k] or layer.b.shape != (layer.W.shape[1],):
                raise ModelError(f"layer {k} shapes do not chain: W{layer.W.shape} b{layer.b.shape}")

    @property
    def dims(self) -> tuple[int, ...]:
        first = self.layers[0].W.shape[0]
        if self.arch == "sage":
            first //= 2
        return (first,) + tuple(layer.W.shape[1] for layer in self.layers)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_scalars(self) -> int:
        return sum(layer.W.size + layer.b.size for layer in self.layers)

    def tensors(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, [Layer(l.W.copy(), l.b.copy()) for l in self.layers])

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.arch, [Layer(np.zeros_like(l.W), np.zeros_like(l.b)) for l in self.layers])

    def map(self, fn, *others: "ModelParams") -> "ModelParams":
        """Apply ``fn`` tensor-wise across this and ``others`` (same shapes)."""
        for o in others:
            if o.arch != self.arch or [t.shape for t in o.tensors()] != [t.shape for t in self.tensors()]:
                raise ModelError("parameter shapes differ")
        layers = []
        for k, layer in enumerate(self.layers):
            W = fn(layer.W, *(o.layers[k].W for o in others))
            b = fn(layer.b, *(o.layers[k].b for o in others))
            layers.append(Layer(W, b))
        return ModelParams(self.arch, layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())


def init_params(arch: str, dims, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if arch not in ARCHS:
        raise ModelError(f"unknown arch {arch!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        rows = 2 * fan_in if arch == "sage" else fan_in
        limit = np.sqrt(6.0 / (rows + fan_out))
        layers.append(Layer(rng.uniform(-limit, limit, size=(rows, fan_out)), np.zeros(fan_out)))
    return ModelParams(arch, layers)


# -- per-node kernels ---------------------------------------------------------

def source_side(h, degree: int) -> np.ndarray:
    if degree < 1:
        raise ModelError("degree must be >= 1; add self-loops first")
    return np.asarray(h, dtype=np.float64) / np.sqrt(degree)


def target_side(agg, degree: int, W, b) -> np.ndarray:
    if degree < 1:
        raise ModelError("degree must be >= 1; add self-loops first")
    agg = np.asarray(agg, dtype=np.float64)
    if agg.shape[-1] != W.shape[0]:
        raise ModelError(f"aggregate has dim {agg.shape[-1]}, layer expects {W.shape[0]}")
    return b + (agg @ W) / np.sqrt(degree)


def sage_source_side(h) -> np.ndarray:
    return np.asarray(h, dtype=np.float64)


def sage_target_side(agg, degree: int, h_self, W, b) -> np.ndarray:
    if degree < 1:
        raise ModelError("degree must be >= 1; add self-loops first")
    agg = np.asarray(agg, dtype=np.float64)
    h_self = np.asarray(h_self, dtype=np.float64)
    if agg.shape != h_self.shape or 2 * agg.shape[-1] != W.shape[0]:
        raise ModelError("sage layer dimension mismatch")
    return b + np.concatenate([h_self, agg / degree], axis=-1) @ W


def relu(x):
    return np.maximum(x, 0.0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probs, label: int) -> float:
    """Negative log-likelihood of ``label``; the probability is floored at 1e-12."""
    return float(-np.log(max(float(probs[label]), PROB_FLOOR)))


# -- traces -------------------------------------------------------------------

@dataclass
class BatchTrace:
    """Forward record for a set of devices, one row per device.

    ``inputs[k]`` is each device's own embedding entering layer k,
    ``aggregates[k]`` the decoded neighbor sum it received (None for MLP),
    ``pre[k]`` the layer output before activation.
    """

    arch: str
    degree: np.ndarray
    self_loop: np.ndarray
    inputs: list[np.ndarray] = field(default_factory=list)
    aggregates: list[np.ndarray | None] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def rows(self, idx) -> "BatchTrace":
        idx = np.asarray(idx)
        return BatchTrace(
            self.arch,
            self.degree[idx],
            self.self_loop[idx],
            [x[idx] for x in self.inputs],
            [None if a is None else a[idx] for a in self.aggregates],
            [z[idx] for z in self.pre],
        )

    def device(self, j: int) -> "ForwardTrace":
        t = self.rows([j])
        return ForwardTrace(t)


@dataclass
class ForwardTrace:
    """One device's forward record (a single-row :class:`BatchTrace`)."""

    batch: BatchTrace
    clamped: bool = False

    @property
    def arch(self) -> str:
        return self.batch.arch

    @property
    def logits(self) -> np.ndarray:
        return self.batch.logits[0]

    @property
    def probs(self) -> np.ndarray:
        return self.batch.probs[0]

    def loss(self, label: int) -> float:
        p = self.probs
        self.clamped = bool(p[label] < PROB_FLOOR)
        return cross_entropy_loss(p, label)


def layer_update(arch: str, inp: np.ndarray, agg: np.ndarray | None, degree: np.ndarray,
                 layer: Layer) -> np.ndarray:
    """Target-side update for a batch of rows (pre-activation)."""
    if arch == "gcn":
        return layer.b + (agg @ layer.W) / np.sqrt(degree)[:, None]
    if arch == "sage":
        return layer.b + np.concatenate([inp, agg / degree[:, None]], axis=1) @ layer.W
    return layer.b + inp @ layer.W


def message(arch: str, H: np.ndarray, degree: np.ndarray) -> np.ndarray:
    """Source-side transform for a batch of rows."""
    if arch == "gcn":
        return H / np.sqrt(degree)[:, None]
    return H


# -- local (stop-gradient) backward -------------------------------------------

def batch_local_gradients(trace: BatchTrace, labels: np.ndarray, params: ModelParams,
                          weights: np.ndarray | None = None) -> ModelParams:
    """Sum over rows of each device's local-path gradient of its loss.

    Aggregates received from other devices are constants.  A device's own
    contribution to its aggregate travels through its self-loop, which it
    computed itself, so gradient flows along that path only.
    ``weights`` scales each row's loss (0 drops the row).
    """
    if trace.arch != params.arch:
        raise ModelError(f"trace arch {trace.arch} does not match params arch {params.arch}")
    n = trace.logits.shape[0]
    labels = np.asarray(labels)
    G = softmax(trace.logits)
    G[np.arange(n), labels] -= 1.0
    if weights is not None:
        G *= np.asarray(weights, dtype=np.float64)[:, None]
    deg = trace.degree.astype(np.float64)
    loop = trace.self_loop.astype(np.float64)
    grads: list[Layer] = [None] * params.num_layers  # type: ignore[list-item]
    for k in reversed(range(params.num_layers)):
        layer = params.layers[k]
        inp, agg = trace.inputs[k], trace.aggregates[k]
        if params.arch == "gcn":
            x = agg / np.sqrt(deg)[:, None]
            dW = x.T @ G
            dH = (G @ layer.W.T) * (loop / deg)[:, None]
        elif params.arch == "sage":
            x = np.concatenate([inp, agg / deg[:, None]], axis=1)
            dW = x.T @ G
            dX = G @ layer.W.T
            d_in = inp.shape[1]
            dH = dX[:, :d_in] + dX[:, d_in:] * (loop / deg)[:, None]
        else:
            dW = inp.T @ G
            dH = G @ layer.W.T
        grads[k] = Layer(dW, G.sum(axis=0))
        if k > 0:
            G = dH * (trace.pre[k - 1] > 0)
    return ModelParams(params.arch, grads)


def local_gradients(trace: ForwardTrace, label: int, params: ModelParams) -> ModelParams:
    """Gradient of one device's loss along its own computation path."""
    return batch_local_gradients(trace.batch, np.array([label]), params)


# -- centralized forward / exact backward ------------------------------------

@dataclass
class GraphOps:
    """Sparse operators of a (normalized) graph for centralized computation."""

    n: int
    degree: np.ndarray
    self_loop: np.ndarray
    S: sp.csr_matrix  # S[u, v] = 1 iff v in N(u)

    @classmethod
    def from_graph(cls, g: FederatedGraph) -> "GraphOps":
        n = g.num_nodes
        src, dst = g.edges[:, 0], g.edges[:, 1]
        S = sp.csr_matrix((np.ones(len(src)), (dst, src)), shape=(n, n))
        degree = g.degrees()
        if (degree < 1).any():
            raise ModelError("every node needs at least one neighbor; add self-loops")
        return cls(n, degree, g.has_self_loop(), S)

    def gcn_matrix(self) -> sp.csr_matrix:
        r = 1.0 / np.sqrt(self.degree)
        return sp.diags(r) @ self.S @ sp.diags(r)

    def mean_matrix(self) -> sp.csr_matrix:
        return sp.diags(1.0 / self.degree) @ self.S


def centralized_forward(ops: GraphOps, X: np.ndarray, params: ModelParams):
    """Unsplit forward; returns (logits, cache) where cache feeds :func:`exact_gradients`."""
    A_gcn = ops.gcn_matrix() if params.arch == "gcn" else None
    M = ops.mean_matrix() if params.arch == "sage" else None
    H = X
    cache = []
    for k, layer in enumerate(params.layers):
        if params.arch == "gcn":
            agg = A_gcn @ H
            Z = agg @ layer.W + layer.b
        elif params.arch == "sage":
            agg = np.concatenate([H, M @ H], axis=1)
            Z = agg @ layer.W + layer.b
        else:
            agg = H
            Z = H @ layer.W + layer.b
        cache.append((H, agg, Z))
        H = relu(Z) if k < params.num_layers - 1 else Z
    return H, cache


def centralized_gcn_forward(g: FederatedGraph, params: ModelParams) -> np.ndarray:
    """Textbook GCN forward over the whole graph; the SecMP reference."""
    if params.arch != "gcn":
        raise ModelError("centralized_gcn_forward needs a gcn model")
    logits, _ = centralized_forward(GraphOps.from_graph(g), g.features, params)
    return logits


def exact_gradients(ops: GraphOps, params: ModelParams, cache, labels: np.ndarray,
                    weights: np.ndarray) -> ModelParams:
    """Full backprop of ``sum_j weights[j] * loss_j`` through the graph."""
    logits = cache[-1][2]
    n = logits.shape[0]
    G = softmax(logits)
    G[np.arange(n), labels] -= 1.0
    G *= weights[:, None]
    A_gcn = ops.gcn_matrix() if params.arch == "gcn" else None
    M = ops.mean_matrix() if params.arch == "sage" else None
    grads: list[Layer] = [None] * params.num_layers  # type: ignore[list-item]
    for k in reversed(range(params.num_layers)):
        layer = params.layers[k]
        H, agg, Z = cache[k]
        grads[k] = Layer(agg.T @ G, G.sum(axis=0))
        if k == 0:
            break
        dAgg = G @ layer.W.T
        if params.arch == "gcn":
            dH = A_gcn.T @ dAgg
        elif params.arch == "sage":
            d = H.shape[1]
            dH = dAgg[:, :d] + M.T @ dAgg[:, d:]
        else:
            dH = dAgg
        G = dH * (cache[k - 1][2] > 0)
    return ModelParams(params.arch, grads)


def mean_loss(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    p = softmax(logits[mask])
    picked = np.maximum(p[np.arange(len(p)), labels[mask]], PROB_FLOOR)
    return float(-np.log(picked).mean())


# -- checkpoints --------------------------------------------------------------

_MAGIC = b"HIFGLCK1"


def save_checkpoint(path, params: ModelParams, **meta) -> None:
    """Write a JSON header then little-endian float64 tensors (W0, b0, W1, ...)."""
    header = {
        "arch": params.arch,
        "dims": list(params.dims),
        "order": [f"{kind}{k}" for k in range(params.num_layers) for kind in ("W", "b")],
        "shapes": [list(t.shape) for t in params.tensors()],
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in params.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ModelError(f"{path} is not a checkpoint")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size))
        tensors = []
        for shape in header["shapes"]:
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if data.size != count:
                raise ModelError(f"{path} is truncated")
            tensors.append(data.reshape(shape).astype(np.float64))
    layers = [Layer(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)]
    return ModelParams(header["arch"], layers), header.get("meta", {})
