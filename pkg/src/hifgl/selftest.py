"""Self-contained checks run by ``hifgl selftest``.

Each suite returns a :class:`SuiteResult`; none of them need a dataset.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import coding
from .graph import FederatedGraph, normalize_structure, partition_random
from .nn import (ARCHS, PROB_FLOOR, BatchTrace, GraphOps, Layer, ModelParams, batch_local_gradients,
                 centralized_forward, init_params, layer_update, message, relu, softmax)
from .secmp import SecMPNetwork, secmp_full_forward

SUITES = ("coding", "invertibility", "oracle", "gradcheck")
FAULTS = ("dup-beta",)


@dataclass
class SuiteResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _faulty_params(t: int) -> coding.CodingParams:
    p = coding.generate_params(t)
    betas = np.array(p.betas)
    betas[-1] = betas[0]
    # bypass generate_params on purpose: this is the corrupted fixture
    return coding.CodingParams(t, tuple(p.alphas), tuple(float(b) for b in betas), p.mask_seed)


def suite_coding(t_values=(1, 2, 3, 4), draws=250, seed=0, fault=None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(draws):
        t = t_values[i % len(t_values)]
        d = (1, 16, 64)[i % 3]
        params = _faulty_params(t) if fault == "dup-beta" else coding.generate_params(t, int(rng.integers(1 << 30)), "random")
        h1, h2 = rng.normal(size=d), rng.normal(size=d)
        try:
            s1 = coding.lcc_encode(h1, params, coding.sample_masks(rng, t, d))
            s2 = coding.lcc_encode(h2, params, coding.sample_masks(rng, t, d))
            back = coding.lcc_decode(s1, params)
            both = coding.lcc_decode(s1 + s2, params)
        except coding.CodingError as exc:
            return SuiteResult("coding", False, f"draw {i} (T={t}, d={d}): {exc}")
        err = max(np.abs(back - h1).max() / max(np.abs(h1).max(), 1e-12),
                  np.abs(both - h1 - h2).max() / max(np.abs(h1 + h2).max(), 1e-12))
        worst = max(worst, float(err))
        if not err <= 1e-6:
            return SuiteResult("coding", False, f"draw {i} (T={t}, d={d}): relative error {err:.2e}")
    return SuiteResult("coding", True, f"{draws} draws, T in {list(t_values)}, worst relative error {worst:.1e}")


def suite_invertibility(t_values=(1, 2, 3, 4), draws=100, seed=0, fault=None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    smallest = np.inf
    for i in range(draws):
        t = t_values[i % len(t_values)]
        params = _faulty_params(t) if fault == "dup-beta" else coding.generate_params(t, int(rng.integers(1 << 30)), "random")
        diag = coding.bottom_submatrix_nonsingular(params)
        smallest = min(smallest, min(abs(x) for x in diag.determinants))
        if not diag.invertible:
            return SuiteResult("invertibility", False, f"set {i} (T={t}): determinants {diag.determinants}")
    return SuiteResult("invertibility", True, f"{draws} parameter sets, smallest |det| {smallest:.3g}")


def _random_graph(rng, n, p, silos) -> FederatedGraph:
    pairs = np.argwhere(np.triu(rng.random((n, n)) < p, 1))
    g = FederatedGraph(features=rng.normal(size=(n, 8)), labels=rng.integers(0, 3, size=n),
                       edges=pairs.astype(np.int64).reshape(-1, 2), class_names=("a", "b", "c"))
    g = partition_random(g, silos, seed=int(rng.integers(1 << 30)))
    return normalize_structure(g)


def suite_oracle(graphs=6, seed=0, fault=None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(graphs):
        n = int(rng.integers(8, 65))
        g = _random_graph(rng, n, 0.1, int(rng.integers(1, 5)))
        params = init_params("gcn", [8, 16, 3], seed=i)
        want, _ = centralized_forward(GraphOps.from_graph(g), g.features, params)
        got, _ = secmp_full_forward(g, [params] * g.num_silos, t=1 + i % 4, seed=i)
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst <= 1e-5
    return SuiteResult("oracle", ok, f"{graphs} graphs, max |SecMP - centralized| {worst:.1e}")


def frozen_device_loss(params: ModelParams, trace: BatchTrace, j: int, label: int) -> float:
    """Device j's loss with everything it received from other devices held fixed.

    The device's own contribution to each aggregate is recomputed from
    ``params``; the foreign part is the recorded aggregate minus that share.
    """
    arch = params.arch
    deg = trace.degree[j:j + 1].astype(np.float64)
    loop = float(trace.self_loop[j])
    h = trace.inputs[0][j:j + 1]
    for k, layer in enumerate(params.layers):
        agg = None
        if arch != "mlp":
            foreign = trace.aggregates[k][j:j + 1] - loop * message(arch, trace.inputs[k][j:j + 1], deg)
            agg = foreign + loop * message(arch, h, deg)
        z = layer_update(arch, h, agg, deg, layer)
        h = relu(z) if k < params.num_layers - 1 else z
    p = softmax(h[0])
    return float(-np.log(max(p[label], PROB_FLOOR)))


def suite_gradcheck(instances=6, seed=0, eps=1e-6, fault=None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        arch = ARCHS[i % 3]
        g = _random_graph(rng, int(rng.integers(4, 17)), 0.3, 2)
        params = init_params(arch, [8, 6, 3], seed=i)
        trace = SecMPNetwork(g, t=1, seed=i).forward([params] * g.num_silos)
        j = int(rng.integers(g.num_nodes))
        label = int(g.labels[j])
        grad = batch_local_gradients(trace.rows([j]), np.array([label]), params).flat()
        flat = params.flat()
        num = np.empty_like(flat)
        for q in range(len(flat)):
            up, down = flat.copy(), flat.copy()
            up[q] += eps
            down[q] -= eps
            num[q] = (frozen_device_loss(_unflat(params, up), trace, j, label)
                      - frozen_device_loss(_unflat(params, down), trace, j, label)) / (2 * eps)
        err = float(np.abs(grad - num).max() / max(np.abs(num).max(), 1e-8))
        worst = max(worst, err)
    ok = worst <= 1e-4
    return SuiteResult("gradcheck", ok, f"{instances} instances, worst relative error {worst:.1e}")


def _unflat(template: ModelParams, flat: np.ndarray) -> ModelParams:
    out, pos = [], 0
    for tensor in template.tensors():
        out.append(flat[pos:pos + tensor.size].reshape(tensor.shape))
        pos += tensor.size
    return ModelParams(template.arch, [Layer(out[2 * k], out[2 * k + 1]) for k in range(template.num_layers)])


def run(suites=SUITES, t: int | None = None, fault: str | None = None) -> list[SuiteResult]:
    results = []
    for name in suites:
        start = time.perf_counter()
        if name == "coding":
            r = suite_coding((t,) if t else (1, 2, 3, 4), fault=fault)
        elif name == "invertibility":
            r = suite_invertibility((t,) if t else (1, 2, 3, 4), fault=fault)
        elif name == "oracle":
            r = suite_oracle(fault=fault)
        elif name == "gradcheck":
            r = suite_gradcheck(fault=fault)
        else:
            raise ValueError(f"unknown suite {name!r}")
        r.seconds = time.perf_counter() - start
        results.append(r)
    return results
