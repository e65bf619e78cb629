"""Reference implementations shared by the unit and acceptance tests."""
import numpy as np

from hifgl import nn
from hifgl.nn import Layer, ModelParams


def neighbors(g):
    out = [[] for _ in range(g.num_nodes)]
    for s, d in g.edges.tolist():
        out[d].append(s)
    return out


def loop_forward(g, params):
    """Per-node loops over neighbor lists, straight from the layer formulas."""
    N = neighbors(g)
    deg = [len(x) for x in N]
    H = g.features.copy()
    for k, layer in enumerate(params.layers):
        Z = np.zeros((g.num_nodes, layer.W.shape[1]))
        for u in range(g.num_nodes):
            if params.arch == "gcn":
                acc = sum(H[v] / (np.sqrt(deg[u]) * np.sqrt(deg[v])) for v in N[u])
                Z[u] = acc @ layer.W + layer.b
            elif params.arch == "sage":
                mean = sum(H[v] for v in N[u]) / deg[u]
                Z[u] = np.concatenate([H[u], mean]) @ layer.W + layer.b
            else:
                Z[u] = H[u] @ layer.W + layer.b
        H = np.maximum(Z, 0) if k < params.num_layers - 1 else Z
    return H


def unflat(template, flat):
    out, pos = [], 0
    for t in template.tensors():
        out.append(flat[pos:pos + t.size].reshape(t.shape))
        pos += t.size
    return ModelParams(template.arch, [Layer(out[2 * i], out[2 * i + 1]) for i in range(template.num_layers)])


def numeric_grad(f, params, eps=1e-5):
    flat = params.flat()
    g = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += eps
        dn[i] -= eps
        g[i] = (f(unflat(params, up)) - f(unflat(params, dn))) / (2 * eps)
    return g


def frozen_loss_oracle(g, params, trace, j, label):
    """Device j's loss with foreign contributions fixed at their recorded values.

    Rebuilt from neighbor lists: the foreign part of each aggregate is the sum
    over in-neighbors other than j, taken from the trace's recorded inputs.
    """
    N = neighbors(g)
    deg = g.degrees()
    h = g.features[j]
    for k, layer in enumerate(params.layers):
        recorded = trace.inputs[k]
        if params.arch == "gcn":
            foreign = sum((recorded[v] / np.sqrt(deg[v]) for v in N[j] if v != j), np.zeros_like(h))
            own = h / np.sqrt(deg[j]) if j in N[j] else 0.0
            z = (foreign + own) @ layer.W / np.sqrt(deg[j]) + layer.b
        elif params.arch == "sage":
            foreign = sum((recorded[v] for v in N[j] if v != j), np.zeros_like(h))
            own = h if j in N[j] else 0.0
            z = np.concatenate([h, (foreign + own) / deg[j]]) @ layer.W + layer.b
        else:
            z = h @ layer.W + layer.b
        h = np.maximum(z, 0) if k < params.num_layers - 1 else z
    p = nn.softmax(h)
    return float(-np.log(p[label]))
