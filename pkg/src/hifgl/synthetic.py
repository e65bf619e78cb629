"""Seeded citation-like graphs written in the ``.content`` / ``.cites`` layout.

The generator mimics the coarse statistics of bag-of-words citation
benchmarks: sparse binary features drawn from class-specific vocabularies,
heavy-tailed degrees, and strong label homophily.  Defaults follow Cora's
size (2708 nodes, 1433 words, 7 classes, 5278 undirected links).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .graph import FederatedGraph


def make_citation_graph(num_nodes: int = 2708, num_features: int = 1433,
                        num_classes: int = 7, num_links: int = 5278,
                        homophily: float = 0.8, words_per_node: int = 18,
                        topic_strength: float = 0.35, seed: int = 0) -> FederatedGraph:
    rng = np.random.default_rng(seed)
    class_weights = rng.dirichlet(np.full(num_classes, 4.0))
    labels = rng.choice(num_classes, size=num_nodes, p=class_weights)

    # each class prefers a random subset of the vocabulary
    topic = np.zeros((num_classes, num_features))
    vocab_share = max(num_features // num_classes, 1)
    for c in range(num_classes):
        favored = rng.choice(num_features, size=vocab_share, replace=False)
        topic[c, favored] = rng.gamma(1.0, 1.0, size=vocab_share)
    background = rng.gamma(0.5, 1.0, size=num_features)
    background /= background.sum()
    topic /= topic.sum(axis=1, keepdims=True)

    features = np.zeros((num_nodes, num_features))
    for v in range(num_nodes):
        k = max(1, rng.poisson(words_per_node))
        p = topic_strength * topic[labels[v]] + (1 - topic_strength) * background
        words = rng.choice(num_features, size=k, p=p)
        features[v, words] = 1.0

    # heavy-tailed attachment propensity
    propensity = rng.pareto(2.0, size=num_nodes) + 1.0
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    pairs: set[tuple[int, int]] = set()
    prop_all = propensity / propensity.sum()
    attempts = 0
    while len(pairs) < num_links and attempts < 50 * num_links:
        attempts += 1
        u = int(rng.choice(num_nodes, p=prop_all))
        if rng.random() < homophily:
            pool = by_class[labels[u]]
            w = propensity[pool] / propensity[pool].sum()
            v = int(rng.choice(pool, p=w))
        else:
            v = int(rng.choice(num_nodes, p=prop_all))
        if u != v:
            pairs.add((min(u, v), max(u, v)))
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    return FederatedGraph(
        features=features,
        labels=labels,
        edges=edges,
        class_names=tuple(f"class_{c}" for c in range(num_classes)),
        node_keys=tuple(str(10000 + v) for v in range(num_nodes)),
    )


def write_dataset(g: FederatedGraph, directory, name: str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    content = directory / f"{name}.content"
    cites = directory / f"{name}.cites"
    with open(content, "w") as fh:
        for v in range(g.num_nodes):
            row = " ".join(str(int(x)) if float(x).is_integer() else repr(float(x)) for x in g.features[v])
            fh.write(f"{g.node_keys[v]}\t{row}\t{g.class_names[g.labels[v]]}\n")
    with open(cites, "w") as fh:
        # edges are (citing, cited); the file stores "cited citing"
        for src, dst in g.edges.tolist():
            fh.write(f"{g.node_keys[dst]}\t{g.node_keys[src]}\n")
    return content, cites
