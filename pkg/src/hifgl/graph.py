"""Federated graph construction, partitioning and structural statistics."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")


class DatasetError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class LoadStats:
    dropped_edges: int = 0
    duplicate_edges: int = 0


@dataclass
class FederatedGraph:
    """Global ground truth the simulator distributes.

    ``edges`` is an (m, 2) int array of directed (src, dst) pairs; a message
    for the pair travels from src to dst, so the neighbors of ``u`` are the
    sources of edges ending in ``u``.
    """

    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    class_names: tuple[str, ...] = ()
    node_keys: tuple[str, ...] = ()
    silo_of: np.ndarray | None = None
    num_silos: int = 0
    split_of: np.ndarray | None = None
    load_stats: LoadStats = field(default_factory=LoadStats)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if not self.class_names:
            self.class_names = tuple(str(c) for c in range(int(self.labels.max(initial=-1)) + 1))
        if not self.node_keys:
            self.node_keys = tuple(str(i) for i in range(self.num_nodes))

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def is_partitioned(self) -> bool:
        return self.silo_of is not None

    def degrees(self) -> np.ndarray:
        """Neighbor counts |N_u| (in-degree, self-loops included)."""
        return np.bincount(self.edges[:, 1], minlength=self.num_nodes)

    def has_self_loop(self) -> np.ndarray:
        mask = np.zeros(self.num_nodes, dtype=bool)
        loops = self.edges[:, 0] == self.edges[:, 1]
        mask[self.edges[loops, 0]] = True
        return mask

    def silo_nodes(self, silo: int) -> np.ndarray:
        self._require_partition()
        return np.flatnonzero(self.silo_of == silo)

    def split_mask(self, split: str | int) -> np.ndarray:
        self._require_partition()
        code = SPLIT_NAMES.index(split) if isinstance(split, str) else split
        return self.split_of == code

    def cross_mask(self) -> np.ndarray:
        """True for edges whose endpoints sit in different silos."""
        self._require_partition()
        return self.silo_of[self.edges[:, 0]] != self.silo_of[self.edges[:, 1]]

    def intra_silo_graph(self) -> "FederatedGraph":
        """Copy with every cross-client edge removed."""
        return replace(self, edges=self.edges[~self.cross_mask()])

    def validate(self):
        n = self.num_nodes
        if self.labels.shape != (n,):
            raise DatasetError("labels must have one entry per node")
        if self.num_edges and (self.edges.min() < 0 or self.edges.max() >= n):
            raise DatasetError("edge endpoint out of range")
        if len(np.unique(self.edges, axis=0)) != self.num_edges:
            raise DatasetError("duplicate edges")
        if self.labels.size and self.labels.max() >= self.num_classes:
            raise DatasetError("class id out of range")
        if self.silo_of is not None:
            if self.silo_of.shape != (n,) or self.silo_of.min() < 0 or self.silo_of.max() >= self.num_silos:
                raise PartitionError("silo ids must cover every node and be < num_silos")

    def _require_partition(self):
        if self.silo_of is None:
            raise PartitionError("graph is not partitioned")


@dataclass(frozen=True)
class EgoGraph:
    node_id: int
    feature: np.ndarray
    label: int
    in_neighbors: tuple[tuple[int, int], ...]
    out_neighbors: tuple[tuple[int, int], ...]
    degree: int


@dataclass(frozen=True)
class FederatedSubgraph:
    """What a silo knows about its devices: their identities, nothing else."""

    silo_id: int
    device_ids: tuple[int, ...]


def load_dataset(content_path, cites_path) -> FederatedGraph:
    """Read the ``.content`` / ``.cites`` citation layout.

    Content rows are ``key f_1 ... f_F label``; cites rows are
    ``cited citing`` and become directed edges citing -> cited.
    """
    content_path, cites_path = Path(content_path), Path(cites_path)
    keys, feats, label_strs = [], [], []
    try:
        with open(content_path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) < 2:
                    raise DatasetError(f"{content_path}:{lineno}: row has no label")
                keys.append(parts[0])
                feats.append(parts[1:-1])
                label_strs.append(parts[-1])
    except OSError as exc:
        raise DatasetError(f"cannot read {content_path}: {exc}") from exc
    if not keys:
        raise DatasetError(f"{content_path} holds no nodes")
    widths = {len(f) for f in feats}
    if len(widths) != 1:
        raise DatasetError(f"{content_path}: inconsistent feature counts {sorted(widths)}")

    index = {}
    for i, k in enumerate(keys):
        if k in index:
            raise DatasetError(f"{content_path}: node key {k!r} appears twice")
        index[k] = i
    class_names: dict[str, int] = {}
    labels = np.array([class_names.setdefault(s, len(class_names)) for s in label_strs])
    features = np.array(feats, dtype=np.float64)

    stats = LoadStats()
    pairs = []
    seen = set()
    try:
        with open(cites_path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 2:
                    raise DatasetError(f"{cites_path}:{lineno}: expected two keys")
                cited, citing = parts
                if cited not in index or citing not in index:
                    stats.dropped_edges += 1
                    continue
                e = (index[citing], index[cited])
                if e in seen:
                    stats.duplicate_edges += 1
                    continue
                seen.add(e)
                pairs.append(e)
    except OSError as exc:
        raise DatasetError(f"cannot read {cites_path}: {exc}") from exc
    if stats.dropped_edges:
        log.warning("dropped %d citation rows naming unknown nodes", stats.dropped_edges)
    if stats.duplicate_edges:
        log.info("removed %d duplicate citation rows", stats.duplicate_edges)

    g = FederatedGraph(
        features=features,
        labels=labels,
        edges=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        class_names=tuple(class_names),
        node_keys=tuple(keys),
        load_stats=stats,
    )
    g.validate()
    return g


def partition_random(g: FederatedGraph, num_silos: int, seed: int = 0,
                     fractions=(0.6, 0.2, 0.2)) -> FederatedGraph:
    """Seeded near-equal random node partition plus a per-silo 6/2/2 split."""
    if num_silos < 1:
        raise PartitionError("num_silos must be >= 1")
    if num_silos > g.num_nodes:
        raise PartitionError(f"cannot place {g.num_nodes} nodes into {num_silos} non-empty silos")
    silo_seq, split_seq = np.random.SeedSequence(seed).spawn(2)
    perm = np.random.default_rng(silo_seq).permutation(g.num_nodes)
    silo_of = np.empty(g.num_nodes, dtype=np.int64)
    for s, block in enumerate(np.array_split(perm, num_silos)):
        silo_of[block] = s

    split_of = np.empty(g.num_nodes, dtype=np.int64)
    rng = np.random.default_rng(split_seq)
    for s in range(num_silos):
        members = rng.permutation(np.flatnonzero(silo_of == s))
        n_train = int(round(fractions[0] * len(members)))
        n_val = int(round(fractions[1] * len(members)))
        split_of[members[:n_train]] = TRAIN
        split_of[members[n_train:n_train + n_val]] = VAL
        split_of[members[n_train + n_val:]] = TEST
    return replace(g, silo_of=silo_of, num_silos=num_silos, split_of=split_of)


def normalize_structure(g: FederatedGraph, symmetrize: bool = True,
                        add_self_loops: bool = True) -> FederatedGraph:
    edges = g.edges
    if symmetrize:
        edges = np.vstack([edges, edges[:, ::-1]])
    if add_self_loops:
        loops = np.arange(g.num_nodes)
        edges = np.vstack([edges, np.stack([loops, loops], axis=1)])
    # unique also sorts by (src, dst), which fixes the edge order downstream
    edges = np.unique(edges.reshape(-1, 2), axis=0)
    return replace(g, edges=edges)


def build_ego_graphs(g: FederatedGraph) -> dict[int, EgoGraph]:
    if not g.is_partitioned:
        raise PartitionError("ego graphs need a partitioned graph")
    ins: list[list[tuple[int, int]]] = [[] for _ in range(g.num_nodes)]
    outs: list[list[tuple[int, int]]] = [[] for _ in range(g.num_nodes)]
    silo = g.silo_of
    for src, dst in g.edges.tolist():
        ins[dst].append((src, int(silo[src])))
        outs[src].append((dst, int(silo[dst])))
    egos = {}
    for v in range(g.num_nodes):
        egos[v] = EgoGraph(
            node_id=v,
            feature=g.features[v],
            label=int(g.labels[v]),
            in_neighbors=tuple(sorted(ins[v])),
            out_neighbors=tuple(sorted(outs[v])),
            degree=len(ins[v]),
        )
    return egos


def ego_edges(egos: dict[int, EgoGraph]) -> np.ndarray:
    """Reassemble the edge list from ego records (in-neighbor view)."""
    pairs = [(src, v) for v, ego in egos.items() for src, _ in ego.in_neighbors]
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def federated_subgraphs(g: FederatedGraph) -> list[FederatedSubgraph]:
    return [FederatedSubgraph(s, tuple(int(v) for v in g.silo_nodes(s))) for s in range(g.num_silos)]


@dataclass(frozen=True)
class LeakageReport:
    per_silo_count: tuple[int, ...]
    per_silo_fraction: tuple[float, ...]
    mean_fraction: float


def privacy_leakage(g: FederatedGraph) -> LeakageReport:
    """Per silo, how many nodes have at least one neighbor in another silo."""
    cross = g.cross_mask()
    exposed = np.zeros(g.num_nodes, dtype=bool)
    # either endpoint of a cross edge is a node with a foreign neighbor
    exposed[g.edges[cross, 0]] = True
    exposed[g.edges[cross, 1]] = True
    counts, fracs = [], []
    for s in range(g.num_silos):
        members = g.silo_of == s
        c = int(exposed[members].sum())
        counts.append(c)
        fracs.append(c / max(int(members.sum()), 1))
    return LeakageReport(tuple(counts), tuple(fracs), float(np.mean(fracs)))


def _undirected_pairs(g: FederatedGraph) -> np.ndarray:
    e = g.edges[g.edges[:, 0] != g.edges[:, 1]]
    return np.unique(np.sort(e, axis=1), axis=0)


@dataclass(frozen=True)
class SiloEdgeStats:
    nodes: tuple[int, ...]
    intra_edges: tuple[int, ...]
    cross_edges: int


def silo_edge_stats(g: FederatedGraph) -> SiloEdgeStats:
    """Undirected, loop-free edge counts: intra per silo and global cross."""
    pairs = _undirected_pairs(g)
    a, b = g.silo_of[pairs[:, 0]], g.silo_of[pairs[:, 1]]
    intra = np.bincount(a[a == b], minlength=g.num_silos)
    nodes = np.bincount(g.silo_of, minlength=g.num_silos)
    return SiloEdgeStats(tuple(int(x) for x in nodes), tuple(int(x) for x in intra), int((a != b).sum()))


def cross_edge_fraction(g: FederatedGraph) -> float:
    """Plain share of undirected, loop-free edges that cross silos."""
    pairs = _undirected_pairs(g)
    if len(pairs) == 0:
        return 0.0
    return float((g.silo_of[pairs[:, 0]] != g.silo_of[pairs[:, 1]]).mean())


def cross_edge_loss(g: FederatedGraph) -> float:
    """Edge loss a silo suffers when cross-client edges are dropped.

    For silo i with C cross edges in the federation and I_i edges of its own,
    the loss is C / (C + I_i); the result averages this over silos.  With one
    silo it is 0, and 1 when no silo has internal edges.
    """
    stats = silo_edge_stats(g)
    c = stats.cross_edges
    losses = [c / (c + i) if c + i else 0.0 for i in stats.intra_edges]
    return float(np.mean(losses))


def partition_to_json(g: FederatedGraph, **meta) -> str:
    """Stable JSON: node ids in ascending numeric order."""
    g._require_partition()
    nodes = {
        str(v): {"silo": int(g.silo_of[v]), "split": SPLIT_NAMES[int(g.split_of[v])]}
        for v in range(g.num_nodes)
    }
    doc = dict(meta)
    doc.update(num_nodes=g.num_nodes, num_silos=g.num_silos, nodes=nodes)
    return json.dumps(doc, indent=1) + "\n"


def apply_partition_json(g: FederatedGraph, text: str) -> FederatedGraph:
    doc = json.loads(text)
    if doc.get("num_nodes") != g.num_nodes:
        raise PartitionError(
            f"partition covers {doc.get('num_nodes')} nodes, dataset has {g.num_nodes}"
        )
    silo_of = np.empty(g.num_nodes, dtype=np.int64)
    split_of = np.empty(g.num_nodes, dtype=np.int64)
    for v in range(g.num_nodes):
        rec = doc["nodes"][str(v)]
        silo_of[v] = rec["silo"]
        split_of[v] = SPLIT_NAMES.index(rec["split"])
    out = replace(g, silo_of=silo_of, num_silos=int(doc["num_silos"]), split_of=split_of)
    out.validate()
    return out
