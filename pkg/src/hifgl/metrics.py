"""Graph information gain, communication and storage reports.

The communication checks are exact equalities under this package's
accounting, so every ledger produced by ``federation.train`` can be
audited against closed forms rather than big-O statements.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import FederatedGraph, normalize_structure
from .secmp import CommLedger


class DegenerateGainError(ValueError):
    pass


@dataclass(frozen=True)
class GainReport:
    acc_model: float
    acc_lower: float
    acc_upper: float
    gain: float


def graph_information_gain(acc_model: float, acc_lower: float, acc_upper: float) -> float:
    """Share of the graph-derived accuracy a model keeps, lower bound mapped to 0 and upper to 1.

    Values outside [0, 1] are legal: a federated model can beat the centralized
    reference, or fall below the graph-free one.
    """
    span = acc_upper - acc_lower
    if span == 0:
        raise DegenerateGainError(f"upper and lower accuracy coincide ({acc_upper})")
    return (acc_model - acc_lower) / span


def gain_report(acc_model, acc_lower, acc_upper) -> GainReport:
    return GainReport(acc_model, acc_lower, acc_upper,
                      graph_information_gain(acc_model, acc_lower, acc_upper))


# -- communication ---------------------------------------------------------------

def device_device_closed_form(num_edges: int, layer_dims, t: int, num_param_pairs: int,
                              forward_passes: int = 1) -> int:
    """d(T+1) per directed edge per layer per pass, plus 3T+2 per parameter request."""
    per_pass = sum(num_edges * d * (t + 1) for d in layer_dims)
    return forward_passes * per_pass + num_param_pairs * (3 * t + 2)


def param_request_pairs(g: FederatedGraph) -> int:
    """Distinct (source device, destination silo) pairs."""
    if g.num_edges == 0:
        return 0
    return len({(int(s), int(g.silo_of[d])) for s, d in g.edges.tolist()})


@dataclass
class Check:
    name: str
    measured: int
    expected: int

    @property
    def ok(self) -> bool:
        return self.measured == self.expected


@dataclass
class CommReport:
    scheme: str
    xi: int
    rounds: int
    forward_passes: int
    checks: list[Check] = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme, "xi": self.xi, "rounds": self.rounds,
            "forward_passes": self.forward_passes, "all_ok": self.all_ok,
            "checks": [dict(asdict(c), ok=c.ok) for c in self.checks],
        }


def comm_report(ledger: CommLedger, g: FederatedGraph, cfg, xi: int | None = None) -> CommReport:
    """Compare a finished run's ledger against the closed forms.

    ``g`` may be the raw partitioned graph; it is normalized with the run's
    flags first, which is a no-op when already normalized.
    """
    g = normalize_structure(g, cfg.symmetrize, cfg.self_loops)
    dims = [g.num_features] + [cfg.hidden_dim] * (cfg.num_layers - 1) + [g.num_classes]
    if xi is None:
        from .nn import init_params
        xi = init_params(cfg.arch, dims, 0).num_scalars
    scheme = cfg.fed_scheme
    t = cfg.t_privacy
    rep = CommReport(scheme, xi, ledger.rounds, ledger.forward_passes)
    n = g.num_nodes
    n_train = int(g.split_mask("train").sum())
    passes = ledger.forward_passes
    steps = ledger.rounds * cfg.local_steps

    if scheme == "hifgl" and cfg.arch != "mlp":
        m = g.num_edges
        pairs = param_request_pairs(g)
        for k, d in enumerate(dims[:-1]):
            per = ledger.per_layer.get(k, {})
            rep.checks.append(Check(f"coded_shares layer {k}", int(per.get("coded_shares", 0)),
                                    passes * m * d * (t + 1)))
        rep.checks.append(Check("coding_params (one-time)",
                                int(ledger.per_payload.get("device_device/coding_params", 0)),
                                pairs * (3 * t + 2)))
        expected_dd = device_device_closed_form(m, dims[:-1], t, pairs, passes)
        agg = passes * sum(n * d * (t + 1) + n * d for d in dims[:-1])
    else:
        expected_dd = 0
        agg = 0
    rep.checks.append(Check("device_device total", ledger.device_device_scalars, expected_dd))

    if scheme == "hifgl":
        expected_ds = agg + ledger.rounds * xi * n + steps * xi * n_train
    else:
        expected_ds = 0
    rep.checks.append(Check("device_silo total", ledger.device_silo_scalars, expected_ds))

    federated = scheme in ("hifgl", "fedavg", "fedprox")
    expected_ss = ledger.rounds * 2 * xi * g.num_silos if federated else 0
    rep.checks.append(Check("silo_server total", ledger.silo_server_scalars, expected_ss))
    return rep


# -- storage -------------------------------------------------------------------------

@dataclass
class SpaceReport:
    num_silos: int
    xi: int
    t: int
    model_storage: int      # |G| copies of (model + coding parameters)
    feature_scalars: int
    edge_records: int       # federated: cross edges are known to both silos
    central_edge_records: int
    cross_edges: int
    delta: int              # extra storage beyond a centralized copy of the data
    delta_bound: int

    @property
    def within_bound(self) -> bool:
        return self.delta <= self.delta_bound

    def to_dict(self) -> dict:
        return dict(asdict(self), within_bound=self.within_bound)


def space_report(g: FederatedGraph, cfg, xi: int) -> SpaceReport:
    """Count what the federated deployment stores versus one centralized copy.

    The overhead is one model per silo plus a second record for every
    cross-silo edge; the 3T+2 coding parameters per silo are a constant and
    are listed in ``model_storage`` only.
    """
    from .graph import silo_edge_stats
    stats = silo_edge_stats(g)
    k = max(g.num_silos, 1)
    intra = int(sum(stats.intra_edges))
    cross = int(stats.cross_edges)
    central = intra + cross
    federated = intra + 2 * cross
    delta = k * xi + (federated - central)
    return SpaceReport(
        num_silos=k, xi=xi, t=cfg.t_privacy,
        model_storage=k * (xi + 3 * cfg.t_privacy + 2),
        feature_scalars=g.num_nodes * g.num_features,
        edge_records=federated, central_edge_records=central, cross_edges=cross,
        delta=delta, delta_bound=k * xi + cross,
    )


# -- rendering -----------------------------------------------------------------------

def to_json(obj) -> str:
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    elif hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    raise TypeError(type(x))


def text_table(rows: list[dict], columns: list[str] | None = None) -> str:
    """Aligned columns; floats in (0, 1] print with four decimals."""
    if not rows:
        return ""
    columns = columns or list(rows[0])

    def fmt(v):
        if isinstance(v, bool):
            return "yes" if v else "NO"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.rjust(w) if _numeric(v) else v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


def _numeric(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False
