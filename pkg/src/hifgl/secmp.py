"""Secret message passing between device actors, with byte accounting.

One GNN layer runs three barrier-separated steps:

1. privatized message: every device scales its embedding (source side),
   hides it in a Lagrange share bundle built with the *destination's* silo
   points, and delivers the bundle to the destination, which keeps only a
   running sum;
2. secure aggregation: each device hands its summed bundle to its own silo,
   which decodes at beta_1 and returns the plain neighbor sum;
3. neighbor-agnostic update: the device applies the target-side transform
   with its own degree and its silo's weights.

Two execution routes produce the same numbers: ``actor`` walks devices and
messages one at a time through the per-operation functions below, ``batched``
vectorizes the same steps per destination silo.
"""
from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import coding
from .coding import CodingParams, ShareBundle
from .graph import EgoGraph, FederatedGraph, build_ego_graphs
from .nn import BatchTrace, ModelParams, layer_update, message, relu, sage_source_side, source_side

log = logging.getLogger(__name__)

DEVICE_DEVICE = "device_device"
DEVICE_SILO = "device_silo"
SILO_SERVER = "silo_server"

# payload kinds a silo may legitimately receive
SILO_INBOUND = frozenset({"aggregated_shares", "gradients", "global_model"})
DEVICE_INBOUND = frozenset({"coded_shares", "coding_params", "decoded_aggregate", "model"})
_MAX_KEPT = 200


class ProtocolError(RuntimeError):
    """A round barrier or routing rule was violated."""


# -- accounting ---------------------------------------------------------------

@dataclass
class CommLedger:
    device_device_scalars: int = 0
    device_silo_scalars: int = 0
    silo_server_scalars: int = 0
    per_payload: Counter = field(default_factory=Counter)
    per_layer: dict = field(default_factory=dict)
    param_requests: int = 0
    forward_passes: int = 0
    rounds: int = 0

    def charge(self, channel: str, payload: str, scalars: int, layer: int | None = None):
        if scalars < 0:
            raise ValueError("scalar counts are nonnegative")
        scalars = int(scalars)
        if channel == DEVICE_DEVICE:
            self.device_device_scalars += scalars
        elif channel == DEVICE_SILO:
            self.device_silo_scalars += scalars
        elif channel == SILO_SERVER:
            self.silo_server_scalars += scalars
        else:
            raise ValueError(f"unknown channel {channel!r}")
        self.per_payload[f"{channel}/{payload}"] += scalars
        if layer is not None and channel == DEVICE_DEVICE:
            per = self.per_layer.setdefault(layer, Counter())
            per[payload] += scalars

    def to_dict(self) -> dict:
        return {
            "device_device_scalars": self.device_device_scalars,
            "device_silo_scalars": self.device_silo_scalars,
            "silo_server_scalars": self.silo_server_scalars,
            "param_requests": self.param_requests,
            "forward_passes": self.forward_passes,
            "rounds": self.rounds,
            "per_payload": dict(sorted(self.per_payload.items())),
            "per_layer": {str(k): dict(sorted(v.items())) for k, v in sorted(self.per_layer.items())},
        }


class AuditLog:
    """Records every cross-boundary payload and checks the routing rules.

    Violations: a silo receiving anything but aggregated shares, gradients
    or model parameters; a silo receiving a payload from a device it does not
    own; a device receiving raw embeddings.  An aggregated bundle with exactly
    one foreign contributor is the known single-neighbor exposure: it is
    flagged unless that contributor's message was noise-perturbed.
    """

    def __init__(self, path=None):
        self.counts: Counter = Counter()
        self.violations: list[dict] = []
        self.num_violations = 0
        self.flags: list[dict] = []
        self.num_flags = 0
        self.num_perturbed_single = 0
        self._fh = open(path, "w") if path else None
        if self._fh:
            self._fh.write("round\tlayer\tsrc_kind\tdst_kind\tpayload_kind\tscalar_count\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def record(self, rnd: int, layer: int, src_kind: str, dst_kind: str, payload_kind: str,
               scalar_count: int, times: int = 1):
        self.counts[(src_kind, dst_kind, payload_kind)] += times
        if self._fh:
            line = f"{rnd}\t{layer}\t{src_kind}\t{dst_kind}\t{payload_kind}\t{scalar_count}\n"
            self._fh.write(line * times)
        if dst_kind == "silo" and payload_kind not in SILO_INBOUND:
            self._violation(rnd, layer, f"silo received {payload_kind}")
        if dst_kind == "device" and payload_kind not in DEVICE_INBOUND:
            self._violation(rnd, layer, f"device received {payload_kind}")

    def check_sender(self, rnd: int, layer: int, sender_silo: int, silo: int, times: int = 1):
        if sender_silo != silo:
            self._violation(rnd, layer, f"silo {silo} received a payload naming a device of silo {sender_silo}", times)

    def single_neighbor(self, rnd: int, layer: int, device: int, perturbed: bool):
        if perturbed:
            self.num_perturbed_single += 1
            return
        self.num_flags += 1
        if len(self.flags) < _MAX_KEPT:
            self.flags.append({"round": rnd, "layer": layer, "device": int(device),
                               "kind": "single_neighbor_exposure"})

    def _violation(self, rnd, layer, what, times=1):
        self.num_violations += times
        if len(self.violations) < _MAX_KEPT:
            self.violations.append({"round": rnd, "layer": layer, "what": what})

    def summary(self) -> dict:
        return {
            "violations": self.num_violations,
            "single_neighbor_flags": self.num_flags,
            "single_neighbor_perturbed": self.num_perturbed_single,
            "payload_counts": {"/".join(k): v for k, v in sorted(self.counts.items())},
            "violation_examples": self.violations[:20],
            "flag_examples": self.flags[:20],
        }


# -- actors ---------------------------------------------------------------------

@dataclass
class DeviceState:
    ego: EgoGraph
    silo_id: int
    current_embedding: np.ndarray
    has_self_loop: bool = True
    pending_shares: dict[int, np.ndarray] = field(default_factory=dict)
    received: int = 0
    foreign_received: int = 0
    perturbed_received: int = 0
    param_cache: dict[int, CodingParams] = field(default_factory=dict)

    @property
    def node_id(self) -> int:
        return self.ego.node_id

    @property
    def degree(self) -> int:
        return self.ego.degree

    def open_round(self, t: int, d: int):
        self.pending_shares = {k: np.zeros(d) for k in range(t + 1)}
        self.received = 0
        self.foreign_received = 0
        self.perturbed_received = 0


@dataclass
class SiloState:
    silo_id: int
    params: CodingParams
    model: ModelParams
    device_ids: tuple[int, ...]


def request_params(requester: DeviceState, target_silo: SiloState,
                   ledger: CommLedger | None = None, layer: int | None = None) -> CodingParams:
    """Evaluation points of ``target_silo``; the first request per silo is charged.

    The points reach the requester through the target device, so the charge
    (the full 3T+2 parameter size) lands on the device-device channel.
    """
    if target_silo is None:
        raise ProtocolError("unknown silo")
    sid = target_silo.silo_id
    if sid in requester.param_cache:
        return requester.param_cache[sid]
    p = target_silo.params
    view = CodingParams(t=p.t, alphas=p.alphas, betas=p.betas)
    requester.param_cache[sid] = view
    if ledger is not None:
        ledger.charge(DEVICE_DEVICE, "coding_params", p.size, layer)
        ledger.param_requests += 1
    return view


def dp_guard(embedding, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise of scale ``sigma``; ``sigma == 0`` is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    embedding = np.asarray(embedding, dtype=np.float64)
    if sigma == 0:
        return embedding.copy()
    return embedding + rng.normal(0.0, sigma, size=embedding.shape)


def privatized_message(src: DeviceState, dst: DeviceState, layer: int, view: CodingParams,
                       rng: np.random.Generator, arch: str = "gcn",
                       ledger: CommLedger | None = None, audit: AuditLog | None = None,
                       dp_sigma: float = 0.0, rnd: int = 0) -> ShareBundle:
    """Encode ``src``'s source-side embedding for ``dst`` and deliver it."""
    h = src.current_embedding
    msg = source_side(h, src.degree) if arch == "gcn" else sage_source_side(h)
    if dp_sigma > 0:
        msg = dp_guard(msg, dp_sigma, rng)
    masks = coding.sample_masks(rng, view.t, msg.shape[0])
    bundle = coding.lcc_encode(msg, view, masks)
    if not dst.pending_shares:
        dst.open_round(view.t, msg.shape[0])
    if len(dst.pending_shares) != len(bundle) or dst.pending_shares[0].shape[0] != bundle.dim:
        raise ProtocolError(f"device {dst.node_id} expects a different bundle shape")
    for k in range(len(bundle)):
        dst.pending_shares[k] += bundle.shares[k]
    dst.received += 1
    if src.node_id != dst.node_id:
        dst.foreign_received += 1
        dst.perturbed_received += int(dp_sigma > 0)
    size = bundle.dim * len(bundle)
    if ledger is not None:
        ledger.charge(DEVICE_DEVICE, "coded_shares", size, layer)
    if audit is not None:
        audit.record(rnd, layer, "device", "device", "coded_shares", size)
    return bundle


def secure_aggregate(dst: DeviceState, home_silo: SiloState, layer: int,
                     expected: int | None = None, ledger: CommLedger | None = None,
                     audit: AuditLog | None = None, rnd: int = 0) -> np.ndarray:
    """Have the home silo decode ``dst``'s summed bundle; returns the plain sum."""
    n_expected = dst.degree if expected is None else expected
    if dst.received != n_expected:
        raise ProtocolError(
            f"device {dst.node_id} has {dst.received} of {n_expected} deliveries for layer {layer}"
        )
    if dst.silo_id != home_silo.silo_id:
        raise ProtocolError(f"device {dst.node_id} is not served by silo {home_silo.silo_id}")
    summed = ShareBundle(np.vstack([dst.pending_shares[k] for k in sorted(dst.pending_shares)]))
    up = summed.dim * len(summed)
    if ledger is not None:
        ledger.charge(DEVICE_SILO, "aggregated_shares", up)
    if audit is not None:
        audit.record(rnd, layer, "device", "silo", "aggregated_shares", up)
        audit.check_sender(rnd, layer, dst.silo_id, home_silo.silo_id)
        if dst.foreign_received == 1:
            audit.single_neighbor(rnd, layer, dst.node_id, dst.perturbed_received == 1)
    decoded = coding.lcc_decode(summed, home_silo.params)
    if ledger is not None:
        ledger.charge(DEVICE_SILO, "decoded_aggregate", summed.dim)
    if audit is not None:
        audit.record(rnd, layer, "silo", "device", "decoded_aggregate", summed.dim)
    dst.pending_shares = {}
    return decoded


def neighbor_agnostic_update(dst: DeviceState, decoded: np.ndarray, model: ModelParams,
                             layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply layer ``layer`` of ``model`` using only ``dst``'s own degree.

    Returns (pre_activation, new_embedding); ReLU except after the last layer.
    """
    if not 0 <= layer < model.num_layers:
        raise ProtocolError(f"layer {layer} out of range for a {model.num_layers}-layer model")
    z = layer_update(model.arch, dst.current_embedding[None, :], decoded[None, :],
                     np.array([dst.degree], dtype=np.float64), model.layers[layer])[0]
    h = relu(z) if layer < model.num_layers - 1 else z
    dst.current_embedding = h
    return z, h


# -- network ----------------------------------------------------------------------

@dataclass
class _SiloPlan:
    silo: int
    dst_nodes: np.ndarray      # ascending destination ids
    src: np.ndarray            # edge sources, grouped by dst then ascending src
    seg_starts: np.ndarray     # first edge of each dst segment
    dp_edges: np.ndarray       # bool per edge: perturb this message when dp is on


class SecMPNetwork:
    """All devices and silos of a partitioned, normalized graph."""

    def __init__(self, g: FederatedGraph, t: int = 1, seed: int = 0, dp_sigma: float = 0.0,
                 workers: int = 1, ledger: CommLedger | None = None,
                 audit: AuditLog | None = None, point_scheme: str = "canonical"):
        if not g.is_partitioned:
            raise ProtocolError("SecMP needs a partitioned graph")
        if dp_sigma < 0:
            raise ValueError("dp_sigma must be >= 0")
        self.g = g
        self.t = t
        self.dp_sigma = float(dp_sigma)
        self.workers = max(1, int(workers))
        self.ledger = ledger if ledger is not None else CommLedger()
        self.audit = audit
        seq = np.random.SeedSequence(seed)
        points_seq, self._mask_seq, self._dp_seq = seq.spawn(3)
        point_seeds = points_seq.generate_state(g.num_silos)
        self.silo_params = [coding.generate_params(t, int(s), point_scheme) for s in point_seeds]
        self.degree = g.degrees()
        if (self.degree < 1).any():
            raise ProtocolError("isolated nodes present; normalize with self-loops first")
        self.self_loop = g.has_self_loop()
        self._requested: set[tuple[int, int]] = set()
        self._build_plans()
        self._devices: dict[int, DeviceState] | None = None

    def _build_plans(self):
        g = self.g
        src, dst = g.edges[:, 0], g.edges[:, 1]
        order = np.lexsort((src, dst, g.silo_of[dst]))
        src, dst = src[order], dst[order]
        foreign = src != dst
        self.foreign_in = np.bincount(dst[foreign], minlength=g.num_nodes)
        single = self.foreign_in == 1
        plans = []
        for s in range(g.num_silos):
            sel = g.silo_of[dst] == s
            s_src, s_dst = src[sel], dst[sel]
            nodes, starts = np.unique(s_dst, return_index=True)
            if len(nodes) != int((g.silo_of == s).sum()):
                raise ProtocolError(f"silo {s} has a device without incoming messages")
            plans.append(_SiloPlan(s, nodes, s_src, starts, single[s_dst] & (s_src != s_dst)))
        self.plans = plans
        # parameter requests: source device -> silo of each destination
        pairs = np.unique(np.stack([g.edges[:, 0], g.silo_of[g.edges[:, 1]]], axis=1), axis=0)
        self.request_pairs = [tuple(p) for p in pairs.tolist()]

    @property
    def num_edges(self) -> int:
        return self.g.num_edges

    def silo_states(self, models: list[ModelParams]) -> list[SiloState]:
        return [
            SiloState(s, self.silo_params[s], models[s], tuple(int(v) for v in self.plans[s].dst_nodes))
            for s in range(self.g.num_silos)
        ]

    def forward(self, models: list[ModelParams], rnd: int = 0, mode: str = "batched") -> BatchTrace:
        """Run every layer of SecMP; device ``v`` uses its home silo's model."""
        if len(models) != self.g.num_silos:
            raise ProtocolError(f"need one model per silo, got {len(models)}")
        arch = models[0].arch
        if any(m.arch != arch or m.dims != models[0].dims for m in models):
            raise ProtocolError("silo models must share an architecture")
        self.ledger.forward_passes += 1
        if arch != "mlp":
            self._charge_requests(rnd)
        if mode == "batched":
            return self._forward_batched(models, rnd)
        if mode == "actor":
            return self._forward_actor(models, rnd)
        raise ValueError(f"unknown mode {mode!r}")

    def _charge_requests(self, rnd: int):
        size = self.silo_params[0].size
        new = 0
        for pair in self.request_pairs:
            if pair not in self._requested:
                self._requested.add(pair)
                new += 1
        if new:
            self.ledger.charge(DEVICE_DEVICE, "coding_params", new * size, 0)
            self.ledger.param_requests += new
            if self.audit:
                self.audit.record(rnd, 0, "device", "device", "coding_params", size, times=new)

    def _trace(self, arch: str) -> BatchTrace:
        return BatchTrace(arch, self.degree.astype(np.float64), self.self_loop.copy())

    def _forward_batched(self, models, rnd) -> BatchTrace:
        g = self.g
        arch = models[0].arch
        trace = self._trace(arch)
        H = g.features
        n_layers = models[0].num_layers
        for k in range(n_layers):
            d = H.shape[1]
            trace.inputs.append(H)
            Z = np.empty((g.num_nodes, models[0].dims[k + 1]))
            if arch == "mlp":
                for s, plan in enumerate(self.plans):
                    rows = plan.dst_nodes
                    Z[rows] = layer_update(arch, H[rows], None, self.degree[rows], models[s].layers[k])
                trace.aggregates.append(None)
            else:
                M = message(arch, H, self.degree.astype(np.float64))
                A = np.empty_like(H)

                def run(plan, _M=M, _k=k):
                    return self._silo_layer(plan, _M, _k, rnd)

                if self.workers > 1:
                    with ThreadPoolExecutor(self.workers) as pool:
                        results = list(pool.map(run, self.plans))
                else:
                    results = [run(p) for p in self.plans]
                for plan, (decoded, n_perturbed) in zip(self.plans, results):
                    rows = plan.dst_nodes
                    A[rows] = decoded
                    self._account_silo_layer(plan, k, d, rnd)
                    Z[rows] = layer_update(arch, H[rows], decoded, self.degree[rows],
                                           models[plan.silo].layers[k])
                trace.aggregates.append(A)
            trace.pre.append(Z)
            H = relu(Z) if k < n_layers - 1 else Z
        return trace

    def _rng(self, base: np.random.SeedSequence, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([int(x) for x in base.generate_state(2)] + list(key)))

    def _silo_layer(self, plan: _SiloPlan, M: np.ndarray, k: int, rnd: int):
        params = self.silo_params[plan.silo]
        U = coding.encoding_matrix(params)
        t = params.t
        d = M.shape[1]
        msgs = M[plan.src]
        n_perturbed = 0
        if self.dp_sigma > 0 and plan.dp_edges.any():
            rng_dp = self._rng(self._dp_seq, rnd, k, plan.silo)
            msgs = msgs.copy()
            idx = np.flatnonzero(plan.dp_edges)
            msgs[idx] += rng_dp.normal(0.0, self.dp_sigma, size=(len(idx), d))
            n_perturbed = len(idx)
        rng = self._rng(self._mask_seq, rnd, k, plan.silo)
        sums = np.zeros((len(plan.dst_nodes), t + 1, d))
        # chunk over whole destination segments to bound memory
        budget = max(1, (1 << 22) // ((t + 1) * d))
        seg_ends = np.append(plan.seg_starts[1:], len(plan.src))
        i = 0
        n_seg = len(plan.seg_starts)
        while i < n_seg:
            j = i + 1
            while j < n_seg and seg_ends[j] - plan.seg_starts[i] <= budget:
                j += 1
            lo, hi = plan.seg_starts[i], seg_ends[j - 1]
            masks = rng.uniform(-1.0, 1.0, size=(hi - lo, t, d))
            enc = coding.encode_many(msgs[lo:hi], params, masks, U)
            sums[i:j] = np.add.reduceat(enc, plan.seg_starts[i:j] - lo, axis=0)
            i = j
        decoded = coding.decode_many(sums, params)
        return decoded, n_perturbed

    def _account_silo_layer(self, plan: _SiloPlan, k: int, d: int, rnd: int):
        t = self.t
        m = len(plan.src)
        n = len(plan.dst_nodes)
        self.ledger.charge(DEVICE_DEVICE, "coded_shares", m * d * (t + 1), k)
        self.ledger.charge(DEVICE_SILO, "aggregated_shares", n * d * (t + 1))
        self.ledger.charge(DEVICE_SILO, "decoded_aggregate", n * d)
        a = self.audit
        if a is None:
            return
        a.record(rnd, k, "device", "device", "coded_shares", d * (t + 1), times=m)
        a.record(rnd, k, "device", "silo", "aggregated_shares", d * (t + 1), times=n)
        senders = self.g.silo_of[plan.dst_nodes]
        for foreign_silo in np.unique(senders[senders != plan.silo]):
            a.check_sender(rnd, k, int(foreign_silo), plan.silo, int((senders == foreign_silo).sum()))
        for v in plan.dst_nodes[self.foreign_in[plan.dst_nodes] == 1]:
            a.single_neighbor(rnd, k, v, self.dp_sigma > 0)
        a.record(rnd, k, "silo", "device", "decoded_aggregate", d, times=n)

    # actor route -----------------------------------------------------------

    def devices(self) -> dict[int, DeviceState]:
        if self._devices is None:
            egos = build_ego_graphs(self.g)
            self._devices = {
                v: DeviceState(ego, int(self.g.silo_of[v]), ego.feature.copy(), bool(self.self_loop[v]))
                for v, ego in egos.items()
            }
        return self._devices

    def _forward_actor(self, models, rnd) -> BatchTrace:
        g = self.g
        arch = models[0].arch
        devs = self.devices()
        silos = self.silo_states(models)
        for v, dev in devs.items():
            dev.current_embedding = g.features[v].copy()
        trace = self._trace(arch)
        n_layers = models[0].num_layers
        for k in range(n_layers):
            trace.inputs.append(np.vstack([devs[v].current_embedding for v in range(g.num_nodes)]))
            Z = np.empty((g.num_nodes, models[0].dims[k + 1]))
            if arch == "mlp":
                for v, dev in devs.items():
                    z = layer_update(arch, dev.current_embedding[None, :], None, None,
                                     silos[dev.silo_id].model.layers[k])[0]
                    Z[v] = z
                    dev.current_embedding = relu(z) if k < n_layers - 1 else z
                trace.aggregates.append(None)
                trace.pre.append(Z)
                continue
            A = np.empty_like(trace.inputs[-1])
            d = A.shape[1]
            for dev in devs.values():
                dev.open_round(self.t, d)
            # step 1: every source emits to every out-neighbor, ascending ids
            for v in range(g.num_nodes):
                src = devs[v]
                for w, w_silo in src.ego.out_neighbors:
                    view = request_params(src, silos[w_silo])
                    rng = self._rng(self._mask_seq, rnd, k, v, w)
                    sigma = self.dp_sigma if (w != v and self.foreign_in[w] == 1) else 0.0
                    privatized_message(src, devs[w], k, view, rng, arch, self.ledger, self.audit,
                                       sigma, rnd)
            # step 2 and 3, after the barrier
            for v in range(g.num_nodes):
                dev = devs[v]
                A[v] = secure_aggregate(dev, silos[dev.silo_id], k, None, self.ledger, self.audit, rnd)
            for v in range(g.num_nodes):
                dev = devs[v]
                Z[v], _ = neighbor_agnostic_update(dev, A[v], silos[dev.silo_id].model, k)
            trace.aggregates.append(A)
            trace.pre.append(Z)
        return trace


def secmp_full_forward(g: FederatedGraph, models: list[ModelParams], t: int = 1, seed: int = 0,
                       dp_sigma: float = 0.0, mode: str = "batched", workers: int = 1,
                       audit: AuditLog | None = None) -> tuple[np.ndarray, CommLedger]:
    """One complete SecMP forward; returns (logits, ledger)."""
    net = SecMPNetwork(g, t=t, seed=seed, dp_sigma=dp_sigma, workers=workers, audit=audit)
    trace = net.forward(models, 0, mode)
    return trace.logits, net.ledger
