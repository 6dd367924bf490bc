"""Round orchestration over the client -> edge -> cloud topology.

Sync rounds take the longest client path (uplink then edge-to-cloud hop) plus
the broadcast path back down. Async rounds sample participants every round but
deliver their updates after a seeded lag; the aggregator discounts stale
arrivals. Everything is driven by seeds derived from the master seed, so a run
is bit-reproducible from its config alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import aggregation, comms, data as data_mod, privacy, secure_agg
from .aggregation import AggregatorConfig, AnomalyReport, WeightVector
from .config import ExperimentConfig, resolve_malicious
from .model import (
    ClientUpdate,
    Dataset,
    EncoderConfig,
    ParamVector,
    evaluate,
    init_params,
    local_train,
)

logger = logging.getLogger("fedpriv.simulation")

# seed-derivation purposes (spawn_key components must be plain ints)
_P_PARTICIPATION = 0
_P_TRAIN = 1
_P_NOISE = 2
_P_SHARES = 3
_P_LAG = 4
_P_DATA = 5
_P_INIT = 6
_P_PARTITION = 7
_P_HOLDOUT = 8


def derive_seed(master: int, *path: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class ClientNode:
    client_id: int
    edge_id: int
    data: Dataset
    uplink: comms.LinkModel
    gamma: float = 1.0


@dataclass
class EdgeNode:
    edge_id: int
    cloud_link: comms.LinkModel


@dataclass
class Topology:
    clients: list[ClientNode]
    edges: list[EdgeNode]

    def __post_init__(self) -> None:
        edge_ids = {e.edge_id for e in self.edges}
        if len(edge_ids) != len(self.edges):
            raise ValueError("duplicate edge ids")
        seen = set()
        for c in self.clients:
            if c.client_id in seen:
                raise ValueError("duplicate client ids")
            seen.add(c.client_id)
            if c.edge_id not in edge_ids:
                raise ValueError(f"client {c.client_id} maps to unknown edge {c.edge_id}")

    def client(self, client_id: int) -> ClientNode:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(client_id)

    def edge_clients(self, edge_id: int) -> list[ClientNode]:
        return [c for c in self.clients if c.edge_id == edge_id]


@dataclass(frozen=True)
class RoundPlan:
    round_no: int
    mode: str = "sync"
    mpc_enabled: bool = False
    comms_enabled: bool = False
    participation_rate: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("sync", "async"):
            raise ValueError("mode must be 'sync' or 'async'")
        if self.mpc_enabled and self.comms_enabled:
            raise ValueError("mpc and comms compression are mutually exclusive")
        if not (0.0 <= self.participation_rate <= 1.0):
            raise ValueError("participation_rate must lie in [0, 1]")


@dataclass(frozen=True)
class AttackSpec:
    malicious_ids: frozenset[int] = frozenset()
    mode: str = "sign_flip"
    factor: float = 10.0
    active: bool = False

    def __post_init__(self) -> None:
        if self.mode not in ("sign_flip", "norm_boost", "label_flip"):
            raise ValueError(f"unknown attack mode {self.mode!r}")


@dataclass
class RoundReport:
    round_no: int
    accuracy: float
    loss: float
    bytes_up: int
    bytes_down: int
    seconds: float
    participants: tuple[int, ...]
    filtered: tuple[int, ...]
    selected: tuple[int, ...]
    applied: tuple[int, ...]
    epsilon_spent: float
    staleness: dict[int, int]
    skipped: bool = False
    krum_fallback: bool = False
    mpc_plaintext_gap: float | None = None

    def to_record(self) -> dict:
        rec = {
            "record": "round",
            "round": self.round_no,
            "accuracy": self.accuracy,
            "loss": self.loss,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "seconds": self.seconds,
            "participants": list(self.participants),
            "filtered": list(self.filtered),
            "selected": list(self.selected),
            "applied": list(self.applied),
            "epsilon_spent": self.epsilon_spent,
            "staleness": {str(k): v for k, v in sorted(self.staleness.items())},
            "skipped": self.skipped,
            "krum_fallback": self.krum_fallback,
        }
        if self.mpc_plaintext_gap is not None:
            rec["mpc_plaintext_gap"] = self.mpc_plaintext_gap
        return rec


@dataclass
class _Pending:
    arrival_round: int
    base_round: int
    update: ClientUpdate
    wire_bytes: int


@dataclass
class SimState:
    cfg: ExperimentConfig
    topology: Topology
    encoder: EncoderConfig
    params: ParamVector
    heldout: Dataset
    attack: AttackSpec
    ledger: privacy.PrivacyLedger | None
    traffic: comms.TrafficLedger = field(default_factory=comms.TrafficLedger)
    history: dict[int, float] = field(default_factory=dict)
    comms_states: dict[int, comms.ClientCommsState] = field(default_factory=dict)
    pending: list[_Pending] = field(default_factory=list)

    @property
    def agg_config(self) -> AggregatorConfig:
        a = self.cfg.aggregator
        return AggregatorConfig(
            strategy=a.strategy,
            krum_f=a.krum_f,
            multi_krum_m=a.multi_krum_m,
            lambdas=tuple(a.lambdas),
            filter_c=a.filter_c,
            staleness_tau=a.staleness_tau,
            staleness_rho=a.staleness_rho,
        )

    @property
    def comms_config(self) -> comms.CommsConfig:
        c = self.cfg.comms
        return comms.CommsConfig(
            enabled=c.enabled,
            sparsify=c.sparsify,
            k_fraction=c.k_fraction,
            delta_encoding=c.delta_encoding,
            quant_bits=c.quant_bits,
            entropy_coding=c.entropy_coding,
        )


def flip_labels(ds: Dataset) -> Dataset:
    """Cyclic label permutation used by the label_flip poisoning attack."""
    return Dataset(ds.features, (ds.labels + 1) % ds.n_classes, ds.n_classes)


def inject_attack(
    updates: Sequence[ClientUpdate], spec: AttackSpec
) -> list[ClientUpdate]:
    """Applies the post-training poisoning modes to malicious updates.

    label_flip acts on the dataset before training, so it passes through here.
    """
    if not spec.active:
        return list(updates)
    out = []
    for u in updates:
        if u.client_id in spec.malicious_ids:
            if spec.mode == "sign_flip":
                u = ClientUpdate(
                    u.client_id, u.delta.scaled(-1.0), u.sample_count, u.loss_delta, u.staleness
                )
            elif spec.mode == "norm_boost":
                u = ClientUpdate(
                    u.client_id,
                    u.delta.scaled(spec.factor),
                    u.sample_count,
                    u.loss_delta,
                    u.staleness,
                )
        out.append(u)
    return out


def defense_rate(reports: Sequence[RoundReport], spec: AttackSpec) -> float:
    """Fraction of (malicious client, round) pairs whose update never reached
    the aggregate: not sampled, filtered, not Krum-selected, or staleness-dropped."""
    if not spec.active or not spec.malicious_ids:
        raise ValueError("defense_rate needs an active attack with malicious clients")
    if not reports:
        raise ValueError("no reports")
    total = len(reports) * len(spec.malicious_ids)
    excluded = sum(
        1
        for r in reports
        for m in spec.malicious_ids
        if m not in r.applied
    )
    return excluded / total


def measure_latency(reports: Sequence[RoundReport]) -> float:
    if not reports:
        raise ValueError("no reports")
    return float(sum(r.seconds for r in reports))


def _model_broadcast_bytes(dim: int) -> int:
    return comms.dense_upload_bytes(dim)


def sync_upload_seconds(
    client_bytes: dict[int, int], topology: Topology
) -> float:
    """Longest uplink-then-cloud-hop path across edges for one sync round."""
    worst = 0.0
    for edge in topology.edges:
        members = [c for c in topology.edge_clients(edge.edge_id) if c.client_id in client_bytes]
        if not members:
            continue
        up = max(comms.transmit(client_bytes[c.client_id], c.uplink) for c in members)
        edge_total = sum(client_bytes[c.client_id] for c in members)
        worst = max(worst, up + comms.transmit(edge_total, edge.cloud_link))
    return worst


def _mpc_upload_seconds(
    client_bytes: dict[int, int], edge_bytes: dict[int, int], topology: Topology
) -> float:
    worst = 0.0
    for edge in topology.edges:
        if edge.edge_id not in edge_bytes:
            continue
        members = [c for c in topology.edge_clients(edge.edge_id) if c.client_id in client_bytes]
        up = max(comms.transmit(client_bytes[c.client_id], c.uplink) for c in members)
        worst = max(worst, up + comms.transmit(edge_bytes[edge.edge_id], edge.cloud_link))
    return worst


def _broadcast(state: SimState, round_no: int) -> tuple[int, float]:
    """Model push to every client; returns (bytes_down, seconds)."""
    nbytes = _model_broadcast_bytes(state.params.size)
    total = 0
    worst = 0.0
    for edge in state.topology.edges:
        state.traffic.record(round_no, "down", ("edge", edge.edge_id), nbytes)
        total += nbytes
        cloud_t = comms.transmit(nbytes, edge.cloud_link)
        members = state.topology.edge_clients(edge.edge_id)
        if not members:
            worst = max(worst, cloud_t)
            continue
        for c in members:
            state.traffic.record(round_no, "down", c.client_id, nbytes)
            total += nbytes
        worst = max(
            worst, cloud_t + max(comms.transmit(nbytes, c.uplink) for c in members)
        )
    return total, worst


def _train_participant(
    state: SimState, client: ClientNode, round_no: int
) -> ClientUpdate:
    cfg = state.cfg
    ds = client.data
    if (
        state.attack.active
        and state.attack.mode == "label_flip"
        and client.client_id in state.attack.malicious_ids
    ):
        ds = flip_labels(ds)
    return local_train(
        ds,
        state.params,
        state.encoder,
        epochs=cfg.local_epochs,
        batch=cfg.batch_size,
        lr=cfg.learning_rate,
        clip_c=cfg.clip,
        seed=derive_seed(cfg.seed, _P_TRAIN, round_no, client.client_id),
        client_id=client.client_id,
    )


def _update_history(state: SimState, updates: Iterable[ClientUpdate]) -> None:
    # reward clients whose local loss improved; EMA clipped downstream
    for u in updates:
        old = state.history.get(u.client_id, 1.0)
        target = 1.2 if u.loss_delta < 0 else 0.8
        state.history[u.client_id] = 0.8 * old + 0.2 * target


def _aggregate_plain(
    state: SimState, updates: list[ClientUpdate], base: ParamVector
) -> tuple[ParamVector, AnomalyReport | None, tuple[int, ...]]:
    """Cloud-side aggregation; returns (new params, robust report, applied ids)."""
    agg_cfg = state.agg_config
    strategy = agg_cfg.strategy
    if strategy == "robust":
        new_params, report = aggregation.robust_aggregate(
            updates, agg_cfg, base, state.history
        )
        return new_params, report, report.applied
    if strategy == "weighted":
        weights = aggregation.compute_weights(updates, state.history)
    else:
        weights = aggregation.n_weights(updates)
    mults = np.array(
        [
            aggregation.staleness_discount(u, agg_cfg.staleness_tau, agg_cfg.staleness_rho)
            for u in updates
        ]
    )
    folded = np.array(weights.weights) * mults
    mass = float(folded.sum())
    if mass <= 0.0:
        return base.copy(), None, ()
    folded_w = WeightVector(tuple(folded / mass))
    new_params = aggregation.weighted_aggregate(updates, folded_w, base)
    applied = tuple(
        u.client_id for u, w in zip(updates, folded_w.weights) if w > 0
    )
    return new_params, None, applied


def run_round(plan: RoundPlan, state: SimState) -> RoundReport:
    """Execute one federated round and emit its report."""
    cfg = state.cfg
    round_no = plan.round_no
    rng = np.random.default_rng(plan.seed)
    n_clients = len(state.topology.clients)
    draws = rng.random(n_clients)
    ordered = sorted(state.topology.clients, key=lambda c: c.client_id)
    participants = [
        c for c, d in zip(ordered, draws) if d < plan.participation_rate
    ]

    eps_spent = 0.0
    funded: dict[int, float] = {}
    if cfg.privacy.enabled and state.ledger is not None and participants:
        eps_t = state.ledger.round_budget(round_no)
        denom = sum(c.data.n * c.gamma for c in participants)
        for c in participants:
            eps_i = privacy.per_client_budget(eps_t, c.data.n, c.gamma, denom)
            if state.ledger.can_spend(eps_i):
                state.ledger.spend(round_no, c.client_id, eps_i)
                funded[c.client_id] = eps_i
                eps_spent += eps_i
            else:
                logger.info(
                    "round %d: client %d skipped (budget exhausted)", round_no, c.client_id
                )
        participants = [c for c in participants if c.client_id in funded]

    # local training and post-training attack injection
    updates: list[ClientUpdate] = []
    for c in participants:
        updates.append(_train_participant(state, c, round_no))
    updates = inject_attack(updates, state.attack)

    if cfg.privacy.enabled and state.ledger is not None:
        noised = []
        for u in updates:
            sigma = privacy.calibrate_sigma(
                funded[u.client_id], cfg.privacy.delta, cfg.clip
            )
            noised.append(
                ClientUpdate(
                    u.client_id,
                    privacy.add_gaussian_noise(
                        u.delta, sigma, derive_seed(cfg.seed, _P_NOISE, round_no, u.client_id)
                    ),
                    u.sample_count,
                    u.loss_delta,
                    u.staleness,
                )
            )
        updates = noised

    base = state.params
    dim = base.size
    client_bytes: dict[int, int] = {}
    filtered: tuple[int, ...] = ()
    selected: tuple[int, ...] = ()
    applied: tuple[int, ...] = ()
    krum_fallback = False
    mpc_gap: float | None = None
    staleness_hist: dict[int, int] = {}
    seconds = 0.0
    bytes_up = 0

    if plan.mpc_enabled and updates:
        # clients upload additive shares; edges forward ring partial sums
        share_sets: dict[int, secure_agg.ShareSet] = {}
        for u in updates:
            ss = secure_agg.split_shares(
                u.delta,
                cfg.mpc.shares,
                derive_seed(cfg.seed, _P_SHARES, round_no, u.client_id),
                client_id=u.client_id,
            )
            wire = secure_agg.share_set_to_bytes(ss)
            client_bytes[u.client_id] = len(wire)
            state.traffic.record(round_no, "up", u.client_id, len(wire))
            share_sets[u.client_id] = ss
        edge_bytes: dict[int, int] = {}
        partials: list[np.ndarray] = []
        for edge in state.topology.edges:
            members = [
                c for c in state.topology.edge_clients(edge.edge_id)
                if c.client_id in share_sets
            ]
            if not members:
                continue
            total = secure_agg.ring_total([share_sets[c.client_id] for c in members])
            wire = secure_agg.partial_sum_to_bytes(edge.edge_id, total)
            edge_bytes[edge.edge_id] = len(wire)
            state.traffic.record(round_no, "up", ("edge", edge.edge_id), len(wire))
            partials.append(total)
        grand = partials[0].copy()
        for p in partials[1:]:
            grand = grand + p
        mean_delta_vals = np.asarray(secure_agg.decode_fixed(grand)) / len(updates)
        # verification instrumentation: distance to the plaintext uniform mean
        plain_mean = np.mean(np.stack([u.delta.values for u in updates]), axis=0)
        mpc_gap = float(np.abs(mean_delta_vals - plain_mean).max())
        new_params = base.with_values(base.values + mean_delta_vals)
        applied = tuple(sorted(share_sets))
        seconds += _mpc_upload_seconds(client_bytes, edge_bytes, state.topology)
        staleness_hist = {0: len(updates)}
        delivered = updates
    else:
        # plaintext transport: per-client upload, edges relay to the cloud
        transported: list[ClientUpdate] = []
        for u in updates:
            if plan.comms_enabled:
                ccfg = state.comms_config
                cstate = state.comms_states.setdefault(
                    u.client_id, comms.ClientCommsState.fresh(dim)
                )
                wire, received, new_state = comms.encode_client_update(
                    u.delta.values, cstate, ccfg, round_no, u.client_id
                )
                state.comms_states[u.client_id] = new_state
                nbytes = len(wire)
                transported.append(
                    ClientUpdate(
                        u.client_id,
                        base.with_values(received),
                        u.sample_count,
                        u.loss_delta,
                        u.staleness,
                    )
                )
            else:
                # wire simulated for size only; values stay exact
                nbytes = comms.dense_upload_bytes(dim)
                transported.append(u)
            client_bytes[u.client_id] = nbytes
            state.traffic.record(round_no, "up", u.client_id, nbytes)
        for edge in state.topology.edges:
            members = [
                c for c in state.topology.edge_clients(edge.edge_id)
                if c.client_id in client_bytes
            ]
            if members:
                relay = sum(client_bytes[c.client_id] for c in members)
                state.traffic.record(round_no, "up", ("edge", edge.edge_id), relay)
        if participants:
            seconds += sync_upload_seconds(client_bytes, state.topology)

        if plan.mode == "async":
            lag_rng = np.random.default_rng(
                derive_seed(cfg.seed, _P_LAG, round_no)
            )
            for u in transported:
                lag = int(lag_rng.integers(0, cfg.async_max_lag + 1))
                state.pending.append(
                    _Pending(round_no + lag, round_no, u, client_bytes[u.client_id])
                )
            arrived: list[ClientUpdate] = []
            still_pending: list[_Pending] = []
            for p in state.pending:
                if p.arrival_round <= round_no:
                    stale = round_no - p.base_round
                    arrived.append(
                        ClientUpdate(
                            p.update.client_id,
                            p.update.delta,
                            p.update.sample_count,
                            p.update.loss_delta,
                            staleness=stale,
                        )
                    )
                else:
                    still_pending.append(p)
            state.pending = still_pending
            delivered = arrived
        else:
            delivered = transported

        for u in delivered:
            staleness_hist[u.staleness] = staleness_hist.get(u.staleness, 0) + 1

        if delivered:
            new_params, report, applied = _aggregate_plain(state, delivered, base)
            if report is not None:
                filtered = tuple(sorted(report.filtered))
                selected = tuple(report.selected)
                krum_fallback = report.fallback
        else:
            new_params = base

    skipped = (plan.mpc_enabled and not updates) or (
        not plan.mpc_enabled and not delivered
    )
    if skipped:
        new_params = base
    else:
        state.params = new_params
        _update_history(state, delivered if not plan.mpc_enabled else updates)
        down_bytes, down_seconds = _broadcast(state, round_no)
        seconds += down_seconds
    bytes_up = state.traffic.round_total(round_no, "up")
    bytes_down = state.traffic.round_total(round_no, "down")

    accuracy, loss = evaluate(state.params, state.encoder, state.heldout)
    return RoundReport(
        round_no=round_no,
        accuracy=accuracy,
        loss=loss,
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        seconds=seconds,
        participants=tuple(c.client_id for c in participants),
        filtered=filtered,
        selected=selected,
        applied=applied,
        epsilon_spent=eps_spent,
        staleness=staleness_hist,
        skipped=skipped,
        krum_fallback=krum_fallback,
        mpc_plaintext_gap=mpc_gap,
    )


def build_state(cfg: ExperimentConfig) -> SimState:
    """Materialize datasets, topology, and the initial model from a config."""
    spec = data_mod.SyntheticSpec(
        n=cfg.data.n,
        d=cfg.data.d,
        classes=cfg.data.classes,
        separation=cfg.data.separation,
        noise_std=cfg.data.noise_std,
    )
    full = data_mod.gen_synthetic(spec, derive_seed(cfg.seed, _P_DATA))
    holdout_rng = np.random.default_rng(derive_seed(cfg.seed, _P_HOLDOUT))
    order = holdout_rng.permutation(full.n)
    n_held = max(1, int(full.n * cfg.data.holdout_fraction))
    heldout = full.subset(order[:n_held])
    train = full.subset(order[n_held:])

    shards = data_mod.partition(
        train,
        data_mod.PartitionSpec(
            kind=cfg.data.partition, n_clients=cfg.clients, alpha=cfg.data.alpha
        ),
        derive_seed(cfg.seed, _P_PARTITION),
    )

    uplink = comms.LinkModel(cfg.links.uplink_bandwidth, cfg.links.uplink_latency)
    cloud = comms.LinkModel(cfg.links.cloud_bandwidth, cfg.links.cloud_latency)
    edges = [EdgeNode(e, cloud) for e in range(cfg.links.edges)]
    gammas = cfg.privacy.gamma or (1.0,) * cfg.clients
    clients = [
        ClientNode(
            client_id=i,
            edge_id=i % cfg.links.edges,
            data=shards[i],
            uplink=uplink,
            gamma=gammas[i],
        )
        for i in range(cfg.clients)
    ]
    topology = Topology(clients, edges)

    encoder = EncoderConfig(
        layer_dims=(cfg.data.d, *cfg.model.hidden, cfg.data.classes),
        activations=(cfg.model.activation,) * len(cfg.model.hidden),
    )
    params = init_params(encoder, derive_seed(cfg.seed, _P_INIT))

    ledger = (
        privacy.PrivacyLedger.plan(cfg.privacy.epsilon_total, cfg.rounds)
        if cfg.privacy.enabled and cfg.rounds > 0
        else None
    )
    attack = AttackSpec(
        malicious_ids=frozenset(resolve_malicious(cfg)),
        mode=cfg.attack.mode,
        factor=cfg.attack.factor,
        active=cfg.attack.active,
    )
    return SimState(
        cfg=cfg,
        topology=topology,
        encoder=encoder,
        params=params,
        heldout=heldout,
        attack=attack,
        ledger=ledger,
    )


def run_experiment(cfg: ExperimentConfig) -> tuple[list[RoundReport], SimState]:
    state = build_state(cfg)
    reports = []
    for round_no in range(1, cfg.rounds + 1):
        plan = RoundPlan(
            round_no=round_no,
            mode=cfg.mode,
            mpc_enabled=cfg.mpc.enabled,
            comms_enabled=cfg.comms.enabled,
            participation_rate=cfg.participation,
            seed=derive_seed(cfg.seed, _P_PARTICIPATION, round_no),
        )
        report = run_round(plan, state)
        logger.debug(
            "round %d: acc=%.4f loss=%.4f up=%dB", round_no, report.accuracy,
            report.loss, report.bytes_up,
        )
        reports.append(report)
    return reports, state


def rounds_to_target(reports: Sequence[RoundReport], target: float) -> int | None:
    for r in reports:
        if not r.skipped and r.accuracy >= target:
            return r.round_no
    return None
