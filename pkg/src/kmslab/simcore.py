"""Deterministic discrete-event simulation of a key-manager pair.

Virtual time is integer microseconds; events dispatch in (time,
insertion-sequence) order so repeated runs with equal (seed, run, config)
replay identical traces. Host wall-clock only enters through the supply
creation timings, which are excluded from trace hashes.
"""
from __future__ import annotations

import gc
import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from kmslab.keystore import Design
from kmslab.kmlink import (
    COLLISION,
    DELIVERED,
    Direction,
    GetKeyOutcome,
    Km,
    KmConfig,
    KmMessage,
)
from kmslab.seeding import KeyIdSource, UuidSource, derive_rng

US = 1_000_000  # microseconds per second


class ConfigError(ValueError):
    """A run configuration failed validation before any event ran."""


def provision_key_rate(number: int, rate_bps: float, headroom: float) -> int:
    """Link rate sized for `number` concurrent flows of `rate_bps` each,
    scaled by a headroom factor: number * rate * (1 + headroom)."""
    if number <= 0 or rate_bps <= 0:
        raise ConfigError("application count and data rate must be positive")
    if headroom < 0:
        raise ConfigError("headroom factor must be non-negative")
    return round(number * rate_bps * (1 + headroom))


@dataclass
class QkdLinkConfig:
    """Key generation modeled as a rate process emitting fixed-size keys."""

    key_rate_bps: int
    key_size_bytes: int
    start_s: float = 0.0
    stop_s: float = 0.0


@dataclass
class AppConfig:
    app_id: str
    site: str  # "master" or "slave"
    packet_size_bytes: int
    data_rate_bps: int
    encryption: str = "otp"  # "otp" or "aes"
    aes_lifetime_bytes: int = 0
    keys_per_query: int = 1
    hold_time_s: float = 0.001
    start_s: float = 0.0
    stop_s: float = 0.0


@dataclass
class SimOptions:
    # Park starving requests until material arrives instead of spinning
    # hold-time retries; observable metrics are unchanged, event counts
    # drop by orders of magnitude near exhaustion.
    park_on_starvation: bool = False
    open_loop: bool = False  # fire requests on schedule, ignore outcomes
    message_log_path: Optional[str] = None  # dump km messages as JSON lines


@dataclass
class ExperimentConfig:
    """Full parameterization of one simulation run."""

    label: str
    quantum: QkdLinkConfig
    km: KmConfig
    service: list[AppConfig]
    seed: int = 100
    run: int = 1
    repeat_count: int = 1
    sim: SimOptions = field(default_factory=SimOptions)
    # generator identity for configs whose concrete values are drawn per
    # run; empty for hand-built configs, which compare field by field
    family: str = ""

    def identity(self) -> str:
        """Canonical identity of everything except the run number."""
        if self.family:
            return self.family
        doc = {
            "label": self.label,
            "quantum": vars(self.quantum),
            "km": {
                "design": self.km.design.value,
                "default": self.km.default_key_size_bytes,
                "capacity": self.km.capacity_keys,
                "wm": vars(self.km.water_marks),
                "delay": self.km.link_delay_us,
                "tick": self.km.maintain_tick_us,
            },
            "service": [vars(a) for a in self.service],
            "seed": self.seed,
            "sim": vars(self.sim),
        }
        return json.dumps(doc, sort_keys=True)


def validate_config(config: ExperimentConfig) -> None:
    q = config.quantum
    if q.key_rate_bps <= 0:
        raise ConfigError("quantum.key_rate_bps must be positive")
    if q.key_size_bytes <= 0:
        raise ConfigError("quantum.key_size_bytes must be positive")
    if q.stop_s < q.start_s:
        raise ConfigError("quantum.stop_s must not precede start_s")
    if config.km.default_key_size_bytes <= 0 or config.km.capacity_keys <= 0:
        raise ConfigError("km sizes must be positive")
    if not config.service:
        raise ConfigError("at least one application is required")
    for app in config.service:
        if app.packet_size_bytes <= 0 or app.data_rate_bps <= 0:
            raise ConfigError(f"{app.app_id}: packet size and data rate must be positive")
        if app.site not in ("master", "slave"):
            raise ConfigError(f"{app.app_id}: site must be master or slave")
        if app.encryption not in ("otp", "aes"):
            raise ConfigError(f"{app.app_id}: encryption must be otp or aes")
        if app.encryption == "aes" and app.aes_lifetime_bytes <= 0:
            raise ConfigError(f"{app.app_id}: aes lifetime must be positive")
        if app.keys_per_query < 1:
            raise ConfigError(f"{app.app_id}: keys_per_query must be >= 1")
        if app.hold_time_s < 0 or app.stop_s < app.start_s:
            raise ConfigError(f"{app.app_id}: invalid schedule")


class EventLoop:
    """Minimal deterministic scheduler over (time_us, seq) ordering.

    Event kinds in this model: KeyGenerated, AppPacketReady,
    GetKeyRequest (issued inline by packet/retry/wake handlers),
    HoldTimerExpired, KmMessageDelivery, MaintainTick.
    """

    def __init__(self) -> None:
        self.now_us = 0
        self._heap: list[tuple[int, int, str, Callable[[], None]]] = []
        self._seq = 0
        self.dispatched = 0

    def schedule(self, time_us: int, fn: Callable[[], None], kind: str = "") -> None:
        if time_us < self.now_us:
            raise RuntimeError("scheduling into the past")
        self._seq += 1
        heapq.heappush(self._heap, (time_us, self._seq, kind, fn))

    def run(self) -> None:
        while self._heap:
            time_us, _, _, fn = heapq.heappop(self._heap)
            self.now_us = time_us
            self.dispatched += 1
            fn()


class RunTrace:
    """Everything one run produced, with a platform-independent hash.

    Acts as the Km trace sink. Host-clock timings are collected but kept
    out of the trace hash.
    """

    def __init__(self, label: str, seed: int, run: int, design: str = "") -> None:
        self.label = label
        self.seed = seed
        self.run = run
        self.design = design
        self.attempts: list[tuple] = []  # (t, node, app, number, size, residual, outcome)
        self.collisions: list[tuple] = []  # (t, key_id, residual)
        self.timings: list[tuple] = []  # (design, size, number, default, ns)
        self.supplies: list[tuple] = []  # (t, node, uuid, size_bits)
        self.shortfalls: list[tuple] = []
        self.requests_issued: list[tuple] = []  # (t, node, app, number, size)
        self.messages_delivered = 0
        self.state_hashes: dict[str, str] = {}
        self.mirror_ok: Optional[bool] = None
        self.app_count = 0
        self.deque_count = 0
        self.deque_reuse_supplies = 0
        self.ingested_bytes = 0
        self.waste_bytes = 0
        self.dropped_bytes = 0
        self.collision_count = 0

    # Km trace sink interface
    def attempt(self, t, node, app, number, size, residual, outcome) -> None:
        self.attempts.append((t, node, app, number, size, residual, outcome))

    def collision(self, t, key_id, residual) -> None:
        self.collisions.append((t, key_id, residual))

    def timing(self, design, size, number, default, ns) -> None:
        self.timings.append((design, size, number, default, ns))

    def supply(self, t, node, uuid, size_bits) -> None:
        self.supplies.append((t, node, uuid, size_bits))

    def shortfall(self, t, node) -> None:
        self.shortfalls.append((t, node))

    def trace_hash(self) -> str:
        doc = {
            "attempts": self.attempts,
            "collisions": [(t, f"{k:032x}", r) for t, k, r in self.collisions],
            "supplies": self.supplies,
            "messages": self.messages_delivered,
            "hashes": sorted(self.state_hashes.items()),
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def issued_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.requests_issued, sort_keys=True).encode()
        ).hexdigest()


class _AppRuntime:
    """Packet generation and key-demand state machine for one application."""

    def __init__(self, cfg: AppConfig, km: Km, sim: "_Simulation") -> None:
        self.cfg = cfg
        self.km = km
        self.sim = sim
        self.packet_index = 0
        self.pending_packets = 0
        self.aes_budget = 0  # traffic bytes the current key stock still covers
        self.in_flight = False
        self.parked = False
        self.packets_generated = 0
        self.delivered_key_bytes = 0
        self.period_num = cfg.packet_size_bytes * 8 * US  # cumulative schedule
        self.request_size_bits = (
            cfg.packet_size_bytes * 8 if cfg.encryption == "otp" else 256
        )

    def next_packet_time(self) -> Optional[int]:
        t = int(self.cfg.start_s * US) + (self.packet_index + 1) * self.period_num // (
            self.cfg.data_rate_bps
        )
        return t if t <= int(self.cfg.stop_s * US) else None

    def schedule_first(self) -> None:
        t = self.next_packet_time()
        if t is not None:
            self.sim.loop.schedule(t, self.on_packet, "AppPacketReady")

    def on_packet(self) -> None:
        self.packet_index += 1
        self.packets_generated += 1
        if self.cfg.encryption == "otp":
            self.pending_packets += 1
        else:
            self.aes_budget -= self.cfg.packet_size_bytes
        t = self.next_packet_time()
        if t is not None:
            self.sim.loop.schedule(t, self.on_packet, "AppPacketReady")
        self.maybe_request()

    def _demand_ready(self) -> bool:
        if self.cfg.encryption == "otp":
            return self.pending_packets >= self.cfg.keys_per_query
        return self.aes_budget <= 0

    def maybe_request(self) -> None:
        if self.sim.options.open_loop:
            # Open loop: the request schedule depends only on packet
            # arrivals, never on outcomes, so it is identical across
            # storage designs under one seed.
            while self._demand_ready():
                self._consume_demand()
                self.issue_request()
            return
        if self.in_flight or self.parked:
            return
        if self._demand_ready():
            self.issue_request()

    def _consume_demand(self) -> None:
        if self.cfg.encryption == "otp":
            self.pending_packets -= self.cfg.keys_per_query
        else:
            self.aes_budget += self.cfg.keys_per_query * self.cfg.aes_lifetime_bytes

    def issue_request(self) -> None:
        self.in_flight = True
        number = self.cfg.keys_per_query
        size = self.request_size_bits
        self.sim.trace.requests_issued.append(
            (self.sim.loop.now_us, self.km.node_id, self.cfg.app_id, number, size)
        )
        self.km.begin_get_key(self.cfg.app_id, number, size, self.on_done)
        self.sim.pump(self.km)

    def on_done(self, outcome: GetKeyOutcome) -> None:
        self.in_flight = False
        if self.sim.options.open_loop:
            if outcome.status == DELIVERED:
                self.delivered_key_bytes += sum(len(k.material) for k in outcome.keys)
            return
        if outcome.status == DELIVERED:
            self.delivered_key_bytes += sum(len(k.material) for k in outcome.keys)
            self._consume_demand()
            self.maybe_request()
        elif outcome.status == COLLISION:
            self._schedule_retry()
        else:  # unavailable
            if self.sim.options.park_on_starvation and outcome.reason in ("empty", "insufficient"):
                self.park()
            else:
                self._schedule_retry()

    def _schedule_retry(self) -> None:
        hold_us = int(self.cfg.hold_time_s * US)
        target = self.sim.loop.now_us + hold_us
        if target > self.sim.horizon_us:  # no material can arrive past the horizon
            return
        self.sim.loop.schedule(target, self.retry, "HoldTimerExpired")

    def retry(self) -> None:
        if not self.in_flight and not self.parked and self._demand_ready():
            self.issue_request()

    def park(self) -> None:
        self.parked = True
        self.sim.park(self)

    def wake(self) -> None:
        if self.parked:
            self.parked = False
            self.maybe_request()


class _Simulation:
    """Wiring of one run: pair of key managers, channel, link, apps."""

    def __init__(self, config: ExperimentConfig) -> None:
        validate_config(config)
        self.config = config
        self.options = config.sim
        self.loop = EventLoop()
        self.trace = RunTrace(config.label, config.seed, config.run, config.km.design.value)
        self.horizon_us = (
            int(max(config.quantum.stop_s, max(a.stop_s for a in config.service)) * US) + US
        )
        seed, run = config.seed, config.run

        self._link_rng = derive_rng(seed, run, "link-material")
        self._link_ids = KeyIdSource(derive_rng(seed, run, "link-ids"))

        self.kms: dict[str, Km] = {}
        self._parked: dict[str, list[_AppRuntime]] = {"A": [], "B": []}
        for node, peer in (("A", "B"), ("B", "A")):
            self.kms[node] = Km(
                node,
                peer,
                config.km,
                uuid_source=UuidSource(derive_rng(seed, run, f"uuids:{node}")),
                key_id_source=KeyIdSource(derive_rng(seed, run, f"ids:{node}")),
                pick_rng=derive_rng(seed, run, f"pick:{node}"),
                clock=lambda: self.loop.now_us,
                trace=self.trace,
                on_refill=(lambda n: (lambda _direction: self._wake(n)))(node),
                strict_ordering=True,
            )
        self.master = self.kms["A"] if self.kms["A"].is_master else self.kms["B"]
        self.apps: list[_AppRuntime] = []
        self._msg_log = None

    # -- channel ---------------------------------------------------------------

    def pump(self, km: Km) -> None:
        peer = self.kms[km.peer_id]
        for msg in km.take_outbound():
            self.loop.schedule(
                self.loop.now_us + self.config.km.link_delay_us,
                (lambda m: (lambda: self._deliver(peer, m)))(msg),
                "KmMessageDelivery",
            )

    def _deliver(self, km: Km, msg: KmMessage) -> None:
        self.trace.messages_delivered += 1
        if self._msg_log is not None:
            self._msg_log.write(f"{self.loop.now_us} {km.node_id} {msg.debug_json()}\n")
        km.handle_message(msg)
        self.pump(km)

    # -- parking ----------------------------------------------------------------

    def park(self, app: _AppRuntime) -> None:
        self._parked[app.km.node_id].append(app)

    def _wake(self, node: str) -> None:
        waiting, self._parked[node] = self._parked[node], []
        for app in waiting:
            self.loop.schedule(self.loop.now_us, app.wake, "GetKeyRequest")

    # -- models -------------------------------------------------------------------

    def _schedule_link(self) -> None:
        q = self.config.quantum
        start_us = int(q.start_s * US)
        stop_us = int(q.stop_s * US)
        bits = q.key_size_bytes * 8

        def emit(k: int) -> None:
            raw = self._link_rng.randbytes(q.key_size_bytes)
            n_blocks = q.key_size_bytes // self.config.km.default_key_size_bytes
            ids = [self._link_ids.next_id() for _ in range(n_blocks)]
            for km in self.kms.values():
                km.ingest(raw, list(ids))
            for km in self.kms.values():
                self.pump(km)
            schedule(k + 1)

        def schedule(k: int) -> None:
            t = start_us + k * bits * US // q.key_rate_bps
            if t <= stop_us:
                self.loop.schedule(t, lambda: emit(k), "KeyGenerated")

        schedule(1)

    def _schedule_maintenance(self) -> None:
        if self.config.km.design is Design.SINGLE_COMMON:
            return
        horizon = self.horizon_us
        tick = self.config.km.maintain_tick_us

        def on_tick(t: int) -> None:
            self.master.maintain()
            self.pump(self.master)
            if t + tick <= horizon:
                self.loop.schedule(t + tick, lambda: on_tick(t + tick), "MaintainTick")

        self.loop.schedule(0, lambda: on_tick(0), "MaintainTick")

    def _build_apps(self) -> None:
        for cfg in self.config.service:
            km = self.master if cfg.site == "master" else self.kms[self.master.peer_id]
            app = _AppRuntime(cfg, km, self)
            self.apps.append(app)
            app.schedule_first()

    # -- run ------------------------------------------------------------------------

    def run(self) -> RunTrace:
        self._schedule_link()
        self._schedule_maintenance()
        self._build_apps()
        if self.options.message_log_path:
            self._msg_log = open(self.options.message_log_path, "a")
        # collector pauses would land inside measured creation spans;
        # a run's allocations are bounded, so defer collection past it
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            self.loop.run()
        finally:
            if gc_was_enabled:
                gc.enable()
                gc.collect()
            if self._msg_log is not None:
                self._msg_log.close()

        trace = self.trace
        trace.app_count = len(self.apps)
        km_a, km_b = self.kms["A"], self.kms["B"]
        if self.config.km.design is Design.APP_SHARED_DEQUE:
            trace.deque_count = sum(len(km_a.registry(d)) for d in Direction)
            trace.deque_reuse_supplies = self._count_deque_reuse()
        trace.collision_count = km_a.collision_count + km_b.collision_count
        trace.ingested_bytes = km_a.common.ingested_bytes
        trace.waste_bytes = km_a.common.waste_bytes
        trace.dropped_bytes = km_a.common.dropped_bytes
        trace.state_hashes = {
            "A": km_a.mirror_state_hash(),
            "B": km_b.mirror_state_hash(),
        }
        trace.mirror_ok = (
            trace.state_hashes["A"] == trace.state_hashes["B"]
            and km_a.pending_count() == 0
            and km_b.pending_count() == 0
        )
        return trace

    def _count_deque_reuse(self) -> int:
        """Supplies served by merging elements of a smaller shared deque."""
        sizes = set()
        for direction in Direction:
            for dq in self.kms["A"].registry(direction):
                sizes.add(dq.element_size_bits)
        reuse = 0
        for (_t, _node, _uuid, size_bits) in self.trace.supplies:
            if size_bits not in sizes and any(
                size_bits % s == 0 for s in sizes if s < size_bits
            ):
                reuse += 1
        return reuse


def run(config: ExperimentConfig) -> RunTrace:
    """Execute one deterministic run and return its full trace."""
    return _Simulation(config).run()
