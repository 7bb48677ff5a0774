"""The classical channel between a paired master and slave key manager.

One Km instance owns the stores of one site. Entry points mutate local
state and append wire messages to an outbound queue; a transport (the
simulator's delayed channel or the service's HTTP link) moves messages
between the pair and feeds them to `handle_message`. Requests resolve
through a single per-request callback, so the same engine runs under an
event loop or a blocking round-trip pump.

Roles: the lexicographically smaller node id is the master and is the
only side that assigns purposes, fills deques, and creates deques; the
slave requests deque creation over the link. Either side initiates
supply from its own encryption-side stores.
"""
from __future__ import annotations

import hashlib
import struct
import time
import uuid as uuid_mod
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Optional, Union

from kmslab.keystore import (
    ByteQueueStore,
    CommonStore,
    Design,
    DequeRegistry,
    DequeStore,
    DequeSupplyPlan,
    DequeSupplyRecord,
    HashSupplyPlan,
    KeyState,
    Purpose,
    PurposeStore,
    QueueSupplyPlan,
    QueueSupplyRecord,
    StoredKey,
    SupplyKey,
    TransformRecord,
    confirm_deque_supply,
    confirm_hash_supply,
    plan_deque_fill,
    plan_deque_supply,
    plan_hash_supply,
    plan_queue_supply,
    replay_deque_fill,
    replay_deque_supply,
    replay_hash_supply,
    replay_queue_supply,
    rollback_deque_fill,
    rollback_deque_supply,
    rollback_hash_supply,
    rollback_queue_supply,
    state_digest,
)


class ProtocolError(Exception):
    """The peer pair drifted outside the protocol contract."""


class KmRole(Enum):
    MASTER = "master"
    SLAVE = "slave"


class Direction(str, Enum):
    """Canonical traffic direction labels shared by both sites.

    The store a site encrypts with and the store its peer decrypts with
    carry the same label, which makes mirrored state comparable.
    """

    M2S = "m2s"
    S2M = "s2m"

    @property
    def opposite(self) -> "Direction":
        return Direction.S2M if self is Direction.M2S else Direction.M2S


def elect_master(node_id_a: str, node_id_b: str) -> dict[str, KmRole]:
    """Deterministic, symmetric role assignment: smaller id is master."""
    if node_id_a == node_id_b:
        raise ProtocolError(f"key manager ids must differ, both are {node_id_a!r}")
    master = min(node_id_a, node_id_b)
    return {
        node_id_a: KmRole.MASTER if node_id_a == master else KmRole.SLAVE,
        node_id_b: KmRole.MASTER if node_id_b == master else KmRole.SLAVE,
    }


# ---------------------------------------------------------------------------
# Wire messages
# ---------------------------------------------------------------------------


class MsgKind(IntEnum):
    ASSIGN_PURPOSE = 1
    CREATE_DEQUE = 2
    FILL_DEQUE = 3
    SUPPLY_CREATE = 4
    CONFIRM = 5
    REJECT = 6
    RESERVE_NOTICE = 7


@dataclass(frozen=True)
class AssignPurposePayload:
    direction: Direction
    key_ids: tuple[int, ...]


@dataclass(frozen=True)
class CreateDequePayload:
    direction: Direction
    element_size_bits: int
    app_id: str
    deque_id: str = ""  # empty in a creation request, set in the announcement
    request: bool = False


@dataclass(frozen=True)
class FillDequePayload:
    direction: Direction
    deque_id: str
    source_ids: tuple[int, ...]
    element_ids: tuple[int, ...]


@dataclass(frozen=True)
class SupplyCreatePayload:
    direction: Direction
    design: Design
    deque_id: str = ""
    hash_records: tuple[TransformRecord, ...] = ()
    queue_records: tuple[QueueSupplyRecord, ...] = ()
    deque_records: tuple[DequeSupplyRecord, ...] = ()


@dataclass(frozen=True)
class ConfirmPayload:
    ref_seq: int
    record_hash: bytes = b""


@dataclass(frozen=True)
class RejectPayload:
    ref_seq: int
    reason: str = ""
    conflict_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class ReserveNoticePayload:
    key_ids: tuple[int, ...]
    uuids: tuple[str, ...]


Payload = Union[
    AssignPurposePayload,
    CreateDequePayload,
    FillDequePayload,
    SupplyCreatePayload,
    ConfirmPayload,
    RejectPayload,
    ReserveNoticePayload,
]


@dataclass(frozen=True)
class KmMessage:
    kind: MsgKind
    msg_seq: int
    payload: Payload

    def debug_json(self) -> str:
        import json

        def clean(v):
            if isinstance(v, bytes):
                return v.hex()
            if isinstance(v, tuple):
                return [clean(x) for x in v]
            if isinstance(v, (Direction, Design)):
                return v.value
            if hasattr(v, "__dataclass_fields__"):
                return {k: clean(getattr(v, k)) for k in v.__dataclass_fields__}
            return v

        return json.dumps(
            {"kind": self.kind.name, "msg_seq": self.msg_seq, "payload": clean(self.payload)},
            sort_keys=True,
        )


# Binary codec: versioned record of MAGIC, version, kind, msg_seq, payload.
_MAGIC = b"KML"
_VERSION = 1
_HEADER = struct.Struct(">3sBBQ")


def _w_u32(buf: bytearray, v: int) -> None:
    buf += struct.pack(">I", v)


def _w_u64(buf: bytearray, v: int) -> None:
    buf += struct.pack(">Q", v)


def _w_id(buf: bytearray, v: int) -> None:
    buf += v.to_bytes(16, "big")


def _w_ids(buf: bytearray, ids: tuple[int, ...]) -> None:
    _w_u32(buf, len(ids))
    for i in ids:
        _w_id(buf, i)


def _w_uuid(buf: bytearray, u: str) -> None:
    buf += uuid_mod.UUID(u).bytes


def _w_str(buf: bytearray, s: str) -> None:
    raw = s.encode()
    _w_u32(buf, len(raw))
    buf += raw


class _Reader:
    def __init__(self, data: bytes, offset: int) -> None:
        self.data = data
        self.pos = offset

    def u32(self) -> int:
        (v,) = struct.unpack_from(">I", self.data, self.pos)
        self.pos += 4
        return v

    def u64(self) -> int:
        (v,) = struct.unpack_from(">Q", self.data, self.pos)
        self.pos += 8
        return v

    def id128(self) -> int:
        v = int.from_bytes(self.data[self.pos : self.pos + 16], "big")
        self.pos += 16
        return v

    def ids(self) -> tuple[int, ...]:
        return tuple(self.id128() for _ in range(self.u32()))

    def uuid(self) -> str:
        v = str(uuid_mod.UUID(bytes=self.data[self.pos : self.pos + 16]))
        self.pos += 16
        return v

    def raw(self, n: int) -> bytes:
        v = self.data[self.pos : self.pos + n]
        self.pos += n
        return v

    def text(self) -> str:
        return self.raw(self.u32()).decode()


def encode_message(msg: KmMessage) -> bytes:
    buf = bytearray(_HEADER.pack(_MAGIC, _VERSION, msg.kind, msg.msg_seq))
    p = msg.payload
    if msg.kind is MsgKind.ASSIGN_PURPOSE:
        _w_str(buf, p.direction.value)
        _w_ids(buf, p.key_ids)
    elif msg.kind is MsgKind.CREATE_DEQUE:
        _w_str(buf, p.direction.value)
        _w_u32(buf, p.element_size_bits)
        _w_str(buf, p.app_id)
        _w_str(buf, p.deque_id)
        buf.append(1 if p.request else 0)
    elif msg.kind is MsgKind.FILL_DEQUE:
        _w_str(buf, p.direction.value)
        _w_uuid(buf, p.deque_id)
        _w_ids(buf, p.source_ids)
        _w_ids(buf, p.element_ids)
    elif msg.kind is MsgKind.SUPPLY_CREATE:
        _w_str(buf, p.direction.value)
        _w_str(buf, p.design.value)
        _w_str(buf, p.deque_id)
        if p.design is Design.ENC_DEC_HASH:
            _w_u32(buf, len(p.hash_records))
            for rec in p.hash_records:
                _w_uuid(buf, rec.supply_uuid)
                _w_ids(buf, rec.source_ids)
                _w_u32(buf, rec.split_offset_bytes + 1 if rec.split_offset_bytes is not None else 0)
                _w_id(buf, rec.remainder_id or 0)
        elif p.design is Design.BYTE_QUEUE:
            _w_u32(buf, len(p.queue_records))
            for rec in p.queue_records:
                _w_uuid(buf, rec.supply_uuid)
                _w_u64(buf, rec.first_seq)
                _w_u64(buf, rec.last_seq)
        else:
            _w_u32(buf, len(p.deque_records))
            for rec in p.deque_records:
                _w_uuid(buf, rec.supply_uuid)
                _w_ids(buf, rec.element_ids)
    elif msg.kind is MsgKind.CONFIRM:
        _w_u64(buf, p.ref_seq)
        _w_u32(buf, len(p.record_hash))
        buf += p.record_hash
    elif msg.kind is MsgKind.REJECT:
        _w_u64(buf, p.ref_seq)
        _w_str(buf, p.reason)
        _w_ids(buf, p.conflict_ids)
    elif msg.kind is MsgKind.RESERVE_NOTICE:
        _w_ids(buf, p.key_ids)
        _w_u32(buf, len(p.uuids))
        for u in p.uuids:
            _w_uuid(buf, u)
    else:  # pragma: no cover - exhaustive over MsgKind
        raise ProtocolError(f"unknown message kind {msg.kind}")
    return bytes(buf)


def decode_message(data: bytes) -> KmMessage:
    magic, version, kind_raw, msg_seq = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC or version != _VERSION:
        raise ProtocolError("bad message header")
    kind = MsgKind(kind_raw)
    r = _Reader(data, _HEADER.size)
    payload: Payload
    if kind is MsgKind.ASSIGN_PURPOSE:
        payload = AssignPurposePayload(Direction(r.text()), r.ids())
    elif kind is MsgKind.CREATE_DEQUE:
        payload = CreateDequePayload(
            direction=Direction(r.text()),
            element_size_bits=r.u32(),
            app_id=r.text(),
            deque_id=r.text(),
            request=bool(r.raw(1)[0]),
        )
    elif kind is MsgKind.FILL_DEQUE:
        payload = FillDequePayload(Direction(r.text()), r.uuid(), r.ids(), r.ids())
    elif kind is MsgKind.SUPPLY_CREATE:
        direction = Direction(r.text())
        design = Design(r.text())
        deque_id = r.text()
        if design is Design.ENC_DEC_HASH:
            records = []
            for _ in range(r.u32()):
                u = r.uuid()
                src = r.ids()
                off = r.u32()
                rem = r.id128()
                records.append(
                    TransformRecord(u, src, off - 1 if off else None, rem or None)
                )
            payload = SupplyCreatePayload(direction, design, deque_id, hash_records=tuple(records))
        elif design is Design.BYTE_QUEUE:
            qrecords = tuple(
                QueueSupplyRecord(r.uuid(), r.u64(), r.u64()) for _ in range(r.u32())
            )
            payload = SupplyCreatePayload(direction, design, deque_id, queue_records=qrecords)
        else:
            drecords = tuple(DequeSupplyRecord(r.uuid(), r.ids()) for _ in range(r.u32()))
            payload = SupplyCreatePayload(direction, design, deque_id, deque_records=drecords)
    elif kind is MsgKind.CONFIRM:
        ref = r.u64()
        payload = ConfirmPayload(ref, r.raw(r.u32()))
    elif kind is MsgKind.REJECT:
        payload = RejectPayload(r.u64(), r.text(), r.ids())
    elif kind is MsgKind.RESERVE_NOTICE:
        ids = r.ids()
        uuids = tuple(r.uuid() for _ in range(r.u32()))
        payload = ReserveNoticePayload(ids, uuids)
    else:  # pragma: no cover
        raise ProtocolError(f"unknown message kind {kind}")
    return KmMessage(kind, msg_seq, payload)


def record_hash(payload: SupplyCreatePayload) -> bytes:
    """Digest of a creation record, echoed back in its confirmation."""
    return hashlib.sha256(encode_message(KmMessage(MsgKind.SUPPLY_CREATE, 0, payload))).digest()[:16]


# ---------------------------------------------------------------------------
# Key manager engine
# ---------------------------------------------------------------------------


@dataclass
class WaterMarks:
    """Hysteresis levels for master-driven refills.

    The low mark is `low_fraction` of the working set; refills restore
    the full working set, bounded by common-store availability.
    """

    purpose_working_set: int = 512
    queue_working_set_bytes: int = 65536
    deque_working_set_elements: int = 256
    low_fraction: float = 0.25


@dataclass
class KmConfig:
    design: Design = Design.ENC_DEC_HASH
    default_key_size_bytes: int = 64
    capacity_keys: int = 100_000
    water_marks: WaterMarks = field(default_factory=WaterMarks)
    link_delay_us: int = 1000
    maintain_tick_us: int = 10_000
    max_keys_per_request: int = 128


DELIVERED = "delivered"
UNAVAILABLE = "unavailable"
COLLISION = "collision"


@dataclass
class GetKeyOutcome:
    status: str
    reason: str = ""
    keys: list[SupplyKey] = field(default_factory=list)
    residual_before: int = 0


DoneCallback = Callable[[GetKeyOutcome], None]


@dataclass
class _PendingSupply:
    seq: int
    direction: Direction
    plan: Union[HashSupplyPlan, QueueSupplyPlan, DequeSupplyPlan]
    done: Optional[DoneCallback]
    app_id: str
    number: int
    size_bits: int
    residual: int
    resolved: bool = False


@dataclass
class _PendingReserve:
    seq: int
    keys: list[StoredKey]
    uuids: list[str]
    done: Optional[DoneCallback]
    app_id: str
    residual: int
    resolved: bool = False


@dataclass
class _PendingMaintenance:
    seq: int
    rollback: Callable[[], None]


class _NullTrace:
    """Sink for engines run without metric collection."""

    def attempt(self, *a, **k):
        pass

    def collision(self, *a, **k):
        pass

    def timing(self, *a, **k):
        pass

    def supply(self, *a, **k):
        pass

    def shortfall(self, *a, **k):
        pass


@dataclass
class _DirectionState:
    purpose: Optional[PurposeStore] = None
    queue: Optional[ByteQueueStore] = None
    registry: Optional[DequeRegistry] = None


class Km:
    """One key manager of a mirrored pair.

    Not thread safe: callers serialize access (the simulator's event loop
    or the service's state lock). Store-mutating entry points append wire
    messages to `outbound`; the surrounding harness transports them.
    """

    def __init__(
        self,
        node_id: str,
        peer_id: str,
        config: KmConfig,
        *,
        uuid_source,
        key_id_source,
        pick_rng,
        clock: Callable[[], int] = lambda: 0,
        trace=None,
        on_refill: Optional[Callable[[Optional[Direction]], None]] = None,
        strict_ordering: bool = True,
    ) -> None:
        self.node_id = node_id
        self.peer_id = peer_id
        self.config = config
        self.role = elect_master(node_id, peer_id)[node_id]
        self.design = config.design
        self._uuids = uuid_source
        self._ids = key_id_source
        self._pick_rng = pick_rng
        self._clock = clock
        self.trace = trace if trace is not None else _NullTrace()
        self._on_refill = on_refill
        self._strict = strict_ordering

        self.common = CommonStore(config.default_key_size_bytes, config.capacity_keys)
        self._dirs: dict[Direction, _DirectionState] = {
            d: self._make_direction_state(d) for d in Direction
        }

        self.outbound: list[KmMessage] = []
        self._out_seq = 0
        self._in_seq = 0
        self._pending: dict[int, Union[_PendingSupply, _PendingReserve, _PendingMaintenance]] = {}
        self._reserved_by_id: dict[int, _PendingReserve] = {}

        # Delivered material and the peer-retrievable escrow, both by UUID.
        self.escrow: dict[str, SupplyKey] = {}
        self._escrow_served: set[str] = set()
        self.delivered_bytes = 0
        self.escrowed_bytes = 0
        self.discarded_bytes = 0
        self.collision_count = 0
        self.shortfall_count = 0
        self._collided_ids: set[int] = set()

    # -- construction helpers ------------------------------------------------

    def _make_direction_state(self, direction: Direction) -> _DirectionState:
        purpose = (
            Purpose.ENCRYPTION if direction is self.enc_direction else Purpose.DECRYPTION
        )
        if self.design is Design.SINGLE_COMMON:
            return _DirectionState()
        if self.design is Design.ENC_DEC_HASH:
            return _DirectionState(purpose=PurposeStore(purpose))
        if self.design is Design.BYTE_QUEUE:
            return _DirectionState(queue=ByteQueueStore(purpose))
        return _DirectionState(purpose=PurposeStore(purpose), registry=DequeRegistry())

    @property
    def is_master(self) -> bool:
        return self.role is KmRole.MASTER

    @property
    def enc_direction(self) -> Direction:
        """The direction this site encrypts for (its supply-side stores)."""
        return Direction.M2S if self.role is KmRole.MASTER else Direction.S2M

    def purpose_store(self, direction: Direction) -> PurposeStore:
        store = self._dirs[direction].purpose
        assert store is not None
        return store

    def byte_queue(self, direction: Direction) -> ByteQueueStore:
        store = self._dirs[direction].queue
        assert store is not None
        return store

    def registry(self, direction: Direction) -> DequeRegistry:
        reg = self._dirs[direction].registry
        assert reg is not None
        return reg

    # -- messaging -----------------------------------------------------------

    def _emit(self, kind: MsgKind, payload: Payload) -> KmMessage:
        self._out_seq += 1
        msg = KmMessage(kind, self._out_seq, payload)
        self.outbound.append(msg)
        return msg

    def take_outbound(self) -> list[KmMessage]:
        msgs, self.outbound = self.outbound, []
        return msgs

    def pending_count(self) -> int:
        return len(self._pending)

    def _notify_refill(self, direction: Optional[Direction]) -> None:
        if self._on_refill is not None:
            self._on_refill(direction)

    # -- ingestion -----------------------------------------------------------

    def ingest(self, raw: bytes, ids: list[int]):
        """Store link-generated material, reformatted to the default size.

        Both sites of a pair ingest the same raw key with the same ids,
        agreed during key establishment.
        """
        report = self.common.ingest(raw, ids)
        if report.inserted_ids and self.design is Design.SINGLE_COMMON:
            self._notify_refill(None)
        return report

    # -- application-facing supply --------------------------------------------

    def begin_get_key(
        self,
        app_id: str,
        number: int,
        size_bits: int,
        done: Optional[DoneCallback] = None,
    ) -> Optional[GetKeyOutcome]:
        """Start one GET_KEY handling.

        Returns the outcome when it is decided locally (store starvation),
        otherwise None; `done` fires exactly once either way, after the
        peer round trip for the pending case.
        """
        if number < 1 or number > self.config.max_keys_per_request:
            raise ValueError(f"number must be in 1..{self.config.max_keys_per_request}")
        if size_bits <= 0 or size_bits % 8:
            raise ValueError("size must be a positive multiple of 8 bits")
        if self.design is Design.SINGLE_COMMON:
            return self._begin_single(app_id, number, size_bits, done)
        return self._begin_transformed(app_id, number, size_bits, done)

    def _fail(
        self,
        app_id: str,
        number: int,
        size_bits: int,
        residual: int,
        reason: str,
        done: Optional[DoneCallback],
    ) -> GetKeyOutcome:
        outcome = GetKeyOutcome(UNAVAILABLE, reason, residual_before=residual)
        self.trace.attempt(
            self._clock(), self.node_id, app_id, number, size_bits, residual, reason
        )
        if done is not None:
            done(outcome)
        return outcome

    def _begin_single(
        self, app_id: str, number: int, size_bits: int, done: Optional[DoneCallback]
    ) -> Optional[GetKeyOutcome]:
        if size_bits != 8 * self.config.default_key_size_bytes:
            raise ValueError("the single common store serves fixed-size keys only")
        residual = self.common.available_count
        if residual < number:
            return self._fail(app_id, number, size_bits, residual, "empty", done)
        keys = self.common.pick_uncoordinated(number, self._pick_rng)
        uuids = [self._uuids.next_uuid() for _ in keys]
        msg = self._emit(
            MsgKind.RESERVE_NOTICE,
            ReserveNoticePayload(tuple(k.key_id for k in keys), tuple(uuids)),
        )
        pending = _PendingReserve(msg.msg_seq, keys, uuids, done, app_id, residual)
        self._pending[msg.msg_seq] = pending
        for k in keys:
            self._reserved_by_id[k.key_id] = pending
        return None

    def _begin_transformed(
        self, app_id: str, number: int, size_bits: int, done: Optional[DoneCallback]
    ) -> Optional[GetKeyOutcome]:
        direction = self.enc_direction
        state = self._dirs[direction]
        if self.design is Design.ENC_DEC_HASH:
            residual = state.purpose.available_bytes
        elif self.design is Design.BYTE_QUEUE:
            residual = state.queue.available_bytes
        else:
            residual = 0
        # timed span: request interpretation through key and UUID creation
        t0 = time.perf_counter_ns()
        if self.design is Design.ENC_DEC_HASH:
            plan = plan_hash_supply(state.purpose, size_bits, number, self._uuids, self._ids)
            payload = (
                SupplyCreatePayload(direction, self.design, hash_records=tuple(plan.records))
                if plan
                else None
            )
        elif self.design is Design.BYTE_QUEUE:
            plan = plan_queue_supply(state.queue, size_bits, number, self._uuids)
            payload = (
                SupplyCreatePayload(direction, self.design, queue_records=tuple(plan.records))
                if plan
                else None
            )
        else:
            plan, payload = self._plan_deque(direction, state, app_id, number, size_bits)
        if plan is None:
            return self._fail(app_id, number, size_bits, residual, "insufficient", done)
        elapsed_ns = time.perf_counter_ns() - t0
        self.trace.timing(
            self.design.value,
            size_bits,
            number,
            8 * self.config.default_key_size_bytes,
            elapsed_ns,
        )
        msg = self._emit(MsgKind.SUPPLY_CREATE, payload)
        self._pending[msg.msg_seq] = _PendingSupply(
            msg.msg_seq, direction, plan, done, app_id, number, size_bits, residual
        )
        return None

    def _plan_deque(self, direction, state, app_id, number, size_bits):
        registry = state.registry
        dq = registry.find(size_bits)
        if dq is None:
            # Only the master creates deques; the slave asks for one.
            if self.is_master:
                dq, _ = registry.select_or_create(size_bits, app_id, self._uuids.next_uuid)
                self._emit(
                    MsgKind.CREATE_DEQUE,
                    CreateDequePayload(direction, size_bits, app_id, dq.deque_id),
                )
            else:
                self._emit(
                    MsgKind.CREATE_DEQUE,
                    CreateDequePayload(direction, size_bits, app_id, request=True),
                )
                return None, None
        dq.subscribers.add(app_id)
        plan = plan_deque_supply(dq, size_bits, number, self._uuids)
        if plan is None:
            return None, None
        payload = SupplyCreatePayload(
            direction, self.design, deque_id=dq.deque_id, deque_records=tuple(plan.records)
        )
        return plan, payload

    # -- maintenance (master only) --------------------------------------------

    def maintain(self) -> None:
        """Restore working-set levels in purpose stores and deques.

        Emits assignment and fill messages carrying explicit id lists so
        the slave applies the same moves. Both directions share the
        common store; grants are water-filled so neither starves the
        other. No-op above the low-water marks.
        """
        if not self.is_master or self.design is Design.SINGLE_COMMON:
            return
        wm = self.config.water_marks
        needs: list[tuple[Direction, int]] = []
        for direction in Direction:
            state = self._dirs[direction]
            if self.design in (Design.ENC_DEC_HASH, Design.APP_SHARED_DEQUE):
                low = int(wm.purpose_working_set * wm.low_fraction)
                if len(state.purpose) < low:
                    needs.append((direction, wm.purpose_working_set - len(state.purpose)))
            if self.design is Design.BYTE_QUEUE:
                low_b = int(wm.queue_working_set_bytes * wm.low_fraction)
                if state.queue.available_bytes < low_b:
                    deficit = wm.queue_working_set_bytes - state.queue.available_bytes
                    blocks = -(-deficit // self.config.default_key_size_bytes)
                    needs.append((direction, blocks))
        for (direction, _deficit), grant in zip(needs, self._fair_grants(needs)):
            self._assign(direction, grant)
        if self.design is Design.APP_SHARED_DEQUE:
            low_e = int(wm.deque_working_set_elements * wm.low_fraction)
            for direction in Direction:
                state = self._dirs[direction]
                for dq in state.registry:
                    if len(dq) < low_e:
                        self._fill(direction, dq, state.purpose, wm.deque_working_set_elements)

    def _fair_grants(self, needs: list[tuple[Direction, int]]) -> list[int]:
        grants = [0] * len(needs)
        remaining = self.common.available_count
        order = sorted(range(len(needs)), key=lambda i: needs[i][1])
        for rank, i in enumerate(order):
            share = remaining // (len(order) - rank)
            grants[i] = min(needs[i][1], share)
            remaining -= grants[i]
        return grants

    def _assign(self, direction: Direction, count: int) -> None:
        keys = self.common.take_front(count) if count > 0 else []
        if not keys:
            self.shortfall_count += 1
            self.trace.shortfall(self._clock(), self.node_id)
            return
        ids = tuple(k.key_id for k in keys)
        self._apply_assign(direction, keys)
        msg = self._emit(MsgKind.ASSIGN_PURPOSE, AssignPurposePayload(direction, ids))
        self._pending[msg.msg_seq] = _PendingMaintenance(
            msg.msg_seq, lambda: self._rollback_assign(direction, ids)
        )

    def _apply_assign(self, direction: Direction, keys: list[StoredKey]) -> None:
        state = self._dirs[direction]
        if self.design is Design.BYTE_QUEUE:
            for key in keys:
                state.queue.push(key.material)
        else:
            state.purpose.accept(keys)
        self._notify_refill(direction)

    def _rollback_assign(self, direction: Direction, ids: tuple[int, ...]) -> None:
        state = self._dirs[direction]
        if self.design is Design.BYTE_QUEUE:
            # Detach the appended bytes from the tail and restore blocks.
            block = self.config.default_key_size_bytes
            total = block * len(ids)
            tail = bytearray()
            for _ in range(total):
                tail.append(state.queue._fifo.pop())
            material = bytes(reversed(tail))
            self.common.restore(
                [StoredKey(i, material[n * block : (n + 1) * block]) for n, i in enumerate(ids)]
            )
        else:
            keys = state.purpose.remove_ids(ids)
            if keys is None:
                raise ProtocolError("assignment rollback lost track of keys")
            self.common.restore(keys)

    def _fill(
        self, direction: Direction, dq: DequeStore, source: PurposeStore, target: int
    ) -> None:
        plan = plan_deque_fill(dq, source, target, self._ids)
        if plan is None:
            return
        if not plan.element_ids and not plan.source_ids:
            return
        msg = self._emit(
            MsgKind.FILL_DEQUE,
            FillDequePayload(direction, dq.deque_id, plan.source_ids, plan.element_ids),
        )
        self._pending[msg.msg_seq] = _PendingMaintenance(
            msg.msg_seq, lambda: rollback_deque_fill(dq, source, plan)
        )
        self._notify_refill(direction)

    # -- message handling ------------------------------------------------------

    def handle_message(self, msg: KmMessage) -> None:
        """Process one inbound message; replies join the outbound queue."""
        self._in_seq += 1
        if self._strict and msg.msg_seq != self._in_seq:
            raise ProtocolError(
                f"out-of-order message at {self.node_id}: "
                f"got seq {msg.msg_seq}, expected {self._in_seq}"
            )
        handler = {
            MsgKind.ASSIGN_PURPOSE: self._on_assign,
            MsgKind.CREATE_DEQUE: self._on_create_deque,
            MsgKind.FILL_DEQUE: self._on_fill,
            MsgKind.SUPPLY_CREATE: self._on_supply_create,
            MsgKind.CONFIRM: self._on_confirm,
            MsgKind.REJECT: self._on_reject,
            MsgKind.RESERVE_NOTICE: self._on_reserve_notice,
        }[msg.kind]
        handler(msg)

    def _on_assign(self, msg: KmMessage) -> None:
        p: AssignPurposePayload = msg.payload
        keys = []
        for key_id in p.key_ids:
            key = self.common.remove_id(key_id)
            if key is None:
                if self._strict:
                    raise ProtocolError(f"assignment names unknown key {key_id:#x}")
                self._emit(MsgKind.REJECT, RejectPayload(msg.msg_seq, "missing"))
                self.common.restore(keys)
                return
            keys.append(key)
        self._apply_assign(p.direction, keys)
        self._emit(MsgKind.CONFIRM, ConfirmPayload(msg.msg_seq))

    def _on_create_deque(self, msg: KmMessage) -> None:
        p: CreateDequePayload = msg.payload
        registry = self.registry(p.direction)
        if p.request:
            if not self.is_master:
                raise ProtocolError("deque creation requested from the slave side")
            dq, _ = registry.select_or_create(p.element_size_bits, p.app_id, self._uuids.next_uuid)
            self._emit(
                MsgKind.CREATE_DEQUE,
                CreateDequePayload(p.direction, dq.element_size_bits, p.app_id, dq.deque_id),
            )
            self._notify_refill(p.direction)
        else:
            if registry.get(p.deque_id) is None:
                registry.create(p.deque_id, p.element_size_bits)
            registry.get(p.deque_id).subscribers.add(p.app_id)
            self._notify_refill(p.direction)

    def _on_fill(self, msg: KmMessage) -> None:
        p: FillDequePayload = msg.payload
        registry = self.registry(p.direction)
        dq = registry.get(p.deque_id)
        if dq is None:
            if self._strict:
                raise ProtocolError(f"fill names unknown deque {p.deque_id}")
            self._emit(MsgKind.REJECT, RejectPayload(msg.msg_seq, "missing"))
            return
        ok = replay_deque_fill(dq, self.purpose_store(p.direction), p.source_ids, p.element_ids)
        if not ok:
            if self._strict:
                raise ProtocolError("fill replay could not find its source keys")
            self._emit(MsgKind.REJECT, RejectPayload(msg.msg_seq, "missing"))
            return
        self._emit(MsgKind.CONFIRM, ConfirmPayload(msg.msg_seq))
        self._notify_refill(p.direction)

    def _on_supply_create(self, msg: KmMessage) -> None:
        p: SupplyCreatePayload = msg.payload
        keys = self._replay_supply(p)
        if keys is None:
            self._emit(MsgKind.REJECT, RejectPayload(msg.msg_seq, "missing"))
            return
        for key in keys:
            self.escrow[key.uuid] = key
            self.escrowed_bytes += len(key.material)
            self.trace.supply(self._clock(), self.node_id, key.uuid, key.size_bits)
        self._emit(MsgKind.CONFIRM, ConfirmPayload(msg.msg_seq, record_hash(p)))

    def _replay_supply(self, p: SupplyCreatePayload) -> Optional[list[SupplyKey]]:
        state = self._dirs[p.direction]
        if p.design is Design.ENC_DEC_HASH:
            return replay_hash_supply(state.purpose, p.hash_records)
        if p.design is Design.BYTE_QUEUE:
            return replay_queue_supply(state.queue, p.queue_records)
        dq = state.registry.get(p.deque_id)
        if dq is None:
            return None
        return replay_deque_supply(dq, p.deque_records)

    def _on_confirm(self, msg: KmMessage) -> None:
        p: ConfirmPayload = msg.payload
        pending = self._pending.pop(p.ref_seq, None)
        if pending is None or getattr(pending, "resolved", False):
            return
        if isinstance(pending, _PendingMaintenance):
            return
        if isinstance(pending, _PendingSupply):
            self._finalize_supply(pending)
            return
        self._finalize_reserve(pending)

    def _finalize_supply(self, pending: _PendingSupply) -> None:
        pending.resolved = True
        plan = pending.plan
        if isinstance(plan, HashSupplyPlan):
            confirm_hash_supply(self.purpose_store(pending.direction), plan)
        elif isinstance(plan, DequeSupplyPlan):
            confirm_deque_supply(plan)
        # queue pops are final once popped; nothing to confirm locally
        outcome = GetKeyOutcome(DELIVERED, keys=plan.keys, residual_before=pending.residual)
        for key in plan.keys:
            self.delivered_bytes += len(key.material)
            self.trace.supply(self._clock(), self.node_id, key.uuid, key.size_bits)
        self.trace.attempt(
            self._clock(),
            self.node_id,
            pending.app_id,
            pending.number,
            pending.size_bits,
            pending.residual,
            "success",
        )
        if pending.done is not None:
            pending.done(outcome)

    def _finalize_reserve(self, pending: _PendingReserve) -> None:
        pending.resolved = True
        keys = []
        for stored, uid in zip(pending.keys, pending.uuids):
            stored.state = KeyState.SERVED
            self._reserved_by_id.pop(stored.key_id, None)
            key = SupplyKey(uid, stored.material)
            keys.append(key)
            self.delivered_bytes += len(key.material)
            self.trace.supply(self._clock(), self.node_id, key.uuid, key.size_bits)
        self.trace.attempt(
            self._clock(),
            self.node_id,
            pending.app_id,
            len(keys),
            8 * self.config.default_key_size_bytes,
            pending.residual,
            "success",
        )
        outcome = GetKeyOutcome(DELIVERED, keys=keys, residual_before=pending.residual)
        if pending.done is not None:
            pending.done(outcome)

    def _on_reject(self, msg: KmMessage) -> None:
        p: RejectPayload = msg.payload
        pending = self._pending.pop(p.ref_seq, None)
        if pending is None or getattr(pending, "resolved", False):
            return
        if isinstance(pending, _PendingMaintenance):
            pending.rollback()
            return
        if isinstance(pending, _PendingSupply):
            pending.resolved = True
            plan = pending.plan
            state = self._dirs[pending.direction]
            if isinstance(plan, HashSupplyPlan):
                rollback_hash_supply(state.purpose, plan)
            elif isinstance(plan, QueueSupplyPlan):
                rollback_queue_supply(state.queue, plan)
            else:
                rollback_deque_supply(state.registry.get(plan.deque_id), plan)
            self.trace.attempt(
                self._clock(),
                self.node_id,
                pending.app_id,
                pending.number,
                pending.size_bits,
                pending.residual,
                "rejected",
            )
            if pending.done is not None:
                pending.done(
                    GetKeyOutcome(UNAVAILABLE, "rejected", residual_before=pending.residual)
                )
            return
        self._resolve_reserve_failure(pending, set(p.conflict_ids), p.reason == "collision")

    def _resolve_reserve_failure(
        self, pending: _PendingReserve, conflicted: set[int], is_collision: bool
    ) -> None:
        """Collapse a single-store reservation: discard collided copies,
        restore the rest, and report the loss to the application."""
        pending.resolved = True
        self._pending.pop(pending.seq, None)
        restore = []
        for stored in pending.keys:
            self._reserved_by_id.pop(stored.key_id, None)
            if stored.key_id in conflicted:
                self.discarded_bytes += stored.size_bytes
                self._record_collision(stored.key_id, pending.residual)
            else:
                restore.append(stored)
        self.common.restore(restore)
        status = COLLISION if is_collision else UNAVAILABLE
        self.trace.attempt(
            self._clock(),
            self.node_id,
            pending.app_id,
            len(pending.keys),
            8 * self.config.default_key_size_bytes,
            pending.residual,
            "collision" if is_collision else "rejected",
        )
        if pending.done is not None:
            pending.done(
                GetKeyOutcome(status, "collision" if is_collision else "rejected",
                              residual_before=pending.residual)
            )

    def _record_collision(self, key_id: int, residual: int) -> None:
        # Both sites observe every collision; counting at the master keeps
        # the pair-level count exactly once per key.
        if self.is_master and key_id not in self._collided_ids:
            self._collided_ids.add(key_id)
            self.collision_count += 1
            self.trace.collision(self._clock(), key_id, residual)

    def _on_reserve_notice(self, msg: KmMessage) -> None:
        p: ReserveNoticePayload = msg.payload
        conflicted = [i for i in p.key_ids if i in self._reserved_by_id]
        if conflicted:
            # The peer picked keys this site already served in the same
            # window: a key access collision. Both copies are discarded;
            # untangled ids stay put for the peer to restore.
            hit_pendings = []
            for key_id in conflicted:
                pending = self._reserved_by_id[key_id]
                if pending not in hit_pendings:
                    hit_pendings.append(pending)
            self._emit(
                MsgKind.REJECT, RejectPayload(msg.msg_seq, "collision", tuple(conflicted))
            )
            conflict_set = set(conflicted)
            for pending in hit_pendings:
                self._resolve_reserve_failure(pending, conflict_set, True)
            return
        removed = []
        for key_id in p.key_ids:
            key = self.common.remove_id(key_id)
            if key is None:
                self.common.restore(removed)
                self._emit(MsgKind.REJECT, RejectPayload(msg.msg_seq, "missing"))
                return
            removed.append(key)
        for key, uid in zip(removed, p.uuids):
            key.state = KeyState.SERVED
            supply = SupplyKey(uid, key.material)
            self.escrow[uid] = supply
            self.escrowed_bytes += key.size_bytes
            self.trace.supply(self._clock(), self.node_id, uid, supply.size_bits)
        self._emit(MsgKind.CONFIRM, ConfirmPayload(msg.msg_seq))

    # -- peer-side retrieval ----------------------------------------------------

    def retrieve_escrow(self, uuid: str) -> Optional[bytes]:
        """Serve a confirmed supply key exactly once, by UUID."""
        if uuid in self._escrow_served:
            return None
        key = self.escrow.get(uuid)
        if key is None:
            return None
        self._escrow_served.add(uuid)
        return key.material

    # -- audit -------------------------------------------------------------------

    def stored_bytes(self) -> int:
        total = self.common.stored_bytes()
        for state in self._dirs.values():
            if state.purpose is not None:
                total += state.purpose.stored_bytes()
            if state.queue is not None:
                total += state.queue.available_bytes
            if state.registry is not None:
                total += sum(dq.stored_bytes() for dq in state.registry)
        return total

    def mirror_state_hash(self) -> str:
        """Digest of all mirrored store content.

        Hash-map stores are hashed by sorted id (their iteration order is
        site-local); queues and deques are hashed in FIFO order, which is
        part of the mirror contract.
        """

        def chunks():
            yield b"common"
            for key_id, material in self.common.dump_sorted():
                yield key_id.to_bytes(16, "big") + material
            for direction in Direction:
                state = self._dirs[direction]
                yield direction.value.encode()
                if state.purpose is not None:
                    for key_id, material in state.purpose.dump_sorted():
                        yield key_id.to_bytes(16, "big") + material
                if state.queue is not None:
                    yield str(state.queue.head_seq).encode()
                    yield state.queue.snapshot()
                if state.registry is not None:
                    for dq in state.registry:
                        yield dq.deque_id.encode()
                        yield str(dq.element_size_bits).encode()
                        for key_id, material in dq.dump():
                            yield key_id.to_bytes(16, "big") + material
                        yield bytes(dq.staging)

        return state_digest(chunks())
