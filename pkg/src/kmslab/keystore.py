"""Key storage designs for paired key managers.

Four interchangeable backends cover the storage layouts found in deployed
key-management stacks:

* a single common pool served without cross-site coordination,
* encryption/decryption hash stores with merge/split transformation and
  remainder reservation,
* purpose-based byte queues with per-byte sequence identifiers,
* application-shared deques of pre-formatted keys.

All material handling is byte-exact so that stores can be mirrored across
a key-manager pair, replayed from synchronization records, and audited
for byte conservation.
"""
from __future__ import annotations

import hashlib
import random
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum
from itertools import islice
from typing import Callable, Iterator, Optional


class KeyState(Enum):
    AVAILABLE = "available"
    RESERVED = "reserved"
    SERVED = "served"


class Purpose(Enum):
    ENCRYPTION = "encryption"
    DECRYPTION = "decryption"


class Design(str, Enum):
    """Backend selector shared by the simulator, service, and CLI."""

    SINGLE_COMMON = "single"
    ENC_DEC_HASH = "hash"
    BYTE_QUEUE = "queue"
    APP_SHARED_DEQUE = "deque"


class StoreError(Exception):
    """A storage operation violated its contract."""


@dataclass
class StoredKey:
    """A fixed block of key material with a 128-bit identity."""

    key_id: int
    material: bytes
    state: KeyState = KeyState.AVAILABLE

    @property
    def size_bytes(self) -> int:
        return len(self.material)


@dataclass
class SupplyKey:
    """An application-facing key labelled with an RFC 4122 UUID."""

    uuid: str
    material: bytes

    @property
    def size_bits(self) -> int:
        return 8 * len(self.material)


@dataclass
class IngestReport:
    inserted_ids: list[int]
    waste_bytes: int
    dropped_blocks: int
    dropped_bytes: int


class CommonStore:
    """Link-level reservoir of keys reformatted to one default size.

    Backed by a hash map (dict) for average constant-time access by id.
    A parallel swap-remove pool supports uniform random selection for the
    uncoordinated single-store design without disturbing insertion order,
    which is what purpose assignment iterates in.
    """

    def __init__(self, default_key_size_bytes: int, capacity_keys: int) -> None:
        if default_key_size_bytes <= 0 or capacity_keys <= 0:
            raise StoreError("default key size and capacity must be positive")
        self.default_key_size_bytes = default_key_size_bytes
        self.capacity_keys = capacity_keys
        self._entries: dict[int, StoredKey] = {}
        self._pool: list[int] = []
        self._pool_pos: dict[int, int] = {}
        self.waste_bytes = 0
        self.dropped_blocks = 0
        self.dropped_bytes = 0
        self.ingested_bytes = 0

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def available_count(self) -> int:
        return len(self._entries)

    def contains(self, key_id: int) -> bool:
        return key_id in self._entries

    def ingest(self, raw: bytes, ids: list[int]) -> IngestReport:
        """Cut raw material into default-size blocks and insert them.

        The trailing remainder shorter than one block is discarded and
        counted as waste. Blocks that do not fit under the capacity are
        dropped and counted, never partially inserted.
        """
        if not raw:
            raise StoreError("raw key material must be non-empty")
        block = self.default_key_size_bytes
        n_blocks = len(raw) // block
        if len(ids) != n_blocks:
            raise StoreError(f"expected {n_blocks} ids, got {len(ids)}")
        self.ingested_bytes += len(raw)
        self.waste_bytes += len(raw) - n_blocks * block
        inserted: list[int] = []
        for i in range(n_blocks):
            if len(self._entries) >= self.capacity_keys:
                self.dropped_blocks += 1
                self.dropped_bytes += block
                continue
            key = StoredKey(ids[i], raw[i * block : (i + 1) * block])
            self._insert(key)
            inserted.append(key.key_id)
        return IngestReport(
            inserted_ids=inserted,
            waste_bytes=len(raw) - n_blocks * block,
            dropped_blocks=n_blocks - len(inserted),
            dropped_bytes=(n_blocks - len(inserted)) * block,
        )

    def _insert(self, key: StoredKey) -> None:
        if key.key_id in self._entries:
            raise StoreError(f"duplicate key id {key.key_id:#x}")
        self._entries[key.key_id] = key
        self._pool_pos[key.key_id] = len(self._pool)
        self._pool.append(key.key_id)

    def _detach(self, key_id: int) -> StoredKey:
        key = self._entries.pop(key_id)
        pos = self._pool_pos.pop(key_id)
        last = self._pool.pop()
        if last != key_id:
            self._pool[pos] = last
            self._pool_pos[last] = pos
        return key

    def take_front(self, count: int) -> list[StoredKey]:
        """Remove up to `count` keys in insertion order (may be fewer)."""
        taken_ids = list(islice(iter(self._entries), count))
        return [self._detach(key_id) for key_id in taken_ids]

    def remove_id(self, key_id: int) -> Optional[StoredKey]:
        if key_id not in self._entries:
            return None
        return self._detach(key_id)

    def pick_uncoordinated(self, count: int, rng: random.Random) -> Optional[list[StoredKey]]:
        """Select `count` keys uniformly at random, without coordination.

        Returns None when fewer than `count` keys are available. Selected
        keys leave the available view; the caller holds them reserved.
        """
        if count > len(self._pool):
            return None
        picked: list[StoredKey] = []
        for _ in range(count):
            key_id = self._pool[rng.randrange(len(self._pool))]
            key = self._detach(key_id)
            key.state = KeyState.RESERVED
            picked.append(key)
        return picked

    def restore(self, keys: list[StoredKey]) -> None:
        for key in keys:
            key.state = KeyState.AVAILABLE
            self._insert(key)

    def stored_bytes(self) -> int:
        return sum(k.size_bytes for k in self._entries.values())

    def dump_sorted(self) -> Iterator[tuple[int, bytes]]:
        for key_id in sorted(self._entries):
            yield key_id, self._entries[key_id].material


class PurposeStore:
    """Encryption- or decryption-designated working store.

    Keys arrive from the common store unchanged in id and size. Split
    remainders are reserved here until the peer confirms the transform,
    after which they re-enter the pull order at the front (they are the
    oldest material).
    """

    def __init__(self, purpose: Purpose) -> None:
        self.purpose = purpose
        self._entries: "OrderedDict[int, StoredKey]" = OrderedDict()
        self._reserved_remainders: dict[int, StoredKey] = {}
        self._bytes = 0  # running total over _entries, kept O(1) to read

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def available_bytes(self) -> int:
        return self._bytes

    def accept(self, keys: list[StoredKey]) -> None:
        for key in keys:
            if key.key_id in self._entries:
                raise StoreError(f"duplicate key id {key.key_id:#x}")
            key.state = KeyState.AVAILABLE
            self._entries[key.key_id] = key
            self._bytes += key.size_bytes

    def pull_greedy(self, min_bytes: int) -> Optional[list[StoredKey]]:
        """Pull keys front-first until at least `min_bytes` accumulate.

        All-or-nothing: on shortfall nothing is pulled and None returned.
        """
        if min_bytes > self._bytes:
            return None
        pulled: list[StoredKey] = []
        total = 0
        while total < min_bytes:
            _key_id, key = self._entries.popitem(last=False)
            key.state = KeyState.RESERVED
            pulled.append(key)
            total += key.size_bytes
        self._bytes -= total
        return pulled

    def pull_up_to(self, min_bytes: int) -> list[StoredKey]:
        """Pull front-first until `min_bytes` accumulate or the store empties."""
        pulled: list[StoredKey] = []
        total = 0
        while total < min_bytes and self._entries:
            _key_id, key = self._entries.popitem(last=False)
            key.state = KeyState.RESERVED
            pulled.append(key)
            total += key.size_bytes
        self._bytes -= total
        return pulled

    def remove_ids(self, ids: tuple[int, ...]) -> Optional[list[StoredKey]]:
        """Remove the named keys (replay path). None if any id is missing."""
        if any(i not in self._entries for i in ids):
            return None
        out = []
        for i in ids:
            key = self._entries.pop(i)
            key.state = KeyState.RESERVED
            out.append(key)
            self._bytes -= key.size_bytes
        return out

    def restore_front(self, keys: list[StoredKey]) -> None:
        """Return reserved keys to the front, preserving their order."""
        for key in reversed(keys):
            key.state = KeyState.AVAILABLE
            self._entries[key.key_id] = key
            self._entries.move_to_end(key.key_id, last=False)
            self._bytes += key.size_bytes

    def reserve_remainder(self, key: StoredKey) -> None:
        key.state = KeyState.RESERVED
        self._reserved_remainders[key.key_id] = key

    def confirm_remainder(self, key_id: int) -> None:
        key = self._reserved_remainders.pop(key_id)
        key.state = KeyState.AVAILABLE
        self._entries[key.key_id] = key
        self._entries.move_to_end(key.key_id, last=False)
        self._bytes += key.size_bytes

    def discard_remainder(self, key_id: int) -> StoredKey:
        return self._reserved_remainders.pop(key_id)

    @property
    def reserved_remainder_bytes(self) -> int:
        return sum(k.size_bytes for k in self._reserved_remainders.values())

    def stored_bytes(self) -> int:
        return self.available_bytes + self.reserved_remainder_bytes

    def dump_sorted(self) -> Iterator[tuple[int, bytes]]:
        for key_id in sorted(self._entries):
            yield key_id, self._entries[key_id].material
        for key_id in sorted(self._reserved_remainders):
            yield key_id, self._reserved_remainders[key_id].material


class ByteQueueStore:
    """Purpose-based FIFO of key bytes with sequential identifiers.

    The store is a FIFO of (seq_id, value) entries whose seq_ids are
    contiguous and strictly increasing from head to tail, held compactly
    as byte values plus the head identifier. Supply extracts entries one
    at a time from the front, advancing each byte's identifier with it:
    key creation touches every byte, the defining cost of this design.
    """

    def __init__(self, purpose: Purpose, start_seq: int = 0) -> None:
        self.purpose = purpose
        self._fifo: deque[int] = deque()
        self._head_seq = start_seq

    def __len__(self) -> int:
        return len(self._fifo)

    @property
    def available_bytes(self) -> int:
        return len(self._fifo)

    @property
    def head_seq(self) -> int:
        return self._head_seq

    def push(self, material: bytes) -> tuple[int, int]:
        """Append bytes at the tail; returns their (first, last) seq ids."""
        first = self._head_seq + len(self._fifo)
        self._fifo.extend(material)
        return first, first + len(material) - 1

    def pop_front(self, nbytes: int) -> Optional[tuple[bytes, int, int]]:
        """Extract `nbytes` identified entries from the front."""
        if nbytes > len(self._fifo):
            return None
        out = bytearray()
        popleft = self._fifo.popleft
        append = out.append
        seq = self._head_seq
        for _ in range(nbytes):
            append(popleft())
            seq += 1
        first = self._head_seq
        self._head_seq = seq
        return bytes(out), first, seq - 1

    def push_front(self, material: bytes, first_seq: int) -> None:
        """Rollback helper: reattach popped entries at the head."""
        if first_seq + len(material) != self._head_seq:
            raise StoreError("rollback bytes are not contiguous with the head")
        self._fifo.extendleft(reversed(material))
        self._head_seq = first_seq

    def snapshot(self) -> bytes:
        return bytes(self._fifo)


class DequeStore:
    """Application-shared FIFO of pre-formatted keys of one element size.

    Elements append at the back and supply from the front. A staging
    buffer carries the partial trailing element between fills, which is
    why appends need access to the back of the structure.
    """

    def __init__(self, deque_id: str, element_size_bits: int) -> None:
        if element_size_bits <= 0 or element_size_bits % 8:
            raise StoreError("element size must be a positive multiple of 8 bits")
        self.deque_id = deque_id
        self.element_size_bits = element_size_bits
        self.subscribers: set[str] = set()
        self._elements: deque[StoredKey] = deque()
        self.staging = bytearray()

    def __len__(self) -> int:
        return len(self._elements)

    @property
    def element_size_bytes(self) -> int:
        return self.element_size_bits // 8

    def append_elements(self, keys: list[StoredKey]) -> None:
        for key in keys:
            if key.size_bytes != self.element_size_bytes:
                raise StoreError("element size mismatch")
            key.state = KeyState.AVAILABLE
            self._elements.append(key)

    def pop_front(self, count: int) -> Optional[list[StoredKey]]:
        if count > len(self._elements):
            return None
        if count == 1:  # identity-size supply, the design's fast path
            key = self._elements.popleft()
            key.state = KeyState.RESERVED
            return [key]
        popped = []
        popleft = self._elements.popleft
        for _ in range(count):
            key = popleft()
            key.state = KeyState.RESERVED
            popped.append(key)
        return popped

    def restore_front(self, keys: list[StoredKey]) -> None:
        for key in reversed(keys):
            key.state = KeyState.AVAILABLE
            self._elements.appendleft(key)

    def drop_back(self, count: int) -> list[StoredKey]:
        """Rollback helper: detach the `count` most recently appended elements."""
        return [self._elements.pop() for _ in range(count)][::-1]

    def stored_bytes(self) -> int:
        return sum(k.size_bytes for k in self._elements) + len(self.staging)

    def dump(self) -> Iterator[tuple[int, bytes]]:
        for key in self._elements:
            yield key.key_id, key.material


class DequeRegistry:
    """All shared deques of one traffic direction, in creation order."""

    def __init__(self) -> None:
        self._deques: "OrderedDict[str, DequeStore]" = OrderedDict()
        self._by_size: dict[int, DequeStore] = {}

    def __len__(self) -> int:
        return len(self._deques)

    def __iter__(self) -> Iterator[DequeStore]:
        return iter(self._deques.values())

    def get(self, deque_id: str) -> Optional[DequeStore]:
        return self._deques.get(deque_id)

    def find(self, requested_size_bits: int) -> Optional[DequeStore]:
        """Exact element-size match, else the largest evenly dividing size."""
        exact = self._by_size.get(requested_size_bits)
        if exact is not None:
            return exact
        best: Optional[DequeStore] = None
        for dq in self._deques.values():
            if requested_size_bits % dq.element_size_bits == 0:
                if best is None or dq.element_size_bits > best.element_size_bits:
                    best = dq
        return best

    def create(self, deque_id: str, element_size_bits: int) -> DequeStore:
        if deque_id in self._deques:
            raise StoreError(f"duplicate deque id {deque_id}")
        dq = DequeStore(deque_id, element_size_bits)
        self._deques[deque_id] = dq
        self._by_size.setdefault(element_size_bits, dq)
        return dq

    def select_or_create(
        self,
        requested_size_bits: int,
        app_id: str,
        deque_id_factory: Callable[[], str],
    ) -> tuple[DequeStore, bool]:
        """Return a deque able to serve the requested size, creating one
        with element size equal to the request when nothing fits."""
        if requested_size_bits <= 0 or requested_size_bits % 8:
            raise StoreError("requested size must be a positive multiple of 8 bits")
        dq = self.find(requested_size_bits)
        created = False
        if dq is None:
            dq = self.create(deque_id_factory(), requested_size_bits)
            created = True
        dq.subscribers.add(app_id)
        return dq, created


# ---------------------------------------------------------------------------
# Supply plans: local store mutations plus the records a peer needs to
# replay them byte-identically. Plans keep enough state to roll back.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformRecord:
    """How one supply key was built from hash-store sources."""

    supply_uuid: str
    source_ids: tuple[int, ...]
    split_offset_bytes: Optional[int]  # None when no split happened
    remainder_id: Optional[int]


@dataclass
class HashSupplyPlan:
    records: list[TransformRecord]
    keys: list[SupplyKey]
    sources: list[list[StoredKey]]  # per supply key, in pull order
    remainders: list[Optional[StoredKey]]


def plan_hash_supply(
    store: PurposeStore,
    size_bits: int,
    count: int,
    uuids,
    ids,
) -> Optional[HashSupplyPlan]:
    """Build `count` supply keys of `size_bits` by merge/split.

    Pulls front-first until the requested bytes accumulate, concatenates
    in pull order, truncates at the requested length, and reserves the
    surplus as a remainder key. All-or-nothing across the batch.
    """
    requested = size_bits // 8
    records: list[TransformRecord] = []
    keys: list[SupplyKey] = []
    sources: list[list[StoredKey]] = []
    remainders: list[Optional[StoredKey]] = []
    for _ in range(count):
        pulled = store.pull_greedy(requested)
        if pulled is None:
            for done in reversed(sources):
                store.restore_front(done)
            for rem in remainders:
                if rem is not None:
                    store.discard_remainder(rem.key_id)
            return None
        merged = pulled[0].material if len(pulled) == 1 else b"".join(k.material for k in pulled)
        if len(merged) > requested:
            supply_material = merged[:requested]
            remainder = StoredKey(ids.next_id(), merged[requested:], KeyState.RESERVED)
            store.reserve_remainder(remainder)
            offset: Optional[int] = requested
        else:
            supply_material = merged
            remainder = None
            offset = None
        key = SupplyKey(uuids.next_uuid(), supply_material)
        records.append(
            TransformRecord(
                supply_uuid=key.uuid,
                source_ids=tuple(k.key_id for k in pulled),
                split_offset_bytes=offset,
                remainder_id=remainder.key_id if remainder else None,
            )
        )
        keys.append(key)
        sources.append(pulled)
        remainders.append(remainder)
    return HashSupplyPlan(records, keys, sources, remainders)


def replay_hash_supply(
    store: PurposeStore, records: tuple[TransformRecord, ...]
) -> Optional[list[SupplyKey]]:
    """Rebuild supply keys from transform records against a mirrored store.

    Returns None (leaving the store untouched) when any source id is
    missing. Remainders become available immediately; the replaying side
    knows the transform succeeded.
    """
    consumed: list[list[StoredKey]] = []
    keys: list[SupplyKey] = []
    for rec in records:
        pulled = store.remove_ids(rec.source_ids)
        if pulled is None:
            for done in reversed(consumed):
                store.restore_front(done)
            return None
        consumed.append(pulled)
    for rec, pulled in zip(records, consumed):
        merged = pulled[0].material if len(pulled) == 1 else b"".join(k.material for k in pulled)
        if rec.split_offset_bytes is not None:
            keys.append(SupplyKey(rec.supply_uuid, merged[: rec.split_offset_bytes]))
            remainder = StoredKey(rec.remainder_id, merged[rec.split_offset_bytes :])
            store.reserve_remainder(remainder)
            store.confirm_remainder(remainder.key_id)
        else:
            keys.append(SupplyKey(rec.supply_uuid, merged))
        for k in pulled:
            k.state = KeyState.SERVED
    return keys


def confirm_hash_supply(store: PurposeStore, plan: HashSupplyPlan) -> None:
    for pulled in plan.sources:
        for key in pulled:
            key.state = KeyState.SERVED
    for rem in plan.remainders:
        if rem is not None:
            store.confirm_remainder(rem.key_id)


def rollback_hash_supply(store: PurposeStore, plan: HashSupplyPlan) -> None:
    for rem in plan.remainders:
        if rem is not None:
            store.discard_remainder(rem.key_id)
    for pulled in reversed(plan.sources):
        store.restore_front(pulled)


@dataclass(frozen=True)
class QueueSupplyRecord:
    supply_uuid: str
    first_seq: int
    last_seq: int


@dataclass
class QueueSupplyPlan:
    records: list[QueueSupplyRecord]
    keys: list[SupplyKey]
    first_seq: int  # for rollback of the whole contiguous pop


def plan_queue_supply(
    store: ByteQueueStore, size_bits: int, count: int, uuids
) -> Optional[QueueSupplyPlan]:
    """Pop `count` contiguous byte ranges of `size_bits` each, front-first."""
    nbytes = size_bits // 8
    if count * nbytes > store.available_bytes:
        return None
    records: list[QueueSupplyRecord] = []
    keys: list[SupplyKey] = []
    first = store.head_seq
    for _ in range(count):
        material, lo, hi = store.pop_front(nbytes)
        key = SupplyKey(uuids.next_uuid(), material)
        records.append(QueueSupplyRecord(key.uuid, lo, hi))
        keys.append(key)
    return QueueSupplyPlan(records, keys, first)


def replay_queue_supply(
    store: ByteQueueStore, records: tuple[QueueSupplyRecord, ...]
) -> Optional[list[SupplyKey]]:
    """Pop the named seq ranges from a mirrored queue; None on any mismatch."""
    total = sum(r.last_seq - r.first_seq + 1 for r in records)
    if records and records[0].first_seq != store.head_seq:
        return None
    if total > store.available_bytes:
        return None
    keys: list[SupplyKey] = []
    for rec in records:
        material, lo, hi = store.pop_front(rec.last_seq - rec.first_seq + 1)
        if lo != rec.first_seq or hi != rec.last_seq:
            raise StoreError("queue replay drifted off the recorded seq range")
        keys.append(SupplyKey(rec.supply_uuid, material))
    return keys


def rollback_queue_supply(store: ByteQueueStore, plan: QueueSupplyPlan) -> None:
    store.push_front(b"".join(k.material for k in plan.keys), plan.first_seq)


@dataclass
class FillPlan:
    deque_id: str
    source_ids: tuple[int, ...]
    element_ids: tuple[int, ...]
    elements_appended: int
    staged_bits_after: int
    # rollback state
    sources: list[StoredKey] = field(default_factory=list)
    staging_before: bytes = b""


def plan_deque_fill(
    dq: DequeStore,
    source: PurposeStore,
    target_element_count: int,
    ids,
) -> Optional[FillPlan]:
    """Pull source keys, stage their bytes, and cut full elements.

    The staging buffer carries any partial element between fills. Pulls
    stop once staged material covers the deficit or the source runs dry;
    a partial fill is a valid outcome.
    """
    deficit = target_element_count - len(dq)
    if deficit <= 0:
        return None
    el_bytes = dq.element_size_bytes
    need = deficit * el_bytes - len(dq.staging)
    pulled = source.pull_up_to(need) if need > 0 else []
    if not pulled and len(dq.staging) < el_bytes:
        if pulled:
            source.restore_front(pulled)
        return None
    staging_before = bytes(dq.staging)
    for key in pulled:
        dq.staging.extend(key.material)
    elements: list[StoredKey] = []
    while len(dq.staging) >= el_bytes:
        material = bytes(dq.staging[:el_bytes])
        del dq.staging[:el_bytes]
        elements.append(StoredKey(ids.next_id(), material))
    dq.append_elements(elements)
    for key in pulled:
        key.state = KeyState.SERVED
    return FillPlan(
        deque_id=dq.deque_id,
        source_ids=tuple(k.key_id for k in pulled),
        element_ids=tuple(e.key_id for e in elements),
        elements_appended=len(elements),
        staged_bits_after=8 * len(dq.staging),
        sources=pulled,
        staging_before=staging_before,
    )


def replay_deque_fill(
    dq: DequeStore,
    source: PurposeStore,
    source_ids: tuple[int, ...],
    element_ids: tuple[int, ...],
) -> bool:
    """Apply a fill on the mirrored side using the originator's ids."""
    pulled = source.remove_ids(source_ids)
    if pulled is None:
        return False
    el_bytes = dq.element_size_bytes
    for key in pulled:
        dq.staging.extend(key.material)
        key.state = KeyState.SERVED
    elements: list[StoredKey] = []
    idx = 0
    while len(dq.staging) >= el_bytes:
        material = bytes(dq.staging[:el_bytes])
        del dq.staging[:el_bytes]
        if idx >= len(element_ids):
            raise StoreError("fill replay produced more elements than recorded")
        elements.append(StoredKey(element_ids[idx], material))
        idx += 1
    if idx != len(element_ids):
        raise StoreError("fill replay produced fewer elements than recorded")
    dq.append_elements(elements)
    return True


def rollback_deque_fill(dq: DequeStore, source: PurposeStore, plan: FillPlan) -> None:
    dq.drop_back(plan.elements_appended)
    dq.staging[:] = plan.staging_before
    source.restore_front(plan.sources)


@dataclass(frozen=True)
class DequeSupplyRecord:
    supply_uuid: str
    element_ids: tuple[int, ...]


@dataclass
class DequeSupplyPlan:
    deque_id: str
    records: list[DequeSupplyRecord]
    keys: list[SupplyKey]
    popped: list[list[StoredKey]]


def plan_deque_supply(
    dq: DequeStore, size_bits: int, count: int, uuids
) -> Optional[DequeSupplyPlan]:
    """Pop k = size/element_size elements per key, front-first."""
    if size_bits % dq.element_size_bits:
        raise StoreError("requested size must be a multiple of the element size")
    k = size_bits // dq.element_size_bits
    if count * k > len(dq):
        return None
    if count == 1 and k == 1:  # one pre-formatted element becomes the key
        el = dq.pop_front(1)[0]
        key = SupplyKey(uuids.next_uuid(), el.material)
        return DequeSupplyPlan(
            dq.deque_id, [DequeSupplyRecord(key.uuid, (el.key_id,))], [key], [[el]]
        )
    records: list[DequeSupplyRecord] = []
    keys: list[SupplyKey] = []
    popped: list[list[StoredKey]] = []
    for _ in range(count):
        els = dq.pop_front(k)
        if k == 1:
            material = els[0].material
            element_ids = (els[0].key_id,)
        else:
            material = b"".join([e.material for e in els])
            element_ids = tuple([e.key_id for e in els])
        key = SupplyKey(uuids.next_uuid(), material)
        records.append(DequeSupplyRecord(key.uuid, element_ids))
        keys.append(key)
        popped.append(els)
    return DequeSupplyPlan(dq.deque_id, records, keys, popped)


def replay_deque_supply(
    dq: DequeStore, records: tuple[DequeSupplyRecord, ...]
) -> Optional[list[SupplyKey]]:
    """Pop the same front elements on the mirrored side; None on mismatch."""
    total = sum(len(r.element_ids) for r in records)
    if total > len(dq):
        return None
    keys: list[SupplyKey] = []
    consumed: list[list[StoredKey]] = []
    for rec in records:
        els = dq.pop_front(len(rec.element_ids))
        if tuple(e.key_id for e in els) != rec.element_ids:
            for done in reversed(consumed):
                dq.restore_front(done)
            dq.restore_front(els)
            return None
        consumed.append(els)
        material = els[0].material if len(els) == 1 else b"".join(e.material for e in els)
        keys.append(SupplyKey(rec.supply_uuid, material))
        for e in els:
            e.state = KeyState.SERVED
    return keys


def confirm_deque_supply(plan: DequeSupplyPlan) -> None:
    for els in plan.popped:
        for e in els:
            e.state = KeyState.SERVED


def rollback_deque_supply(dq: DequeStore, plan: DequeSupplyPlan) -> None:
    for els in reversed(plan.popped):
        dq.restore_front(els)


def state_digest(chunks: Iterator[bytes]) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()
