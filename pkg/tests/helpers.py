"""In-process harness for driving a mirrored key-manager pair."""
from __future__ import annotations

import random

from kmslab.keystore import Design, StoredKey
from kmslab.kmlink import Km, KmConfig, WaterMarks, decode_message, encode_message
from kmslab.seeding import KeyIdSource, UuidSource, derive_rng


class Pair:
    """Two Kms joined by an instant, ordered, codec-exercising channel."""

    def __init__(
        self,
        design: Design,
        default_key_size_bytes: int = 64,
        seed: int = 100,
        run: int = 1,
        water_marks: WaterMarks | None = None,
        capacity_keys: int = 100_000,
    ) -> None:
        config = KmConfig(
            design=design,
            default_key_size_bytes=default_key_size_bytes,
            capacity_keys=capacity_keys,
            water_marks=water_marks or WaterMarks(),
        )
        self.config = config
        self.kms: dict[str, Km] = {}
        for node, peer in (("A", "B"), ("B", "A")):
            self.kms[node] = Km(
                node,
                peer,
                config,
                uuid_source=UuidSource(derive_rng(seed, run, f"uuids:{node}")),
                key_id_source=KeyIdSource(derive_rng(seed, run, f"ids:{node}")),
                pick_rng=derive_rng(seed, run, f"pick:{node}"),
            )
        self.a = self.kms["A"]
        self.b = self.kms["B"]
        self.master = self.a if self.a.is_master else self.b
        self.slave = self.b if self.a.is_master else self.a
        self._feed_rng = random.Random(derive_rng(seed, run, "feed").getrandbits(64))
        self._feed_ids = KeyIdSource(derive_rng(seed, run, "feed-ids"))

    def feed(self, n_keys: int) -> list[int]:
        """Ingest the same raw key on both sides, as a QKD link would."""
        raw = self._feed_rng.randbytes(n_keys * self.config.default_key_size_bytes)
        ids = [self._feed_ids.next_id() for _ in range(n_keys)]
        self.a.ingest(raw, list(ids))
        self.b.ingest(raw, list(ids))
        return ids

    def deliver_once(self, src: Km) -> int:
        """Move src's queued messages to its peer through the wire codec."""
        dst = self.kms[src.peer_id]
        msgs = src.take_outbound()
        for msg in msgs:
            dst.handle_message(decode_message(encode_message(msg)))
        return len(msgs)

    def pump(self) -> None:
        """Deliver in both directions until the pair is quiescent."""
        while self.deliver_once(self.a) + self.deliver_once(self.b):
            pass

    def maintain(self, rounds: int = 1) -> None:
        for _ in range(rounds):
            self.master.maintain()
            self.pump()

    def mirror_hashes(self) -> tuple[str, str]:
        return self.a.mirror_state_hash(), self.b.mirror_state_hash()

    def warm_purpose(self, keys_per_side: int = 64) -> None:
        self.feed(keys_per_side)
        self.maintain()


def outcome_recorder():
    """done-callback capturing outcomes in arrival order."""
    outcomes: list = []
    return outcomes, outcomes.append


def mirrored_purpose_keys(pair: Pair, sizes_bytes: list[int], start_id: int = 1):
    """Place identical keys straight into both enc-side purpose stores."""
    rng = random.Random(start_id)
    materials = [rng.randbytes(s) for s in sizes_bytes]
    direction = pair.a.enc_direction
    for km in (pair.a, pair.b):
        km.purpose_store(direction).accept(
            [StoredKey(start_id + i, m) for i, m in enumerate(materials)]
        )
    return materials
