import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmslab.keystore import Design, StoredKey
from kmslab.kmlink import (
    AssignPurposePayload,
    ConfirmPayload,
    CreateDequePayload,
    DELIVERED,
    Direction,
    FillDequePayload,
    KmMessage,
    KmRole,
    MsgKind,
    ProtocolError,
    RejectPayload,
    ReserveNoticePayload,
    SupplyCreatePayload,
    WaterMarks,
    decode_message,
    elect_master,
    encode_message,
)
from kmslab.keystore import DequeSupplyRecord, QueueSupplyRecord, TransformRecord
from tests.helpers import Pair, mirrored_purpose_keys, outcome_recorder


class TestElectMaster:
    def test_smaller_id_wins(self):
        roles = elect_master("A", "B")
        assert roles["A"] is KmRole.MASTER
        assert roles["B"] is KmRole.SLAVE

    def test_symmetric(self):
        assert elect_master("B", "A") == elect_master("A", "B")

    def test_equal_ids_rejected(self):
        with pytest.raises(ProtocolError):
            elect_master("A", "A")


class TestCodec:
    def roundtrip(self, kind, payload, seq=7):
        msg = KmMessage(kind, seq, payload)
        assert decode_message(encode_message(msg)) == msg

    def test_all_kinds_roundtrip(self):
        self.roundtrip(
            MsgKind.ASSIGN_PURPOSE, AssignPurposePayload(Direction.M2S, (1, 2, 3))
        )
        self.roundtrip(
            MsgKind.CREATE_DEQUE,
            CreateDequePayload(Direction.S2M, 512, "app-1", request=True),
        )
        self.roundtrip(
            MsgKind.FILL_DEQUE,
            FillDequePayload(
                Direction.M2S,
                "8a6f2c44-8888-4eee-9111-aaaaaaaaaaaa",
                (5, 6),
                (9, 10, 11),
            ),
        )
        self.roundtrip(
            MsgKind.SUPPLY_CREATE,
            SupplyCreatePayload(
                Direction.M2S,
                Design.ENC_DEC_HASH,
                hash_records=(
                    TransformRecord(
                        "8a6f2c44-8888-4eee-9111-aaaaaaaaaaab", (1, 2), 100, 77
                    ),
                    TransformRecord(
                        "8a6f2c44-8888-4eee-9111-aaaaaaaaaaac", (3,), None, None
                    ),
                ),
            ),
        )
        self.roundtrip(
            MsgKind.SUPPLY_CREATE,
            SupplyCreatePayload(
                Direction.S2M,
                Design.BYTE_QUEUE,
                queue_records=(
                    QueueSupplyRecord("8a6f2c44-8888-4eee-9111-aaaaaaaaaaad", 0, 99),
                ),
            ),
        )
        self.roundtrip(
            MsgKind.SUPPLY_CREATE,
            SupplyCreatePayload(
                Direction.M2S,
                Design.APP_SHARED_DEQUE,
                deque_id="8a6f2c44-8888-4eee-9111-aaaaaaaaaaae",
                deque_records=(
                    DequeSupplyRecord("8a6f2c44-8888-4eee-9111-aaaaaaaaaaaf", (4, 5)),
                ),
            ),
        )
        self.roundtrip(MsgKind.CONFIRM, ConfirmPayload(3, b"x" * 16))
        self.roundtrip(MsgKind.REJECT, RejectPayload(4, "collision", (12,)))
        self.roundtrip(
            MsgKind.RESERVE_NOTICE,
            ReserveNoticePayload((1, 2), ("8a6f2c44-8888-4eee-9111-aaaaaaaaaab0",) * 2),
        )

    @settings(max_examples=50, deadline=None)
    @given(
        ids=st.lists(st.integers(0, 2**128 - 1), max_size=6),
        seq=st.integers(0, 2**32),
        direction=st.sampled_from(list(Direction)),
    )
    def test_assign_roundtrip_property(self, ids, seq, direction):
        msg = KmMessage(
            MsgKind.ASSIGN_PURPOSE, seq, AssignPurposePayload(direction, tuple(ids))
        )
        assert decode_message(encode_message(msg)) == msg


class TestSingleCommonReservation:
    def test_sequential_serves_do_not_collide(self):
        pair = Pair(Design.SINGLE_COMMON)
        pair.feed(10)
        outcomes_a, done_a = outcome_recorder()
        pair.a.begin_get_key("ipsec", 1, 512, done_a)
        pair.pump()
        outcomes_b, done_b = outcome_recorder()
        pair.b.begin_get_key("tls", 1, 512, done_b)
        pair.pump()
        assert outcomes_a[0].status == DELIVERED
        assert outcomes_b[0].status == DELIVERED
        assert pair.a.collision_count + pair.b.collision_count == 0
        assert pair.a.common.available_count == 8
        assert pair.mirror_hashes()[0] == pair.mirror_hashes()[1]

    def test_same_key_in_window_is_one_collision(self):
        # both sides pick their only key before either notice lands
        pair = Pair(Design.SINGLE_COMMON)
        pair.feed(1)
        outcomes_a, done_a = outcome_recorder()
        outcomes_b, done_b = outcome_recorder()
        pair.a.begin_get_key("ipsec", 1, 512, done_a)
        pair.b.begin_get_key("tls", 1, 512, done_b)
        pair.pump()
        assert outcomes_a[0].status == "collision"
        assert outcomes_b[0].status == "collision"
        assert pair.master.collision_count == 1
        assert pair.slave.collision_count == 0
        assert pair.a.common.available_count == 0
        assert pair.b.common.available_count == 0

    def test_both_interleavings_yield_exactly_one_collision(self):
        # oracle: enumerate both delivery orders of the crossing notices
        for first_sender in ("A", "B"):
            pair = Pair(Design.SINGLE_COMMON)
            pair.feed(1)
            pair.a.begin_get_key("ipsec", 1, 512)
            pair.b.begin_get_key("tls", 1, 512)
            pair.deliver_once(pair.kms[first_sender])
            pair.pump()
            total = pair.a.collision_count + pair.b.collision_count
            assert total == 1, f"first sender {first_sender}"

    def test_empty_store_unavailable(self):
        pair = Pair(Design.SINGLE_COMMON)
        outcome = pair.a.begin_get_key("app", 1, 512)
        assert outcome.status == "unavailable"
        assert outcome.reason == "empty"

    def test_partial_overlap_discards_only_contested(self):
        pair = Pair(Design.SINGLE_COMMON)
        pair.feed(3)
        # force overlapping picks by rigging the pick rngs
        pair.a._pick_rng = random.Random(1)
        pair.b._pick_rng = random.Random(1)
        outcomes_a, done_a = outcome_recorder()
        outcomes_b, done_b = outcome_recorder()
        pair.a.begin_get_key("ipsec", 2, 512, done_a)
        pair.b.begin_get_key("tls", 2, 512, done_b)
        pair.pump()
        assert outcomes_a[0].status == "collision"
        assert outcomes_b[0].status == "collision"
        # contested copies discarded on both sides, the rest restored
        assert pair.a.common.available_count == pair.b.common.available_count
        assert pair.mirror_hashes()[0] == pair.mirror_hashes()[1]

    def test_served_key_retrievable_once_from_peer(self):
        pair = Pair(Design.SINGLE_COMMON)
        pair.feed(2)
        outcomes, done = outcome_recorder()
        pair.a.begin_get_key("app", 1, 512, done)
        pair.pump()
        key = outcomes[0].keys[0]
        assert pair.b.retrieve_escrow(key.uuid) == key.material
        assert pair.b.retrieve_escrow(key.uuid) is None


class TestSyncSupplyHash:
    def test_replay_produces_identical_bytes(self):
        pair = Pair(Design.ENC_DEC_HASH)
        mirrored_purpose_keys(pair, [64, 64, 64])
        outcomes, done = outcome_recorder()
        pair.a.begin_get_key("app", 1, 800, done)
        pair.pump()
        assert outcomes[0].status == DELIVERED
        key = outcomes[0].keys[0]
        assert pair.b.escrow[key.uuid].material == key.material
        assert pair.mirror_hashes()[0] == pair.mirror_hashes()[1]

    def test_consumed_id_at_responder_rejects_and_rolls_back(self):
        pair = Pair(Design.ENC_DEC_HASH)
        mirrored_purpose_keys(pair, [64, 64])
        direction = pair.a.enc_direction
        # responder loses one source key before the record arrives
        victim = next(iter(pair.b.purpose_store(direction)._entries))
        pair.b.purpose_store(direction).remove_ids((victim,))
        before = list(pair.a.purpose_store(direction)._entries)
        outcomes, done = outcome_recorder()
        pair.a.begin_get_key("app", 1, 800, done)
        pair.pump()
        assert outcomes[0].status == "unavailable"
        assert outcomes[0].reason == "rejected"
        assert list(pair.a.purpose_store(direction)._entries) == before

    def test_confirm_frees_remainder_for_later_supply(self):
        pair = Pair(Design.ENC_DEC_HASH)
        mirrored_purpose_keys(pair, [64, 64])
        outcomes, done = outcome_recorder()
        pair.a.begin_get_key("app", 1, 800, done)
        pair.pump()
        direction = pair.a.enc_direction
        # 28-byte remainder is available again on both sides
        assert pair.a.purpose_store(direction).available_bytes == 28
        assert pair.b.purpose_store(direction).available_bytes == 28
        outcomes2, done2 = outcome_recorder()
        pair.a.begin_get_key("app", 1, 224, done2)
        pair.pump()
        assert outcomes2[0].status == DELIVERED


class TestSyncSupplyDeque:
    def test_mirrored_deque_pops_same_front(self):
        pair = Pair(Design.APP_SHARED_DEQUE)
        pair.feed(16)
        pair.maintain()
        # master-side app creates the deque, then a fill populates it
        outcomes, done = outcome_recorder()
        pair.master.begin_get_key("app", 1, 512, done)
        pair.pump()
        assert outcomes[0].status == "unavailable"  # fresh deque is empty
        pair.maintain()
        outcomes2, done2 = outcome_recorder()
        pair.master.begin_get_key("app", 2, 512, done2)
        pair.pump()
        assert outcomes2[0].status == DELIVERED
        for key in outcomes2[0].keys:
            assert pair.slave.escrow[key.uuid].material == key.material
        assert pair.mirror_hashes()[0] == pair.mirror_hashes()[1]

    def test_slave_requests_creation_from_master(self):
        pair = Pair(Design.APP_SHARED_DEQUE)
        pair.feed(16)
        pair.maintain()
        outcomes, done = outcome_recorder()
        pair.slave.begin_get_key("app", 1, 512, done)
        pair.pump()
        direction = pair.slave.enc_direction
        assert len(pair.master.registry(direction)) == 1
        assert len(pair.slave.registry(direction)) == 1
        master_dq = next(iter(pair.master.registry(direction)))
        slave_dq = next(iter(pair.slave.registry(direction)))
        assert master_dq.deque_id == slave_dq.deque_id
        pair.maintain()
        outcomes2, done2 = outcome_recorder()
        pair.slave.begin_get_key("app", 1, 512, done2)
        pair.pump()
        assert outcomes2[0].status == DELIVERED


class TestMaintainLevels:
    def test_watermark_arithmetic(self):
        # low mark 50 of a 100-key working set; 10 held; assign tops up to 100
        wm = WaterMarks(purpose_working_set=100, low_fraction=0.5)
        pair = Pair(Design.ENC_DEC_HASH, water_marks=wm)
        pair.feed(200)
        direction = Direction.M2S
        seeded = pair.master.common.take_front(10)
        mirrored = pair.slave.common.take_front(10)
        pair.master.purpose_store(direction).accept(seeded)
        pair.slave.purpose_store(direction).accept(mirrored)
        pair.master.maintain()
        msgs = [m for m in pair.master.outbound if m.kind is MsgKind.ASSIGN_PURPOSE]
        assign = next(m for m in msgs if m.payload.direction is direction)
        assert len(assign.payload.key_ids) == 90
        assert len(pair.master.purpose_store(direction)) == 100
        pair.pump()
        assert len(pair.slave.purpose_store(direction)) == 100

    def test_no_message_at_high_water(self):
        pair = Pair(Design.ENC_DEC_HASH)
        pair.feed(2048)
        pair.maintain()
        pair.master.maintain()
        assert pair.master.take_outbound() == []

    def test_empty_common_counts_shortfall(self):
        pair = Pair(Design.ENC_DEC_HASH)
        before = pair.master.shortfall_count
        pair.master.maintain()
        assert pair.master.shortfall_count > before
        assert pair.master.take_outbound() == []


class TestOrdering:
    def test_gap_raises_in_strict_mode(self):
        pair = Pair(Design.ENC_DEC_HASH)
        pair.feed(8)
        pair.master.maintain()
        msgs = pair.master.take_outbound()
        assert len(msgs) >= 2
        with pytest.raises(ProtocolError):
            pair.slave.handle_message(msgs[1])  # skipped msgs[0]


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_mirror_property_random_schedules(data):
    design = data.draw(st.sampled_from(list(Design)), label="design")
    pair = Pair(design)
    delivered = []
    for _ in range(data.draw(st.integers(2, 12), label="steps")):
        action = data.draw(st.sampled_from(["feed", "maintain", "get_a", "get_b"]))
        if action == "feed":
            pair.feed(data.draw(st.integers(1, 24)))
        elif action == "maintain":
            pair.maintain()
        else:
            km = pair.a if action == "get_a" else pair.b
            number = data.draw(st.integers(1, 2))
            size = 512 if design is Design.SINGLE_COMMON else data.draw(
                st.sampled_from([256, 512, 1024])
            )
            outcomes, done = outcome_recorder()
            km.begin_get_key("app", number, size, done)
            pair.pump()
            delivered.extend(outcomes)
    pair.pump()
    hash_a, hash_b = pair.mirror_hashes()
    assert hash_a == hash_b
    assert pair.a.pending_count() == 0
    assert pair.b.pending_count() == 0
    if design is not Design.SINGLE_COMMON:
        assert pair.a.collision_count + pair.b.collision_count == 0


@settings(max_examples=15, deadline=None)
@given(st.data())
def test_exactly_once_supply(data):
    design = data.draw(st.sampled_from([Design.ENC_DEC_HASH, Design.BYTE_QUEUE]))
    pair = Pair(design)
    pair.feed(64)
    pair.maintain()
    seen = set()
    for _ in range(data.draw(st.integers(1, 10))):
        outcomes, done = outcome_recorder()
        pair.a.begin_get_key("app", 1, data.draw(st.sampled_from([256, 512])), done)
        pair.pump()
        if outcomes and outcomes[0].status == DELIVERED:
            uid = outcomes[0].keys[0].uuid
            assert uid not in seen
            seen.add(uid)
            assert pair.b.retrieve_escrow(uid) is not None
            assert pair.b.retrieve_escrow(uid) is None
