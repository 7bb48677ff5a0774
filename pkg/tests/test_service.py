import base64

import pytest

from kmslab.keystore import Design
from kmslab.service import frame_messages, make_embedded_pair, unframe_messages
from kmslab.kmlink import AssignPurposePayload, Direction, KmMessage, MsgKind


@pytest.fixture
def deque_pair():
    pair, node_a, node_b = make_embedded_pair(Design.APP_SHARED_DEQUE)
    pair.feed(256)
    pair.maintain()
    return pair


def warm_deque(pair, size_bits=256, via="a"):
    client = pair.client_a if via == "a" else pair.client_b
    peer = "kms-b" if via == "a" else "kms-a"
    client.get(f"/api/v1/keys/{peer}/enc_keys", params={"number": 1, "size": size_bits})
    pair.maintain(2)


class TestEncKeys:
    def test_identity_supply_round_trip(self, deque_pair):
        warm_deque(deque_pair, 256)
        response = deque_pair.client_a.get(
            "/api/v1/keys/kms-b/enc_keys", params={"number": 1, "size": 256}
        )
        assert response.status_code == 200
        keys = response.json()["keys"]
        assert len(keys) == 1
        assert len(base64.b64decode(keys[0]["key"])) == 32

    def test_multi_key_request_drains_deque(self, deque_pair):
        warm_deque(deque_pair, 512)
        response = deque_pair.client_a.get(
            "/api/v1/keys/kms-b/enc_keys", params={"number": 2, "size": 512}
        )
        assert response.status_code == 200
        assert len(response.json()["keys"]) == 2

    def test_empty_stores_give_503_with_retry_hint(self):
        pair, *_ = make_embedded_pair(Design.ENC_DEC_HASH)
        response = pair.client_a.get(
            "/api/v1/keys/kms-b/enc_keys", params={"number": 1, "size": 512}
        )
        assert response.status_code == 503
        assert "Retry-After" in response.headers

    def test_unknown_sae_is_404(self, deque_pair):
        assert (
            deque_pair.client_a.get("/api/v1/keys/nobody/enc_keys").status_code == 404
        )

    def test_malformed_query_is_400(self, deque_pair):
        response = deque_pair.client_a.get(
            "/api/v1/keys/kms-b/enc_keys", params={"number": "many"}
        )
        assert response.status_code == 400
        response = deque_pair.client_a.get(
            "/api/v1/keys/kms-b/enc_keys", params={"size": 255}
        )
        assert response.status_code == 400


class TestDecKeys:
    def test_peer_returns_same_bytes_once(self, deque_pair):
        warm_deque(deque_pair, 256)
        enc = deque_pair.client_a.get(
            "/api/v1/keys/kms-b/enc_keys", params={"number": 1, "size": 256}
        ).json()["keys"][0]
        dec = deque_pair.client_b.get(
            "/api/v1/keys/kms-a/dec_keys", params={"key_ID": enc["key_ID"]}
        )
        assert dec.status_code == 200
        assert dec.json()["keys"][0]["key"] == enc["key"]
        again = deque_pair.client_b.get(
            "/api/v1/keys/kms-a/dec_keys", params={"key_ID": enc["key_ID"]}
        )
        assert again.status_code == 404

    def test_random_uuid_is_404(self, deque_pair):
        response = deque_pair.client_b.get(
            "/api/v1/keys/kms-a/dec_keys",
            params={"key_ID": "00000000-0000-4000-8000-000000000000"},
        )
        assert response.status_code == 404


class TestStatus:
    def test_fresh_service_is_empty(self):
        pair, *_ = make_embedded_pair(Design.APP_SHARED_DEQUE)
        body = pair.client_a.get("/api/v1/keys/kms-b/status").json()
        assert body["stored_key_count"] == 0
        assert body["design"] == "deque"
        assert body["default_key_size_bits"] == 512

    def test_count_follows_ingest(self):
        pair, node_a, _ = make_embedded_pair(Design.SINGLE_COMMON)
        pair.feed(16)
        body = pair.client_a.get("/api/v1/keys/kms-b/status").json()
        assert body["stored_key_count"] == 16

    def test_design_echoes_config(self):
        for design in Design:
            pair, *_ = make_embedded_pair(design)
            body = pair.client_a.get("/api/v1/keys/kms-b/status").json()
            assert body["design"] == design.value


class TestAllDesignsRoundTrip:
    @pytest.mark.parametrize("design", list(Design))
    def test_enc_then_dec(self, design):
        pair, *_ = make_embedded_pair(design)
        pair.feed(64)
        pair.maintain()
        size = 512
        if design is Design.APP_SHARED_DEQUE:
            warm_deque(pair, size)
        enc = pair.client_a.get(
            "/api/v1/keys/kms-b/enc_keys", params={"number": 1, "size": size}
        )
        assert enc.status_code == 200, design
        key = enc.json()["keys"][0]
        dec = pair.client_b.get(
            "/api/v1/keys/kms-a/dec_keys", params={"key_ID": key["key_ID"]}
        )
        assert dec.json()["keys"][0]["key"] == key["key"]

    def test_both_directions_supply_independently(self):
        pair, *_ = make_embedded_pair(Design.ENC_DEC_HASH)
        pair.feed(64)
        pair.maintain()
        enc_a = pair.client_a.get(
            "/api/v1/keys/kms-b/enc_keys", params={"number": 1, "size": 512}
        )
        enc_b = pair.client_b.get(
            "/api/v1/keys/kms-a/enc_keys", params={"number": 1, "size": 512}
        )
        assert enc_a.status_code == enc_b.status_code == 200
        assert pair.mirror_hashes()[0] == pair.mirror_hashes()[1]


class TestWireFormat:
    def test_frame_round_trip(self):
        msgs = [
            KmMessage(MsgKind.ASSIGN_PURPOSE, 1, AssignPurposePayload(Direction.M2S, (1,))),
            KmMessage(MsgKind.ASSIGN_PURPOSE, 2, AssignPurposePayload(Direction.S2M, ())),
        ]
        assert unframe_messages(frame_messages(msgs)) == msgs
        assert unframe_messages(frame_messages([])) == []

    def test_km_endpoint_carries_binary_messages(self):
        pair, node_a, node_b = make_embedded_pair(Design.ENC_DEC_HASH)
        pair.feed(8)
        with node_a.state_lock:
            node_a.km.maintain()
            msgs = node_a.km.take_outbound()
        assert msgs
        raw = pair.client_b.post("/km/v1/messages", content=kmlink_encode(msgs[0]))
        assert raw.status_code == 200
        replies = unframe_messages(raw.content)
        assert replies and replies[0].kind is MsgKind.CONFIRM


def kmlink_encode(msg):
    from kmslab.kmlink import encode_message

    return encode_message(msg)
