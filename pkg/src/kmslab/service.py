"""HTTP key-delivery endpoint in the ETSI GS QKD 014 style.

A service node wraps one key manager. Applications fetch keys from
`/api/v1/keys/{peer}/enc_keys`; the receiving side retrieves the same
material once by UUID from `/api/v1/keys/{peer}/dec_keys`. The two nodes
of a pair synchronize over `/km/v1/messages`, carrying the same versioned
binary records the simulator uses, so service behavior and benchmark
behavior cannot diverge.

Concurrency: store mutations run under one state lock per node and the
lock is never held across the wire, so conflicting in-flight operations
resolve through the protocol's reject-and-rollback path rather than
blocking each other.
"""
from __future__ import annotations

import base64
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from kmslab.keystore import Design
from kmslab.kmlink import (
    DELIVERED,
    GetKeyOutcome,
    Km,
    KmConfig,
    KmMessage,
    MsgKind,
    RejectPayload,
    decode_message,
    encode_message,
)
from kmslab.seeding import KeyIdSource, UuidSource, derive_rng

Transport = Callable[[bytes], bytes]


def frame_messages(msgs: list[KmMessage]) -> bytes:
    out = bytearray(struct.pack(">I", len(msgs)))
    for msg in msgs:
        encoded = encode_message(msg)
        out += struct.pack(">I", len(encoded))
        out += encoded
    return bytes(out)


def unframe_messages(data: bytes) -> list[KmMessage]:
    (count,) = struct.unpack_from(">I", data, 0)
    pos = 4
    msgs = []
    for _ in range(count):
        (length,) = struct.unpack_from(">I", data, pos)
        pos += 4
        msgs.append(decode_message(data[pos : pos + length]))
        pos += length
    return msgs


@dataclass
class ServiceConfig:
    local_sae_id: str
    peer_sae_id: str
    km: KmConfig = field(default_factory=KmConfig)
    hold_time_s: float = 0.1
    seed: int = 100
    # optional built-in rate-process feed (both nodes derive the same
    # material from the shared seed and epoch)
    feed_key_rate_bps: int = 0
    feed_key_size_bytes: int = 4096
    feed_epoch_s: float = 0.0


class ServiceNode:
    """One side of a key-delivery pair, embeddable or served over HTTP."""

    def __init__(self, config: ServiceConfig, transport: Optional[Transport] = None) -> None:
        self.config = config
        self.transport: Optional[Transport] = transport
        self.state_lock = threading.RLock()
        self.send_lock = threading.Lock()
        seed = config.seed
        node = config.local_sae_id
        self.km = Km(
            node,
            config.peer_sae_id,
            config.km,
            uuid_source=UuidSource(derive_rng(seed, 0, f"svc-uuids:{node}")),
            key_id_source=KeyIdSource(derive_rng(seed, 0, f"svc-ids:{node}")),
            pick_rng=derive_rng(seed, 0, f"svc-pick:{node}"),
            clock=lambda: time.time_ns() // 1000,
            strict_ordering=False,
        )
        self._feed_rng = derive_rng(seed, 0, "svc-feed")
        self._feed_ids = KeyIdSource(derive_rng(seed, 0, "svc-feed-ids"))
        self._feed_index = 0

    # -- wire pumping ----------------------------------------------------------

    def pump(self) -> None:
        """Send queued messages to the peer and absorb its replies."""
        while True:
            with self.state_lock:
                msgs = self.km.take_outbound()
            if not msgs:
                return
            for msg in msgs:
                replies = self._post(msg)
                with self.state_lock:
                    for reply in replies:
                        self.km.handle_message(reply)

    def _post(self, msg: KmMessage) -> list[KmMessage]:
        if self.transport is None:
            raise RuntimeError("service node has no peer transport")
        try:
            with self.send_lock:
                raw = self.transport(encode_message(msg))
            return unframe_messages(raw)
        except Exception:
            # unreachable or timed-out peer: treated as a rejection
            return [
                KmMessage(MsgKind.REJECT, 0, RejectPayload(msg.msg_seq, "timeout"))
            ]

    def handle_wire_message(self, body: bytes) -> bytes:
        msg = decode_message(body)
        with self.state_lock:
            self.km.handle_message(msg)
            replies = self.km.take_outbound()
        return frame_messages(replies)

    # -- operations --------------------------------------------------------------

    def get_keys(self, number: int, size_bits: int) -> GetKeyOutcome:
        holder: list[GetKeyOutcome] = []
        with self.state_lock:
            self.km.begin_get_key("sae", number, size_bits, holder.append)
        self.pump()
        if not holder:
            return GetKeyOutcome("unavailable", "timeout")
        return holder[0]

    def retrieve(self, key_id: str) -> Optional[bytes]:
        with self.state_lock:
            return self.km.retrieve_escrow(key_id)

    def status(self) -> dict:
        with self.state_lock:
            return {
                "stored_key_count": self.km.common.available_count,
                "default_key_size_bits": 8 * self.config.km.default_key_size_bytes,
                "max_key_per_request": self.config.km.max_keys_per_request,
                "design": self.config.km.design.value,
            }

    # -- key feed and maintenance ----------------------------------------------

    def feed(self, raw: bytes, ids: list[int]) -> None:
        """Ingest one link-generated key (the peer must ingest the same)."""
        with self.state_lock:
            self.km.ingest(raw, ids)
        self.pump()

    def feed_from_rate_process(self, now_s: Optional[float] = None) -> int:
        """Generate any keys the shared-seed rate process owes by `now_s`.

        Both nodes run the same process, so they ingest identical material
        without key bytes ever crossing the wire.
        """
        cfg = self.config
        if cfg.feed_key_rate_bps <= 0:
            return 0
        now = time.time() if now_s is None else now_s
        period = cfg.feed_key_size_bytes * 8 / cfg.feed_key_rate_bps
        produced = 0
        while cfg.feed_epoch_s + (self._feed_index + 1) * period <= now:
            self._feed_index += 1
            raw = self._feed_rng.randbytes(cfg.feed_key_size_bytes)
            blocks = cfg.feed_key_size_bytes // cfg.km.default_key_size_bytes
            ids = [self._feed_ids.next_id() for _ in range(blocks)]
            self.feed(raw, ids)
            produced += 1
        return produced

    def run_maintenance(self) -> None:
        with self.state_lock:
            self.km.maintain()
        self.pump()


def create_service(node: ServiceNode) -> FastAPI:
    app = FastAPI(title="key delivery service", docs_url=None, redoc_url=None)
    app.state.node = node

    @app.exception_handler(RequestValidationError)
    async def malformed_query(_request: Request, _exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"message": "malformed request"})

    def check_sae(sae_id: str) -> Optional[JSONResponse]:
        if sae_id != node.config.peer_sae_id:
            return JSONResponse(status_code=404, content={"message": f"unknown SAE {sae_id}"})
        return None

    @app.get("/api/v1/keys/{slave_sae_id}/enc_keys")
    def enc_keys(slave_sae_id: str, number: int = 1, size: int = 0):
        if (err := check_sae(slave_sae_id)) is not None:
            return err
        if size <= 0:
            size = 8 * node.config.km.default_key_size_bytes
        try:
            outcome = node.get_keys(number, size)
        except ValueError as exc:
            return JSONResponse(status_code=400, content={"message": str(exc)})
        if outcome.status != DELIVERED:
            return JSONResponse(
                status_code=503,
                content={"message": f"keys unavailable ({outcome.reason or outcome.status})"},
                headers={"Retry-After": f"{node.config.hold_time_s:.3f}"},
            )
        return {
            "keys": [
                {"key_ID": key.uuid, "key": base64.b64encode(key.material).decode()}
                for key in outcome.keys
            ]
        }

    @app.get("/api/v1/keys/{master_sae_id}/dec_keys")
    def dec_keys(master_sae_id: str, key_ID: str):
        if (err := check_sae(master_sae_id)) is not None:
            return err
        material = node.retrieve(key_ID)
        if material is None:
            return JSONResponse(
                status_code=404, content={"message": f"unknown or served key {key_ID}"}
            )
        return {"keys": [{"key_ID": key_ID, "key": base64.b64encode(material).decode()}]}

    @app.get("/api/v1/keys/{slave_sae_id}/status")
    def status(slave_sae_id: str):
        if (err := check_sae(slave_sae_id)) is not None:
            return err
        return node.status()

    @app.post("/km/v1/messages")
    async def km_messages(request: Request):
        body = await request.body()
        return Response(
            content=node.handle_wire_message(body), media_type="application/octet-stream"
        )

    return app


def make_embedded_pair(
    design: Design = Design.APP_SHARED_DEQUE,
    default_key_size_bytes: int = 64,
    seed: int = 100,
    km_overrides: Optional[dict] = None,
) -> tuple["EmbeddedPair", ServiceNode, ServiceNode]:
    """Two wired service nodes with in-process HTTP transports, for tests
    and demos."""
    from fastapi.testclient import TestClient

    def km_config() -> KmConfig:
        cfg = KmConfig(design=design, default_key_size_bytes=default_key_size_bytes)
        for key, value in (km_overrides or {}).items():
            setattr(cfg, key, value)
        return cfg

    node_a = ServiceNode(ServiceConfig("kms-a", "kms-b", km=km_config(), seed=seed))
    node_b = ServiceNode(ServiceConfig("kms-b", "kms-a", km=km_config(), seed=seed))
    app_a, app_b = create_service(node_a), create_service(node_b)
    client_a, client_b = TestClient(app_a), TestClient(app_b)
    node_a.transport = lambda body: client_b.post(
        "/km/v1/messages", content=body
    ).content
    node_b.transport = lambda body: client_a.post(
        "/km/v1/messages", content=body
    ).content
    return EmbeddedPair(node_a, node_b, client_a, client_b, seed), node_a, node_b


@dataclass
class EmbeddedPair:
    node_a: ServiceNode
    node_b: ServiceNode
    client_a: "TestClient"  # noqa: F821 - test dependency
    client_b: "TestClient"  # noqa: F821
    seed: int

    def __post_init__(self) -> None:
        self._rng = derive_rng(self.seed, 0, "embedded-feed")
        self._ids = KeyIdSource(derive_rng(self.seed, 0, "embedded-feed-ids"))

    def feed(self, n_keys: int) -> None:
        block = self.node_a.config.km.default_key_size_bytes
        raw = self._rng.randbytes(n_keys * block)
        ids = [self._ids.next_id() for _ in range(n_keys)]
        self.node_a.feed(raw, list(ids))
        self.node_b.feed(raw, list(ids))

    def maintain(self, rounds: int = 1) -> None:
        master = self.node_a if self.node_a.km.is_master else self.node_b
        for _ in range(rounds):
            master.run_maintenance()

    def mirror_hashes(self) -> tuple[str, str]:
        with self.node_a.state_lock, self.node_b.state_lock:
            return self.node_a.km.mirror_state_hash(), self.node_b.km.mirror_state_hash()


def serve(
    bind: str,
    peer: str,
    role: str,
    config: ServiceConfig,
    *,
    log_level: str = "info",
) -> None:
    """Run one service node against a remote peer (blocking)."""
    import httpx
    import uvicorn

    peer_url = peer if peer.startswith("http") else f"http://{peer}"
    client = httpx.Client(base_url=peer_url, timeout=5.0)
    node = ServiceNode(
        config, transport=lambda body: client.post("/km/v1/messages", content=body).content
    )
    expected = "master" if node.km.is_master else "slave"
    if role != expected:
        raise SystemExit(
            f"role {role!r} contradicts the id-order election: "
            f"{config.local_sae_id!r} is the {expected}"
        )
    app = create_service(node)

    def background() -> None:
        while True:
            try:
                node.feed_from_rate_process()
                if node.km.is_master:
                    node.run_maintenance()
            except Exception:
                pass
            time.sleep(config.km.maintain_tick_us / 1e6)

    threading.Thread(target=background, daemon=True).start()
    host, _, port = bind.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level=log_level)
