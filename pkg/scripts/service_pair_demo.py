#!/usr/bin/env python3
"""Demonstrate the key-delivery round trip on an in-process service pair.

Feeds both key managers the same link-generated material, lets the master
distribute it into shared deques, fetches keys over the delivery API of
one side, and retrieves the same material by UUID from the peer.
"""
import base64

from kmslab.keystore import Design
from kmslab.service import make_embedded_pair


def main() -> None:
    pair, node_a, node_b = make_embedded_pair(Design.APP_SHARED_DEQUE)
    pair.feed(128)
    pair.maintain()

    print("status:", pair.client_a.get("/api/v1/keys/kms-b/status").json())

    # the first request of a size establishes its shared deque
    pair.client_a.get("/api/v1/keys/kms-b/enc_keys", params={"size": 256})
    pair.maintain(2)

    enc = pair.client_a.get(
        "/api/v1/keys/kms-b/enc_keys", params={"number": 2, "size": 256}
    )
    print("enc_keys:", enc.status_code)
    for key in enc.json()["keys"]:
        dec = pair.client_b.get(
            "/api/v1/keys/kms-a/dec_keys", params={"key_ID": key["key_ID"]}
        )
        match = dec.json()["keys"][0]["key"] == key["key"]
        print(
            f"  {key['key_ID']}: {len(base64.b64decode(key['key']))} bytes, "
            f"peer copy identical: {match}"
        )

    hash_a, hash_b = pair.mirror_hashes()
    print("mirrored state:", hash_a == hash_b)


if __name__ == "__main__":
    main()
