#!/usr/bin/env python3
"""Writes the golden vectors in this directory.

Everything here is computed from the byte layouts in PROTOCOL.md and the
Ketama construction, using only the Python standard library. The Rust
tests compare against the JSON files; rerun this only when the format
changes on purpose.
"""

import bisect
import hashlib
import json
import os
import struct

HERE = os.path.dirname(os.path.abspath(__file__))
MAGIC = 0x42424D31


def frame(t, seq, payload):
    return struct.pack(">IBQI", MAGIC, t, seq, len(payload)) + payload


def u8(v): return struct.pack(">B", v)
def u16(v): return struct.pack(">H", v)
def u32(v): return struct.pack(">I", v)
def u64(v): return struct.pack(">Q", v)


def s(text):
    b = text.encode()
    return u16(len(b)) + b


def blob(b):
    return u32(len(b)) + b


def server(i, addr):
    return u32(i) + s(addr)


def servers(lst):
    return u32(len(lst)) + b"".join(server(i, a) for i, a in lst)


def record(file_id, offset, epoch, client, seq, payload):
    return s(file_id) + u64(offset) + u32(epoch) + u32(client) + u64(seq) + blob(payload)


def member(i, addr, anchor, joined, failed):
    out = server(i, addr)
    out += u8(0) if anchor is None else u8(1) + u32(anchor)
    out += u64(joined)
    out += u8(0) if failed is None else u8(1) + u64(failed)
    return out


def neighbor():
    return (server(2, "10.0.1.3:7100") + server(1, "10.0.1.2:7100")
            + servers([(3, "10.0.1.4:7100"), (0, "10.0.1.1:7100")]) + u64(5)
            + u32(2) + member(0, "10.0.1.1:7100", None, 1, None)
            + member(4, "10.0.1.5:7100", 3, 4, 5))


def mem_query():
    return server(1, "b") + u32(2) + server(1, "b") + u64(1000) + server(3, "d") + u64(52428800)


REC = record("ckpt/file0", 1048576, 7, 3, 42, b"hello burst buffer")

FRAMES = [
    ("put", 0x01, 42, u8(0) + REC),
    ("put_forced", 0x01, 43, u8(1) + record("f", 0, 1, 0, 0, b"")),
    ("put_ack", 0x02, 42, u32(2)),
    ("repl_put", 0x03, 9, u32(1) + u8(1) + REC),
    ("repl_ack", 0x04, 9, u64(77) + u32(3)),
    ("get", 0x05, 5, s("ckpt/file0") + u64(0) + u64(4096) + u32(0xFFFFFFFF) + u8(1)),
    ("get_resp", 0x06, 5, u8(1) + u32(2) + REC + record("x", 8, 2, 1, 1, b"\x00\xff")),
    ("redirect", 0x07, 11, server(3, "10.0.1.4:7100") + u64(268435456)),
    ("mem_query", 0x08, 12, mem_query()),
    ("mem_resp", 0x09, 12, mem_query()),
    ("ping", 0x0A, 100, u32(4)),
    ("ping_ack", 0x0B, 100, u32(5)),
    ("neighbor_query", 0x0C, 101, neighbor()),
    ("neighbor_resp", 0x0D, 101, neighbor()),
    ("fail_report_server", 0x0E, 13, server(2, "10.0.1.3:7100") + u8(0) + u32(1) + u64(6)),
    ("fail_report_client", 0x0E, 14, server(2, "10.0.1.3:7100") + u8(1) + u32(7) + u64(6)),
    ("fail_confirm_req", 0x0F, 15, server(2, "10.0.1.3:7100")),
    ("fail_confirm_resp", 0x10, 15, u32(2) + u8(1)),
    ("join_req", 0x11, 16, s("10.0.1.9:7100") + u32(3)),
    ("ring_update", 0x12, 17, u64(8) + servers([(0, "a"), (1, "b"), (5, "c")])),
    ("register_server", 0x13, 0, u8(0) + u32(0) + s("10.0.1.1:7100")),
    ("register_client", 0x13, 1, u8(1) + u32(12) + s("")),
    ("register_hello", 0x13, 2, u8(2) + u32(0) + s("10.0.0.1:7000")),
    ("flush_cmd", 0x14, 18, u64(3) + u32(2) + u8(0) + servers([(0, "a"), (1, "b")])),
    ("flush_cmd_client", 0x14, 19, u64(0) + u32(2) + u8(0) + servers([])),
    ("shuffle_meta", 0x15, 20, u64(3) + u32(1) + u32(2)
        + s("ior/testfile") + u64(268435456) + u32(2) + s("ior/testfile.00001") + u64(4096) + u32(1)),
    ("shuffle_piece", 0x16, 21, u8(0) + u64(3) + u32(1) + REC),
    ("shuffle_end", 0x16, 22, u8(1) + u64(3) + u32(1) + u64(64)),
    ("flush_done", 0x17, 23, u64(3) + u32(2) + u32(1) + u8(1) + u32(1) + u64(67108864)),
    ("lookup_req", 0x18, 24, s("ckpt/file0") + u64(4096) + u64(8192) + u32(0xFFFFFFFF)),
    ("lookup_broadcast", 0x19, 24, u8(0)),
    ("lookup_owners", 0x19, 25, u8(1) + u32(2) + u32(2)
        + server(0, "a") + u64(0) + u64(4096) + server(1, "b") + u64(4096) + u64(4096)),
    ("error", 0x1A, 26, u16(2) + u8(0x01) + u32(250) + s("memory full")),
]

# Spill-file record: key_len, payload_len, epoch, offset, file_id_len,
# client, seq, then file_id bytes and payload.
def spill_record(file_id, offset, epoch, client, seq, payload):
    key = f"{file_id}@{offset}".encode()
    fid = file_id.encode()
    return (u32(len(key)) + u32(len(payload)) + u32(epoch) + u64(offset) + u16(len(fid))
            + u32(client) + u64(seq) + fid + payload)


def ketama_points(addrs, per_server=160):
    pts = []
    for a in addrs:
        for i in range(per_server // 4):
            d = hashlib.md5(f"{a}-{i}".encode()).digest()
            for j in range(4):
                pts.append((struct.unpack("<I", d[4 * j:4 * j + 4])[0], a))
    pts.sort()
    return pts


def key_hash(key):
    return struct.unpack("<I", hashlib.md5(key.encode()).digest()[:4])[0]


def owner(pts, hashes, key):
    i = bisect.bisect_left(hashes, key_hash(key))
    return pts[0 if i == len(pts) else i][1]


def bench_key(i):
    """Keys used for the distribution and stability checks."""
    return f"ckpt/file{i % 97}@{(i // 97) * 1048576}"


def main():
    frames = [
        {"name": n, "type": t, "seq": q, "frame": frame(t, q, p).hex()}
        for n, t, q, p in FRAMES
    ]
    spill = [
        {"file_id": "ckpt/file0", "offset": 1048576, "epoch": 7, "client": 3, "seq": 42,
         "payload": b"hello burst buffer".hex(),
         "bytes": spill_record("ckpt/file0", 1048576, 7, 3, 42, b"hello burst buffer").hex()},
        {"file_id": "f", "offset": 0, "epoch": 1, "client": 0, "seq": 0, "payload": "",
         "bytes": spill_record("f", 0, 1, 0, 0, b"").hex()},
    ]
    with open(os.path.join(HERE, "wire_frames.json"), "w") as f:
        json.dump({"frames": frames, "spill_records": spill}, f, indent=1)

    abcd = ketama_points(["A", "B", "C", "D"])
    h = [p[0] for p in abcd]
    eight = [f"10.0.1.{k}:7100" for k in range(1, 9)]
    pts = ketama_points(eight)
    hs = [p[0] for p in pts]
    n = 100_000
    counts = {a: 0 for a in eight}
    for i in range(n):
        counts[owner(pts, hs, bench_key(i))] += 1
    ketama = {
        "points_per_server": 160,
        "abcd": {
            "servers": ["A", "B", "C", "D"],
            "points": len(abcd),
            "first_points": [[p, a] for p, a in abcd[:8]],
            "key": "ckpt/file0@0",
            "key_hash": key_hash("ckpt/file0@0"),
            "owner": owner(abcd, h, "ckpt/file0@0"),
        },
        "distribution": {
            "servers": eight,
            "keys": n,
            "key_format": "ckpt/file{i % 97}@{(i // 97) * 1048576}",
            "counts": [counts[a] for a in eight],
            "fractions": [counts[a] / n for a in eight],
        },
    }
    with open(os.path.join(HERE, "ketama.json"), "w") as f:
        json.dump(ketama, f, indent=1)


if __name__ == "__main__":
    main()
