"""Independent reference implementations used as test oracles.

Nothing here imports the package under test.
"""
from __future__ import annotations

import itertools
import struct


def _rotl(x: int, n: int) -> int:
    return ((x << n) | (x >> (32 - n))) & 0xFFFFFFFF


def sha1(data: bytes) -> str:
    """Straight transcription of the FIPS 180 SHA-1 algorithm."""
    h = [0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476, 0xC3D2E1F0]
    ml = len(data) * 8
    msg = data + b"\x80" + b"\x00" * ((55 - len(data)) % 64) + struct.pack(">Q", ml)
    assert len(msg) % 64 == 0
    for off in range(0, len(msg), 64):
        w = list(struct.unpack(">16I", msg[off:off + 64]))
        for i in range(16, 80):
            w.append(_rotl(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1))
        a, b, c, d, e = h
        for i in range(80):
            if i < 20:
                f, k = (b & c) | (~b & d), 0x5A827999
            elif i < 40:
                f, k = b ^ c ^ d, 0x6ED9EBA1
            elif i < 60:
                f, k = (b & c) | (b & d) | (c & d), 0x8F1BBCDC
            else:
                f, k = b ^ c ^ d, 0xCA62C1D6
            a, b, c, d, e = (_rotl(a, 5) + f + e + k + w[i]) & 0xFFFFFFFF, a, _rotl(b, 30), c, d
        h = [(x + y) & 0xFFFFFFFF for x, y in zip(h, (a, b, c, d, e))]
    return "".join(f"{x:08x}" for x in h)


def canonical_stream(script: bytes, deps: dict[str, bytes], metadata: dict[str, str]) -> bytes:
    """Hand-rolled canonical byte stream."""
    out = script.replace(b"\r\n", b"\n").replace(b"\r", b"\n")
    for path in sorted(deps):
        out += path.encode() + b"\x00" + deps[path]
    for key in sorted(metadata):
        out += f"{key}={metadata[key]}\n".encode()
    return out


def seed_of(text: str) -> int:
    return int(sha1(text.encode())[:16], 16)


def grid(*ranges) -> list[tuple]:
    """Row-major product by explicit nested enumeration."""
    out: list[tuple] = [()]
    for r in ranges:
        out = [prefix + (v,) for prefix in out for v in r]
    return out


def concat(files: list[bytes]) -> bytes:
    """Plain concatenation, each file newline-terminated."""
    return b"".join(f if f.endswith(b"\n") else f + b"\n" for f in files)


def concat_dedup(files: list[bytes]) -> bytes:
    """Concatenation keeping the common first line once."""
    first = files[0].split(b"\n", 1)[0] + b"\n"
    body = [f.split(b"\n", 1)[1] if b"\n" in f else b"" for f in files]
    return first + concat([b for b in body if b])


def reverse_reachable(edges: dict[str, set[str]], start: str) -> set[str]:
    """Every node whose dependency set transitively contains ``start``."""
    found: set[str] = set()
    changed = True
    while changed:
        changed = False
        for node, parents in edges.items():
            if node not in found and (start in parents or parents & found):
                found.add(node)
                changed = True
    return found


def product_length(lengths) -> int:
    return len(list(itertools.product(*[range(n) for n in lengths])))
