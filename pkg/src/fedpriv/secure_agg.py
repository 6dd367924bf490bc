"""Fixed-point additive secret sharing over the 2^64 ring.

Values are scaled by 2^16 and mapped two's-complement style into uint64, so
the modular sum of any number of shares reconstructs the encoded value
exactly; floating-point masking could not offer that. Per-coordinate
round-trip error of the codec is at most 2^-17.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .model import LayoutSlot, ParamVector

SCALE_BITS = 16
SCALE = float(1 << SCALE_BITS)
VALUE_BOUND = float(1 << 40)

_WIRE_HEADER = struct.Struct("<IHI")  # client_id u32, m u16, length u32


def _as_values(v: ParamVector | np.ndarray) -> np.ndarray:
    arr = v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)
    return arr.reshape(-1)


def encode_fixed(v: ParamVector | np.ndarray) -> np.ndarray:
    """Round to the 2^-16 grid and map into the unsigned 64-bit ring."""
    arr = _as_values(v)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot encode non-finite values")
    if arr.size and float(np.abs(arr).max()) >= VALUE_BOUND:
        raise ValueError(f"magnitude exceeds fixed-point bound 2^40")
    raw = np.round(arr * SCALE)  # exact: scaling by 2^16 introduces no rounding
    return raw.astype(np.int64).astype(np.uint64)


def decode_fixed(
    ring: np.ndarray, layout: tuple[LayoutSlot, ...] | None = None
) -> ParamVector | np.ndarray:
    """Invert encode_fixed; wraps into a ParamVector when a layout is given."""
    values = np.asarray(ring, dtype=np.uint64).astype(np.int64).astype(np.float64) / SCALE
    if layout is None:
        return values
    return ParamVector(values, layout)


@dataclass
class ShareSet:
    """Additive shares of one client's encoded parameter vector."""

    client_id: int
    shares: tuple[np.ndarray, ...]
    layout: tuple[LayoutSlot, ...] | None = None

    def __post_init__(self) -> None:
        if len(self.shares) < 1:
            raise ValueError("need at least one share")
        shares = tuple(np.asarray(s, dtype=np.uint64).reshape(-1) for s in self.shares)
        if len({s.size for s in shares}) != 1:
            raise ValueError("shares must have uniform length")
        self.shares = shares

    @property
    def m(self) -> int:
        return len(self.shares)

    @property
    def length(self) -> int:
        return int(self.shares[0].size)

    def ring_sum(self) -> np.ndarray:
        total = np.zeros(self.length, dtype=np.uint64)
        for s in self.shares:
            total = total + s  # uint64 arithmetic wraps mod 2^64
        return total


def split_shares(
    v: ParamVector | np.ndarray, m: int, seed: int, client_id: int = 0
) -> ShareSet:
    """m-1 uniform ring vectors plus a correction share; sums reconstruct v."""
    if m < 1:
        raise ValueError("share count m must be >= 1")
    target = encode_fixed(v)
    rng = np.random.default_rng(seed)
    parts = [
        rng.integers(0, 2**64, size=target.size, dtype=np.uint64) for _ in range(m - 1)
    ]
    last = target.copy()
    for p in parts:
        last = last - p
    parts.append(last)
    layout = v.layout if isinstance(v, ParamVector) else None
    return ShareSet(client_id=client_id, shares=tuple(parts), layout=layout)


def reconstruct(share_set: ShareSet) -> ParamVector | np.ndarray:
    return decode_fixed(share_set.ring_sum(), share_set.layout)


def ring_total(share_sets: list[ShareSet]) -> np.ndarray:
    if not share_sets:
        raise ValueError("no share sets")
    if len({s.length for s in share_sets}) != 1:
        raise ValueError("share sets must have uniform length")
    total = np.zeros(share_sets[0].length, dtype=np.uint64)
    for ss in share_sets:
        total = total + ss.ring_sum()
    return total


def secure_aggregate(
    share_sets: list[ShareSet], n: int | None = None
) -> ParamVector | np.ndarray:
    """Mean of the secret values: decode of the full modular share sum over n.

    Matches the plaintext mean within n*2^-17 per coordinate.
    """
    if not share_sets:
        raise ValueError("no share sets to aggregate")
    if n is None:
        n = len(share_sets)
    if n != len(share_sets):
        raise ValueError("n must equal the number of share sets")
    total = ring_total(share_sets)
    layout = next((s.layout for s in share_sets if s.layout is not None), None)
    values = np.asarray(decode_fixed(total), dtype=np.float64) / n
    if layout is None:
        return values
    return ParamVector(values, layout)


def share_set_to_bytes(share_set: ShareSet) -> bytes:
    """Wire form: (client_id u32, m u16, length u32) then little-endian u64 words."""
    head = _WIRE_HEADER.pack(share_set.client_id, share_set.m, share_set.length)
    body = b"".join(s.astype("<u8").tobytes() for s in share_set.shares)
    return head + body


def share_set_from_bytes(
    buf: bytes, layout: tuple[LayoutSlot, ...] | None = None
) -> ShareSet:
    if len(buf) < _WIRE_HEADER.size:
        raise ValueError("truncated share set header")
    client_id, m, length = _WIRE_HEADER.unpack_from(buf, 0)
    expected = _WIRE_HEADER.size + 8 * m * length
    if len(buf) != expected:
        raise ValueError(f"share payload length {len(buf)} != expected {expected}")
    shares = []
    off = _WIRE_HEADER.size
    for _ in range(m):
        words = np.frombuffer(buf, dtype="<u8", count=length, offset=off)
        shares.append(words.astype(np.uint64))
        off += 8 * length
    return ShareSet(client_id=client_id, shares=tuple(shares), layout=layout)


def partial_sum_to_bytes(edge_id: int, total: np.ndarray) -> bytes:
    """Edge-to-cloud partial aggregate, reusing the share wire layout with m=1."""
    return share_set_to_bytes(ShareSet(client_id=edge_id, shares=(total,)))
