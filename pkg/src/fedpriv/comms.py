"""Upload compression stack and the modeled network.

Stages: top-k sparsification with an error-feedback residual, exact delta
encoding against the previous upload, symmetric uniform quantization, and
canonical Huffman coding. The wire layout is bit-exact:

    big-endian header {round u32, client u32, codec u8, dim u32, nnz u32,
    clip f64}, then the index stream as delta-gapped varints (omitted when
    nnz == dim, i.e. a dense upload), then either nnz big-endian f32 values
    or one serialized entropy blob.

The codec byte is a two-bit field: bit0 = payload is an entropy blob rather
than raw f32, bit1 = values are deltas against the previous upload.
"""

from __future__ import annotations

import heapq
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import ParamVector


class WireError(ValueError):
    """Malformed or truncated wire payload."""


# ---------------------------------------------------------------- link model


@dataclass(frozen=True)
class LinkModel:
    """Latency plus bandwidth-proportional transfer time."""

    bandwidth: float  # bytes per second
    latency: float = 0.0

    def __post_init__(self) -> None:
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")


def transmit(nbytes: int, link: LinkModel) -> float:
    """Seconds to move nbytes over the link: latency + bytes/bandwidth."""
    if nbytes < 0:
        raise ValueError("byte count must be >= 0")
    return link.latency + nbytes / link.bandwidth


class TrafficLedger:
    """Per-round, per-direction, per-node byte counts (append-only)."""

    def __init__(self) -> None:
        self._records: dict[tuple[int, str], dict[object, int]] = {}

    def record(self, round_no: int, direction: str, node: object, nbytes: int) -> None:
        if direction not in ("up", "down"):
            raise ValueError("direction must be 'up' or 'down'")
        if nbytes < 0:
            raise ValueError("byte count must be >= 0")
        bucket = self._records.setdefault((round_no, direction), {})
        bucket[node] = bucket.get(node, 0) + int(nbytes)

    def round_total(self, round_no: int, direction: str) -> int:
        return sum(self._records.get((round_no, direction), {}).values())

    def total(self, direction: str) -> int:
        return sum(
            sum(bucket.values())
            for (r, d), bucket in self._records.items()
            if d == direction
        )

    def node_bytes(self, round_no: int, direction: str, node: object) -> int:
        return self._records.get((round_no, direction), {}).get(node, 0)

    def as_dict(self) -> dict[tuple[int, str], dict[object, int]]:
        return {k: dict(v) for k, v in self._records.items()}


# ------------------------------------------------------------ sparsification


def _dense(v: "SparseUpdate | ParamVector | np.ndarray") -> np.ndarray:
    if isinstance(v, SparseUpdate):
        return v.to_dense()
    if isinstance(v, ParamVector):
        return v.values
    return np.asarray(v, dtype=np.float64).reshape(-1)


@dataclass
class SparseUpdate:
    """Strictly increasing indices into a dim-long vector, with their values."""

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        self.dim = int(self.dim)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.indices.size != self.values.size:
            raise ValueError("indices and values must have the same length")
        if self.indices.size:
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise ValueError("index out of range")
            if np.any(np.diff(self.indices) <= 0):
                raise ValueError("indices must be strictly increasing")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    @classmethod
    def from_dense(cls, vec: np.ndarray) -> "SparseUpdate":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        idx = np.nonzero(vec)[0]
        return cls(vec.size, idx, vec[idx])


def topk_sparsify(
    delta: ParamVector | np.ndarray, k: int, residual: ParamVector | np.ndarray
) -> tuple[SparseUpdate, np.ndarray]:
    """Keep the k largest-magnitude coordinates of delta + residual.

    Ties break toward lower indices. The dropped remainder becomes the new
    residual (error feedback), so kept + residual always equals the input sum.
    """
    d = _dense(delta)
    r = _dense(residual)
    if d.size != r.size:
        raise ValueError("delta and residual dims disagree")
    if not (0 <= k <= d.size):
        raise ValueError(f"k must lie in [0, {d.size}]")
    work = d + r
    if k == 0:
        return SparseUpdate(work.size, [], []), work
    order = np.argsort(-np.abs(work), kind="stable")
    keep = np.sort(order[:k])
    new_residual = work.copy()
    new_residual[keep] = 0.0
    return SparseUpdate(work.size, keep, work[keep]), new_residual


# ------------------------------------------------------------- delta coding


def _two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Knuth TwoSum: s + e == a + b exactly in IEEE round-to-nearest
    s = a + b
    bb = s - a
    e = (a - (s - bb)) + (b - bb)
    return s, e


@dataclass
class DeltaPayload:
    """Exact sparse difference current - previous over the union support.

    Each coordinate is a compensated pair (hi, lo) with hi + lo equal to the
    true difference, which lets delta_decode reproduce the current vector
    bit-exactly (for dynamic ranges within 2^53). Transport paths that do not
    need exactness collapse the pair via .values.
    """

    dim: int
    indices: np.ndarray
    hi: np.ndarray
    lo: np.ndarray

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        if not (self.indices.size == self.hi.size == self.lo.size):
            raise ValueError("payload arrays must have uniform length")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def values(self) -> np.ndarray:
        return self.hi + self.lo


def delta_encode(
    current: SparseUpdate | ParamVector | np.ndarray,
    previous: SparseUpdate | ParamVector | np.ndarray,
) -> DeltaPayload:
    """Sparse difference against the previous upload, over coordinates that changed."""
    cur = _dense(current)
    prev = _dense(previous)
    if cur.size != prev.size:
        raise ValueError("current and previous dims disagree")
    hi, lo = _two_sum(cur, -prev)
    idx = np.nonzero(cur != prev)[0]
    return DeltaPayload(cur.size, idx, hi[idx], lo[idx])


def delta_decode(
    payload: DeltaPayload, previous: SparseUpdate | ParamVector | np.ndarray
) -> SparseUpdate:
    """Rebuild the current upload from the payload and the previous one."""
    prev = _dense(previous)
    if prev.size != payload.dim:
        raise ValueError("previous dim does not match payload")
    out = prev.copy()
    t, e2 = _two_sum(prev[payload.indices], payload.hi)
    out[payload.indices] = t + (e2 + payload.lo)
    return SparseUpdate.from_dense(out)


# ------------------------------------------------------------- quantization


def quantize(
    values: np.ndarray, bits: int, clip: float
) -> tuple[np.ndarray, int]:
    """Symmetric uniform quantizer over [-clip, clip].

    The grid has an exact zero level and exact +-clip endpoints (symbols
    0 .. 2^bits, step clip/2^(bits-1)), so the round-trip error is at most
    clip/2^bits, inside the clip/(2^bits - 1) contract. Out-of-range inputs
    are clamped; the clamp count is returned alongside the symbols.
    """
    if not (2 <= bits <= 16):
        raise ValueError("bits must lie in [2, 16]")
    if not (np.isfinite(clip) and clip > 0):
        raise ValueError("clip must be positive")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    half = 1 << (bits - 1)
    step = clip / half
    clamped = np.clip(v, -clip, clip)
    n_clamped = int(np.count_nonzero(v != clamped))
    symbols = (np.round(clamped / step) + half).astype(np.int64)
    return symbols, n_clamped


def dequantize(symbols: np.ndarray, bits: int, clip: float) -> np.ndarray:
    if not (2 <= bits <= 16):
        raise ValueError("bits must lie in [2, 16]")
    if not (np.isfinite(clip) and clip > 0):
        raise ValueError("clip must be positive")
    s = np.asarray(symbols, dtype=np.int64).reshape(-1)
    half = 1 << (bits - 1)
    if s.size and (s.min() < 0 or s.max() > 2 * half):
        raise ValueError("symbol outside the quantizer alphabet")
    step = clip / half
    return (s - half) * step


# ----------------------------------------------------------- entropy coding

_MAX_SYMBOL = 0xFFFF


def huffman_code_lengths(freqs: Mapping[int, int]) -> dict[int, int]:
    """Optimal prefix-code lengths for the given symbol frequencies.

    A single-symbol alphabet gets length 0, which entropy_encode treats as a
    run-length case (no code bits at all).
    """
    items = sorted((s, f) for s, f in freqs.items() if f > 0)
    if not items:
        return {}
    if len(items) == 1:
        return {items[0][0]: 0}
    # leaves first, then merged nodes; parent pointers give the depths
    parents: dict[int, int] = {}
    heap: list[tuple[int, int]] = []
    node_id = 0
    leaf_of = {}
    for sym, f in items:
        heap.append((f, node_id))
        leaf_of[sym] = node_id
        node_id += 1
    heapq.heapify(heap)
    while len(heap) > 1:
        fa, a = heapq.heappop(heap)
        fb, b = heapq.heappop(heap)
        parents[a] = node_id
        parents[b] = node_id
        heapq.heappush(heap, (fa + fb, node_id))
        node_id += 1
    lengths = {}
    for sym, _ in items:
        depth = 0
        node = leaf_of[sym]
        while node in parents:
            node = parents[node]
            depth += 1
        lengths[sym] = depth
    return lengths


def canonical_codes(lengths: Mapping[int, int]) -> dict[int, tuple[int, int]]:
    """Canonical (code, nbits) assignment: sorted by length, then symbol."""
    ordered = sorted((l, s) for s, l in lengths.items() if l > 0)
    codes: dict[int, tuple[int, int]] = {}
    code = 0
    prev_len = ordered[0][0] if ordered else 0
    for length, sym in ordered:
        code <<= length - prev_len
        codes[sym] = (code, length)
        code += 1
        prev_len = length
    return codes


@dataclass
class EncodedBlob:
    """Losslessly coded symbol stream; codec is 'raw' (u16) or 'huffman'."""

    codec_id: str
    payload: bytes
    symbol_count: int
    code_lengths: dict[int, int]

    def __post_init__(self) -> None:
        if self.codec_id not in ("raw", "huffman"):
            raise ValueError(f"unknown codec {self.codec_id!r}")


def _pack_bits(symbols: np.ndarray, codes: dict[int, tuple[int, int]]) -> bytes:
    acc = 0
    nbits = 0
    out = bytearray()
    for s in symbols:
        code, length = codes[int(s)]
        acc = (acc << length) | code
        nbits += length
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
        acc &= (1 << nbits) - 1
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return bytes(out)


def _unpack_bits(payload: bytes, lengths: Mapping[int, int], count: int) -> np.ndarray:
    by_len: dict[int, list[int]] = {}
    for sym, l in sorted(lengths.items()):
        by_len.setdefault(l, []).append(sym)
    first_code: dict[int, int] = {}
    code = 0
    prev = min(by_len) if by_len else 0
    for l in sorted(by_len):
        code <<= l - prev
        first_code[l] = code
        code += len(by_len[l])
        prev = l
    out = np.empty(count, dtype=np.int64)
    got = 0
    cur = 0
    cur_len = 0
    for byte in payload:
        for shift in range(7, -1, -1):
            cur = (cur << 1) | ((byte >> shift) & 1)
            cur_len += 1
            if cur_len in first_code:
                offset = cur - first_code[cur_len]
                if 0 <= offset < len(by_len[cur_len]):
                    out[got] = by_len[cur_len][offset]
                    got += 1
                    cur = 0
                    cur_len = 0
                    if got == count:
                        return out
    if got != count:
        raise WireError("bitstream ended before all symbols were decoded")
    return out


def _raw_blob(symbols: np.ndarray) -> EncodedBlob:
    return EncodedBlob(
        "raw", symbols.astype(">u2").tobytes(), int(symbols.size), {}
    )


def entropy_encode(symbols: Sequence[int] | np.ndarray) -> EncodedBlob:
    """Canonical Huffman coding of an integer stream (alphabet <= 2^16).

    Picks the raw fixed-width form instead whenever the Huffman table would
    make it larger; either way the blob decodes to the exact input stream.
    """
    arr = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if arr.size == 0:
        return EncodedBlob("raw", b"", 0, {})
    if arr.min() < 0 or arr.max() > _MAX_SYMBOL:
        raise ValueError("symbol outside the 16-bit alphabet")
    lengths = huffman_code_lengths(Counter(arr.tolist()))
    if len(lengths) == 1:
        huff = EncodedBlob("huffman", b"", int(arr.size), lengths)
    else:
        codes = canonical_codes(lengths)
        huff = EncodedBlob("huffman", _pack_bits(arr, codes), int(arr.size), lengths)
    raw = _raw_blob(arr)
    if len(blob_to_bytes(huff)) <= len(blob_to_bytes(raw)):
        return huff
    return raw


def entropy_decode(blob: EncodedBlob) -> np.ndarray:
    if blob.symbol_count == 0:
        return np.empty(0, dtype=np.int64)
    if blob.codec_id == "raw":
        return np.frombuffer(blob.payload, dtype=">u2").astype(np.int64)
    if len(blob.code_lengths) == 1:
        ((sym, length),) = blob.code_lengths.items()
        if length != 0:
            raise WireError("degenerate huffman table must have length 0")
        return np.full(blob.symbol_count, sym, dtype=np.int64)
    return _unpack_bits(blob.payload, blob.code_lengths, blob.symbol_count)


_BLOB_HEAD = struct.Struct(">BI")  # codec, symbol_count
_TABLE_HEAD = struct.Struct(">H")  # entries
_TABLE_ENTRY = struct.Struct(">HB")  # symbol, code length
_PAYLOAD_LEN = struct.Struct(">I")


def blob_to_bytes(blob: EncodedBlob) -> bytes:
    codec = 0 if blob.codec_id == "raw" else 1
    out = [_BLOB_HEAD.pack(codec, blob.symbol_count)]
    if codec == 1:
        out.append(_TABLE_HEAD.pack(len(blob.code_lengths)))
        for sym, length in sorted(blob.code_lengths.items()):
            out.append(_TABLE_ENTRY.pack(sym, length))
        out.append(_PAYLOAD_LEN.pack(len(blob.payload)))
    out.append(blob.payload)
    return b"".join(out)


def blob_from_bytes(buf: bytes, offset: int = 0) -> tuple[EncodedBlob, int]:
    """Parse one blob; returns it plus the offset just past its last byte."""
    try:
        codec, count = _BLOB_HEAD.unpack_from(buf, offset)
    except struct.error as exc:
        raise WireError("truncated blob header") from exc
    offset += _BLOB_HEAD.size
    if codec == 0:
        need = 2 * count
        if len(buf) < offset + need:
            raise WireError("truncated raw symbol payload")
        payload = bytes(buf[offset : offset + need])
        return EncodedBlob("raw", payload, count, {}), offset + need
    if codec != 1:
        raise WireError(f"unknown blob codec {codec}")
    try:
        (entries,) = _TABLE_HEAD.unpack_from(buf, offset)
        offset += _TABLE_HEAD.size
        lengths = {}
        for _ in range(entries):
            sym, length = _TABLE_ENTRY.unpack_from(buf, offset)
            offset += _TABLE_ENTRY.size
            lengths[sym] = length
        (plen,) = _PAYLOAD_LEN.unpack_from(buf, offset)
        offset += _PAYLOAD_LEN.size
    except struct.error as exc:
        raise WireError("truncated huffman table") from exc
    if len(buf) < offset + plen:
        raise WireError("truncated huffman payload")
    payload = bytes(buf[offset : offset + plen])
    return EncodedBlob("huffman", payload, count, lengths), offset + plen


# ------------------------------------------------------------------ varints


def encode_varints(ints: Sequence[int]) -> bytes:
    out = bytearray()
    for v in ints:
        v = int(v)
        if v < 0:
            raise ValueError("varints are unsigned")
        while True:
            byte = v & 0x7F
            v >>= 7
            if v:
                out.append(byte | 0x80)
            else:
                out.append(byte)
                break
    return bytes(out)


def decode_varints(buf: bytes, offset: int, count: int) -> tuple[list[int], int]:
    out = []
    for _ in range(count):
        value = 0
        shift = 0
        while True:
            if offset >= len(buf):
                raise WireError("truncated varint stream")
            byte = buf[offset]
            offset += 1
            value |= (byte & 0x7F) << shift
            if not byte & 0x80:
                break
            shift += 7
        out.append(value)
    return out, offset


# ----------------------------------------------------------------- the wire

_UPLOAD_HEADER = struct.Struct(">IIBIId")  # round, client, codec, dim, nnz, clip

_CODEC_BLOB = 0x01
_FLAG_DELTA = 0x02


@dataclass
class UploadMessage:
    round_no: int
    client_id: int
    dim: int
    indices: np.ndarray
    clip: float
    delta_applied: bool
    values_f32: np.ndarray | None  # raw path
    blob: EncodedBlob | None  # quantized path


def pack_upload(
    round_no: int,
    client_id: int,
    dim: int,
    indices: np.ndarray,
    *,
    values: np.ndarray | None = None,
    blob: EncodedBlob | None = None,
    clip: float = 0.0,
    delta_applied: bool = False,
) -> bytes:
    """Serialize one upload; exactly one of values (f32 path) or blob is set."""
    if (values is None) == (blob is None):
        raise ValueError("pass exactly one of values or blob")
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    nnz = int(indices.size)
    codec = (_CODEC_BLOB if blob is not None else 0) | (
        _FLAG_DELTA if delta_applied else 0
    )
    parts = [_UPLOAD_HEADER.pack(round_no, client_id, codec, dim, nnz, clip)]
    if nnz != dim:  # dense uploads carry implicit indices 0..dim-1
        gaps = [int(indices[0])] + np.diff(indices).tolist() if nnz else []
        parts.append(encode_varints(gaps))
    if blob is not None:
        parts.append(blob_to_bytes(blob))
    else:
        parts.append(np.asarray(values, dtype=np.float64).astype(">f4").tobytes())
    return b"".join(parts)


def unpack_upload(buf: bytes) -> UploadMessage:
    if len(buf) < _UPLOAD_HEADER.size:
        raise WireError("truncated upload header")
    round_no, client_id, codec, dim, nnz, clip = _UPLOAD_HEADER.unpack_from(buf, 0)
    if nnz > dim:
        raise WireError("nnz exceeds dim")
    offset = _UPLOAD_HEADER.size
    if nnz == dim:
        indices = np.arange(dim, dtype=np.int64)
    else:
        gaps, offset = decode_varints(buf, offset, nnz)
        indices = np.cumsum(np.asarray(gaps, dtype=np.int64)) if nnz else np.empty(0, np.int64)
    values_f32 = None
    blob = None
    if codec & _CODEC_BLOB:
        blob, offset = blob_from_bytes(buf, offset)
        if blob.symbol_count != nnz:
            raise WireError("blob symbol count does not match nnz")
    else:
        need = 4 * nnz
        if len(buf) < offset + need:
            raise WireError("truncated f32 payload")
        values_f32 = np.frombuffer(buf, dtype=">f4", count=nnz, offset=offset)
        offset += need
    if offset != len(buf):
        raise WireError("trailing bytes after upload payload")
    return UploadMessage(
        round_no=round_no,
        client_id=client_id,
        dim=dim,
        indices=indices,
        clip=clip,
        delta_applied=bool(codec & _FLAG_DELTA),
        values_f32=values_f32,
        blob=blob,
    )


# ------------------------------------------------------------- the pipeline


@dataclass(frozen=True)
class CommsConfig:
    enabled: bool = False
    sparsify: bool = True
    k_fraction: float = 0.1
    delta_encoding: bool = True
    quant_bits: int | None = 8
    entropy_coding: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.k_fraction <= 1.0):
            raise ValueError("k_fraction must lie in (0, 1]")
        if self.quant_bits is not None and not (2 <= self.quant_bits <= 15):
            # 2^15+1 quantizer levels still fit the 16-bit symbol alphabet
            raise ValueError("pipeline quant_bits must lie in [2, 15]")
        if self.entropy_coding and self.quant_bits is None:
            raise ValueError("entropy coding requires quantization")


@dataclass
class ClientCommsState:
    """Per-client residual accumulator and the receiver's view of the last upload."""

    residual: np.ndarray
    previous_upload: np.ndarray

    @classmethod
    def fresh(cls, dim: int) -> "ClientCommsState":
        return cls(np.zeros(dim), np.zeros(dim))


def apply_upload(
    msg: UploadMessage, previous_upload: np.ndarray, quant_bits: int | None
) -> np.ndarray:
    """Receiver-side reconstruction of the client's current upload vector."""
    if msg.blob is not None:
        if quant_bits is None:
            raise WireError("blob payload but no quantizer configured")
        symbols = entropy_decode(msg.blob)
        values = dequantize(symbols, quant_bits, msg.clip) if msg.clip > 0 else np.zeros(symbols.size)
    else:
        values = msg.values_f32.astype(np.float64)
    if msg.delta_applied:
        out = np.asarray(previous_upload, dtype=np.float64).copy()
        out[msg.indices] += values
    else:
        out = np.zeros(msg.dim)
        out[msg.indices] = values
    return out


def encode_client_update(
    delta: np.ndarray,
    state: ClientCommsState,
    cfg: CommsConfig,
    round_no: int,
    client_id: int,
) -> tuple[bytes, np.ndarray, ClientCommsState]:
    """Run the configured stack over one update.

    Returns the wire bytes, the receiver's reconstruction of the upload (the
    sender decodes its own message so both ends hold bit-identical state), and
    the successor comms state.
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    dim = delta.size
    if cfg.sparsify:
        k = max(1, int(dim * cfg.k_fraction))
        current, new_residual = topk_sparsify(delta, k, state.residual)
    else:
        current = SparseUpdate(dim, np.arange(dim), delta.copy())
        new_residual = state.residual

    send_indices = current.indices
    send_values = current.values
    delta_applied = False
    if cfg.delta_encoding:
        payload = delta_encode(current, state.previous_upload)
        if payload.nnz <= current.nnz:  # never let delta coding inflate the support
            send_indices = payload.indices
            send_values = payload.values
            delta_applied = True

    if cfg.quant_bits is not None:
        if send_values.size:
            clip = float(np.percentile(np.abs(send_values), 99.9))
        else:
            clip = 0.0
        if clip <= 0.0:
            clip = 1.0
        symbols, _ = quantize(send_values, cfg.quant_bits, clip)
        blob = entropy_encode(symbols) if cfg.entropy_coding else _raw_blob(symbols)
        wire = pack_upload(
            round_no,
            client_id,
            dim,
            send_indices,
            blob=blob,
            clip=clip,
            delta_applied=delta_applied,
        )
    else:
        wire = pack_upload(
            round_no,
            client_id,
            dim,
            send_indices,
            values=send_values,
            delta_applied=delta_applied,
        )

    msg = unpack_upload(wire)
    received = apply_upload(msg, state.previous_upload, cfg.quant_bits)
    return wire, received, ClientCommsState(new_residual, received)


def dense_upload_bytes(dim: int) -> int:
    """Wire size of an uncompressed dense 32-bit upload (the baseline)."""
    return _UPLOAD_HEADER.size + 4 * dim
