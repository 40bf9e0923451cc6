"""Coupling layer: bounded blocking channels, frame records, the contact-map
codec, and the append-only segment store.

Record layout (little-endian, 40-byte header)::

    magic  "FRM1"   4s
    flags           u32   bit0 compressed map, bit1 END sentinel
    sim_id          i32
    segment_index   i32
    step            i64
    lineage_id      i32
    weights_version i32   hint: newest weights the producer had seen
    beads           u32
    payload_len     u32
    payload: positions (B*2 f64) | rmsd (f64) | contact map bytes
"""

from __future__ import annotations

import functools
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .config import ContactMap
from .errors import ChannelClosed, CorruptStream


class _Sentinel:
    def __init__(self, name):
        self.name = name

    def __repr__(self):
        return self.name


END_OF_STREAM = _Sentinel("END_OF_STREAM")
EMPTY = _Sentinel("EMPTY")


class StreamChannel:
    """FIFO with fixed capacity; producers block while it is full.

    Safe for concurrent producers and consumers.  ``try_put``/``try_get`` are
    the non-blocking forms used by the virtual-clock scheduler; it installs a
    ``waker`` callback to learn about state changes.
    """

    def __init__(self, capacity: int, tag: str = "", producers: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.tag = tag
        self._buf: deque = deque()
        self._closed = False
        self._producers = producers
        self._cond = threading.Condition()
        self.waker = None
        self.max_occupancy = 0
        self.n_put = 0
        self.n_get = 0

    @property
    def closed(self) -> bool:
        return self._closed

    def __len__(self):
        return len(self._buf)

    def _enqueue(self, item):
        self._buf.append(item)
        self.n_put += 1
        occ = len(self._buf)
        assert occ <= self.capacity, f"channel {self.tag} over capacity"
        self.max_occupancy = max(self.max_occupancy, occ)

    def _wake(self):
        self._cond.notify_all()
        if self.waker is not None:
            self.waker(self)

    def try_put(self, item) -> bool:
        with self._cond:
            if self._closed:
                raise ChannelClosed(f"put on closed channel {self.tag}")
            if len(self._buf) >= self.capacity:
                return False
            self._enqueue(item)
            self._wake()
            return True

    def try_get(self):
        """Oldest item, ``EMPTY`` if none is ready, or ``END_OF_STREAM`` once closed and drained."""
        with self._cond:
            if self._buf:
                item = self._buf.popleft()
                self.n_get += 1
                self._wake()
                return item
            return END_OF_STREAM if self._closed else EMPTY

    def put_blocking(self, item, timeout: float | None = None):
        with self._cond:
            deadline = None if timeout is None else time.monotonic() + timeout
            while True:
                if self._closed:
                    raise ChannelClosed(f"put on closed channel {self.tag}")
                if len(self._buf) < self.capacity:
                    self._enqueue(item)
                    self._wake()
                    return True
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(f"put on {self.tag} timed out")
                self._cond.wait(remaining)

    def get_blocking(self, timeout: float | None = None):
        with self._cond:
            deadline = None if timeout is None else time.monotonic() + timeout
            while True:
                if self._buf:
                    item = self._buf.popleft()
                    self.n_get += 1
                    self._wake()
                    return item
                if self._closed:
                    return END_OF_STREAM
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(f"get on {self.tag} timed out")
                self._cond.wait(remaining)

    def close(self):
        with self._cond:
            self._closed = True
            self._wake()

    def producer_done(self):
        """Close once every registered producer has finished."""
        with self._cond:
            self._producers -= 1
            last = self._producers <= 0
        if last:
            self.close()


class Mailbox:
    """Single-slot latest-value box: ``post`` overwrites, ``take`` empties."""

    def __init__(self):
        self._lock = threading.Lock()
        self._value = None
        self.n_overwritten = 0

    def post(self, value):
        with self._lock:
            if self._value is not None:
                self.n_overwritten += 1
            self._value = value

    def take(self):
        with self._lock:
            v, self._value = self._value, None
            return v

    def peek(self):
        with self._lock:
            return self._value


# ---------------------------------------------------------------------------
# contact-map codec

_RAW, _RLE = 0, 1


@functools.lru_cache(maxsize=16)
def upper_triangle(size: int):
    """Read-only (rows, cols) of the strict upper triangle, cached per size."""
    iu = np.triu_indices(size, k=1)
    for a in iu:
        a.setflags(write=False)
    return iu


def _rle(data: bytes) -> bytes:
    """Runs of 0x00/0xFF become (marker, count); every other byte is a literal."""
    out = bytearray()
    i, n = 0, len(data)
    while i < n:
        b = data[i]
        if b == 0x00 or b == 0xFF:
            j = i
            while j < n and data[j] == b and j - i < 255:
                j += 1
            out += bytes((b, j - i))
            i = j
        else:
            out.append(b)
            i += 1
    return bytes(out)


def _unrle(data: bytes, expected: int) -> bytes:
    out = bytearray()
    i, n = 0, len(data)
    while i < n:
        b = data[i]
        if b == 0x00 or b == 0xFF:
            if i + 1 >= n or data[i + 1] == 0:
                raise CorruptStream("truncated or empty run")
            out += bytes((b,)) * data[i + 1]
            i += 2
        else:
            out.append(b)
            i += 1
        if len(out) > expected:
            raise CorruptStream("run-length data overflows the map")
    if len(out) != expected:
        raise CorruptStream(f"decoded {len(out)} bytes, expected {expected}")
    return bytes(out)


def compress_map(cmap: ContactMap) -> bytes:
    """Bit-pack the strict upper triangle, then run-length encode when that is shorter.

    The diagonal is always true and the lower triangle mirrors the upper, so
    neither is stored.  First byte selects raw (0) or RLE (1) packing.
    """
    bits = cmap.bits if isinstance(cmap, ContactMap) else np.asarray(cmap, dtype=bool)
    packed = np.packbits(bits[upper_triangle(len(bits))]).tobytes()
    rle = _rle(packed)
    return bytes((_RLE,)) + rle if len(rle) < len(packed) else bytes((_RAW,)) + packed


def decompress_map(data: bytes, size: int) -> ContactMap:
    n_bits = size * (size - 1) // 2
    n_bytes = (n_bits + 7) // 8
    if not data:
        raise CorruptStream("empty map stream")
    mode, body = data[0], bytes(data[1:])
    if mode == _RAW:
        if len(body) != n_bytes:
            raise CorruptStream(f"raw map is {len(body)} bytes, expected {n_bytes}")
        packed = body
    elif mode == _RLE:
        packed = _unrle(body, n_bytes)
    else:
        raise CorruptStream(f"unknown map encoding {mode}")
    flat = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), count=n_bits).astype(bool)
    if n_bits % 8 and np.any(np.unpackbits(np.frombuffer(packed[-1:], dtype=np.uint8))[n_bits % 8:]):
        raise CorruptStream("nonzero padding bits")
    bits = np.zeros((size, size), dtype=bool)
    iu = upper_triangle(size)
    bits[iu] = flat
    bits |= bits.T
    np.fill_diagonal(bits, True)
    return ContactMap(bits)


def raw_map_bytes(cmap: ContactMap) -> bytes:
    """Uncompressed form: one byte per boolean, full matrix."""
    return cmap.bits.astype(np.uint8).tobytes()


def compression_factor(cmap: ContactMap) -> float:
    return (cmap.size * cmap.size) / len(compress_map(cmap))


# ---------------------------------------------------------------------------
# frame records

_HDR = struct.Struct("<4sIiiqiiII")
HEADER_SIZE = _HDR.size
_MAGIC = b"FRM1"
FLAG_COMPRESSED = 1
FLAG_END = 2
assert HEADER_SIZE == 40


@dataclass(frozen=True, eq=False)
class FrameRecord:
    sim_id: int
    segment_index: int
    step: int
    lineage_id: int
    positions: np.ndarray
    rmsd: float
    contacts: ContactMap
    weights_version_hint: int = 0

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return (
            (self.sim_id, self.segment_index, self.step, self.lineage_id, self.weights_version_hint)
            == (other.sim_id, other.segment_index, other.step, other.lineage_id, other.weights_version_hint)
            and np.array_equal(self.positions, other.positions)
            and np.float64(self.rmsd).tobytes() == np.float64(other.rmsd).tobytes()
            and self.contacts == other.contacts
        )

    __hash__ = None


def encode_record(rec: FrameRecord, compressed: bool = True) -> bytes:
    pos = np.ascontiguousarray(rec.positions, dtype="<f8")
    beads = pos.shape[0]
    cmap = compress_map(rec.contacts) if compressed else raw_map_bytes(rec.contacts)
    payload = pos.tobytes() + struct.pack("<d", rec.rmsd) + cmap
    flags = FLAG_COMPRESSED if compressed else 0
    hdr = _HDR.pack(_MAGIC, flags, rec.sim_id, rec.segment_index, rec.step, rec.lineage_id,
                    rec.weights_version_hint, beads, len(payload))
    return hdr + payload


def end_record() -> bytes:
    return _HDR.pack(_MAGIC, FLAG_END, 0, 0, 0, 0, 0, 0, 0)


def _decode_payload(hdr, payload: bytes) -> FrameRecord:
    _, flags, sim_id, seg, step, lineage, wv, beads, plen = hdr
    npos = beads * 2 * 8
    if len(payload) < npos + 8:
        raise CorruptStream("payload shorter than positions + rmsd")
    pos = np.frombuffer(payload, dtype="<f8", count=beads * 2).reshape(beads, 2).astype(np.float64)
    (rmsd,) = struct.unpack_from("<d", payload, npos)
    body = payload[npos + 8:]
    if flags & FLAG_COMPRESSED:
        cmap = decompress_map(body, beads)
    else:
        if len(body) != beads * beads:
            raise CorruptStream("raw map has the wrong length")
        cmap = ContactMap(np.frombuffer(body, dtype=np.uint8).reshape(beads, beads).astype(bool))
    return FrameRecord(sim_id, seg, step, lineage, pos, rmsd, cmap, wv)


def iter_decode(buf: bytes, strict: bool = True) -> Iterator[FrameRecord | _Sentinel]:
    """Decode concatenated records; yields ``END_OF_STREAM`` for an END record.

    With ``strict=False`` a partial trailing record ends iteration silently.
    """
    off, n = 0, len(buf)
    while off < n:
        if n - off < HEADER_SIZE:
            if strict:
                raise CorruptStream("truncated record header")
            return
        hdr = _HDR.unpack_from(buf, off)
        if hdr[0] != _MAGIC:
            raise CorruptStream(f"bad record magic at offset {off}")
        if hdr[1] & FLAG_END:
            yield END_OF_STREAM
            return
        end = off + HEADER_SIZE + hdr[8]
        if end > n:
            if strict:
                raise CorruptStream("truncated record payload")
            return
        yield _decode_payload(hdr, buf[off + HEADER_SIZE:end])
        off = end


def decode_records(buf: bytes) -> list[FrameRecord]:
    return [r for r in iter_decode(buf) if r is not END_OF_STREAM]


def count_records(buf: bytes) -> int:
    """Number of data records in a buffer of whole records (headers only; payloads not decoded)."""
    off, n, count = 0, len(buf), 0
    while n - off >= HEADER_SIZE:
        hdr = _HDR.unpack_from(buf, off)
        if hdr[1] & FLAG_END:
            break
        off += HEADER_SIZE + hdr[8]
        count += 1
    return count


def complete_prefix(buf: bytes) -> int:
    """Byte length of the longest prefix made of whole records (END included)."""
    off, n = 0, len(buf)
    while n - off >= HEADER_SIZE:
        hdr = _HDR.unpack_from(buf, off)
        if hdr[0] != _MAGIC:
            break
        end = off + HEADER_SIZE + (0 if hdr[1] & FLAG_END else hdr[8])
        if end > n:
            break
        off = end
        if hdr[1] & FLAG_END:
            break
    return off


# ---------------------------------------------------------------------------
# segment store and the two transport paths


class SegmentStore:
    """Append-only ``agg_<i>.seg`` files under ``<run>/segments``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path(self, agg_id: int) -> Path:
        return self.root / f"agg_{agg_id}.seg"

    def append(self, agg_id: int, blob: bytes) -> tuple[int, int]:
        """Append bytes; returns the (start, end) byte offsets written."""
        with self._lock, open(self.path(agg_id), "ab") as fh:
            start = fh.tell()
            fh.write(blob)
            return start, start + len(blob)

    def close(self, agg_id: int):
        self.append(agg_id, end_record())

    def read_range(self, agg_id: int, start: int, end: int) -> bytes:
        with open(self.path(agg_id), "rb") as fh:
            fh.seek(start)
            return fh.read(end - start)

    def read_all(self, agg_id: int) -> list[FrameRecord]:
        p = self.path(agg_id)
        if not p.exists():
            return []
        data = p.read_bytes()
        return [r for r in iter_decode(data[:complete_prefix(data)]) if r is not END_OF_STREAM]

    def agg_ids(self) -> list[int]:
        return sorted(int(p.stem.split("_")[1]) for p in self.root.glob("agg_*.seg"))


def write_records(sink, records: Iterable[FrameRecord], compressed: bool = True, end: bool = False):
    """Write records to a StreamChannel (one item per record) or a binary file object."""
    for rec in records:
        blob = encode_record(rec, compressed)
        if isinstance(sink, StreamChannel):
            sink.put_blocking(blob)
        else:
            sink.write(blob)
    if end:
        if isinstance(sink, StreamChannel):
            sink.close()
        else:
            sink.write(end_record())
            sink.flush()


def read_records(source, poll: float = 0.01, timeout: float | None = None) -> Iterator[FrameRecord]:
    """Yield records from a StreamChannel until END_OF_STREAM, or tail a file until its END record."""
    if isinstance(source, StreamChannel):
        while True:
            item = source.get_blocking(timeout)
            if item is END_OF_STREAM:
                return
            for rec in iter_decode(item):
                if rec is END_OF_STREAM:
                    return
                yield rec
    path = Path(source)
    offset = 0
    deadline = None if timeout is None else time.monotonic() + timeout
    while True:
        data = path.read_bytes() if path.exists() else b""
        upto = complete_prefix(data[offset:]) + offset
        for rec in iter_decode(data[offset:upto]):
            if rec is END_OF_STREAM:
                return
            yield rec
        offset = upto
        if deadline is not None and time.monotonic() > deadline:
            return
        time.sleep(poll)
