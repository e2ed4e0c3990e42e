"""Binary RPC wire protocol and bandwidth accounting.

Frame layout (all integers little-endian; normative tables in
docs/protocol.md):

    u32  length of everything after this field
    u8   magic 0x57
    u8   protocol version (1)
    u8   op code
    u8   flags (reserved, 0)
    u64  call id
    ...  body

Training-phase messages (DOTPROD, ADJUST and their responses) carry only
word indices, seeds, and the scalar F/G arrays -- never vector components.
The only vector-bearing message is the post-training EXPORT response, which
is what makes the no-vector-transfer property checkable at the schema level.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = 1
MAGIC = 0x57
HEADER_LEN = 16  # length prefix + magic/version/op/flags + call_id
MAX_FRAME_BODY = 1 << 28

OP_HELLO = 0x01
OP_DOTPROD = 0x02
OP_ADJUST = 0x03
OP_EXPORT = 0x04
OP_SHUTDOWN = 0x05
OP_RESPONSE = 0x80
OP_ERROR = 0x81

_OP_NAMES = {
    OP_HELLO: "hello",
    OP_DOTPROD: "dotprod",
    OP_ADJUST: "adjust",
    OP_EXPORT: "export",
    OP_SHUTDOWN: "shutdown",
    OP_RESPONSE: "response",
    OP_ERROR: "error",
}

ERR_MALFORMED = 1
ERR_BAD_INDEX = 2
ERR_SHAPE_MISMATCH = 3
ERR_UNSUPPORTED = 4
ERR_INTERNAL = 5


class ProtocolError(Exception):
    """Raised on malformed frames or schema violations."""


class ShardCallError(Exception):
    """A shard rejected a call; the store was left untouched."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Frame:
    op: int
    call_id: int
    body: bytes = b""

    @property
    def op_name(self) -> str:
        return _OP_NAMES.get(self.op, f"op_{self.op:#x}")


def encode_frame(frame: Frame) -> bytes:
    if frame.op not in _OP_NAMES:
        raise ProtocolError(f"unknown op code {frame.op:#x}")
    if len(frame.body) > MAX_FRAME_BODY:
        raise ProtocolError(f"frame body too large: {len(frame.body)}")
    head = struct.pack(
        "<IBBBBQ", 12 + len(frame.body), MAGIC, PROTOCOL_VERSION,
        frame.op, 0, frame.call_id,
    )
    return head + frame.body


def decode_frame(data: bytes) -> Frame:
    """Decode one complete frame (length prefix included)."""
    if len(data) < HEADER_LEN:
        raise ProtocolError(f"truncated frame: {len(data)} bytes")
    length, magic, version, op, _flags, call_id = struct.unpack_from("<IBBBBQ", data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic:#x}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if op not in _OP_NAMES:
        raise ProtocolError(f"unknown op code {op:#x}")
    if length != len(data) - 4:
        raise ProtocolError(f"length prefix {length} does not match frame size {len(data) - 4}")
    if length > MAX_FRAME_BODY + 12:
        raise ProtocolError(f"oversized frame: {length}")
    return Frame(op, call_id, data[HEADER_LEN:])


# ---------------------------------------------------------------------------
# Body codecs
# ---------------------------------------------------------------------------

def _encode_minibatch(inputs: np.ndarray, contexts: list[np.ndarray]) -> list[bytes]:
    parts = [struct.pack("<I", len(inputs)), np.ascontiguousarray(inputs, dtype="<u4").tobytes()]
    for ctx in contexts:
        parts.append(struct.pack("<I", len(ctx)))
        parts.append(np.ascontiguousarray(ctx, dtype="<u4").tobytes())
    return parts


def _decode_minibatch(words: np.ndarray, pos: int) -> tuple[np.ndarray, list[np.ndarray], int]:
    count = int(words[pos])
    pos += 1
    inputs = words[pos:pos + count].astype(np.uint32)
    pos += count
    contexts = []
    for _ in range(count):
        n = int(words[pos])
        pos += 1
        if n == 0:
            raise ProtocolError("empty context list")
        contexts.append(words[pos:pos + n].astype(np.uint32))
        pos += n
    return inputs, contexts, pos


def encode_dotprod_request(seed: int, negatives: int, inputs: np.ndarray,
                           contexts: list[np.ndarray]) -> bytes:
    parts = [struct.pack("<QI", seed, negatives)]
    parts += _encode_minibatch(inputs, contexts)
    return b"".join(parts)


def decode_dotprod_request(body: bytes) -> tuple[int, int, np.ndarray, list[np.ndarray]]:
    if len(body) < 12 or (len(body) - 12) % 4:
        raise ProtocolError("dotprod request body malformed")
    seed, negatives = struct.unpack_from("<QI", body)
    words = np.frombuffer(body, dtype="<u4", offset=12)
    inputs, contexts, pos = _decode_minibatch(words, 0)
    if pos != len(words):
        raise ProtocolError("dotprod request has trailing bytes")
    return seed, negatives, inputs, contexts


def encode_dotprod_response(f_plus: np.ndarray, f_minus: np.ndarray) -> bytes:
    return b"".join([
        struct.pack("<I", len(f_plus)),
        np.ascontiguousarray(f_plus, dtype="<f4").tobytes(),
        struct.pack("<I", len(f_minus)),
        np.ascontiguousarray(f_minus, dtype="<f4").tobytes(),
    ])


def decode_dotprod_response(body: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(body) < 8:
        raise ProtocolError("dotprod response body malformed")
    (n_plus,) = struct.unpack_from("<I", body)
    off = 4 + 4 * n_plus
    if len(body) < off + 4:
        raise ProtocolError("dotprod response truncated")
    f_plus = np.frombuffer(body, dtype="<f4", count=n_plus, offset=4)
    (n_minus,) = struct.unpack_from("<I", body, off)
    if len(body) != off + 4 + 4 * n_minus:
        raise ProtocolError("dotprod response length mismatch")
    f_minus = np.frombuffer(body, dtype="<f4", count=n_minus, offset=off + 4)
    return f_plus.astype(np.float32), f_minus.astype(np.float32)


def encode_adjust_request(seed: int, negatives: int, inputs: np.ndarray,
                          contexts: list[np.ndarray], g_plus: np.ndarray,
                          g_minus: np.ndarray) -> bytes:
    parts = [struct.pack("<QI", seed, negatives)]
    parts += _encode_minibatch(inputs, contexts)
    parts.append(struct.pack("<I", len(g_plus)))
    parts.append(np.ascontiguousarray(g_plus, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(g_minus)))
    parts.append(np.ascontiguousarray(g_minus, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_adjust_request(body: bytes) -> tuple[int, int, np.ndarray, list[np.ndarray], np.ndarray, np.ndarray]:
    if len(body) < 12 or (len(body) - 12) % 4:
        raise ProtocolError("adjust request body malformed")
    seed, negatives = struct.unpack_from("<QI", body)
    words = np.frombuffer(body, dtype="<u4", offset=12)
    inputs, contexts, pos = _decode_minibatch(words, 0)
    base = 12 + 4 * pos
    (n_plus,) = struct.unpack_from("<I", body, base)
    g_plus = np.frombuffer(body, dtype="<f4", count=n_plus, offset=base + 4)
    base += 4 + 4 * n_plus
    if len(body) < base + 4:
        raise ProtocolError("adjust request truncated")
    (n_minus,) = struct.unpack_from("<I", body, base)
    if len(body) != base + 4 + 4 * n_minus:
        raise ProtocolError("adjust request length mismatch")
    g_minus = np.frombuffer(body, dtype="<f4", count=n_minus, offset=base + 4)
    return seed, negatives, inputs, contexts, g_plus.astype(np.float32), g_minus.astype(np.float32)


def encode_adjust_response(pairs_updated: int) -> bytes:
    return struct.pack("<I", pairs_updated)


def decode_adjust_response(body: bytes) -> int:
    if len(body) != 4:
        raise ProtocolError("adjust response body malformed")
    return struct.unpack("<I", body)[0]


MATRIX_U = 0
MATRIX_V = 1


def encode_export_request(row_start: int, row_end: int, which: int = MATRIX_U) -> bytes:
    return struct.pack("<IIB", row_start, row_end, which)


def decode_export_request(body: bytes) -> tuple[int, int, int]:
    if len(body) != 9:
        raise ProtocolError("export request body malformed")
    return struct.unpack("<IIB", body)


def encode_export_response(matrix: np.ndarray) -> bytes:
    rows, width = matrix.shape
    return struct.pack("<II", rows, width) + np.ascontiguousarray(matrix, dtype="<f4").tobytes()


def decode_export_response(body: bytes) -> np.ndarray:
    if len(body) < 8:
        raise ProtocolError("export response body malformed")
    rows, width = struct.unpack_from("<II", body)
    if len(body) != 8 + 4 * rows * width:
        raise ProtocolError("export response length mismatch")
    return np.frombuffer(body, dtype="<f4", offset=8).astype(np.float32).reshape(rows, width)


def encode_hello_request() -> bytes:
    return struct.pack("<I", PROTOCOL_VERSION)


def encode_hello_response(shard_id: int, lo: int, hi: int, dim: int, vocab_size: int) -> bytes:
    return struct.pack("<IIIIII", PROTOCOL_VERSION, shard_id, lo, hi, dim, vocab_size)


def decode_hello_response(body: bytes) -> dict:
    if len(body) != 24:
        raise ProtocolError("hello response body malformed")
    version, shard_id, lo, hi, dim, vocab = struct.unpack("<IIIIII", body)
    return {"version": version, "shard_id": shard_id, "lo": lo, "hi": hi,
            "dim": dim, "vocab_size": vocab}


def encode_error(code: int, message: str) -> bytes:
    msg = message.encode("utf-8")
    return struct.pack("<II", code, len(msg)) + msg


def decode_error(body: bytes) -> tuple[int, str]:
    if len(body) < 8:
        raise ProtocolError("error body malformed")
    code, msg_len = struct.unpack_from("<II", body)
    if len(body) != 8 + msg_len:
        raise ProtocolError("error body length mismatch")
    return code, body[8:].decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# Payload classification and metering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PayloadBreakdown:
    """Byte classification of one frame for the bandwidth meter.

    fg_bytes: F or G scalar arrays (the quantity Eqs. for traffic model);
    vector_bytes: exported vector components (EXPORT responses only);
    index_bytes: word-index arrays; everything else is structure
    (framing, lengths, seeds).
    """

    total: int
    fg_bytes: int = 0
    vector_bytes: int = 0
    index_bytes: int = 0

    @property
    def structure_bytes(self) -> int:
        return self.total - self.fg_bytes - self.vector_bytes - self.index_bytes


def classify_frame(frame: Frame, request_op: int | None = None) -> PayloadBreakdown:
    """Byte breakdown of an encoded frame.

    For RESPONSE frames the originating request op must be supplied since
    response bodies are op-specific.
    """
    total = HEADER_LEN + len(frame.body)
    op = frame.op if frame.op != OP_RESPONSE else request_op
    if frame.op == OP_DOTPROD or frame.op == OP_ADJUST:
        if frame.op == OP_DOTPROD:
            _, _, inputs, contexts = decode_dotprod_request(frame.body)
            fg = 0
        else:
            _, _, inputs, contexts, g_plus, g_minus = decode_adjust_request(frame.body)
            fg = 4 * (len(g_plus) + len(g_minus))
        idx = 4 * (len(inputs) + sum(len(c) for c in contexts))
        return PayloadBreakdown(total, fg_bytes=fg, index_bytes=idx)
    if frame.op == OP_RESPONSE and op == OP_DOTPROD:
        f_plus, f_minus = decode_dotprod_response(frame.body)
        return PayloadBreakdown(total, fg_bytes=4 * (len(f_plus) + len(f_minus)))
    if frame.op == OP_RESPONSE and op == OP_EXPORT:
        mat = decode_export_response(frame.body)
        return PayloadBreakdown(total, vector_bytes=4 * mat.size)
    return PayloadBreakdown(total)


class BandwidthMeter:
    """Thread-safe per-direction byte and payload accounting."""

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes_sent = 0
        self.bytes_received = 0
        self.fg_bytes_sent = 0
        self.fg_bytes_received = 0
        self.index_bytes_sent = 0
        self.vector_bytes_received = 0
        self.per_op_sent: dict[str, list[int]] = {}
        self.per_op_received: dict[str, list[int]] = {}
        self.minibatch_words = 0
        self.pairs = 0
        self.negatives = 0

    def record_sent(self, op_name: str, breakdown: PayloadBreakdown) -> None:
        with self._lock:
            self.bytes_sent += breakdown.total
            self.fg_bytes_sent += breakdown.fg_bytes
            self.index_bytes_sent += breakdown.index_bytes
            entry = self.per_op_sent.setdefault(op_name, [0, 0])
            entry[0] += 1
            entry[1] += breakdown.total

    def record_received(self, op_name: str, breakdown: PayloadBreakdown) -> None:
        with self._lock:
            self.bytes_received += breakdown.total
            self.fg_bytes_received += breakdown.fg_bytes
            self.vector_bytes_received += breakdown.vector_bytes
            entry = self.per_op_received.setdefault(op_name, [0, 0])
            entry[0] += 1
            entry[1] += breakdown.total

    def count_minibatch(self, words: int, pairs: int, negatives: int) -> None:
        with self._lock:
            self.minibatch_words += words
            self.pairs += pairs
            self.negatives += negatives

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "bytes_sent": self.bytes_sent,
                "bytes_received": self.bytes_received,
                "fg_bytes_sent": self.fg_bytes_sent,
                "fg_bytes_received": self.fg_bytes_received,
                "index_bytes_sent": self.index_bytes_sent,
                "vector_bytes_received": self.vector_bytes_received,
                "per_op_sent": {k: list(v) for k, v in self.per_op_sent.items()},
                "per_op_received": {k: list(v) for k, v in self.per_op_received.items()},
                "minibatch_words": self.minibatch_words,
                "pairs": self.pairs,
                "negatives": self.negatives,
            }


# ---------------------------------------------------------------------------
# Bandwidth models
# ---------------------------------------------------------------------------

def predicted_conventional_bytes(w: float, n: int, d: int) -> float:
    """Vector+gradient bytes per minibatch word, per call direction, for a
    conventional get/put parameter server: (2 + w*n) * d * 4."""
    if w <= 0 or n < 0 or d <= 0:
        raise ValueError("need w > 0, n >= 0, d > 0")
    return (2 + w * n) * d * 4


def predicted_proposed_bytes(w: float, n: int, s: int) -> float:
    """F/G scalar bytes per minibatch word, per direction, for the
    column-sharded scheme: w * (n + 1) * S * 4."""
    if w <= 0 or n < 0 or s <= 0:
        raise ValueError("need w > 0, n >= 0, S > 0")
    return w * (n + 1) * s * 4


def bandwidth_ratio(s: int, d: int) -> float:
    """Approximate proposed/conventional traffic ratio: S/d."""
    if s <= 0 or d <= 0:
        raise ValueError("need S > 0, d > 0")
    return s / d


@dataclass
class BandwidthReport:
    """Measured F/G payload against the per-word traffic model.

    Overhead (framing, lengths, indices) is reported separately and never
    mixed into the model comparison, which covers scalar payload only.
    """

    words: int
    pairs: int
    negatives: int
    fg_sent_per_word: float
    fg_received_per_word: float
    predicted_per_word: float
    conventional_per_word: float | None
    index_bytes_sent: int
    total_sent: int
    total_received: int
    payload_within_bound: bool

    def as_text(self) -> str:
        lines = [
            f"minibatch words        {self.words}",
            f"pairs / negatives      {self.pairs} / {self.negatives}",
            f"G payload sent/word    {self.fg_sent_per_word:.1f} B",
            f"F payload recv/word    {self.fg_received_per_word:.1f} B",
            f"model bound r'/word    {self.predicted_per_word:.1f} B",
            f"within model bound     {self.payload_within_bound}",
            f"index bytes (overhead) {self.index_bytes_sent}",
            f"total sent / received  {self.total_sent} / {self.total_received}",
        ]
        if self.conventional_per_word is not None:
            lines.append(f"conventional r/word    {self.conventional_per_word:.1f} B")
        return "\n".join(lines)


def measured_vs_predicted(meter: BandwidthMeter, w: float, n: int, s: int,
                          d: int | None = None) -> BandwidthReport:
    """Compare metered F/G payload per minibatch word against the model.

    The model value is an upper bound attained when every input word has
    exactly w contexts. With zero metered steps an all-zero report is
    returned.
    """
    snap = meter.snapshot()
    words = snap["minibatch_words"]
    predicted = predicted_proposed_bytes(w, n, s)
    conventional = predicted_conventional_bytes(w, n, d) if d else None
    if words == 0:
        return BandwidthReport(0, 0, 0, 0.0, 0.0, predicted, conventional,
                               0, 0, 0, True)
    sent_pw = snap["fg_bytes_sent"] / words
    recv_pw = snap["fg_bytes_received"] / words
    return BandwidthReport(
        words=words,
        pairs=snap["pairs"],
        negatives=snap["negatives"],
        fg_sent_per_word=sent_pw,
        fg_received_per_word=recv_pw,
        predicted_per_word=predicted,
        conventional_per_word=conventional,
        index_bytes_sent=snap["index_bytes_sent"],
        total_sent=snap["bytes_sent"],
        total_received=snap["bytes_received"],
        payload_within_bound=(sent_pw <= predicted and recv_pw <= predicted),
    )
