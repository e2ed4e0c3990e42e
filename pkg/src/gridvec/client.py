"""Training driver: minibatch RPC orchestration and gradient coefficients.

A client thread pushes each minibatch through the two-call protocol:
broadcast dotprod with a fresh seed, wait for every shard's partial dot
products, sum them, turn the sums into per-pair linear-combination weights,
then broadcast adjust with the same seed so shards regenerate the identical
negatives. No vector ever crosses the wire.
"""

from __future__ import annotations

import itertools
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import transport
from .corpus import (IndexedCorpus, Minibatch, WindowSpec, Vocabulary,
                     make_minibatches, partition_sentences, subsample,
                     usable_input_count)
from .rng import (SEED_TAG_MINIBATCH, SEED_TAG_OBJECTIVE,
                  SEED_TAG_RETRY, seed_chain)
from .sampler import minibatch_negatives, NoiseTable
from .shard import ShardHandler
from .transport import Frame, ProtocolError, ShardCallError

DEFAULT_ALPHA_MIN_FACTOR = 1e-4


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    dim: int = 100
    shards: int = 1
    window: int = 5            # max window half-width B
    negatives: int = 5         # N per positive pair
    batch_size: int = 1
    epochs: int = 1
    alpha: float = 0.025
    alpha_min: float | None = None  # default alpha * 1e-4
    subsample: float = 0.0
    min_count: int = 5
    seed: int = 1
    threads: int = 1
    interleaved: bool = False

    def __post_init__(self):
        if self.alpha_min is None:
            self.alpha_min = self.alpha * DEFAULT_ALPHA_MIN_FACTOR
        if self.alpha_min > self.alpha:
            raise ValueError("alpha_min must not exceed alpha")
        for name in ("dim", "shards", "window", "negatives", "batch_size", "threads"):
            if getattr(self, name) < 1 and not (name == "negatives" and self.negatives == 0):
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.window, self.subsample, self.seed)


@dataclass
class GradientCoefficients:
    g_plus: np.ndarray   # float32, one per pair
    g_minus: np.ndarray  # float32, one per (pair, negative)


def sigmoid(x):
    """Numerically stable logistic function; scalar in, scalar out."""
    z = np.asarray(x, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out)
    return out


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    return np.where(z >= 0, -np.log1p(np.exp(-np.abs(z))),
                    z - np.log1p(np.exp(-np.abs(z))))


def aggregate_partials(partials: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise sums of per-shard (F+, F-), added in shard-id order."""
    if not partials:
        raise ValueError("no shard responses to aggregate")
    n_plus, n_minus = len(partials[0][0]), len(partials[0][1])
    for fp, fm in partials[1:]:
        if len(fp) != n_plus or len(fm) != n_minus:
            raise ProtocolError(
                f"shard partial shapes disagree: ({len(fp)}, {len(fm)}) vs "
                f"({n_plus}, {n_minus})")
    f_plus = partials[0][0].copy()
    f_minus = partials[0][1].copy()
    for fp, fm in partials[1:]:
        f_plus += fp
        f_minus += fm
    return f_plus, f_minus


def coefficients(f_plus: np.ndarray, f_minus: np.ndarray, alpha: float) -> GradientCoefficients:
    """G+ = alpha * (1 - sigmoid(F+)), G- = -alpha * sigmoid(F-).

    Sigmoid is evaluated in float64 and the alpha product cast to float32,
    so every coefficient satisfies |g| <= alpha.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    g_plus = (alpha * (1.0 - sigmoid(f_plus))).astype(np.float32)
    g_minus = (-alpha * sigmoid(f_minus)).astype(np.float32)
    return GradientCoefficients(g_plus, g_minus)


# ---------------------------------------------------------------------------
# Connections
# ---------------------------------------------------------------------------

class PendingCall:
    """One outstanding RPC; wait() blocks for the matched response frame."""

    def __init__(self, op: int):
        self.op = op
        self._event = threading.Event()
        self._frame: Frame | None = None
        self._exc: Exception | None = None

    def complete(self, frame: Frame) -> None:
        self._frame = frame
        self._event.set()

    def fail(self, exc: Exception) -> None:
        self._exc = exc
        self._event.set()

    def wait(self, timeout: float | None = None) -> Frame:
        if not self._event.wait(timeout):
            raise TimeoutError("shard call timed out")
        if self._exc is not None:
            raise self._exc
        frame = self._frame
        if frame.op == transport.OP_ERROR:
            code, message = transport.decode_error(frame.body)
            raise ShardCallError(code, message)
        return frame


def _receive_breakdown(request_op: int, body_len: int) -> transport.PayloadBreakdown:
    total = transport.HEADER_LEN + body_len
    if request_op == transport.OP_DOTPROD:
        return transport.PayloadBreakdown(total, fg_bytes=max(body_len - 8, 0))
    if request_op == transport.OP_EXPORT:
        return transport.PayloadBreakdown(total, vector_bytes=max(body_len - 8, 0))
    return transport.PayloadBreakdown(total)


class ShardConnection:
    """Full-duplex TCP connection to one shard with call_id multiplexing.

    Multiple client threads may issue calls concurrently; responses are
    matched by call_id, so they may return in any order.
    """

    def __init__(self, host: str, port: int, meter: transport.BandwidthMeter | None = None,
                 timeout: float = 60.0):
        import socket as _socket
        self.meter = meter
        self.timeout = timeout
        self._sock = _socket.create_connection((host, port), timeout=10.0)
        self._sock.settimeout(None)
        self._sock.setsockopt(_socket.IPPROTO_TCP, _socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()
        self._pending: dict[int, PendingCall] = {}
        self._pending_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        info = transport.decode_hello_response(
            self.call(transport.OP_HELLO, transport.encode_hello_request()).body)
        self.shard_id = info["shard_id"]
        self.lo, self.hi = info["lo"], info["hi"]
        self.dim = info["dim"]
        self.vocab_size = info["vocab_size"]

    def _read_loop(self) -> None:
        sock = self._sock
        try:
            while True:
                head = self._recv_exact(4)
                (length,) = struct.unpack("<I", head)
                frame = transport.decode_frame(head + self._recv_exact(length))
                with self._pending_lock:
                    pending = self._pending.pop(frame.call_id, None)
                if pending is None:
                    continue
                if self.meter is not None:
                    self.meter.record_received(
                        transport._OP_NAMES.get(pending.op, "?"),
                        _receive_breakdown(pending.op, len(frame.body)))
                pending.complete(frame)
        except Exception as e:
            self._fail_all(ConnectionError(f"shard connection lost: {e}"))

    def _recv_exact(self, count: int) -> bytes:
        buf = bytearray()
        while len(buf) < count:
            chunk = self._sock.recv(count - len(buf))
            if not chunk:
                raise ConnectionError("connection closed by shard")
            buf.extend(chunk)
        return bytes(buf)

    def _fail_all(self, exc: Exception) -> None:
        self._closed = True
        with self._pending_lock:
            pending, self._pending = self._pending, {}
        for p in pending.values():
            p.fail(exc)

    def issue(self, op: int, body: bytes,
              breakdown: transport.PayloadBreakdown | None = None) -> PendingCall:
        if self._closed:
            raise ConnectionError("connection is closed")
        call_id = next(self._ids)
        pending = PendingCall(op)
        with self._pending_lock:
            self._pending[call_id] = pending
        data = transport.encode_frame(Frame(op, call_id, body))
        if self.meter is not None:
            if breakdown is None:
                breakdown = transport.PayloadBreakdown(len(data))
            self.meter.record_sent(transport._OP_NAMES[op], breakdown)
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as e:
            with self._pending_lock:
                self._pending.pop(call_id, None)
            pending.fail(ConnectionError(f"send failed: {e}"))
        return pending

    def call(self, op: int, body: bytes = b"",
             breakdown: transport.PayloadBreakdown | None = None) -> Frame:
        return self.issue(op, body, breakdown).wait(self.timeout)

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass


class LoopbackConnection:
    """In-process connection to a ShardHandler through the full codec path.

    Every call is encoded, decoded, handled, and the response encoded and
    decoded again, so byte accounting and call semantics match the TCP path
    exactly; only the socket is missing.
    """

    def __init__(self, handler: ShardHandler, meter: transport.BandwidthMeter | None = None,
                 trace: list | None = None):
        self.handler = handler
        self.meter = meter
        self.trace = trace
        self._ids = itertools.count(1)
        store = handler.store
        self.shard_id = store.shard_id
        self.lo, self.hi = store.lo, store.hi
        self.dim = store.layout.dim
        self.vocab_size = store.vocab_size
        self.timeout = None

    def issue(self, op: int, body: bytes,
              breakdown: transport.PayloadBreakdown | None = None) -> PendingCall:
        pending = PendingCall(op)
        data = transport.encode_frame(Frame(op, next(self._ids), body))
        if self.meter is not None:
            if breakdown is None:
                breakdown = transport.PayloadBreakdown(len(data))
            self.meter.record_sent(transport._OP_NAMES[op], breakdown)
        if self.trace is not None:
            self.trace.append(("send", data))
        response = self.handler.handle_frame(transport.decode_frame(data))
        resp_data = transport.encode_frame(response)
        if self.trace is not None:
            self.trace.append(("recv", resp_data))
        if self.meter is not None:
            self.meter.record_received(transport._OP_NAMES[op],
                                       _receive_breakdown(op, len(response.body)))
        pending.complete(transport.decode_frame(resp_data))
        return pending

    def call(self, op: int, body: bytes = b"",
             breakdown: transport.PayloadBreakdown | None = None) -> Frame:
        return self.issue(op, body, breakdown).wait()

    def close(self) -> None:
        pass


def read_endpoints(path: str) -> list[tuple[str, int]]:
    """Parse a shard endpoints file: one host:port per line."""
    endpoints = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            host, port = line.rsplit(":", 1)
            endpoints.append((host, int(port)))
    return endpoints


def connect_all(endpoints: list[tuple[str, int]],
                meter: transport.BandwidthMeter | None = None) -> list[ShardConnection]:
    """Connect to every shard and order connections by shard id."""
    conns = [ShardConnection(h, p, meter) for h, p in endpoints]
    conns.sort(key=lambda c: c.shard_id)
    ids = [c.shard_id for c in conns]
    if ids != list(range(len(conns))):
        raise ProtocolError(f"shard ids {ids} do not form 0..S-1")
    return conns


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class AlphaSchedule:
    """Linear decay per processed input word, floored at alpha_min."""

    def __init__(self, alpha0: float, alpha_min: float, planned_words: int):
        self.alpha0 = alpha0
        self.alpha_min = alpha_min
        self.planned = max(planned_words, 1)
        self._count = 0
        self._lock = threading.Lock()

    def current(self) -> float:
        return max(self.alpha_min, self.alpha0 * (1.0 - self._count / self.planned))

    def advance(self, words: int) -> None:
        with self._lock:
            self._count += words

    @property
    def processed(self) -> int:
        return self._count


@dataclass
class StepStats:
    pairs: int
    negatives: int


@dataclass
class TrainStats:
    steps: int = 0
    input_words: int = 0
    pairs: int = 0
    negatives: int = 0
    seconds: float = 0.0
    retries: int = 0
    epochs_run: int = 0

    def merge(self, other: "TrainStats") -> None:
        self.steps += other.steps
        self.input_words += other.input_words
        self.pairs += other.pairs
        self.negatives += other.negatives
        self.retries += other.retries


def _dotprod_breakdown(body_len: int, inputs: int, pairs: int) -> transport.PayloadBreakdown:
    return transport.PayloadBreakdown(transport.HEADER_LEN + body_len,
                                      index_bytes=4 * (inputs + pairs))


def _adjust_breakdown(body_len: int, inputs: int, pairs: int, negs: int) -> transport.PayloadBreakdown:
    return transport.PayloadBreakdown(transport.HEADER_LEN + body_len,
                                      fg_bytes=4 * (pairs + negs),
                                      index_bytes=4 * (inputs + pairs))


def train_step(minibatch: Minibatch, connections: list, alpha: float, seed: int,
               negatives: int, meter: transport.BandwidthMeter | None = None,
               timeout: float | None = 60.0) -> StepStats:
    """One dotprod broadcast, barrier, coefficients, one adjust broadcast."""
    inputs, contexts = minibatch.inputs, minibatch.contexts
    num_pairs = minibatch.num_pairs
    num_negs = num_pairs * negatives

    body = transport.encode_dotprod_request(seed, negatives, inputs, contexts)
    bd = _dotprod_breakdown(len(body), len(inputs), num_pairs)
    pending = [c.issue(transport.OP_DOTPROD, body, bd) for c in connections]
    partials = [transport.decode_dotprod_response(p.wait(timeout).body)
                for p in pending]

    f_plus, f_minus = aggregate_partials(partials)
    if len(f_plus) != num_pairs or len(f_minus) != num_negs:
        raise ProtocolError(
            f"dotprod result shape ({len(f_plus)}, {len(f_minus)}) does not match "
            f"minibatch ({num_pairs} pairs, {num_negs} negatives)")
    g = coefficients(f_plus, f_minus, alpha)

    body = transport.encode_adjust_request(seed, negatives, inputs, contexts,
                                           g.g_plus, g.g_minus)
    bd = _adjust_breakdown(len(body), len(inputs), num_pairs, num_negs)
    pending = [c.issue(transport.OP_ADJUST, body, bd) for c in connections]
    for p in pending:
        p.wait(timeout)

    if meter is not None:
        meter.count_minibatch(len(inputs), num_pairs, num_negs)
    return StepStats(num_pairs, num_negs)


def plan_schedule(corpus: IndexedCorpus, vocab: Vocabulary, config: TrainConfig) -> tuple[AlphaSchedule, list[int]]:
    """Count usable input words of every epoch's subsampled corpus and build
    the shared learning-rate schedule over their total."""
    spec = config.window_spec()
    per_epoch = [usable_input_count(subsample(corpus, vocab, spec, epoch=e))
                 for e in range(config.epochs)]
    sched = AlphaSchedule(config.alpha, config.alpha_min, sum(per_epoch))
    return sched, per_epoch


def train(corpus: IndexedCorpus, vocab: Vocabulary, config: TrainConfig,
          connections: list, meter: transport.BandwidthMeter | None = None,
          on_epoch=None) -> TrainStats:
    """Run config.epochs passes of minibatch SGD through the shard protocol.

    The corpus is re-subsampled per epoch, split into one partition per
    client thread, and each thread drives its partition independently;
    the only cross-thread coupling is the shared learning-rate counter.
    """
    spec = config.window_spec()
    sched, _per_epoch = plan_schedule(corpus, vocab, config)
    stats = TrainStats()
    start = time.monotonic()

    for epoch in range(config.epochs):
        sub = subsample(corpus, vocab, spec, epoch=epoch)
        parts = partition_sentences(sub, config.threads)
        if config.threads == 1:
            worker_stats = [_train_partition(parts[0], spec, config, connections,
                                             sched, epoch, 0, meter)]
        else:
            worker_stats = [None] * config.threads
            threads = []
            for tid in range(config.threads):
                def run(tid=tid):
                    worker_stats[tid] = _train_partition(
                        parts[tid], spec, config, connections, sched, epoch,
                        tid, meter)
                t = threading.Thread(target=run, name=f"client-{tid}")
                t.start()
                threads.append(t)
            for t in threads:
                t.join()
        for ws in worker_stats:
            stats.merge(ws)
        stats.epochs_run += 1
        if on_epoch is not None:
            on_epoch(epoch, stats)

    stats.input_words = sched.processed
    stats.seconds = time.monotonic() - start
    return stats


def _train_partition(part: IndexedCorpus, spec: WindowSpec, config: TrainConfig,
                     connections: list, sched: AlphaSchedule, epoch: int,
                     client_id: int, meter: transport.BandwidthMeter | None) -> TrainStats:
    stats = TrainStats()
    for mb in make_minibatches(part, spec, config.batch_size,
                               interleaved=config.interleaved, epoch=epoch):
        alpha = sched.current()
        seed = seed_chain(config.seed, SEED_TAG_MINIBATCH, epoch, client_id, mb.batch_id)
        try:
            step = train_step(mb, connections, alpha, seed, config.negatives, meter)
        except (ConnectionError, TimeoutError, ShardCallError):
            # one whole-step retry with a fresh seed keeps F/G shapes
            # consistent across shards; a second failure aborts training
            stats.retries += 1
            retry_seed = seed_chain(seed, SEED_TAG_RETRY)
            step = train_step(mb, connections, alpha, retry_seed,
                              config.negatives, meter)
        sched.advance(len(mb))
        stats.steps += 1
        stats.pairs += step.pairs
        stats.negatives += step.negatives
    return stats


def fetch_matrix(connections: list, which: int = transport.MATRIX_U) -> np.ndarray:
    """Pull per-shard column slices over EXPORT calls and reassemble.

    Connections are used in shard-id order so columns land in place.
    """
    conns = sorted(connections, key=lambda c: c.shard_id)
    vocab_size = conns[0].vocab_size
    dim = conns[0].dim
    full = np.empty((vocab_size, dim), dtype=np.float32)
    for conn in conns:
        width = conn.hi - conn.lo
        chunk = max(1, (1 << 22) // max(width, 1))
        for start in range(0, vocab_size, chunk):
            end = min(vocab_size, start + chunk)
            frame = conn.call(transport.OP_EXPORT,
                              transport.encode_export_request(start, end, which))
            rows = transport.decode_export_response(frame.body)
            if rows.shape != (end - start, width):
                raise ProtocolError(
                    f"export shape {rows.shape} != {(end - start, width)}")
            full[start:end, conn.lo:conn.hi] = rows
    return full


# ---------------------------------------------------------------------------
# Objective evaluation (diagnostic)
# ---------------------------------------------------------------------------

def objective(corpus: IndexedCorpus, noise: NoiseTable, U: np.ndarray,
              V: np.ndarray, spec: WindowSpec, negatives: int, seed: int,
              epoch: int = 0) -> float:
    """Log-likelihood of the skipgram objective over a corpus sample.

    Negatives are fixed by the seed so repeated evaluations are comparable.
    Computed in float64; intended for tests and convergence diagnostics,
    not the training path.
    """
    total = 0.0
    for mb in make_minibatches(corpus, spec, batch_size=1024, epoch=epoch):
        lens = np.fromiter((len(c) for c in mb.contexts), dtype=np.int64,
                           count=len(mb.contexts))
        in_rows = np.repeat(mb.inputs.astype(np.int64), lens)
        out_rows = np.concatenate(mb.contexts).astype(np.int64)
        mb_seed = seed_chain(seed, SEED_TAG_OBJECTIVE, epoch, mb.batch_id)
        f_plus = np.einsum("ij,ij->i", U[in_rows].astype(np.float64),
                           V[out_rows].astype(np.float64))
        total += log_sigmoid(f_plus).sum()
        if negatives:
            negs = minibatch_negatives(noise, mb_seed, out_rows, negatives)
            neg_in = np.repeat(in_rows, negatives)
            f_minus = np.einsum("ij,ij->i", U[neg_in].astype(np.float64),
                                V[negs.reshape(-1)].astype(np.float64))
            total += log_sigmoid(-f_minus).sum()
    return float(total)
