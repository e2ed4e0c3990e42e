"""Parameter-server shard: dotprod and adjust over one column slice.

Both calls regenerate the minibatch's negative examples from the seed the
client sends, so no per-call state survives between the paired calls. All
reads inside one adjust call observe the store as it was when the call
started: gradient contributions accumulate in a scratch buffer and are
added to the store only at the end, in ascending word-index order.

Dot products are computed as elementwise product followed by numpy's
pairwise-sum reduction along the row. That reduction depends only on slice
length, which pins the accumulation so single-shard runs are
bit-reproducible against the sequential reference.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import transport
from .sampler import NoiseTable, minibatch_negatives
from .store import PartialVectorStore
from .transport import Frame, ProtocolError, ShardCallError

log = logging.getLogger(__name__)


@dataclass
class DotprodRequest:
    inputs: np.ndarray           # uint32 (P,)
    contexts: list[np.ndarray]   # P context arrays
    seed: int
    negatives: int
    call_id: int = 0


@dataclass
class PartialDotResult:
    f_plus: np.ndarray   # float32, one per (input, context) pair
    f_minus: np.ndarray  # float32, negatives per pair, row-major


@dataclass
class AdjustRequest:
    inputs: np.ndarray
    contexts: list[np.ndarray]
    g_plus: np.ndarray
    g_minus: np.ndarray
    seed: int
    negatives: int
    call_id: int = 0


def checked_pairs(inputs: np.ndarray, contexts: list[np.ndarray],
                  vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Validate a minibatch and return row-major (input row, output row)
    arrays over all (input, context) pairs. Rejects the whole call on any
    bad index so F/G shapes never desynchronize across shards."""
    if len(inputs) == 0:
        raise ShardCallError(transport.ERR_MALFORMED, "empty minibatch")
    if len(inputs) != len(contexts):
        raise ShardCallError(transport.ERR_SHAPE_MISMATCH,
                             "inputs and context lists differ in length")
    lens = np.fromiter((len(c) for c in contexts), dtype=np.int64, count=len(contexts))
    if lens.min() < 1:
        raise ShardCallError(transport.ERR_MALFORMED, "empty context list")
    in_rows = np.repeat(inputs.astype(np.int64), lens)
    out_rows = np.concatenate(contexts).astype(np.int64)
    top = max(int(in_rows.max()), int(out_rows.max()))
    if top >= vocab_size:
        raise ShardCallError(transport.ERR_BAD_INDEX,
                             f"word index {top} out of range (|V|={vocab_size})")
    return in_rows, out_rows


def _row_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # pinned reduction: float32 product, pairwise sum along the row
    return (a * b).sum(axis=1)


class ShardHandler:
    """Executes shard-side calls against one PartialVectorStore."""

    def __init__(self, store: PartialVectorStore, noise: NoiseTable,
                 check_finite: bool = True):
        if len(noise) != store.vocab_size:
            raise ValueError("noise table size does not match vocabulary")
        self.store = store
        self.noise = noise
        self.check_finite = check_finite
        # test hook: when set, receives the flat negative array of each call
        self.negative_log: list[np.ndarray] | None = None

    # -- call implementations ------------------------------------------------

    def dotprod(self, req: DotprodRequest) -> PartialDotResult:
        """Partial dot products for all pairs and their regenerated negatives."""
        in_rows, out_rows = checked_pairs(req.inputs, req.contexts,
                                          self.store.vocab_size)
        U, V = self.store.U, self.store.V
        negs = minibatch_negatives(self.noise, req.seed, out_rows, req.negatives)
        if self.negative_log is not None:
            self.negative_log.append(negs.reshape(-1).copy())
        f_plus = _row_dots(U[in_rows], V[out_rows])
        if req.negatives:
            neg_in = np.repeat(in_rows, req.negatives)
            f_minus = _row_dots(U[neg_in], V[negs.reshape(-1)])
        else:
            f_minus = np.empty(0, dtype=np.float32)
        return PartialDotResult(f_plus, f_minus)

    def adjust(self, req: AdjustRequest) -> int:
        """Apply client-weighted vector combinations; deferred until call end.

        For each pair (w_I, w_O): u(w_I) += g+ * v(w_O), v(w_O) += g+ * u(w_I),
        and the same with g- against each regenerated negative, all computed
        from start-of-call values.
        """
        in_rows, out_rows = checked_pairs(req.inputs, req.contexts,
                                          self.store.vocab_size)
        p = len(in_rows)
        n = req.negatives
        if len(req.g_plus) != p or len(req.g_minus) != p * n:
            raise ShardCallError(
                transport.ERR_SHAPE_MISMATCH,
                f"coefficient shapes ({len(req.g_plus)}, {len(req.g_minus)}) do not "
                f"match minibatch ({p} pairs, {n} negatives each)")
        U, V = self.store.U, self.store.V
        negs = minibatch_negatives(self.noise, req.seed, out_rows, n)
        if self.negative_log is not None:
            self.negative_log.append(negs.reshape(-1).copy())

        # interleave positives with their negatives: pair 0's positive, pair
        # 0's n negatives, pair 1's positive, ... — the order Alg-style
        # sequential accumulation would use
        coefs = np.empty((p, 1 + n), dtype=np.float32)
        coefs[:, 0] = req.g_plus
        if n:
            coefs[:, 1:] = req.g_minus.reshape(p, n)
        coefs_flat = coefs.reshape(-1)

        v_rows = np.empty((p, 1 + n), dtype=np.int64)
        v_rows[:, 0] = out_rows
        if n:
            v_rows[:, 1:] = negs
        v_rows_flat = v_rows.reshape(-1)
        u_rows_flat = np.repeat(in_rows, 1 + n)

        # all gathers happen before any store write
        contrib_u = coefs_flat[:, None] * V[v_rows_flat]
        contrib_v = coefs_flat[:, None] * U[u_rows_flat]

        uniq_u, inv_u = np.unique(u_rows_flat, return_inverse=True)
        scratch_u = np.zeros((len(uniq_u), self.store.width), dtype=np.float32)
        np.add.at(scratch_u, inv_u, contrib_u)

        uniq_v, inv_v = np.unique(v_rows_flat, return_inverse=True)
        scratch_v = np.zeros((len(uniq_v), self.store.width), dtype=np.float32)
        np.add.at(scratch_v, inv_v, contrib_v)

        U[uniq_u] += scratch_u
        V[uniq_v] += scratch_v

        if self.check_finite:
            if not np.isfinite(U[uniq_u]).all() or not np.isfinite(V[uniq_v]).all():
                raise ShardCallError(transport.ERR_INTERNAL,
                                     "non-finite vector component after adjust")
        return p

    def export(self, row_start: int, row_end: int, which: int) -> np.ndarray:
        if which not in (transport.MATRIX_U, transport.MATRIX_V):
            raise ShardCallError(transport.ERR_MALFORMED, f"unknown matrix selector {which}")
        if not (0 <= row_start <= row_end <= self.store.vocab_size):
            raise ShardCallError(transport.ERR_BAD_INDEX,
                                 f"row range [{row_start}, {row_end}) out of bounds")
        m = self.store.U if which == transport.MATRIX_U else self.store.V
        return m[row_start:row_end].copy()

    # -- framed dispatch -----------------------------------------------------

    def handle_frame(self, frame: Frame) -> Frame:
        """Decode, execute, and encode one call. Never raises; errors become
        ERROR frames so one bad call cannot take down a connection."""
        try:
            if frame.op == transport.OP_HELLO:
                body = transport.encode_hello_response(
                    self.store.shard_id, self.store.lo, self.store.hi,
                    self.store.layout.dim, self.store.vocab_size)
                return Frame(transport.OP_RESPONSE, frame.call_id, body)
            if frame.op == transport.OP_DOTPROD:
                seed, n, inputs, contexts = transport.decode_dotprod_request(frame.body)
                res = self.dotprod(DotprodRequest(inputs, contexts, seed, n, frame.call_id))
                return Frame(transport.OP_RESPONSE, frame.call_id,
                             transport.encode_dotprod_response(res.f_plus, res.f_minus))
            if frame.op == transport.OP_ADJUST:
                seed, n, inputs, contexts, g_plus, g_minus = \
                    transport.decode_adjust_request(frame.body)
                pairs = self.adjust(AdjustRequest(inputs, contexts, g_plus, g_minus,
                                                  seed, n, frame.call_id))
                return Frame(transport.OP_RESPONSE, frame.call_id,
                             transport.encode_adjust_response(pairs))
            if frame.op == transport.OP_EXPORT:
                start, end, which = transport.decode_export_request(frame.body)
                mat = self.export(start, end, which)
                return Frame(transport.OP_RESPONSE, frame.call_id,
                             transport.encode_export_response(mat))
            raise ShardCallError(transport.ERR_UNSUPPORTED,
                                 f"op {frame.op_name} not servable")
        except ShardCallError as e:
            return Frame(transport.OP_ERROR, frame.call_id,
                         transport.encode_error(e.code, str(e)))
        except ProtocolError as e:
            return Frame(transport.OP_ERROR, frame.call_id,
                         transport.encode_error(transport.ERR_MALFORMED, str(e)))
        except Exception as e:  # defensive: keep the connection alive
            log.exception("internal error handling %s", frame.op_name)
            return Frame(transport.OP_ERROR, frame.call_id,
                         transport.encode_error(transport.ERR_INTERNAL, repr(e)))


def _recv_exact(conn: socket.socket, count: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < count:
        chunk = conn.recv(count - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


class ShardServer:
    """TCP server around a ShardHandler.

    One reader thread per connection parses frames and hands them to a
    shared worker pool; responses may complete out of order and are matched
    by call_id on the client. SHUTDOWN drains in-flight calls, then stops.
    """

    def __init__(self, handler: ShardHandler, host: str = "127.0.0.1",
                 port: int = 0, workers: int | None = None):
        self.handler = handler
        self.workers = workers
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._executor = ThreadPoolExecutor(max_workers=workers)
        self._stop = threading.Event()
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._accept_thread: threading.Thread | None = None

    def start(self) -> "ShardServer":
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name=f"shard-accept-{self.port}",
                                               daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _addr = self._listener.accept()
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._conns_lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve_connection, args=(conn,),
                             daemon=True).start()

    def _serve_connection(self, conn: socket.socket) -> None:
        write_lock = threading.Lock()

        def send(frame: Frame) -> None:
            data = transport.encode_frame(frame)
            with write_lock:
                try:
                    conn.sendall(data)
                except OSError:
                    pass

        try:
            while not self._stop.is_set():
                head = _recv_exact(conn, 4)
                if head is None:
                    return
                (length,) = struct.unpack("<I", head)
                if length < 12 or length > transport.MAX_FRAME_BODY + 12:
                    send(Frame(transport.OP_ERROR, 0, transport.encode_error(
                        transport.ERR_MALFORMED, f"bad frame length {length}")))
                    return
                rest = _recv_exact(conn, length)
                if rest is None:
                    return
                try:
                    frame = transport.decode_frame(head + rest)
                except ProtocolError as e:
                    send(Frame(transport.OP_ERROR, 0, transport.encode_error(
                        transport.ERR_MALFORMED, str(e))))
                    return
                if frame.op == transport.OP_SHUTDOWN:
                    send(Frame(transport.OP_RESPONSE, frame.call_id))
                    self.stop()
                    return
                self._executor.submit(self._run_call, frame, send)
        finally:
            with self._conns_lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass

    def _run_call(self, frame: Frame, send) -> None:
        send(self.handler.handle_frame(frame))

    def stop(self) -> None:
        """Stop accepting, drain in-flight calls, close connections."""
        if self._stop.is_set():
            return
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        self._executor.shutdown(wait=True)
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                c.close()
            except OSError:
                pass

    def join(self) -> None:
        self._stop.wait()
        self._executor.shutdown(wait=True)


def serve(store: PartialVectorStore, noise: NoiseTable, host: str, port: int,
          workers: int | None = None, check_finite: bool = False) -> ShardServer:
    """Start serving dotprod/adjust/export for one shard; returns the handle."""
    handler = ShardHandler(store, noise, check_finite=check_finite)
    return ShardServer(handler, host, port, workers=workers).start()
