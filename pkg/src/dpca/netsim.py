"""Coordinator/worker transport with exact communication accounting.

Wire format of one frame (all integers little-endian)::

    magic "FPC1" | msg_type u8 | machine_index u32 | round u32
    | rows u64 | cols u64 | rows*cols float64 payload | crc32 u32

The CRC covers every byte before it.  A frame with an empty payload is
33 bytes long: a 29-byte header plus the 4-byte CRC.

CONTROL frames never carry payload (``rows == 0``); their ``cols`` field
holds a command word instead, see :func:`control_word`.

Two transports share one :class:`Session` API: an in-process bus that
still encodes and decodes every frame (so logs are identical), and a TCP
star where each worker is a server the coordinator connects to.  Rounds
are synchronous: the coordinator broadcasts, then blocks until exactly the
expected messages from all ``K`` workers arrived, and hands them back
sorted by machine index, whatever the arrival order.
"""
from __future__ import annotations

import enum
import logging
import os
import queue
import socket
import struct
import threading
import warnings
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .linalg import is_basis
from .models import DatasetShard
from .worker import LocalSummary, PairPolicy, local_top_r, summarize

log = logging.getLogger(__name__)

MAGIC = b"FPC1"
HEADER = struct.Struct("<4sBIIQQ")
CRC = struct.Struct("<I")
HEADER_SIZE = HEADER.size  # 29
FRAME_OVERHEAD = HEADER_SIZE + CRC.size  # 33

TIMEOUT_ENV = "FRDPCA_ROUND_TIMEOUT_MS"
DEFAULT_TIMEOUT_MS = 30_000


class MsgType(enum.IntEnum):
    BASIS_UP = 1
    BASIS_DOWN = 2
    STEP_UP = 3
    SCALAR_UP = 4
    CONTROL = 5


class Command(enum.IntEnum):
    CONFIGURE = 1
    SHUTDOWN = 2


class Flag(enum.IntFlag):
    KENDALL = 1
    UNSHIFTED = 2
    INFERENCE = 4
    SEND_LOCAL_BASIS = 8


class FramingError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ProtocolError(RuntimeError):
    pass


class SessionError(RuntimeError):
    """A worker timed out, disconnected or misbehaved during a round."""

    def __init__(self, message: str, machine_index: int | None = None):
        super().__init__(message)
        self.machine_index = machine_index


class OrthonormalityWarning(UserWarning):
    pass


class RoundMessage:
    """One typed unit on the wire.  ``payload`` has shape ``(rows, cols)``."""

    __slots__ = ("msg_type", "machine_index", "round", "rows", "cols", "payload")

    def __init__(self, msg_type, machine_index: int, round: int, payload=None, *, rows=None, cols=None):
        self.msg_type = MsgType(msg_type)
        self.machine_index = int(machine_index)
        self.round = int(round)
        if payload is None:
            rows = 0 if rows is None else int(rows)
            cols = 0 if cols is None else int(cols)
            payload = np.zeros((rows, cols))
        payload = np.asarray(payload, dtype=np.float64)
        if payload.ndim == 1:
            payload = payload[:, None]
        if payload.ndim == 0:
            payload = payload.reshape(1, 1)
        self.payload = payload
        self.rows, self.cols = payload.shape
        if self.round < 1:
            raise ValueError(f"round must be >= 1, got {self.round}")

    @property
    def floats(self) -> int:
        return self.rows * self.cols

    def __eq__(self, other):
        if not isinstance(other, RoundMessage):
            return NotImplemented
        return (
            self.msg_type == other.msg_type
            and self.machine_index == other.machine_index
            and self.round == other.round
            and self.payload.shape == other.payload.shape
            and self.payload.tobytes() == other.payload.tobytes()
        )

    def __repr__(self):
        return (f"RoundMessage({self.msg_type.name}, k={self.machine_index}, round={self.round}, "
                f"shape=({self.rows}, {self.cols}))")


def control_word(command: Command, r: int = 0, flags: Flag = Flag(0)) -> int:
    return int(command) | (int(flags) << 8) | (int(r) << 16)


def parse_control(word: int) -> tuple[Command, int, Flag]:
    return Command(word & 0xFF), word >> 16, Flag((word >> 8) & 0xFF)


def control_message(k: int, round: int, command: Command, r: int = 0, flags: Flag = Flag(0)) -> RoundMessage:
    return RoundMessage(MsgType.CONTROL, k, round, rows=0, cols=control_word(command, r, flags))


def encode_frame(msg: RoundMessage) -> bytes:
    head = HEADER.pack(MAGIC, int(msg.msg_type), msg.machine_index, msg.round, msg.rows, msg.cols)
    body = head + np.ascontiguousarray(msg.payload, dtype="<f8").tobytes(order="C")
    return body + CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def frame_length(header: bytes) -> int:
    """Total frame length announced by a 29-byte header."""
    magic, _, _, _, rows, cols = HEADER.unpack(header)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}", 0)
    return HEADER_SIZE + rows * cols * 8 + CRC.size


def decode_frame(buf: bytes) -> RoundMessage:
    buf = bytes(buf)
    if len(buf) < HEADER_SIZE:
        raise FramingError(f"truncated header: {len(buf)} of {HEADER_SIZE} bytes", len(buf))
    magic, mtype, k, rnd, rows, cols = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}", 0)
    end = HEADER_SIZE + rows * cols * 8
    if len(buf) < end + CRC.size:
        raise FramingError(f"truncated frame: {len(buf)} of {end + CRC.size} bytes", len(buf))
    if len(buf) > end + CRC.size:
        raise FramingError("trailing bytes after frame", end + CRC.size)
    (crc,) = CRC.unpack_from(buf, end)
    if crc != zlib.crc32(buf[:end]) & 0xFFFFFFFF:
        raise FramingError("CRC mismatch", end)
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise FramingError(f"unknown message type {mtype}", 4) from None
    if rnd < 1:
        raise FramingError(f"round must be >= 1, got {rnd}", 9)
    payload = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=HEADER_SIZE)
    return RoundMessage(mtype, k, rnd, payload.reshape(rows, cols).astype(np.float64), rows=rows, cols=cols) \
        if rows * cols else RoundMessage(mtype, k, rnd, rows=rows, cols=cols)


# --- accounting ------------------------------------------------------------

@dataclass
class CommRecord:
    round: int
    direction: str  # "up" (worker -> coordinator) or "down"
    floats: int = 0
    bytes: int = 0  # payload bytes, == 8 * floats
    frame_bytes: int = 0  # including headers and CRC
    messages: int = 0


@dataclass
class CommLog:
    records: list[CommRecord] = field(default_factory=list)

    def record(self, msg: RoundMessage, direction: str, frame_size: int) -> None:
        rec = self._get(msg.round, direction)
        rec.floats += msg.floats
        rec.bytes += msg.floats * 8
        rec.frame_bytes += frame_size
        rec.messages += 1

    def _get(self, round: int, direction: str) -> CommRecord:
        for rec in self.records:
            if rec.round == round and rec.direction == direction:
                return rec
        rec = CommRecord(round, direction)
        self.records.append(rec)
        self.records.sort(key=lambda r: (r.round, r.direction != "down"))
        return rec

    def floats(self, round: int | None = None, direction: str | None = None) -> int:
        return sum(r.floats for r in self.records
                   if (round is None or r.round == round) and (direction is None or r.direction == direction))

    @property
    def total_floats(self) -> int:
        return self.floats()

    def as_rows(self) -> list[dict]:
        return [vars(r).copy() for r in self.records]


def expected_floats(K: int, p: int, r: int, T: int, inference: bool = False, oneround_init: bool = True) -> int:
    """Closed-form protocol count: ``K p r`` per direction per round (+``K`` scalars)."""
    total = K * p * r if oneround_init else 0
    per_round = 2 * K * p * r + (K if inference else 0)
    return total + (T - 1) * per_round


# --- worker protocol ---------------------------------------------------------

class WorkerNode:
    """Protocol endpoint for one machine.

    Holds either raw data (summary built on CONFIGURE) or a precomputed
    summary, and answers requests with reply messages.
    """

    def __init__(self, machine_index: int, shard: DatasetShard | np.ndarray | None = None,
                 summary: LocalSummary | None = None, pair_policy: PairPolicy | None = None):
        if shard is None and summary is None:
            raise ValueError("worker needs a shard or a summary")
        self.k = int(machine_index)
        self.shard = shard
        self.summary = summary
        self.pair_policy = pair_policy
        self.r = 0
        self.flags = Flag(0)
        self.closed = False

    def handle(self, msg: RoundMessage) -> list[RoundMessage]:
        if msg.machine_index != self.k:
            raise ProtocolError(f"worker {self.k} received a message addressed to {msg.machine_index}")
        if msg.msg_type == MsgType.CONTROL:
            return self._control(msg)
        if msg.msg_type == MsgType.BASIS_DOWN:
            return self._step(msg)
        raise ProtocolError(f"worker {self.k} cannot handle {msg.msg_type.name}")

    def _control(self, msg):
        command, r, flags = parse_control(msg.cols)
        if command == Command.SHUTDOWN:
            self.closed = True
            return []
        self.r, self.flags = r, flags
        kind = "kendall_tau" if Flag.KENDALL in flags else "covariance"
        if self.summary is None or self.summary.kind != kind:
            if self.shard is None:
                raise ProtocolError(f"worker {self.k} holds a {self.summary.kind} summary, {kind} requested")
            self.summary = summarize(self.shard, kind, self.pair_policy)
        if Flag.SEND_LOCAL_BASIS in flags:
            return [RoundMessage(MsgType.BASIS_UP, self.k, msg.round, local_top_r(self.summary, r))]
        return []

    def _step(self, msg):
        if self.summary is None:
            raise ProtocolError(f"worker {self.k} received a basis before CONFIGURE")
        U = msg.payload
        if not is_basis(U, 1e-8):
            warnings.warn(f"worker {self.k}: broadcast basis in round {msg.round} is not orthonormal",
                          OrthonormalityWarning, stacklevel=2)
        S = self.summary.matrix
        SU = S @ U
        if Flag.UNSHIFTED in self.flags:
            return [RoundMessage(MsgType.STEP_UP, self.k, msg.round, SU)]
        p, r = U.shape
        s2 = (np.trace(S) - np.einsum("ij,ij->", U, SU)) / (p - r)
        if Flag.INFERENCE in self.flags:
            return [RoundMessage(MsgType.STEP_UP, self.k, msg.round, SU),
                    RoundMessage(MsgType.SCALAR_UP, self.k, msg.round, np.array([[s2]]))]
        return [RoundMessage(MsgType.STEP_UP, self.k, msg.round, SU - s2 * U)]


# --- transports --------------------------------------------------------------

def round_timeout() -> float:
    """Per-round timeout in seconds, overridable through ``FRDPCA_ROUND_TIMEOUT_MS``."""
    return float(os.environ.get(TIMEOUT_ENV, DEFAULT_TIMEOUT_MS)) / 1000.0


class _InProcessTransport:
    def __init__(self, nodes: Sequence[WorkerNode], shuffle_seed: int | None = None):
        self.nodes = {node.k: node for node in nodes}
        if sorted(self.nodes) != list(range(len(nodes))):
            raise ValueError("in-process workers must be indexed 0..K-1")
        self._inbox: list[bytes] = []
        self._rng = None if shuffle_seed is None else np.random.default_rng(shuffle_seed)

    def send(self, k: int, frame: bytes) -> None:
        for reply in self.nodes[k].handle(decode_frame(frame)):
            self._inbox.append(encode_frame(reply))

    def receive(self, timeout: float) -> Iterable[tuple[int | None, bytes | None]]:
        inbox, self._inbox = self._inbox, []
        if self._rng is not None:
            inbox = [inbox[i] for i in self._rng.permutation(len(inbox))]
        for frame in inbox:
            yield None, frame

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks, got = [], 0
    while got < size:
        chunk = sock.recv(min(size - got, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, HEADER_SIZE)
    return head + _recv_exact(sock, frame_length(head) - HEADER_SIZE)


class _TcpTransport:
    def __init__(self, addresses: Sequence[tuple[str, int]], connect_timeout: float = 10.0):
        self.socks: list[socket.socket] = []
        self._queue: queue.Queue = queue.Queue()
        for k, (host, port) in enumerate(addresses):
            try:
                sock = socket.create_connection((host, port), timeout=connect_timeout)
            except OSError as exc:
                self.close()
                raise SessionError(f"cannot reach worker {k} at {host}:{port}: {exc}", k) from exc
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.socks.append(sock)
            threading.Thread(target=self._reader, args=(k, sock), daemon=True).start()

    def _reader(self, k: int, sock: socket.socket) -> None:
        try:
            while True:
                self._queue.put((k, read_frame(sock)))
        except (OSError, ConnectionError, FramingError) as exc:
            self._queue.put((k, exc))

    def send(self, k: int, frame: bytes) -> None:
        try:
            self.socks[k].sendall(frame)
        except OSError as exc:
            raise SessionError(f"worker {k} disconnected: {exc}", k) from exc

    def receive(self, timeout: float):
        while True:
            try:
                yield self._queue.get(timeout=timeout)
            except queue.Empty:
                yield None, None

    def close(self) -> None:
        for sock in self.socks:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self.socks = []


class Session:
    """Synchronous barrier rounds over a transport, with a :class:`CommLog`."""

    def __init__(self, transport, K: int, timeout: float | None = None):
        self.transport = transport
        self.K = K
        self.timeout = round_timeout() if timeout is None else timeout
        self.log = CommLog()
        self._closing = False

    @classmethod
    def inprocess(cls, nodes: Sequence[WorkerNode], shuffle_seed: int | None = None) -> "Session":
        return cls(_InProcessTransport(nodes, shuffle_seed), len(nodes))

    @classmethod
    def tcp(cls, addresses: Sequence[tuple[str, int]], timeout: float | None = None) -> "Session":
        return cls(_TcpTransport(addresses), len(addresses), timeout)

    def send(self, msg: RoundMessage) -> None:
        frame = encode_frame(msg)
        self.log.record(msg, "down", len(frame))
        self.transport.send(msg.machine_index, frame)

    def broadcast(self, make: Callable[[int], RoundMessage]) -> None:
        for k in range(self.K):
            self.send(make(k))

    def gather(self, round: int, types: Sequence[MsgType]) -> list[dict[MsgType, RoundMessage]]:
        """Block until every worker delivered one message of each type for ``round``.

        Returns one ``{type: message}`` dict per worker, indexed by machine.
        """
        want = set(types)
        got: dict[int, dict[MsgType, RoundMessage]] = defaultdict(dict)
        remaining = self.K * len(want)
        stream = self.transport.receive(self.timeout)
        while remaining:
            src, frame = next(stream, (None, None))
            if frame is None:
                missing = [k for k in range(self.K) if len(got[k]) < len(want)]
                raise SessionError(f"round {round}: timed out waiting for machine {missing[0]}"
                                   f" (missing {missing})", missing[0])
            if isinstance(frame, Exception):
                raise SessionError(f"round {round}: machine {src} disconnected: {frame}", src)
            msg = decode_frame(frame)
            if src is not None and msg.machine_index != src:
                raise ProtocolError(f"connection {src} sent a message claiming machine {msg.machine_index}")
            if msg.round != round or msg.msg_type not in want:
                raise ProtocolError(f"unexpected {msg!r} while gathering round {round}")
            if not 0 <= msg.machine_index < self.K:
                raise ProtocolError(f"unknown machine index {msg.machine_index}")
            if msg.msg_type in got[msg.machine_index]:
                raise ProtocolError(f"duplicate {msg.msg_type.name} from machine {msg.machine_index} "
                                    f"in round {round}")
            self.log.record(msg, "up", len(frame))
            got[msg.machine_index][msg.msg_type] = msg
            remaining -= 1
        return [got[k] for k in range(self.K)]

    def close(self, shutdown_workers: bool = False) -> None:
        if shutdown_workers and not self._closing:
            self._closing = True
            for k in range(self.K):
                frame = encode_frame(control_message(k, 1, Command.SHUTDOWN))
                try:
                    self.transport.send(k, frame)
                except SessionError:
                    pass
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def session_run(topology: str, driver: Callable[[Session], object], *, nodes: Sequence[WorkerNode] = (),
                addresses: Sequence[tuple[str, int]] = (), timeout: float | None = None) -> CommLog:
    """Run ``driver(session)`` over the chosen topology and return the traffic log.

    ``topology`` is ``"inprocess"`` (uses ``nodes``) or ``"tcp"`` (connects
    to ``addresses`` in machine-index order).
    """
    if topology == "inprocess":
        session = Session.inprocess(nodes)
    elif topology == "tcp":
        session = Session.tcp(addresses, timeout)
    else:
        raise ValueError(f"unknown topology {topology!r}")
    with session:
        driver(session)
    return session.log


def serve_worker(node: WorkerNode, host: str = "127.0.0.1", port: int = 0, *,
                 ready: Callable[[tuple[str, int]], None] | None = None, once: bool = True) -> None:
    """Serve one worker over TCP.

    Accepts coordinator connections one at a time and answers frames until
    the peer disconnects or sends SHUTDOWN.  With ``once`` the server exits
    after the first connection.  ``ready`` receives the bound address.
    """
    with socket.create_server((host, port)) as server:
        if ready is not None:
            ready(server.getsockname()[:2])
        while not node.closed:
            conn, _ = server.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with conn:
                try:
                    while not node.closed:
                        for reply in node.handle(decode_frame(read_frame(conn))):
                            conn.sendall(encode_frame(reply))
                except ConnectionError:
                    pass
            if once:
                break


def start_local_tcp_workers(nodes: Sequence[WorkerNode]) -> tuple[list[tuple[str, int]], list[threading.Thread]]:
    """Start one TCP server thread per node on ephemeral localhost ports."""
    addresses: list[tuple[str, int] | None] = [None] * len(nodes)
    events = [threading.Event() for _ in nodes]
    threads = []
    for i, node in enumerate(nodes):
        def ready(addr, i=i):
            addresses[i] = addr
            events[i].set()
        th = threading.Thread(target=serve_worker, args=(node,), kwargs={"ready": ready}, daemon=True)
        th.start()
        threads.append(th)
    for ev in events:
        ev.wait(10.0)
    return addresses, threads
