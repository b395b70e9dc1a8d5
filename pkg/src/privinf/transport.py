"""Framed two-party transport with byte/round metering.

Frames are tag (1 byte) + session id (4 bytes LE) + payload length (4 bytes
LE) + payload. The loopback channel (queue pair, in process) and the TCP
channel speak the identical framing, so transcripts are byte-compatible.

Rounds are metered per party: a round is one send burst (consecutive sends
up to the next receive); a simultaneous exchange counts as one round on each
side. Payload bits are tracked separately from wire bytes so cost-model
comparisons can use logical bit counts while the wire view includes headers.
"""

from __future__ import annotations

import hashlib
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

from .errors import ConfigError, DesyncError, HandshakeError

# Message tag registry: one tag per protocol message.
TAG_SMATMUL_MASKED_X = 0x01  # online: client's masked input share
TAG_SMATMUL_MASKED_W = 0x02  # offline: server's masked weights
TAG_SQUAPOL_E = 0x03  # offline: server's masked coefficients
TAG_SQUAPOL_F = 0x04  # offline: client's masked powers
TAG_DRELU_F = 0x05  # online: masked-value shares, both directions
TAG_BITXA_DE = 0x06  # online: bit and value mask openings, both directions
TAG_SHAREDMUL_EF = 0x07  # online: both Beaver openings, both directions
TAG_POLY_E = 0x08  # offline: server's masked coefficients (general degree)
TAG_POLY_F = 0x09  # offline: client's masked power shares
TAG_POLY_FHAT = 0x0A  # online: masked-input shares, both directions
TAG_HANDSHAKE = 0x10
TAG_CONFIG = 0x11
TAG_GRAPH_SHARES = 0x12
TAG_RESULT_SHARE = 0x13
TAG_CONTROL = 0x14

TAG_NAMES = {
    TAG_SMATMUL_MASKED_X: "smatmul.masked_x",
    TAG_SMATMUL_MASKED_W: "smatmul.masked_w",
    TAG_SQUAPOL_E: "squapol.e",
    TAG_SQUAPOL_F: "squapol.f",
    TAG_DRELU_F: "sdrelu.f",
    TAG_BITXA_DE: "sbitxa.de",
    TAG_SHAREDMUL_EF: "sharedmul.ef",
    TAG_POLY_E: "spolyd.e",
    TAG_POLY_F: "spolyd.f",
    TAG_POLY_FHAT: "spolyd.fhat",
    TAG_HANDSHAKE: "handshake",
    TAG_CONFIG: "config",
    TAG_GRAPH_SHARES: "graph.shares",
    TAG_RESULT_SHARE: "result.share",
    TAG_CONTROL: "control",
}

FRAME_HEADER = struct.Struct("<BII")
HANDSHAKE_MAGIC = b"PGNN"
WIRE_VERSION = 1
_HS = struct.Struct("<4sBBBHB")  # magic, version, l, f, kappa, prg id

PHASES = ("setup", "offline", "online")
DEFAULT_TIMEOUT = 60.0


@dataclass
class PhaseMeter:
    bytes_sent: int = 0
    bytes_received: int = 0
    payload_bits_sent: int = 0
    payload_bits_received: int = 0
    rounds: int = 0


class Meter:
    """Per-phase traffic accounting for one endpoint."""

    def __init__(self) -> None:
        self.phases = {p: PhaseMeter() for p in PHASES}
        self.phase = "setup"
        self._in_burst = False

    def set_phase(self, phase: str) -> None:
        if phase not in PHASES:
            raise ConfigError(f"unknown phase {phase!r}")
        if phase != self.phase:
            self.phase = phase
            self._in_burst = False

    @property
    def current(self) -> PhaseMeter:
        return self.phases[self.phase]

    def note_send(self, wire_bytes: int, payload_bits: int) -> None:
        m = self.current
        m.bytes_sent += wire_bytes
        m.payload_bits_sent += payload_bits
        if not self._in_burst:
            m.rounds += 1
            self._in_burst = True

    def note_recv(self, wire_bytes: int, payload_bits: int) -> None:
        m = self.current
        m.bytes_received += wire_bytes
        m.payload_bits_received += payload_bits
        self._in_burst = False

    def note_exchange(self, sent_wire: int, sent_bits: int, recv_wire: int, recv_bits: int) -> None:
        m = self.current
        m.bytes_sent += sent_wire
        m.payload_bits_sent += sent_bits
        m.bytes_received += recv_wire
        m.payload_bits_received += recv_bits
        m.rounds += 1
        self._in_burst = False

    def summary(self) -> dict:
        return {
            p: {
                "bytes_sent": m.bytes_sent,
                "bytes_received": m.bytes_received,
                "payload_bits_sent": m.payload_bits_sent,
                "payload_bits_received": m.payload_bits_received,
                "rounds": m.rounds,
            }
            for p, m in self.phases.items()
        }


class Transcript:
    """Ordered (direction, tag, length) log plus a running payload digest."""

    def __init__(self) -> None:
        self.entries: list[tuple[str, int, int]] = []
        self._hash = hashlib.sha256()

    def note(self, direction: str, tag: int, payload: bytes) -> None:
        self.entries.append((direction, tag, len(payload)))
        self._hash.update(direction.encode())
        self._hash.update(bytes([tag]))
        self._hash.update(len(payload).to_bytes(4, "little"))
        self._hash.update(payload)

    def digest(self) -> str:
        return self._hash.hexdigest()

    def shape(self) -> list[tuple[str, int, int]]:
        return list(self.entries)


class Channel:
    """Common framing, metering and transcript logic for both transports."""

    def __init__(self, session_id: int = 0, record: bool = True, timeout: float = DEFAULT_TIMEOUT):
        self.session_id = session_id
        self.meter = Meter()
        self.transcript = Transcript() if record else None
        self.timeout = timeout

    # subclasses provide raw frame IO
    def _put(self, frame: bytes) -> None:
        raise NotImplementedError

    def _get(self) -> bytes:
        raise NotImplementedError

    def set_phase(self, phase: str) -> None:
        self.meter.set_phase(phase)

    def _encode(self, tag: int, payload: bytes) -> bytes:
        return FRAME_HEADER.pack(tag, self.session_id, len(payload)) + payload

    def _decode(self, frame: bytes, want_tag: int) -> bytes:
        tag, session, length = FRAME_HEADER.unpack_from(frame)
        payload = frame[FRAME_HEADER.size :]
        if session != self.session_id:
            raise DesyncError(f"session id {session} != {self.session_id}")
        if length != len(payload):
            raise DesyncError("frame length field does not match payload")
        if tag != want_tag:
            raise DesyncError(
                f"expected {TAG_NAMES.get(want_tag, hex(want_tag))}, "
                f"got {TAG_NAMES.get(tag, hex(tag))}"
            )
        return payload

    def send(self, tag: int, payload: bytes, bits: int | None = None) -> None:
        frame = self._encode(tag, payload)
        bits = 8 * len(payload) if bits is None else bits
        self.meter.note_send(len(frame), bits)
        if self.transcript is not None:
            self.transcript.note("S", tag, payload)
        self._put(frame)

    def recv(self, tag: int, bits: int | None = None) -> bytes:
        frame = self._get()
        payload = self._decode(frame, tag)
        self.meter.note_recv(len(frame), 8 * len(payload) if bits is None else bits)
        if self.transcript is not None:
            self.transcript.note("R", tag, payload)
        return payload

    def exchange(
        self, tag: int, payload: bytes, bits: int | None = None, recv_tag: int | None = None
    ) -> bytes:
        """Simultaneous bidirectional message: one metered round.

        recv_tag covers direction-asymmetric steps where the peer's message
        carries a different tag than ours.
        """
        frame = self._encode(tag, payload)
        self._put(frame)
        back = self._decode(self._get(), tag if recv_tag is None else recv_tag)
        sbits = 8 * len(payload) if bits is None else bits
        rbits = 8 * len(back) if bits is None else bits
        self.meter.note_exchange(len(frame), sbits, FRAME_HEADER.size + len(back), rbits)
        if self.transcript is not None:
            self.transcript.note("S", tag, payload)
            self.transcript.note("R", tag, back)
        return back

    def close(self) -> None:
        pass


class LoopbackChannel(Channel):
    """In-process endpoint backed by a queue pair."""

    def __init__(self, outq: queue.Queue, inq: queue.Queue, **kw):
        super().__init__(**kw)
        self._outq = outq
        self._inq = inq

    def _put(self, frame: bytes) -> None:
        self._outq.put(frame)

    def _get(self) -> bytes:
        try:
            return self._inq.get(timeout=self.timeout)
        except queue.Empty:
            raise DesyncError("peer sent nothing before timeout") from None


def loopback_pair(session_id: int = 0, record: bool = True, timeout: float = DEFAULT_TIMEOUT):
    """Two connected loopback endpoints (party 0 first)."""
    q01: queue.Queue = queue.Queue()
    q10: queue.Queue = queue.Queue()
    c0 = LoopbackChannel(q01, q10, session_id=session_id, record=record, timeout=timeout)
    c1 = LoopbackChannel(q10, q01, session_id=session_id, record=record, timeout=timeout)
    return c0, c1


class TcpChannel(Channel):
    """Socket endpoint. exchange() overlaps send and receive so both sides
    can push large frames concurrently without deadlocking on full buffers."""

    def __init__(self, sock: socket.socket, **kw):
        super().__init__(**kw)
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.settimeout(self.timeout)

    def _put(self, frame: bytes) -> None:
        self.sock.sendall(frame)

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            try:
                chunk = self.sock.recv(min(1 << 20, n - got))
            except socket.timeout:
                raise DesyncError("peer sent nothing before timeout") from None
            if not chunk:
                raise DesyncError("connection closed mid-frame")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _get(self) -> bytes:
        head = self._recv_exact(FRAME_HEADER.size)
        _, _, length = FRAME_HEADER.unpack(head)
        return head + self._recv_exact(length)

    def exchange(
        self, tag: int, payload: bytes, bits: int | None = None, recv_tag: int | None = None
    ) -> bytes:
        frame = self._encode(tag, payload)
        err: list[BaseException] = []

        def pump() -> None:
            try:
                self.sock.sendall(frame)
            except BaseException as e:  # re-raised by the caller
                err.append(e)

        t = threading.Thread(target=pump, daemon=True)
        t.start()
        raw = self._get()
        t.join()
        if err:
            raise err[0]
        back = self._decode(raw, tag if recv_tag is None else recv_tag)
        sbits = 8 * len(payload) if bits is None else bits
        rbits = 8 * len(back) if bits is None else bits
        self.meter.note_exchange(len(frame), sbits, FRAME_HEADER.size + len(back), rbits)
        if self.transcript is not None:
            self.transcript.note("S", tag, payload)
            self.transcript.note("R", tag, back)
        return back

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def tcp_listen(host: str, port: int, **kw) -> TcpChannel:
    """Accept exactly one peer connection."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    conn, _ = srv.accept()
    srv.close()
    return TcpChannel(conn, **kw)


def tcp_connect(host: str, port: int, attempts: int = 50, delay: float = 0.1, **kw) -> TcpChannel:
    import time

    last: Exception | None = None
    for _ in range(attempts):
        try:
            sock = socket.create_connection((host, port), timeout=kw.get("timeout", DEFAULT_TIMEOUT))
            return TcpChannel(sock, **kw)
        except OSError as e:
            last = e
            time.sleep(delay)
    raise ConfigError(f"could not connect to {host}:{port}: {last}")


def handshake(channel: Channel, l: int, f: int, kappa: int, prg_id: int) -> None:
    """Exchange and verify protocol version and ring/security parameters."""
    mine = _HS.pack(HANDSHAKE_MAGIC, WIRE_VERSION, l, f, kappa, prg_id)
    theirs = channel.exchange(TAG_HANDSHAKE, mine)
    if len(theirs) != _HS.size:
        raise HandshakeError("malformed handshake frame")
    magic, ver, pl, pf, pk, pp = _HS.unpack(theirs)
    if magic != HANDSHAKE_MAGIC:
        raise HandshakeError(f"bad magic {magic!r}")
    if ver != WIRE_VERSION:
        raise HandshakeError(f"version mismatch: ours {WIRE_VERSION}, theirs {ver}")
    if (pl, pf, pk, pp) != (l, f, kappa, prg_id):
        raise HandshakeError(
            f"parameter mismatch: ours l={l} f={f} kappa={kappa} prg={prg_id}, "
            f"theirs l={pl} f={pf} kappa={pk} prg={pp}"
        )


def run_pair(fn0, fn1, timeout: float = 300.0):
    """Run the two party closures on two threads; re-raise the first failure."""
    results: list = [None, None]
    errors: list = [None, None]

    def wrap(i, fn):
        def go():
            try:
                results[i] = fn()
            except BaseException as e:  # propagate into the caller
                errors[i] = e

        return go

    t1 = threading.Thread(target=wrap(1, fn1), daemon=True)
    t1.start()
    wrap(0, fn0)()
    t1.join(timeout)
    if t1.is_alive():
        raise DesyncError("party 1 did not finish")
    for e in errors:
        if e is not None:
            raise e
    return results[0], results[1]
