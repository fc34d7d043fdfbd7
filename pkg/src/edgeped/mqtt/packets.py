"""MQTT 3.1.1 wire grammar for the QoS-0 subset.

Eight control packets are supported: CONNECT, CONNACK, PUBLISH, SUBSCRIBE,
SUBACK, PINGREQ, PINGRESP, DISCONNECT. Integers are big-endian per the
protocol; the fixed header's remaining length is a base-128 varint of at
most four bytes (max 268 435 455).
"""

from __future__ import annotations

import socket
import time
from dataclasses import dataclass, field

MAX_REMAINING_LENGTH = 268_435_455

CONNECT = 1
CONNACK = 2
PUBLISH = 3
SUBSCRIBE = 8
SUBACK = 9
PINGREQ = 12
PINGRESP = 13
DISCONNECT = 14

_SUPPORTED_TYPES = {CONNECT, CONNACK, PUBLISH, SUBSCRIBE, SUBACK, PINGREQ, PINGRESP, DISCONNECT}

CONNACK_ACCEPTED = 0
CONNACK_IDENTIFIER_REJECTED = 2
SUBACK_FAILURE = 0x80


class ProtocolError(ValueError):
    """Base class for wire-format violations."""


class MalformedVarintError(ProtocolError):
    pass


class VarintRangeError(ProtocolError):
    pass


class ReservedPacketTypeError(ProtocolError):
    pass


class UnsupportedPacketTypeError(ProtocolError):
    pass


class UnsupportedQoSError(ProtocolError):
    pass


class LengthOverrunError(ProtocolError):
    """Declared remaining length disagrees with the actual byte count."""


class MalformedPacketError(ProtocolError):
    pass


class ConnectionClosedError(ProtocolError):
    """Peer closed the transport mid-stream."""


def encode_varint(n: int) -> bytes:
    """Base-128 remaining-length encoding with continuation bits."""
    if n < 0 or n > MAX_REMAINING_LENGTH:
        raise VarintRangeError(f"remaining length {n} outside [0, {MAX_REMAINING_LENGTH}]")
    out = bytearray()
    while True:
        digit = n % 128
        n //= 128
        if n:
            out.append(digit | 0x80)
        else:
            out.append(digit)
            return bytes(out)


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Returns (value, bytes consumed); rejects >4 bytes or truncation."""
    value = 0
    multiplier = 1
    for i in range(4):
        if offset + i >= len(data):
            raise MalformedVarintError("varint truncated")
        byte = data[offset + i]
        value += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            return value, i + 1
        multiplier *= 128
    raise MalformedVarintError("varint continuation past 4 bytes")


def _encode_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise MalformedPacketError(f"string too long ({len(raw)} bytes)")
    return len(raw).to_bytes(2, "big") + raw


class _Reader:
    """Cursor over a packet body; every read is bounds-checked."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedPacketError("packet body truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def string(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPacketError(f"invalid UTF-8 string: {exc}") from None

    def rest(self) -> bytes:
        chunk = self.data[self.pos :]
        self.pos = len(self.data)
        return chunk

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedPacketError(
                f"{len(self.data) - self.pos} unexpected trailing bytes in body"
            )


@dataclass(frozen=True)
class Connect:
    client_id: str
    keepalive: int = 60
    clean_session: bool = True


@dataclass(frozen=True)
class Connack:
    return_code: int = CONNACK_ACCEPTED
    session_present: bool = False


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes
    retain: bool = False
    dup: bool = False


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    filters: tuple[tuple[str, int], ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class Suback:
    packet_id: int
    return_codes: tuple[int, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class Pingreq:
    pass


@dataclass(frozen=True)
class Pingresp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


Packet = Connect | Connack | Publish | Subscribe | Suback | Pingreq | Pingresp | Disconnect


def _fixed_header(packet_type: int, flags: int, body: bytes) -> bytes:
    return bytes([(packet_type << 4) | flags]) + encode_varint(len(body)) + body


def encode_packet(p: Packet) -> bytes:
    if isinstance(p, Connect):
        if not p.client_id:
            raise MalformedPacketError("client_id must be non-empty")
        if not 0 <= p.keepalive <= 0xFFFF:
            raise MalformedPacketError(f"keepalive {p.keepalive} outside u16")
        flags = 0x02 if p.clean_session else 0x00
        body = (
            _encode_string("MQTT")
            + bytes([0x04, flags])
            + p.keepalive.to_bytes(2, "big")
            + _encode_string(p.client_id)
        )
        return _fixed_header(CONNECT, 0, body)
    if isinstance(p, Connack):
        return _fixed_header(
            CONNACK, 0, bytes([1 if p.session_present else 0, p.return_code])
        )
    if isinstance(p, Publish):
        flags = (0x08 if p.dup else 0) | (0x01 if p.retain else 0)
        return _fixed_header(PUBLISH, flags, _encode_string(p.topic) + p.payload)
    if isinstance(p, Subscribe):
        if not p.filters:
            raise MalformedPacketError("SUBSCRIBE needs at least one topic filter")
        body = p.packet_id.to_bytes(2, "big")
        for topic_filter, qos in p.filters:
            if qos != 0:
                raise UnsupportedQoSError(f"only QoS 0 is supported, got {qos}")
            body += _encode_string(topic_filter) + bytes([qos])
        return _fixed_header(SUBSCRIBE, 0x02, body)
    if isinstance(p, Suback):
        body = p.packet_id.to_bytes(2, "big") + bytes(p.return_codes)
        return _fixed_header(SUBACK, 0, body)
    if isinstance(p, Pingreq):
        return _fixed_header(PINGREQ, 0, b"")
    if isinstance(p, Pingresp):
        return _fixed_header(PINGRESP, 0, b"")
    if isinstance(p, Disconnect):
        return _fixed_header(DISCONNECT, 0, b"")
    raise TypeError(f"not a packet: {p!r}")


def _decode_body(packet_type: int, flags: int, body: bytes) -> Packet:
    r = _Reader(body)
    if packet_type == CONNECT:
        if flags:
            raise MalformedPacketError(f"CONNECT flags must be 0, got {flags:#x}")
        proto = r.string()
        if proto != "MQTT":
            raise MalformedPacketError(f"unknown protocol name {proto!r}")
        level = r.u8()
        if level != 0x04:
            raise MalformedPacketError(f"unsupported protocol level {level:#x}")
        connect_flags = r.u8()
        if connect_flags & 0x01:
            raise MalformedPacketError("CONNECT reserved flag bit set")
        if connect_flags & ~0x02:
            raise UnsupportedPacketTypeError(
                "will/username/password flags are not supported"
            )
        keepalive = r.u16()
        client_id = r.string()
        r.done()
        return Connect(client_id, keepalive, bool(connect_flags & 0x02))
    if packet_type == CONNACK:
        ack_flags = r.u8()
        code = r.u8()
        r.done()
        return Connack(code, bool(ack_flags & 0x01))
    if packet_type == PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos:
            raise UnsupportedQoSError(f"only QoS 0 is supported, got QoS {qos}")
        topic = r.string()
        return Publish(topic, r.rest(), retain=bool(flags & 0x01), dup=bool(flags & 0x08))
    if packet_type == SUBSCRIBE:
        if flags != 0x02:
            raise MalformedPacketError(f"SUBSCRIBE flags must be 0x2, got {flags:#x}")
        packet_id = r.u16()
        filters = []
        while r.pos < len(body):
            topic_filter = r.string()
            qos = r.u8()
            if qos > 2:
                raise MalformedPacketError(f"requested QoS {qos} is invalid")
            filters.append((topic_filter, qos))
        if not filters:
            raise MalformedPacketError("SUBSCRIBE carries no topic filters")
        return Subscribe(packet_id, tuple(filters))
    if packet_type == SUBACK:
        packet_id = r.u16()
        codes = tuple(r.rest())
        return Suback(packet_id, codes)
    if packet_type == PINGREQ:
        r.done()
        return Pingreq()
    if packet_type == PINGRESP:
        r.done()
        return Pingresp()
    if packet_type == DISCONNECT:
        r.done()
        return Disconnect()
    raise AssertionError(packet_type)


def decode_packet(data: bytes) -> Packet:
    """Decode a single complete packet; the byte count must match exactly."""
    if not data:
        raise MalformedPacketError("empty packet")
    packet_type = data[0] >> 4
    flags = data[0] & 0x0F
    if packet_type in (0, 15):
        raise ReservedPacketTypeError(f"reserved packet type {packet_type}")
    if packet_type not in _SUPPORTED_TYPES:
        raise UnsupportedPacketTypeError(f"packet type {packet_type} not supported")
    remaining, varint_len = decode_varint(data, 1)
    declared_end = 1 + varint_len + remaining
    if declared_end != len(data):
        raise LengthOverrunError(
            f"declared length {remaining} but body has {len(data) - 1 - varint_len} bytes"
        )
    return _decode_body(packet_type, flags, data[1 + varint_len : declared_end])


class PacketStream:
    """Reads whole packets from a socket, buffering partial data.

    ``read_packet`` applies its timeout to the entire packet, raising
    socket.timeout on expiry and ConnectionClosedError on EOF.
    """

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buffer = bytearray()

    def _fill(self, deadline: float | None) -> None:
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise socket.timeout("packet read timed out")
            self.sock.settimeout(remaining)
        else:
            self.sock.settimeout(None)
        chunk = self.sock.recv(65536)
        if not chunk:
            raise ConnectionClosedError("connection closed by peer")
        self.buffer.extend(chunk)

    def read_packet(self, timeout: float | None = None) -> Packet:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            total = self._complete_length()
            if total is not None and len(self.buffer) >= total:
                raw = bytes(self.buffer[:total])
                del self.buffer[:total]
                return decode_packet(raw)
            self._fill(deadline)

    def _complete_length(self) -> int | None:
        """Total length of the buffered packet, or None if incomplete."""
        if len(self.buffer) < 2:
            return None
        try:
            remaining, varint_len = decode_varint(bytes(self.buffer[:5]), 1)
        except MalformedVarintError:
            if len(self.buffer) >= 5:
                raise  # 4 continuation bytes buffered: genuinely malformed
            return None
        return 1 + varint_len + remaining
