"""Blocking MQTT 3.1.1 client: QoS-0 publisher and subscriber.

A Session owns its socket and is not safe for concurrent writes from
multiple threads; hand the whole session off between threads instead.
All timeouts are explicit parameters.
"""

from __future__ import annotations

import socket
import time
from collections import deque

from .packets import (
    Connack,
    Connect,
    ConnectionClosedError,
    Disconnect,
    PacketStream,
    Pingreq,
    Pingresp,
    Publish,
    Suback,
    Subscribe,
    encode_packet,
)
from .topics import TopicFilter, validate_topic

DEFAULT_CONNECT_TIMEOUT = 5.0
DEFAULT_KEEPALIVE = 60


class ClientError(Exception):
    pass


class TransportError(ClientError):
    pass


class ConnectTimeoutError(ClientError):
    pass


class ConnectRefusedError(ClientError):
    def __init__(self, return_code: int):
        super().__init__(f"broker refused connection (return code {return_code})")
        self.return_code = return_code


class SessionClosedError(ClientError):
    pass


class SubscribeError(ClientError):
    pass


def parse_address(address: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {address!r}")
    return host, int(port)


class Session:
    """A connected client session; created via connect()."""

    def __init__(self, sock: socket.socket, client_id: str, keepalive: int):
        self.client_id = client_id
        self.keepalive = keepalive
        self.subscriptions: list[TopicFilter] = []
        self._sock = sock
        self._stream = PacketStream(sock)
        self._inbox: deque[tuple[str, bytes]] = deque()
        self._next_packet_id = 1
        self._last_send = time.monotonic()
        self._closed = False

    @property
    def connected(self) -> bool:
        return not self._closed

    def _send(self, data: bytes) -> None:
        if self._closed:
            raise SessionClosedError("session is closed")
        try:
            self._sock.sendall(data)
        except OSError as exc:
            self.close()
            raise TransportError(f"send failed: {exc}") from exc
        self._last_send = time.monotonic()

    def publish_qos0(self, topic: str, payload: bytes) -> None:
        """Fire-and-forget: exactly one PUBLISH written, nothing awaited."""
        validate_topic(topic)
        self._send(encode_packet(Publish(topic, payload)))

    def subscribe(self, topic_filter: str, timeout: float = 5.0) -> None:
        """Send SUBSCRIBE and wait for its SUBACK; buffers interleaved messages."""
        parsed = TopicFilter.parse(topic_filter)
        packet_id = self._next_packet_id
        self._next_packet_id = (self._next_packet_id % 0xFFFF) + 1
        self._send(encode_packet(Subscribe(packet_id, ((topic_filter, 0),))))
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise SubscribeError(f"no SUBACK within {timeout} s")
            packet = self._read(remaining)
            if isinstance(packet, Suback):
                if packet.packet_id != packet_id:
                    raise SubscribeError(
                        f"SUBACK for packet {packet.packet_id}, expected {packet_id}"
                    )
                if any(code == 0x80 for code in packet.return_codes):
                    raise SubscribeError(f"broker rejected filter {topic_filter!r}")
                if parsed not in self.subscriptions:
                    self.subscriptions.append(parsed)
                return

    def poll_message(self, timeout: float = 0.0) -> tuple[str, bytes] | None:
        """Next (topic, payload) in delivery order, or None on timeout.

        Sends a PINGREQ when more than half the keepalive interval has
        passed since the last write, so idle subscribers stay connected.
        """
        if self._inbox:
            return self._inbox.popleft()
        if self._closed:
            raise SessionClosedError("session is closed")
        if self.keepalive and time.monotonic() - self._last_send > self.keepalive / 2:
            self._send(encode_packet(Pingreq()))
        deadline = time.monotonic() + timeout
        while not self._inbox:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            try:
                self._read(remaining)
            except socket.timeout:
                return None
        return self._inbox.popleft()

    def _read(self, timeout: float):
        try:
            packet = self._stream.read_packet(timeout)
        except socket.timeout:
            raise
        except ConnectionClosedError as exc:
            self.close()
            raise TransportError(str(exc)) from exc
        except OSError as exc:
            self.close()
            raise TransportError(f"receive failed: {exc}") from exc
        if isinstance(packet, Publish):
            self._inbox.append((packet.topic, packet.payload))
        elif isinstance(packet, Pingresp):
            pass
        return packet

    def ping(self) -> None:
        self._send(encode_packet(Pingreq()))

    def disconnect(self) -> None:
        """Polite close: send DISCONNECT, then drop the socket."""
        if not self._closed:
            try:
                self._send(encode_packet(Disconnect()))
            except (TransportError, SessionClosedError):
                pass
            self.close()

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.close()
            except OSError:
                pass


def connect(
    address: str | tuple[str, int],
    client_id: str,
    keepalive: int = DEFAULT_KEEPALIVE,
    timeout: float = DEFAULT_CONNECT_TIMEOUT,
) -> Session:
    """Open a TCP connection and complete the CONNECT/CONNACK handshake.

    On any failure the socket is closed and no session exists.
    """
    if not client_id:
        raise ValueError("client_id must be non-empty")
    host, port = parse_address(address)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except socket.timeout as exc:
        raise ConnectTimeoutError(f"no TCP connection within {timeout} s") from exc
    except OSError as exc:
        raise TransportError(f"cannot reach {host}:{port}: {exc}") from exc

    session = Session(sock, client_id, keepalive)
    try:
        session._send(encode_packet(Connect(client_id, keepalive)))
        packet = session._stream.read_packet(timeout)
    except socket.timeout as exc:
        session.close()
        raise ConnectTimeoutError(f"no CONNACK within {timeout} s") from exc
    except (ConnectionClosedError, OSError) as exc:
        session.close()
        raise TransportError(f"handshake failed: {exc}") from exc
    if not isinstance(packet, Connack):
        session.close()
        raise TransportError(f"expected CONNACK, got {type(packet).__name__}")
    if packet.return_code != 0:
        session.close()
        raise ConnectRefusedError(packet.return_code)
    return session
