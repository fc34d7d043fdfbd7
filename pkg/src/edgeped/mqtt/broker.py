"""Loopback/TCP MQTT broker for QoS-0 pub/sub.

One handler thread per connection, a shared subscription table, and
per-subscriber write locks so delivery order is preserved per publisher.
Protocol errors close only the offending connection. A client that stays
silent past 1.5x its keepalive is disconnected.
"""

from __future__ import annotations

import logging
import socket
import threading

from .packets import (
    CONNACK_IDENTIFIER_REJECTED,
    Connack,
    Connect,
    ConnectionClosedError,
    Disconnect,
    PacketStream,
    Pingreq,
    Pingresp,
    ProtocolError,
    Publish,
    Suback,
    Subscribe,
    encode_packet,
)
from .topics import InvalidTopicError, InvalidTopicFilterError, TopicFilter, topic_matches, validate_topic

log = logging.getLogger(__name__)

KEEPALIVE_GRACE = 1.5


class BrokerError(Exception):
    pass


class _Connection:
    def __init__(self, sock: socket.socket, address):
        self.sock = sock
        self.address = address
        self.client_id: str | None = None
        self.filters: list[TopicFilter] = []
        self.write_lock = threading.Lock()
        self.closed = threading.Event()

    def send(self, data: bytes) -> bool:
        with self.write_lock:
            if self.closed.is_set():
                return False
            try:
                self.sock.sendall(data)
                return True
            except OSError:
                return False

    def close(self) -> None:
        if not self.closed.is_set():
            self.closed.set()
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self.sock.close()
            except OSError:
                pass


class SubscriptionTable:
    """Routing core shared by the TCP broker and in-process tests."""

    def __init__(self):
        self._lock = threading.Lock()
        self._sessions: dict[object, list[TopicFilter]] = {}

    def set_filters(self, key, filters: list[TopicFilter]) -> None:
        with self._lock:
            self._sessions[key] = list(filters)

    def add_filter(self, key, topic_filter: TopicFilter) -> None:
        with self._lock:
            existing = self._sessions.setdefault(key, [])
            # Re-subscribing to the same filter replaces it (no duplicates).
            if topic_filter not in existing:
                existing.append(topic_filter)

    def remove(self, key) -> None:
        with self._lock:
            self._sessions.pop(key, None)

    def match(self, topic: str) -> list:
        """Sessions with at least one filter matching the topic."""
        with self._lock:
            snapshot = list(self._sessions.items())
        return [
            key
            for key, filters in snapshot
            if any(topic_matches(f, topic) for f in filters)
        ]


class Broker:
    """TCP listener around the routing core. Start with start(), stop with stop()."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self.requested_port = port
        self.port: int | None = None
        self.table = SubscriptionTable()
        self._server: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._threads: list[threading.Thread] = []
        self._connections: dict[str, _Connection] = {}
        self._conn_lock = threading.Lock()
        self._stopping = threading.Event()

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "Broker":
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            server.bind((self.host, self.requested_port))
        except OSError as exc:
            server.close()
            raise BrokerError(f"cannot bind {self.host}:{self.requested_port}: {exc}") from exc
        server.listen(64)
        self._server = server
        self.port = server.getsockname()[1]
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="mqtt-broker-accept", daemon=True
        )
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._stopping.set()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        with self._conn_lock:
            conns = list(self._connections.values())
        for conn in conns:
            conn.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)
        for t in self._threads:
            t.join(timeout=5)

    def __enter__(self) -> "Broker":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    # -- connection handling -------------------------------------------------

    def _accept_loop(self) -> None:
        assert self._server is not None
        while not self._stopping.is_set():
            try:
                sock, address = self._server.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(sock, address)
            thread = threading.Thread(
                target=self._serve, args=(conn,), name=f"mqtt-conn-{address}", daemon=True
            )
            self._threads.append(thread)
            thread.start()

    def _serve(self, conn: _Connection) -> None:
        stream = PacketStream(conn.sock)
        try:
            packet = stream.read_packet(timeout=10.0)
            if not isinstance(packet, Connect):
                return
            if not packet.client_id:
                conn.send(encode_packet(Connack(CONNACK_IDENTIFIER_REJECTED)))
                return
            self._register(packet.client_id, conn)
            conn.send(encode_packet(Connack(0)))
            read_timeout = (
                packet.keepalive * KEEPALIVE_GRACE if packet.keepalive else None
            )
            while not conn.closed.is_set():
                try:
                    incoming = stream.read_packet(timeout=read_timeout)
                except socket.timeout:
                    log.debug("keepalive expired for %s", conn.client_id)
                    return
                if isinstance(incoming, Publish):
                    self._route(incoming)
                elif isinstance(incoming, Subscribe):
                    self._subscribe(conn, incoming)
                elif isinstance(incoming, Pingreq):
                    conn.send(encode_packet(Pingresp()))
                elif isinstance(incoming, Disconnect):
                    return
                else:
                    log.debug("unexpected %s from %s", type(incoming).__name__, conn.client_id)
                    return
        except (ConnectionClosedError, ProtocolError, OSError) as exc:
            log.debug("connection %s dropped: %s", conn.address, exc)
        finally:
            self._unregister(conn)
            conn.close()

    def _register(self, client_id: str, conn: _Connection) -> None:
        conn.client_id = client_id
        with self._conn_lock:
            prior = self._connections.get(client_id)
            self._connections[client_id] = conn
        if prior is not None:
            # 3.1.1 takeover: the newer connection wins, the older one closes.
            prior.close()
            self.table.remove(prior)

    def _unregister(self, conn: _Connection) -> None:
        self.table.remove(conn)
        if conn.client_id is not None:
            with self._conn_lock:
                if self._connections.get(conn.client_id) is conn:
                    del self._connections[conn.client_id]

    def _subscribe(self, conn: _Connection, packet: Subscribe) -> None:
        codes = []
        for topic_filter, _qos in packet.filters:
            try:
                parsed = TopicFilter.parse(topic_filter)
            except InvalidTopicFilterError:
                codes.append(0x80)
                continue
            if parsed not in conn.filters:
                conn.filters.append(parsed)
            codes.append(0x00)
        self.table.set_filters(conn, conn.filters)
        conn.send(encode_packet(Suback(packet.packet_id, tuple(codes))))

    def _route(self, packet: Publish) -> None:
        try:
            validate_topic(packet.topic)
        except InvalidTopicError:
            return
        data = encode_packet(Publish(packet.topic, packet.payload))
        for conn in self.table.match(packet.topic):
            conn.send(data)


def run_broker(bind_address: str = "127.0.0.1:1883") -> Broker:
    """Start a broker on HOST:PORT (port 0 picks an ephemeral port)."""
    host, sep, port = bind_address.rpartition(":")
    if not sep or not port.lstrip("-").isdigit():
        raise BrokerError(f"bind address must be HOST:PORT, got {bind_address!r}")
    return Broker(host, int(port)).start()
