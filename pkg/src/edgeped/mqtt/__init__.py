"""Minimal MQTT 3.1.1 stack: QoS-0 client, loopback/TCP broker, wire codec."""

from .broker import Broker, SubscriptionTable, run_broker
from .client import Session, connect
from .packets import Packet, decode_packet, decode_varint, encode_packet, encode_varint
from .topics import TopicFilter, topic_matches

__all__ = [
    "Broker",
    "Packet",
    "Session",
    "SubscriptionTable",
    "TopicFilter",
    "connect",
    "decode_packet",
    "decode_varint",
    "encode_packet",
    "encode_varint",
    "run_broker",
    "topic_matches",
]
