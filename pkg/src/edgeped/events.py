"""Compact JSON detection events, budgeted to fit one MQTT message.

The wire schema is fixed and field-ordered so equal events always encode to
identical bytes:

    {"intersection_id": str, "camera_id": str, "frame_index": int,
     "timestamp_ms": int, "detections": [...], "model_id": str}

with each detection as

    {"class_id": int, "confidence": 0.ddd, "x1": int, "y1": int,
     "x2": int, "y2": int}

Confidence is rendered with exactly three decimals; coordinates are integer
pixels. With 16-char ids, 4-digit coordinates, and the default 1200-byte
budget, 13 detections fit per event (MAX_DETECTIONS_PER_EVENT); overflow is
split across multiple events rather than dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from .detect import Detection

DEFAULT_PAYLOAD_BUDGET = 1200


class EventError(ValueError):
    pass


class PayloadOversizeError(EventError):
    """Serialized event exceeds the byte budget; carries the overflow."""

    def __init__(self, overflow_bytes: int):
        super().__init__(f"payload exceeds budget by {overflow_bytes} bytes")
        self.overflow_bytes = overflow_bytes


class ImpossibleFitError(EventError):
    """A single detection cannot fit in the budget even alone."""


class EventDecodeError(EventError):
    pass


class MalformedJsonError(EventDecodeError):
    """Payload is not valid JSON; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MissingFieldError(EventDecodeError):
    def __init__(self, field_name: str):
        super().__init__(f"missing field {field_name!r}")
        self.field = field_name


class UnknownFieldError(EventDecodeError):
    def __init__(self, field_name: str):
        super().__init__(f"unknown field {field_name!r}")
        self.field = field_name


class WrongTypeError(EventDecodeError):
    def __init__(self, field_name: str, expected: str):
        super().__init__(f"field {field_name!r} must be {expected}")
        self.field = field_name


@dataclass(frozen=True)
class EventBox:
    """One detection as it appears on the wire. Confidence is quantized to
    three decimals at construction so encode/decode round-trips exactly."""

    class_id: int
    confidence: float
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        object.__setattr__(self, "confidence", round(float(self.confidence), 3))


@dataclass(frozen=True)
class DetectionEvent:
    intersection_id: str
    camera_id: str
    frame_index: int
    timestamp_ms: int
    detections: tuple[EventBox, ...] = field(default_factory=tuple)
    model_id: str = ""


def detection_topic(intersection_id: str) -> str:
    """Publish topic for one intersection's detection stream."""
    return f"intersection/{intersection_id}/detections"


def _json_str(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


def _box_fragment(box: EventBox) -> str:
    return (
        f'{{"class_id":{box.class_id},"confidence":{box.confidence:.3f},'
        f'"x1":{box.x1},"y1":{box.y1},"x2":{box.x2},"y2":{box.y2}}}'
    )


def _envelope(e: DetectionEvent, detections_json: str) -> str:
    return (
        f'{{"intersection_id":{_json_str(e.intersection_id)},'
        f'"camera_id":{_json_str(e.camera_id)},'
        f'"frame_index":{e.frame_index},'
        f'"timestamp_ms":{e.timestamp_ms},'
        f'"detections":[{detections_json}],'
        f'"model_id":{_json_str(e.model_id)}}}'
    )


def encode_event(e: DetectionEvent, budget: int | None = DEFAULT_PAYLOAD_BUDGET) -> bytes:
    """Serialize to UTF-8 JSON with deterministic field order.

    Raises PayloadOversizeError when the result would exceed ``budget``
    (pass None to disable the check).
    """
    body = _envelope(e, ",".join(_box_fragment(b) for b in e.detections))
    payload = body.encode("utf-8")
    if budget is not None and len(payload) > budget:
        raise PayloadOversizeError(len(payload) - budget)
    return payload


_SCHEMA_FIELDS = {
    "intersection_id": str,
    "camera_id": str,
    "frame_index": int,
    "timestamp_ms": int,
    "detections": list,
    "model_id": str,
}
_BOX_FIELDS = {
    "class_id": int,
    "confidence": float,
    "x1": int,
    "y1": int,
    "x2": int,
    "y2": int,
}


def _check_type(name: str, value, expected: type):
    # bool is an int subclass; the schema never uses booleans.
    if isinstance(value, bool) or not isinstance(value, expected):
        if expected is float and isinstance(value, int):
            return
        raise WrongTypeError(name, expected.__name__)


def decode_event(payload: bytes) -> DetectionEvent:
    """Parse and validate a payload; inverse of encode_event.

    Unknown fields are rejected, missing fields and type mismatches raise
    distinct errors.
    """
    try:
        obj = json.loads(payload.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise MalformedJsonError("payload is not UTF-8", exc.start) from None
    except json.JSONDecodeError as exc:
        raise MalformedJsonError(exc.msg, exc.pos) from None

    if not isinstance(obj, dict):
        raise WrongTypeError("<root>", "object")
    for name in obj:
        if name not in _SCHEMA_FIELDS:
            raise UnknownFieldError(name)
    for name, expected in _SCHEMA_FIELDS.items():
        if name not in obj:
            raise MissingFieldError(name)
        _check_type(name, obj[name], expected)

    boxes = []
    for i, entry in enumerate(obj["detections"]):
        where = f"detections[{i}]"
        if not isinstance(entry, dict):
            raise WrongTypeError(where, "object")
        for name in entry:
            if name not in _BOX_FIELDS:
                raise UnknownFieldError(f"{where}.{name}")
        for name, expected in _BOX_FIELDS.items():
            if name not in entry:
                raise MissingFieldError(f"{where}.{name}")
            _check_type(f"{where}.{name}", entry[name], expected)
        boxes.append(
            EventBox(
                class_id=entry["class_id"],
                confidence=float(entry["confidence"]),
                x1=entry["x1"],
                y1=entry["y1"],
                x2=entry["x2"],
                y2=entry["y2"],
            )
        )
    return DetectionEvent(
        intersection_id=obj["intersection_id"],
        camera_id=obj["camera_id"],
        frame_index=obj["frame_index"],
        timestamp_ms=obj["timestamp_ms"],
        detections=tuple(boxes),
        model_id=obj["model_id"],
    )


def box_from_detection(det: Detection, frame_w: int, frame_h: int) -> EventBox:
    """Clamp a pixel-space detection to frame bounds and quantize it."""

    def clamp(v: float, hi: int) -> int:
        return max(0, min(hi, int(round(v))))

    x1 = clamp(det.bbox.x1, frame_w)
    y1 = clamp(det.bbox.y1, frame_h)
    x2 = max(clamp(det.bbox.x2, frame_w), x1)
    y2 = max(clamp(det.bbox.y2, frame_h), y1)
    return EventBox(det.class_id, det.confidence, x1, y1, x2, y2)


def split_for_budget(
    boxes: Sequence[EventBox],
    budget: int = DEFAULT_PAYLOAD_BUDGET,
    *,
    intersection_id: str,
    camera_id: str,
    frame_index: int,
    timestamp_ms: int,
    model_id: str = "",
) -> list[DetectionEvent]:
    """Pack detections (descending confidence) into the fewest events that
    each serialize within ``budget``. Always emits at least one event."""

    def make(group: list[EventBox]) -> DetectionEvent:
        return DetectionEvent(
            intersection_id=intersection_id,
            camera_id=camera_id,
            frame_index=frame_index,
            timestamp_ms=timestamp_ms,
            detections=tuple(group),
            model_id=model_id,
        )

    empty_size = len(encode_event(make([]), budget=None))
    if budget < empty_size:
        raise ImpossibleFitError(
            f"budget {budget} is below the empty-event size {empty_size}"
        )

    ordered = sorted(enumerate(boxes), key=lambda kv: (-kv[1].confidence, kv[0]))
    events: list[DetectionEvent] = []
    group: list[EventBox] = []
    size = empty_size
    for _, box in ordered:
        frag = len(_box_fragment(box).encode("utf-8"))
        if empty_size + frag > budget:
            raise ImpossibleFitError(
                f"a single detection needs {empty_size + frag} bytes, budget is {budget}"
            )
        extra = frag + (1 if group else 0)  # comma separator
        if size + extra > budget:
            events.append(make(group))
            group = [box]
            size = empty_size + frag
        else:
            group.append(box)
            size += extra
    events.append(make(group))
    return events


def events_from_detections(
    detections: Sequence[Detection],
    frame_w: int,
    frame_h: int,
    *,
    intersection_id: str,
    camera_id: str,
    frame_index: int,
    timestamp_ms: int,
    model_id: str = "",
    budget: int = DEFAULT_PAYLOAD_BUDGET,
) -> list[DetectionEvent]:
    """Convert detector output into budget-respecting events."""
    boxes = [box_from_detection(d, frame_w, frame_h) for d in detections]
    return split_for_budget(
        boxes,
        budget,
        intersection_id=intersection_id,
        camera_id=camera_id,
        frame_index=frame_index,
        timestamp_ms=timestamp_ms,
        model_id=model_id,
    )


def max_detections_for_budget(
    budget: int = DEFAULT_PAYLOAD_BUDGET,
    *,
    max_id_len: int = 16,
    max_class_digits: int = 2,
    max_coord_digits: int = 4,
    max_frame_digits: int = 9,
    max_timestamp_digits: int = 13,
) -> int:
    """Worst-case detection count guaranteed to fit in ``budget`` bytes."""
    worst = DetectionEvent(
        intersection_id="i" * max_id_len,
        camera_id="c" * max_id_len,
        frame_index=10**max_frame_digits - 1,
        timestamp_ms=10**max_timestamp_digits - 1,
        model_id="m" * max_id_len,
    )
    envelope = len(encode_event(worst, budget=None))
    frag = len(
        _box_fragment(
            EventBox(
                class_id=10**max_class_digits - 1,
                confidence=0.999,
                x1=10**max_coord_digits - 1,
                y1=10**max_coord_digits - 1,
                x2=10**max_coord_digits - 1,
                y2=10**max_coord_digits - 1,
            )
        ).encode("utf-8")
    )
    if budget < envelope + frag:
        return 0
    return 1 + (budget - envelope - frag) // (frag + 1)


# Frozen at build time from max_detections_for_budget(1200); see README.
MAX_DETECTIONS_PER_EVENT = 13
