"""Topic names and subscription filters.

Filters split on '/'. '+' matches exactly one level and must occupy a whole
segment; '#' matches any remaining levels (including none) and must be the
final segment.
"""

from __future__ import annotations

from dataclasses import dataclass


class InvalidTopicFilterError(ValueError):
    pass


class InvalidTopicError(ValueError):
    pass


@dataclass(frozen=True)
class TopicFilter:
    segments: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "TopicFilter":
        if not text:
            raise InvalidTopicFilterError("topic filter must be non-empty")
        if "\x00" in text:
            raise InvalidTopicFilterError("topic filter must not contain NUL")
        segments = tuple(text.split("/"))
        for i, seg in enumerate(segments):
            if "#" in seg:
                if seg != "#":
                    raise InvalidTopicFilterError(
                        f"'#' must occupy a whole segment, got {seg!r}"
                    )
                if i != len(segments) - 1:
                    raise InvalidTopicFilterError("'#' is only allowed as the last segment")
            if "+" in seg and seg != "+":
                raise InvalidTopicFilterError(f"'+' must occupy a whole segment, got {seg!r}")
        return cls(segments)

    def __str__(self) -> str:
        return "/".join(self.segments)


def validate_topic(topic: str) -> None:
    """Publish topics are concrete: non-empty, no wildcards, no NUL."""
    if not topic:
        raise InvalidTopicError("topic must be non-empty")
    if "+" in topic or "#" in topic:
        raise InvalidTopicError(f"publish topic must not contain wildcards: {topic!r}")
    if "\x00" in topic:
        raise InvalidTopicError("topic must not contain NUL")


def topic_matches(topic_filter: TopicFilter | str, topic: str) -> bool:
    """Exact-segment match with '+' (one level) and '#' (any suffix)."""
    validate_topic(topic)
    if isinstance(topic_filter, str):
        topic_filter = TopicFilter.parse(topic_filter)
    topic_segments = topic.split("/")
    i = 0
    for seg in topic_filter.segments:
        if seg == "#":
            return True
        if i >= len(topic_segments):
            return False
        if seg != "+" and seg != topic_segments[i]:
            return False
        i += 1
    return i == len(topic_segments)
