"""Backend-facing data types, protocols and reply parsers."""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence, Union, runtime_checkable

from refverify.geometry import BoundingBox
from refverify.render import RasterImage


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    class_name: str
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if not self.class_name:
            raise ValueError("class_name must be nonempty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    def to_dict(self) -> dict:
        return {"box": self.box.as_list(), "class": self.class_name, "score": self.confidence}


@dataclass(frozen=True)
class VlmRequest:
    """One chat turn: a prompt and at most one image.

    ``purpose`` ("class", "verify", "select") and ``regions`` (the boxes drawn
    on the image, in display order) are local annotations. They never go on
    the wire and do not enter the cache key; scripted and synthetic backends
    use them to route replies.
    """

    prompt: str
    images: tuple[RasterImage, ...] = ()
    temperature: float = 0.0
    model_id: str = ""
    purpose: str = ""
    regions: tuple[BoundingBox, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if len(self.images) > 1:
            raise ValueError("at most one image per request")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")


@dataclass(frozen=True)
class VlmReply:
    text: str
    cached: bool = False


@runtime_checkable
class Detector(Protocol):
    def detect(self, image: RasterImage, class_name: str) -> list[Proposal]: ...


@runtime_checkable
class Vlm(Protocol):
    model_id: str

    def query(self, request: VlmRequest) -> VlmReply: ...


def request_key(request: VlmRequest) -> str:
    """Content hash of (model id, temperature, prompt, image bytes)."""
    h = hashlib.sha256()
    h.update(request.model_id.encode())
    h.update(b"\0")
    h.update(repr(float(request.temperature)).encode())
    h.update(b"\0")
    h.update(request.prompt.encode())
    for img in request.images:
        h.update(b"\0img%dx%d\0" % (img.width, img.height))
        h.update(img.pixels.tobytes())
    return h.hexdigest()


class Choice(enum.Enum):
    NONE = "none"


NONE_CHOICE = Choice.NONE
ParsedIndex = Union[int, Choice, None]

_TRUE_WORDS = {"true", "yes"}
_FALSE_WORDS = {"false", "no"}
_WORD = re.compile(r"[a-z]+")
_INDEX_TOKEN = re.compile(r"\d+|[a-z]+")


def _text(reply: VlmReply | str) -> str:
    return reply.text if isinstance(reply, VlmReply) else reply


def parse_truefalse(reply: VlmReply | str) -> bool | None:
    """First standalone true/yes or false/no word; None when there is none."""
    for word in _WORD.findall(_text(reply).lower()):
        if word in _TRUE_WORDS:
            return True
        if word in _FALSE_WORDS:
            return False
    return None


def format_truefalse(value: bool) -> str:
    return "True" if value else "False"


def parse_index(reply: VlmReply | str, n: int) -> ParsedIndex:
    """Parse a 1-based box label into a 0-based index.

    Returns the index, ``NONE_CHOICE`` for the word "none", or None when the
    reply is unusable (no number, or the first number is out of range).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    for token in _INDEX_TOKEN.findall(_text(reply).lower()):
        if token.isdigit():
            value = int(token)
            return value - 1 if 1 <= value <= n else None
        if token == "none":
            return NONE_CHOICE
    return None
