"""Deterministic stand-ins for tests and offline demos.

``ScriptedVlm`` answers from an ordered list of rules. A rule matches on any
combination of request purpose, drawn regions, prompt substring or full
request hash; its replies are handed out in order and the last one repeats.
``FixtureDetector`` echoes stored boxes keyed by (image name, class).
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from refverify.backends.base import Proposal, VlmReply, VlmRequest, request_key
from refverify.errors import ConfigError, ProtocolError
from refverify.geometry import BoundingBox
from refverify.render import RasterImage


@dataclass
class Rule:
    replies: Sequence[str]
    purpose: str | None = None
    regions: tuple[BoundingBox, ...] | None = None
    prompt_contains: str | None = None
    key: str | None = None
    hits: int = field(default=0, compare=False)

    def matches(self, request: VlmRequest) -> bool:
        if self.purpose is not None and request.purpose != self.purpose:
            return False
        if self.regions is not None and tuple(request.regions) != self.regions:
            return False
        if self.prompt_contains is not None and self.prompt_contains not in request.prompt:
            return False
        if self.key is not None and request_key(request) != self.key:
            return False
        return True

    def next_reply(self) -> str:
        reply = self.replies[min(self.hits, len(self.replies) - 1)]
        self.hits += 1
        return reply

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Rule:
        replies = d.get("replies", d.get("reply"))
        if isinstance(replies, str):
            replies = [replies]
        if not replies:
            raise ConfigError(f"scripted rule without replies: {dict(d)!r}")
        regions = d.get("regions")
        return cls(
            replies=list(replies),
            purpose=d.get("purpose"),
            regions=None if regions is None else tuple(BoundingBox.from_list(r) for r in regions),
            prompt_contains=d.get("prompt_contains"),
            key=d.get("key"),
        )


class ScriptedVlm:
    def __init__(self, rules: Iterable[Rule | Mapping[str, Any]], model_id: str = "scripted"):
        self.rules = [r if isinstance(r, Rule) else Rule.from_dict(r) for r in rules]
        self.model_id = model_id
        self.calls: list[VlmRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, model_id: str = "scripted") -> ScriptedVlm:
        data = json.loads(Path(path).read_text())
        if isinstance(data, dict):
            data = data.get("rules", [])
        return cls(data, model_id)

    @classmethod
    def by_key(cls, mapping: Mapping[str, str], model_id: str = "scripted") -> ScriptedVlm:
        """Program keyed by request hash (see ``request_key``)."""
        return cls([Rule([text], key=k) for k, text in mapping.items()], model_id)

    def query(self, request: VlmRequest) -> VlmReply:
        with self._lock:
            self.calls.append(request)
            for rule in self.rules:
                if rule.matches(request):
                    return VlmReply(rule.next_reply())
        raise ProtocolError(f"no scripted reply for {request.purpose or 'request'}: {request.prompt[:80]!r}")


class FixtureDetector:
    def __init__(self, table: Mapping[str, Mapping[str, Sequence[Any]]]):
        self.table = table
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> FixtureDetector:
        try:
            return cls(json.loads(Path(path).read_text()))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read detector fixture {path}: {exc}") from exc

    def detect(self, image: RasterImage, class_name: str) -> list[Proposal]:
        with self._lock:
            self.calls += 1
        entries = self.table.get(image.name, {}).get(class_name, [])
        out = []
        for e in entries:
            if isinstance(e, Mapping):
                box = BoundingBox.from_xywh(e["x"], e["y"], e["w"], e["h"])
                score = float(e.get("score", 1.0))
            else:
                box = BoundingBox.from_xywh(*e[:4])
                score = float(e[4]) if len(e) > 4 else 1.0
            out.append(Proposal(box, class_name, score))
        return out
