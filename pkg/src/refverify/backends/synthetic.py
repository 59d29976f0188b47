"""Seeded synthetic detector + VLM realizing the two-candidate probability model.

The VLM labels the target box True with probability ``q1`` and any distractor
True with probability ``q2``; a selection query picks the target with
probability ``p`` when it is among the shown boxes, otherwise a uniform
non-target. Each request draws from its own sub-stream derived from the seed,
the scene and the request contents (plus a repeat counter), so results do not
depend on the order in which concurrent requests arrive.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from refverify.backends.base import Proposal, VlmReply, VlmRequest, format_truefalse
from refverify.errors import ProtocolError
from refverify.geometry import BoundingBox
from refverify.rng import SplitMix64, derive_seed
from refverify.render import RasterImage


@dataclass(frozen=True)
class SyntheticOracleParams:
    q1: float
    q2: float
    p: float
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("q1", "q2", "p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def synthetic_verify(params: SyntheticOracleParams, is_target: bool, rng: SplitMix64) -> bool:
    return rng.bernoulli(params.q1 if is_target else params.q2)


def synthetic_select(
    params: SyntheticOracleParams, candidates: Sequence[int], target: int | None, rng: SplitMix64
) -> int:
    if not candidates:
        raise ValueError("candidate list is empty")
    if target in candidates:
        if rng.random() < params.p:
            return target
        others = [c for c in candidates if c != target]
        if not others:
            return target
        return others[rng.randbelow(len(others))]
    return candidates[rng.randbelow(len(candidates))]


@dataclass(frozen=True)
class Scene:
    name: str
    boxes: tuple[BoundingBox, ...]
    target: int
    class_name: str = "object"
    width: int = 0
    height: int = 0

    @property
    def target_box(self) -> BoundingBox:
        return self.boxes[self.target]


class SyntheticWorld:
    """A batch of scenes, each with one target box and ``n_distractors`` others.

    Boxes sit in disjoint horizontal slots, so any distractor has IoU 0 with
    the target. Images are flat fills whose color encodes the scene index.
    """

    SLOT = 20
    MARGIN = 4

    def __init__(self, scenes: Sequence[Scene]):
        self.scenes = {s.name: s for s in scenes}
        self._index = {s.name: i for i, s in enumerate(scenes)}

    @classmethod
    def build(cls, n_items: int, n_distractors: int = 4, seed: int = 0, prefix: str = "syn") -> SyntheticWorld:
        n_boxes = n_distractors + 1
        width = n_boxes * cls.SLOT + cls.MARGIN
        height = cls.SLOT + cls.MARGIN
        rng = SplitMix64(derive_seed(seed, "layout"))
        boxes = tuple(
            BoundingBox(
                float(cls.MARGIN + i * cls.SLOT),
                float(cls.MARGIN),
                float((i + 1) * cls.SLOT),
                float(cls.SLOT),
            )
            for i in range(n_boxes)
        )
        width_digits = len(str(max(n_items - 1, 0)))
        scenes = [
            Scene(f"{prefix}-{i:0{width_digits}d}", boxes, rng.randbelow(n_boxes), width=width, height=height)
            for i in range(n_items)
        ]
        return cls(scenes)

    def image(self, name: str) -> RasterImage:
        scene = self.scenes[name]
        idx = self._index[name]
        px = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
        px[:] = ((idx >> 16) & 255, (idx >> 8) & 255, idx & 255)
        px.flags.writeable = False
        return RasterImage(px, name)

    def detect(self, image: RasterImage, class_name: str) -> list[Proposal]:
        scene = self.scenes.get(image.name)
        if scene is None or class_name != scene.class_name:
            return []
        return [Proposal(b, class_name, 0.5) for b in scene.boxes]


class SyntheticVlm:
    def __init__(self, params: SyntheticOracleParams, world: SyntheticWorld, model_id: str = "synthetic"):
        self.params = params
        self.world = world
        self.model_id = model_id
        self.calls = 0
        self._seen: Counter = Counter()
        self._lock = threading.Lock()

    def _stream(self, request: VlmRequest, scene_name: str) -> SplitMix64:
        ident = (scene_name, request.purpose, tuple(tuple(b.as_list()) for b in request.regions), request.prompt)
        with self._lock:
            self.calls += 1
            repeat = self._seen[ident]
            self._seen[ident] += 1
        return SplitMix64(derive_seed(self.params.seed, ident, repeat))

    def query(self, request: VlmRequest) -> VlmReply:
        name = request.images[0].name if request.images else ""
        if request.purpose == "class":
            with self._lock:
                self.calls += 1
            return VlmReply("object")
        scene = self.world.scenes.get(name)
        if scene is None:
            raise ProtocolError(f"synthetic VLM does not know image {name!r}")
        rng = self._stream(request, name)
        if request.purpose == "verify":
            if len(request.regions) != 1:
                raise ProtocolError("verification request must carry exactly one region")
            return VlmReply(format_truefalse(synthetic_verify(self.params, request.regions[0] == scene.target_box, rng)))
        if request.purpose == "select":
            regions = list(request.regions)
            target = regions.index(scene.target_box) if scene.target_box in regions else None
            choice = synthetic_select(self.params, list(range(len(regions))), target, rng)
            return VlmReply(str(choice + 1))
        raise ProtocolError(f"synthetic VLM cannot answer purpose {request.purpose!r}")
