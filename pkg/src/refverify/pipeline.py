"""Verification-first referring expression comprehension, plus selection baselines.

The verification-first run:

1. ask the VLM (text only) which object class the description refers to;
2. run the detector for that class;
3. ask one True/False question per proposal, each on an image with only that
   box drawn;
4. one True box wins outright; several True boxes go to a tie-break showing
   only those boxes; no True box triggers a fallback selection over all
   proposals, where a "none" reply abstains.

The selection baselines skip step 3 and ask a single indexed selection
prompt, optionally three times at temperature 1.0 with a majority vote.
"""

from __future__ import annotations

import enum
import logging
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

from refverify.backends.base import (
    NONE_CHOICE,
    Choice,
    Detector,
    Proposal,
    Vlm,
    VlmReply,
    VlmRequest,
    parse_index,
    parse_truefalse,
)
from refverify.errors import ClassInferenceError, RefVerifyError
from refverify.geometry import BoundingBox
from refverify.render import DEFAULT_STYLE, OverlayStyle, RasterImage, render_indexed_boxes, render_single_box

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PromptSet:
    """Prompt templates. ``{expr}`` is the referring expression, ``{n}`` the box count."""

    class_prompt: str = (
        "Description: '{expr}'. Name the single most relevant object class for the object "
        "this description refers to (for example: person, dog, car). Answer with the class name only."
    )
    verify_prompt: str = (
        "The image shows one highlighted box. Description: '{expr}'. Does the description apply "
        "to the object in the highlighted box? Answer True or False."
    )
    select_prompt: str = (
        "The image shows {n} numbered boxes. Description: '{expr}'. Which numbered box best matches "
        "the description? Reply with the box number only, or reply 'none' if no box matches."
    )
    class_retry_suffix: str = " Answer with the object class name only, for example: person."
    verify_retry_suffix: str = " Answer with exactly one word: True or False."
    select_retry_suffix: str = " Answer with exactly one box number from 1 to {n}, or the word none."

    def __post_init__(self) -> None:
        for name in ("class_prompt", "verify_prompt", "select_prompt"):
            if "{expr}" not in getattr(self, name):
                raise ValueError(f"{name} must contain the {{expr}} placeholder")
        if "none" not in self.select_prompt.lower():
            raise ValueError("select_prompt must allow a 'none' reply")


DEFAULT_PROMPTS = PromptSet()


def _fill(template: str, expr: str, n: int = 0) -> str:
    return template.replace("{expr}", expr).replace("{n}", str(n))


@dataclass(frozen=True)
class PipelineConfig:
    prompts: PromptSet = DEFAULT_PROMPTS
    style: OverlayStyle = DEFAULT_STYLE
    max_proposals: int = 12
    temperature: float = 0.0
    vote_temperature: float = 1.0
    workers: int = 1


class DecisionPath(str, enum.Enum):
    UNIQUE_TRUE = "UniqueTrue"
    TIE_BREAK = "TieBreak"
    FALLBACK = "Fallback"
    ABSTAIN_NONE = "AbstainNone"
    NO_PROPOSALS = "NoProposals"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Verdict:
    value: bool
    raw_reply: str
    proposal_index: int


@dataclass
class DecisionTrace:
    inferred_class: str = ""
    proposals: list[Proposal] = field(default_factory=list)
    verdicts: list[Verdict] = field(default_factory=list)
    tie_break_choice: int | None = None
    fallback_choice: int | Choice | None = None
    votes: list[int | Choice | None] | None = None
    vlm_calls: int = 0

    @property
    def true_set(self) -> list[int]:
        return [v.proposal_index for v in self.verdicts if v.value]

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "inferred_class": self.inferred_class,
            "proposals": [p.to_dict() for p in self.proposals],
            "verdicts": [
                {"index": v.proposal_index, "value": v.value, "raw_reply": v.raw_reply} for v in self.verdicts
            ],
            "true_set": self.true_set,
            "tie_break_choice": self.tie_break_choice,
            "fallback_choice": _choice_json(self.fallback_choice),
            "vlm_calls": self.vlm_calls,
        }
        if self.votes is not None:
            d["votes"] = [_choice_json(v) for v in self.votes]
        return d


def _choice_json(choice: int | Choice | None) -> int | str | None:
    return choice.value if isinstance(choice, Choice) else choice


@dataclass
class RecOutcome:
    box: BoundingBox | None
    path: DecisionPath
    trace: DecisionTrace
    index: int | None = None

    @property
    def abstained(self) -> bool:
        return self.box is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "result": "abstain" if self.box is None else "box",
            "box": None if self.box is None else self.box.as_list(),
            "proposal_index": self.index,
            "path": self.path.value,
            "trace": self.trace.to_dict(),
        }


class CountingVlm:
    """Wraps a VLM and counts queries (thread-safe)."""

    def __init__(self, vlm: Vlm):
        self.inner = vlm
        self.model_id = vlm.model_id
        self.calls = 0
        self._lock = threading.Lock()

    def query(self, request: VlmRequest) -> VlmReply:
        with self._lock:
            self.calls += 1
        return self.inner.query(request)


# -- decision rule -------------------------------------------------------------


@dataclass(frozen=True)
class UniqueTrue:
    index: int


@dataclass(frozen=True)
class NeedTieBreak:
    true_set: tuple[int, ...]


@dataclass(frozen=True)
class NeedFallback:
    pass


Decision = UniqueTrue | NeedTieBreak | NeedFallback


def decide(verdicts: Sequence[Verdict | bool]) -> Decision:
    """Classify a verdict pattern by its number of True entries."""
    if not verdicts:
        raise ValueError("decide needs at least one verdict")
    values = [v.value if isinstance(v, Verdict) else bool(v) for v in verdicts]
    trues = tuple(i for i, v in enumerate(values) if v)
    if len(trues) == 1:
        return UniqueTrue(trues[0])
    if trues:
        return NeedTieBreak(trues)
    return NeedFallback()


# -- individual steps ----------------------------------------------------------

_CLASS_CUT = re.compile(r"[.,;:!?\n()\[\]{}]")
_CLASS_STRIP = "*_`#\"' \t"


def normalize_class(text: str) -> str:
    """Words before the first punctuation, lowercased; '' if nothing usable."""
    head = _CLASS_CUT.split(text.strip().lower(), maxsplit=1)[0]
    words = [w.strip(_CLASS_STRIP) for w in head.split()]
    return " ".join(w for w in words if w)


def infer_class(description: str, vlm: Vlm, prompts: PromptSet = DEFAULT_PROMPTS, temperature: float = 0.0) -> str:
    if not description.strip():
        raise ValueError("description must be nonempty")
    prompt = _fill(prompts.class_prompt, description)
    for suffix in ("", prompts.class_retry_suffix):
        reply = vlm.query(VlmRequest(prompt + suffix, (), temperature, vlm.model_id, purpose="class"))
        cls = normalize_class(reply.text)
        if cls:
            return cls
    raise ClassInferenceError(f"class inference failed for {description!r}")


def verify_box(
    image: RasterImage,
    proposal: Proposal,
    description: str,
    vlm: Vlm,
    style: OverlayStyle = DEFAULT_STYLE,
    *,
    prompts: PromptSet = DEFAULT_PROMPTS,
    temperature: float = 0.0,
    index: int = 0,
) -> Verdict:
    """Ask one True/False question about ``proposal`` drawn alone on ``image``."""
    overlay = render_single_box(image, proposal.box, style)
    prompt = _fill(prompts.verify_prompt, description)
    reply = None
    for suffix in ("", prompts.verify_retry_suffix):
        reply = vlm.query(
            VlmRequest(prompt + suffix, (overlay,), temperature, vlm.model_id, "verify", (proposal.box,))
        )
        value = parse_truefalse(reply)
        if value is not None:
            return Verdict(value, reply.text, index)
    logger.warning("unparsable verification reply for proposal %d: %r; recording False", index, reply.text)
    return Verdict(False, reply.text, index)


def _ask_selection(
    image: RasterImage,
    boxes: Sequence[BoundingBox],
    description: str,
    vlm: Vlm,
    style: OverlayStyle,
    prompts: PromptSet,
    temperature: float,
    retry: bool,
) -> int | Choice | None:
    overlay = render_indexed_boxes(image, boxes, style)
    n = len(boxes)
    prompt = _fill(prompts.select_prompt, description, n)
    suffixes = ("", _fill(prompts.select_retry_suffix, description, n)) if retry else ("",)
    parsed = None
    for suffix in suffixes:
        reply = vlm.query(VlmRequest(prompt + suffix, (overlay,), temperature, vlm.model_id, "select", tuple(boxes)))
        parsed = parse_index(reply, n)
        if parsed is not None:
            return parsed
    return parsed


def tie_break(
    image: RasterImage,
    proposals: Sequence[Proposal],
    true_set: Sequence[int],
    description: str,
    vlm: Vlm,
    style: OverlayStyle = DEFAULT_STYLE,
    *,
    prompts: PromptSet = DEFAULT_PROMPTS,
    temperature: float = 0.0,
) -> int:
    """Pick among the True boxes only; returns an original proposal index.

    A "none" or unusable reply resolves to the lowest True index.
    """
    shown = sorted(true_set)
    if len(shown) < 2:
        raise ValueError("tie-break needs at least two True proposals")
    choice = _ask_selection(
        image, [proposals[i].box for i in shown], description, vlm, style, prompts, temperature, retry=False
    )
    if isinstance(choice, int):
        return shown[choice]
    logger.warning("tie-break reply gave no usable index; taking proposal %d", shown[0])
    return shown[0]


def fallback_select(
    image: RasterImage,
    proposals: Sequence[Proposal],
    description: str,
    vlm: Vlm,
    style: OverlayStyle = DEFAULT_STYLE,
    *,
    prompts: PromptSet = DEFAULT_PROMPTS,
    temperature: float = 0.0,
) -> int | Choice:
    """Selection over every proposal. Returns an index or ``NONE_CHOICE`` (abstain)."""
    if not proposals:
        raise ValueError("fallback selection needs proposals")
    choice = _ask_selection(
        image, [p.box for p in proposals], description, vlm, style, prompts, temperature, retry=True
    )
    if choice is None:
        logger.warning("fallback selection reply unparsable after retry; abstaining")
        return NONE_CHOICE
    return choice


def cap_proposals(proposals: Sequence[Proposal], limit: int) -> list[Proposal]:
    """Keep the ``limit`` most confident proposals, in their original order."""
    if len(proposals) <= limit:
        return list(proposals)
    ranked = sorted(range(len(proposals)), key=lambda i: (-proposals[i].confidence, i))
    return [proposals[i] for i in sorted(ranked[:limit])]


# -- full runs -----------------------------------------------------------------


def _propose(
    image: RasterImage, description: str, detector: Detector, vlm: Vlm, config: PipelineConfig, trace: DecisionTrace
) -> list[Proposal]:
    trace.inferred_class = infer_class(description, vlm, config.prompts, config.temperature)
    proposals = cap_proposals(detector.detect(image, trace.inferred_class), config.max_proposals)
    trace.proposals = proposals
    return proposals


def _verify_all(
    image: RasterImage, proposals: Sequence[Proposal], description: str, vlm: Vlm, config: PipelineConfig
) -> list[Verdict]:
    def one(i: int) -> Verdict:
        return verify_box(
            image, proposals[i], description, vlm, config.style,
            prompts=config.prompts, temperature=config.temperature, index=i,
        )

    if config.workers > 1 and len(proposals) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            # map preserves index order regardless of completion order
            return list(pool.map(one, range(len(proposals))))
    return [one(i) for i in range(len(proposals))]


def run_verification_first(
    image: RasterImage,
    description: str,
    detector: Detector,
    vlm: Vlm,
    config: PipelineConfig = PipelineConfig(),
) -> RecOutcome:
    if not description.strip():
        raise ValueError("description must be nonempty")
    counter = CountingVlm(vlm)
    trace = DecisionTrace()
    try:
        proposals = _propose(image, description, detector, counter, config, trace)
        if not proposals:
            return _finish(None, DecisionPath.NO_PROPOSALS, trace, counter)
        trace.verdicts = _verify_all(image, proposals, description, counter, config)
        decision = decide(trace.verdicts)
        if isinstance(decision, UniqueTrue):
            return _finish(decision.index, DecisionPath.UNIQUE_TRUE, trace, counter)
        if isinstance(decision, NeedTieBreak):
            idx = tie_break(
                image, proposals, decision.true_set, description, counter, config.style,
                prompts=config.prompts, temperature=config.temperature,
            )
            trace.tie_break_choice = idx
            return _finish(idx, DecisionPath.TIE_BREAK, trace, counter)
        choice = fallback_select(
            image, proposals, description, counter, config.style,
            prompts=config.prompts, temperature=config.temperature,
        )
        trace.fallback_choice = choice
        if choice is NONE_CHOICE:
            return _finish(None, DecisionPath.ABSTAIN_NONE, trace, counter)
        return _finish(choice, DecisionPath.FALLBACK, trace, counter)
    except RefVerifyError as exc:
        trace.vlm_calls = counter.calls
        exc.trace = trace
        raise


def run_selection_baseline(
    image: RasterImage,
    description: str,
    detector: Detector,
    vlm: Vlm,
    config: PipelineConfig = PipelineConfig(),
    votes: int = 1,
) -> RecOutcome:
    """Single-shot (votes=1) or majority-of-three (votes=3) selection over all proposals."""
    if votes not in (1, 3):
        raise ValueError("votes must be 1 or 3")
    if not description.strip():
        raise ValueError("description must be nonempty")
    counter = CountingVlm(vlm)
    trace = DecisionTrace(votes=[])
    temperature = config.vote_temperature if votes == 3 else config.temperature
    try:
        proposals = _propose(image, description, detector, counter, config, trace)
        if not proposals:
            return _finish(None, DecisionPath.NO_PROPOSALS, trace, counter)
        boxes = [p.box for p in proposals]
        for _ in range(votes):
            choice = _ask_selection(
                image, boxes, description, counter, config.style, config.prompts, temperature, retry=True
            )
            trace.votes.append(NONE_CHOICE if choice is None else choice)
        winner = majority(trace.votes)
        trace.fallback_choice = winner
        if winner is NONE_CHOICE:
            return _finish(None, DecisionPath.ABSTAIN_NONE, trace, counter)
        return _finish(winner, DecisionPath.FALLBACK, trace, counter)
    except RefVerifyError as exc:
        trace.vlm_calls = counter.calls
        exc.trace = trace
        raise


def majority(votes: Sequence[int | Choice | None]) -> int | Choice:
    """Most frequent index; ties go to the lowest index; a "none" majority abstains."""
    counts = Counter(v for v in votes if isinstance(v, int))
    n_none = len(votes) - sum(counts.values())
    if not counts or 2 * n_none > len(votes):
        return NONE_CHOICE
    best = max(counts.values())
    return min(i for i, c in counts.items() if c == best)


def _finish(index: int | None, path: DecisionPath, trace: DecisionTrace, counter: CountingVlm) -> RecOutcome:
    trace.vlm_calls = counter.calls
    box = None if index is None else trace.proposals[index].box
    return RecOutcome(box, path, trace, index)
