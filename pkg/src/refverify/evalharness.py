"""Batch evaluation: JSONL datasets in, ACC@0.5 reports out."""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TextIO

from refverify.backends.base import Detector, Vlm
from refverify.cache import CachedVlm, ResponseCache
from refverify.errors import ConfigError, RefVerifyError
from refverify.geometry import ACC_05, BoundingBox, acc_at, iou, is_hit
from refverify.pipeline import DecisionPath, PipelineConfig, RecOutcome, run_selection_baseline, run_verification_first
from refverify.render import RasterImage, load_image

logger = logging.getLogger(__name__)

VARIANTS = ("verification_first", "selection_1", "selection_mv3")
VARIANT_ALIASES = {"verify": "verification_first", "select1": "selection_1", "select-mv3": "selection_mv3"}
ERROR_PATH = "Error"


@dataclass(frozen=True)
class EvalItem:
    item_id: str
    image_path: str
    expression: str
    gt_box: BoundingBox

    def __post_init__(self) -> None:
        if not self.expression.strip():
            raise ValueError(f"item {self.item_id}: empty expression")


def ingest_dataset(path: str | Path, box_format: str = "xywh") -> list[EvalItem]:
    """Read a JSONL dataset: ``{id, image, expr, box, box_format?}`` per line.

    Relative image paths resolve against the dataset file's directory.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    items: list[EvalItem] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            item_id = str(obj["id"])
            image = Path(obj["image"])
            if not image.is_absolute():
                image = path.parent / image
            fmt = obj.get("box_format", box_format)
            item = EvalItem(item_id, str(image), str(obj["expr"]), BoundingBox.from_list(obj["box"], fmt))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: malformed dataset line ({exc})") from exc
        if item_id in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate item id {item_id!r}")
        seen.add(item_id)
        items.append(item)
    return items


@dataclass
class ItemResult:
    item_id: str
    path: str
    iou: float | None
    hit: bool
    vlm_calls: int
    box: list[float] | None = None
    error: str | None = None


@dataclass
class EvalReport:
    variant: str
    acc_at_05: float
    n_items: int
    hits: int
    abstain_count: int
    vlm_call_total: int
    path_histogram: dict[str, int]
    per_item: list[ItemResult] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        lines = [
            f"variant:        {self.variant}",
            f"items:          {self.n_items}",
            f"ACC@0.5:        {100 * self.acc_at_05:.2f}% ({self.hits}/{self.n_items})",
            f"abstentions:    {self.abstain_count}",
            f"VLM calls:      {self.vlm_call_total}",
            "decision paths:",
        ]
        lines += [f"  {k:<12} {v}" for k, v in self.path_histogram.items()]
        return "\n".join(lines) + "\n"


def resolve_variant(name: str) -> str:
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return name


def run_variant(
    variant: str, image: RasterImage, expression: str, detector: Detector, vlm: Vlm, config: PipelineConfig
) -> RecOutcome:
    variant = resolve_variant(variant)
    if variant == "verification_first":
        return run_verification_first(image, expression, detector, vlm, config)
    votes = 3 if variant == "selection_mv3" else 1
    return run_selection_baseline(image, expression, detector, vlm, config, votes)


def run_eval(
    dataset: Sequence[EvalItem],
    variant: str,
    detector: Detector,
    vlm: Vlm,
    config: PipelineConfig = PipelineConfig(),
    cache: ResponseCache | None = None,
    *,
    workers: int = 1,
    image_loader: Callable[[str], RasterImage] = load_image,
) -> EvalReport:
    if not dataset:
        raise ConfigError("dataset is empty")
    variant = resolve_variant(variant)
    if cache is not None:
        vlm = CachedVlm(vlm, cache)

    def one(item: EvalItem) -> ItemResult:
        try:
            image = image_loader(item.image_path)
            outcome = run_variant(variant, image, item.expression, detector, vlm, config)
        except (RefVerifyError, OSError) as exc:
            logger.warning("item %s failed: %s", item.item_id, exc)
            trace = getattr(exc, "trace", None)
            calls = trace.vlm_calls if trace is not None else 0
            return ItemResult(item.item_id, ERROR_PATH, None, False, calls, None, f"{type(exc).__name__}: {exc}")
        if outcome.box is None:
            return ItemResult(item.item_id, outcome.path.value, None, False, outcome.trace.vlm_calls)
        overlap = iou(outcome.box, item.gt_box)
        return ItemResult(
            item.item_id,
            outcome.path.value,
            overlap,
            is_hit(outcome.box, item.gt_box, ACC_05),
            outcome.trace.vlm_calls,
            outcome.box.as_list(),
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, dataset))
    else:
        results = [one(item) for item in dataset]
    return build_report(variant, dataset, results)


def build_report(variant: str, dataset: Sequence[EvalItem], results: Sequence[ItemResult]) -> EvalReport:
    counts = Counter(r.path for r in results)
    histogram = {p.value: counts.get(p.value, 0) for p in DecisionPath}
    if counts.get(ERROR_PATH):
        histogram[ERROR_PATH] = counts[ERROR_PATH]
    pairs = [
        (None if r.box is None else BoundingBox.from_list(r.box), item.gt_box) for r, item in zip(results, dataset)
    ]
    hits = sum(r.hit for r in results)
    return EvalReport(
        variant=variant,
        acc_at_05=acc_at(pairs, ACC_05),
        n_items=len(results),
        hits=hits,
        abstain_count=counts.get(DecisionPath.ABSTAIN_NONE.value, 0) + counts.get(DecisionPath.NO_PROPOSALS.value, 0),
        vlm_call_total=sum(r.vlm_calls for r in results),
        path_histogram=histogram,
        per_item=list(results),
    )


def write_report(report: EvalReport, out: str | Path) -> tuple[Path, Path]:
    """Write ``<out>`` (JSON) and a sibling ``.txt`` summary."""
    out = Path(out)
    out.write_text(report.to_json(), encoding="utf-8")
    txt = out.with_suffix(".txt")
    txt.write_text(report.summary(), encoding="utf-8")
    return out, txt


def refcoco_to_jsonl(
    refs: Iterable[dict[str, Any]],
    instances: dict[str, Any],
    out: TextIO,
    split: str | None = None,
    image_dir: str = "",
) -> int:
    """Convert already-decoded RefCOCO refs + COCO instances into dataset JSONL.

    Emits one line per referring sentence, id ``<ref_id>-<sent_id>``, with the
    COCO ``[x, y, w, h]`` box. Returns the number of lines written.
    """
    files = {img["id"]: img["file_name"] for img in instances.get("images", [])}
    boxes = {ann["id"]: ann["bbox"] for ann in instances.get("annotations", [])}
    n = 0
    for ref in refs:
        if split is not None and ref.get("split") != split:
            continue
        image = files[ref["image_id"]]
        if image_dir:
            image = str(Path(image_dir) / image)
        for sent in ref.get("sentences", []):
            line = {
                "id": f"{ref['ref_id']}-{sent['sent_id']}",
                "image": image,
                "expr": sent.get("sent") or sent.get("raw", ""),
                "box": boxes[ref["ann_id"]],
                "box_format": "xywh",
            }
            out.write(json.dumps(line, ensure_ascii=False) + "\n")
            n += 1
    return n
