"""Zero-shot referring expression comprehension by box-wise True/False verification."""

from refverify.geometry import BoundingBox, MatchThreshold, acc_at, iou, is_hit
from refverify.pipeline import (
    DecisionPath,
    DecisionTrace,
    PipelineConfig,
    PromptSet,
    RecOutcome,
    Verdict,
    run_selection_baseline,
    run_verification_first,
)
from refverify.render import OverlayStyle, RasterImage

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "DecisionPath",
    "DecisionTrace",
    "MatchThreshold",
    "OverlayStyle",
    "PipelineConfig",
    "PromptSet",
    "RasterImage",
    "RecOutcome",
    "Verdict",
    "acc_at",
    "iou",
    "is_hit",
    "run_selection_baseline",
    "run_verification_first",
]
