"""Two-candidate accuracy model: closed forms, Monte Carlo check, curve output.

One correct box and one distractor. Selection picks the correct box with
probability ``p``. Verification labels the correct box True with probability
``q1`` and the distractor with ``q2``; a unique True decides, otherwise the
decision falls back to selection.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from refverify.rng import SplitMix64

KINDS = ("threshold_vs_q1", "threshold_vs_q", "gain_vs_q")
DEFAULT_Q2_SERIES = (0.1, 0.2, 0.3, 0.4, 0.45)
_CHUNK = 1 << 18


@dataclass(frozen=True)
class TwoCandidateParams:
    p: float
    q1: float
    q2: float

    def __post_init__(self) -> None:
        for name in ("p", "q1", "q2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class CurveSample:
    x: float
    y: float
    series: str


@dataclass(frozen=True)
class MonteCarloResult:
    accuracy: float
    stderr: float
    hits: int
    trials: int


def a_sel(params: TwoCandidateParams) -> float:
    return params.p


def a_ver(params: TwoCandidateParams) -> float:
    p, q1, q2 = params.p, params.q1, params.q2
    return q1 * (1 - q2) + q1 * q2 * p + (1 - q1) * (1 - q2) * p


def p_threshold(q1: float, q2: float) -> float:
    """Selection accuracy at which selection and verification tie."""
    denom = q1 * (1 - q2) + q2 * (1 - q1)
    if denom <= 0:
        raise ValueError(f"threshold undefined for q1={q1}, q2={q2}")
    return 1 - q2 * (1 - q1) / denom


def symmetric_gain(q: float) -> float:
    """Extra selection accuracy needed to match verification when q2 = 1 - q1."""
    if not 0 < q < 1:
        raise ValueError(f"symmetric gain needs 0 < q < 1, got {q}")
    return p_threshold(q, 1 - q) - q


def majority_vote_acc(q: float) -> float:
    """Accuracy of a majority over three i.i.d. runs that are each right w.p. q."""
    if not 0 <= q <= 1:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    return 3 * q**2 - 2 * q**3


def _result(hits: int, trials: int) -> MonteCarloResult:
    acc = hits / trials
    return MonteCarloResult(acc, math.sqrt(acc * (1 - acc) / trials), hits, trials)


def mc_two_candidate(params: TwoCandidateParams, trials: int, seed: int) -> MonteCarloResult:
    """Simulate the two-box process; each trial consumes three uniforms."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = SplitMix64(seed)
    hits = 0
    done = 0
    while done < trials:
        m = min(_CHUNK, trials - done)
        u = rng.block(3 * m).reshape(m, 3)
        target_true = u[:, 0] < params.q1
        distractor_true = u[:, 1] < params.q2
        picked = u[:, 2] < params.p
        hit = (target_true & ~distractor_true) | ((target_true == distractor_true) & picked)
        hits += int(hit.sum())
        done += m
    return _result(hits, trials)


def mc_multi_candidate(params: TwoCandidateParams, n_proposals: int, trials: int, seed: int) -> MonteCarloResult:
    """One target and ``n_proposals - 1`` independent distractors.

    Several True boxes: selection over the True set picks the target w.p. p
    if it is there (and can only miss otherwise). No True box: selection over
    all boxes picks the target w.p. p. Each trial consumes n + 1 uniforms.
    """
    if n_proposals < 2:
        raise ValueError("n_proposals must be >= 2")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = SplitMix64(seed)
    width = n_proposals + 1
    hits = 0
    done = 0
    while done < trials:
        m = min(max(1, _CHUNK // width), trials - done)
        u = rng.block(width * m).reshape(m, width)
        target_true = u[:, 0] < params.q1
        n_true = target_true.astype(np.int64) + (u[:, 1:n_proposals] < params.q2).sum(axis=1)
        picked = u[:, n_proposals] < params.p
        hit = (target_true & (n_true == 1)) | (target_true & (n_true > 1) & picked) | ((n_true == 0) & picked)
        hits += int(hit.sum())
        done += m
    return _result(hits, trials)


# -- curves --------------------------------------------------------------------


def interior_grid(step: float) -> list[float]:
    """step, 2*step, ... strictly inside (0, 1)."""
    if not 0 < step <= 0.1:
        raise ValueError(f"grid step must lie in (0, 0.1], got {step}")
    out = []
    k = 1
    while k * step < 1 - 1e-9:
        out.append(round(k * step, 12))
        k += 1
    return out


def emit_curves(
    kind: str, grid_step: float = 0.01, fixed_params: Mapping[str, Sequence[float]] | None = None
) -> list[CurveSample]:
    grid = interior_grid(grid_step)
    fixed = dict(fixed_params or {})
    if kind == "threshold_vs_q1":
        out = []
        for q2 in fixed.get("q2", DEFAULT_Q2_SERIES):
            label = f"q2={q2:g}"
            out.extend(CurveSample(q1, p_threshold(q1, q2), label) for q1 in grid)
        out.extend(CurveSample(x, x, "identity") for x in grid)
        return out
    if kind == "threshold_vs_q":
        out = [CurveSample(q, p_threshold(q, 1 - q), "p_threshold") for q in grid]
        out.extend(CurveSample(q, q, "identity") for q in grid)
        return out
    if kind == "gain_vs_q":
        return [CurveSample(q, symmetric_gain(q), "gain") for q in grid]
    raise ValueError(f"unknown curve kind {kind!r}; expected one of {', '.join(KINDS)}")


def series_argmax(samples: Iterable[CurveSample], series: str | None = None) -> CurveSample:
    pts = [s for s in samples if series is None or s.series == series]
    if not pts:
        raise ValueError("no samples")
    return max(pts, key=lambda s: s.y)


def write_csv(samples: Iterable[CurveSample], out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["series", "x", "y"])
    for s in samples:
        writer.writerow([s.series, f"{s.x:.6f}", f"{s.y:.6f}"])


def curves_csv(samples: Iterable[CurveSample]) -> str:
    buf = io.StringIO()
    write_csv(samples, buf)
    return buf.getvalue()


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#7f7f7f")


def curves_svg(samples: Sequence[CurveSample], title: str = "", width: int = 480, height: int = 360) -> str:
    """A bare-bones line chart, one polyline per series."""
    series: dict[str, list[CurveSample]] = {}
    for s in samples:
        series.setdefault(s.series, []).append(s)
    xs = [s.x for s in samples] or [0.0, 1.0]
    ys = [s.y for s in samples] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    pad = 40

    def sx(x: float) -> float:
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y: float) -> float:
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height - pad + 16}" font-size="11">{x0:g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 16}" font-size="11" text-anchor="end">{x1:g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" font-size="11" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" font-size="11" text-anchor="end">{y1:.3g}</text>',
    ]
    if title:
        parts.append(f'<text x="{width / 2}" y="20" font-size="14" text-anchor="middle">{_xml_escape(title)}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(p.x):.2f},{sy(p.y):.2f}" for p in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        parts.append(
            f'<text x="{width - pad}" y="{pad + 14 * i}" font-size="11" fill="{color}" '
            f'text-anchor="end">{_xml_escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _xml_escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_curves(samples: Sequence[CurveSample], out_prefix: str | Path, title: str = "") -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` and ``<prefix>.svg``."""
    prefix = Path(out_prefix)
    if prefix.suffix in (".csv", ".svg"):
        prefix = prefix.with_suffix("")
    csv_path, svg_path = prefix.with_suffix(".csv"), prefix.with_suffix(".svg")
    csv_path.write_text(curves_csv(samples))
    svg_path.write_text(curves_svg(samples, title))
    return csv_path, svg_path
