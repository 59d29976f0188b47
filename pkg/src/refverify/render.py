"""Overlay rendering: the images the VLM actually looks at.

Verification shows one outlined box with no label. Tie-break and fallback
selection show several outlined boxes, each with a 1-based index label drawn
from an embedded digit font, so renders are bit-reproducible everywhere.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from refverify.errors import RenderError
from refverify.geometry import BoundingBox

RGB = tuple[int, int, int]

# 5x7 glyphs, one string per row, '#' = ink
_DIGITS = {
    "0": (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    "1": ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    "2": (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    "3": ("#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "),
    "4": ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    "5": ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    "6": ("  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "),
    "7": ("#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "),
    "8": (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    "9": (" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "),
}
_GLYPHS = {
    d: np.array([[c == "#" for c in row] for row in rows], dtype=bool)
    for d, rows in _DIGITS.items()
}
_GLYPH_W, _GLYPH_H = 5, 7
# glyph cell is 6x8 units: one unit of spacing right and below
_CELL_W, _CELL_H = 6, 8


@dataclass(frozen=True)
class OverlayStyle:
    stroke_color: RGB = (255, 0, 0)
    stroke_width: int = 3
    label_text_height: int = 16
    label_background: RGB = (0, 0, 0)
    label_color: RGB = (255, 255, 255)

    def __post_init__(self) -> None:
        if self.stroke_width < 1:
            raise ValueError("stroke_width must be >= 1")
        if self.label_text_height < 6:
            raise ValueError("label_text_height must be >= 6")

    @property
    def label_scale(self) -> int:
        return max(1, self.label_text_height // _CELL_H)


DEFAULT_STYLE = OverlayStyle()


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Immutable 8-bit RGB raster of shape (height, width, 3).

    ``name`` identifies the source image (file name, dataset id) and is
    carried through overlays so fixture backends can look scenes up.
    """

    pixels: np.ndarray
    name: str = field(default="")

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if px.dtype != np.uint8:
            px = px.astype(np.uint8)
        if px.flags.writeable:
            px = px.copy()
            px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @classmethod
    def blank(cls, width: int, height: int, color: RGB = (0, 0, 0), name: str = "") -> RasterImage:
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = color
        return cls(px, name)

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, "RGB").save(buf, format="PNG")
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, name: str = "") -> RasterImage:
        with Image.open(io.BytesIO(data)) as im:
            return cls(np.asarray(im.convert("RGB")), name)


def load_image(path: str | Path, name: str | None = None) -> RasterImage:
    """Decode any Pillow-readable file (PNG, JPEG, ...) to RGB."""
    path = Path(path)
    with Image.open(path) as im:
        px = np.asarray(im.convert("RGB"))
    return RasterImage(px, path.name if name is None else name)


def save_png(image: RasterImage, path: str | Path) -> None:
    Path(path).write_bytes(image.to_png())


def pixel_rect(box: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Clamp ``box`` to the frame and return half-open pixel bounds.

    Returns ``(x0, y0, x1, y1)`` covering columns ``x0..x1-1``. Degenerate
    boxes still occupy at least one pixel.
    """
    if box.x_min >= width or box.y_min >= height or box.x_max <= 0 or box.y_max <= 0:
        raise RenderError(f"box out of frame: {box.as_list()} on {width}x{height} image")
    x0 = max(0, math.floor(box.x_min))
    y0 = max(0, math.floor(box.y_min))
    x1 = min(width, max(math.ceil(box.x_max), x0 + 1))
    y1 = min(height, max(math.ceil(box.y_max), y0 + 1))
    return x0, y0, x1, y1


def _draw_outline(px: np.ndarray, rect: tuple[int, int, int, int], style: OverlayStyle) -> None:
    x0, y0, x1, y1 = rect
    s = style.stroke_width
    color = style.stroke_color
    px[y0 : min(y0 + s, y1), x0:x1] = color
    px[max(y1 - s, y0) : y1, x0:x1] = color
    px[y0:y1, x0 : min(x0 + s, x1)] = color
    px[y0:y1, max(x1 - s, x0) : x1] = color


def label_size(text: str, style: OverlayStyle) -> tuple[int, int]:
    """Width and height of the filled label patch for ``text``."""
    k = style.label_scale
    return (len(text) * _CELL_W + 1) * k, (_CELL_H + 1) * k


def _draw_label(px: np.ndarray, text: str, anchor: tuple[int, int], style: OverlayStyle) -> None:
    height, width = px.shape[:2]
    k = style.label_scale
    pw, ph = label_size(text, style)
    # shift inward so the patch stays inside the frame
    lx = max(0, min(anchor[0], width - pw))
    ly = max(0, min(anchor[1], height - ph))
    patch = np.zeros((ph, pw), dtype=bool)
    for i, ch in enumerate(text):
        glyph = np.kron(_GLYPHS[ch], np.ones((k, k), dtype=bool))
        gx, gy = (1 + i * _CELL_W) * k, k
        patch[gy : gy + _GLYPH_H * k, gx : gx + _GLYPH_W * k] = glyph
    patch = patch[: height - ly, : width - lx]
    region = px[ly : ly + patch.shape[0], lx : lx + patch.shape[1]]
    region[:] = style.label_background
    region[patch] = style.label_color


def render_single_box(
    image: RasterImage, box: BoundingBox, style: OverlayStyle = DEFAULT_STYLE
) -> RasterImage:
    """Copy of ``image`` with one unlabeled outline drawn inside ``box``."""
    rect = pixel_rect(box, image.width, image.height)
    px = image.pixels.copy()
    _draw_outline(px, rect, style)
    px.flags.writeable = False
    return RasterImage(px, image.name)


def render_indexed_boxes(
    image: RasterImage, boxes: Sequence[BoundingBox], style: OverlayStyle = DEFAULT_STYLE
) -> RasterImage:
    """Copy of ``image`` with every box outlined and labeled 1..n in list order."""
    if not boxes:
        raise RenderError("no boxes to render")
    rects = [pixel_rect(b, image.width, image.height) for b in boxes]
    px = image.pixels.copy()
    for rect in rects:
        _draw_outline(px, rect, style)
    # labels go on top of every outline
    for i, rect in enumerate(rects):
        _draw_label(px, str(i + 1), (rect[0], rect[1]), style)
    px.flags.writeable = False
    return RasterImage(px, image.name)
