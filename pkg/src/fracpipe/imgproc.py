"""Grayscale image kernels with matching box transforms.

Images are 2-D ``uint8`` numpy arrays indexed ``[row, col]`` (height x width).
Box transforms use the same continuous ``(x, y, w, h)`` convention as
:mod:`fracpipe.geometry`, where pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _font
from .geometry import Box

SMALL_ANGLE_LIMIT = 15.0
RIGHT_ANGLES = (90, 180, 270)


def as_gray(img) -> np.ndarray:
    """Validate (and view) ``img`` as a non-empty 2-D uint8 array."""
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


@dataclass(frozen=True)
class ClaheParams:
    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 2.0

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValueError("tile counts must be >= 1")
        if not self.clip_limit >= 1.0:
            raise ValueError("clip_limit must be >= 1.0")


def _tile_edges(n_tiles: int, tile_size: int) -> np.ndarray:
    return np.arange(n_tiles + 1) * tile_size


def equalization_lut(hist: np.ndarray, n_pixels: int) -> np.ndarray:
    """``round_half_up(255 * cdf / n)`` computed in integer arithmetic."""
    cdf = np.cumsum(hist, dtype=np.int64)
    return ((510 * cdf + n_pixels) // (2 * n_pixels)).astype(np.int64)


def clip_histogram(hist: np.ndarray, clip: int) -> np.ndarray:
    """Clip bins at ``clip`` and spread the excess uniformly in a single pass.

    The ``excess % 256`` leftover counts go one each to the lowest bins, so the
    total is conserved exactly.
    """
    hist = hist.astype(np.int64)
    excess = int(np.maximum(hist - clip, 0).sum())
    out = np.minimum(hist, clip)
    if excess:
        out += excess // 256
        out[: excess % 256] += 1
    return out


def _interp_axis(n_pixels: int, edges: np.ndarray):
    """Lower tile index, upper tile index and upper weight for every pixel."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n_pixels, dtype=np.float64)
    n = len(centers)
    lo = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    span = centers[hi] - centers[lo]
    weight = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, np.clip(weight, 0.0, 1.0)


def clahe(img, params: ClaheParams = ClaheParams()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation.

    Each tile gets a 256-bin histogram clipped at
    ``clip_limit * tile_pixels / 256`` (floored, at least 1), an equalisation
    mapping from the clipped CDF, and pixels blend the mappings of the four
    nearest tile centres bilinearly (clamped at the borders).

    When the image size is not a multiple of the grid, the image is
    reflect-padded on the bottom/right so every tile holds the same number of
    pixels; otherwise tiles of different sizes would clip differently and a
    constant image would not stay constant.
    """
    img = as_gray(img)
    height, width = img.shape
    if params.tiles_x > width or params.tiles_y > height:
        raise ValueError(
            f"{params.tiles_x}x{params.tiles_y} tiles exceed image size {width}x{height}"
        )
    tw = -(-width // params.tiles_x)
    th = -(-height // params.tiles_y)
    xe = _tile_edges(params.tiles_x, tw)
    ye = _tile_edges(params.tiles_y, th)
    padded = np.pad(img, ((0, ye[-1] - height), (0, xe[-1] - width)), mode="reflect")
    luts = np.empty((params.tiles_y, params.tiles_x, 256), dtype=np.float64)
    for ty in range(params.tiles_y):
        for tx in range(params.tiles_x):
            tile = padded[ye[ty]:ye[ty + 1], xe[tx]:xe[tx + 1]]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=256)
            clip = max(1, int(params.clip_limit * n / 256))
            luts[ty, tx] = equalization_lut(clip_histogram(hist, clip), n)

    y0, y1, wy = _interp_axis(height, ye)
    x0, x1, wx = _interp_axis(width, xe)
    v = img.astype(np.intp)
    ry0, ry1 = y0[:, None], y1[:, None]
    cx0, cx1 = x0[None, :], x1[None, :]
    wy, wx = wy[:, None], wx[None, :]
    top = (1 - wx) * luts[ry0, cx0, v] + wx * luts[ry0, cx1, v]
    bottom = (1 - wx) * luts[ry1, cx0, v] + wx * luts[ry1, cx1, v]
    out = (1 - wy) * top + wy * bottom
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def hflip(img, boxes: Sequence[Box] = ()) -> tuple[np.ndarray, list[Box]]:
    """Mirror about the vertical axis."""
    img = as_gray(img)
    width = img.shape[1]
    return img[:, ::-1].copy(), [Box(width - b.x - b.w, b.y, b.w, b.h) for b in boxes]


def _rotate90_box(b: Box, width: int) -> Box:
    # counter-clockwise: point (px, py) -> (py, width - px)
    return Box(b.y, width - b.x - b.w, b.h, b.w)


def rotate(img, boxes: Sequence[Box] = (), angle: float = 0) -> tuple[np.ndarray, list[Box]]:
    """Rotate counter-clockwise by ``angle`` degrees.

    90/180/270 are exact pixel permutations (the canvas swaps axes for 90 and
    270). Angles within +-15 degrees resample nearest-neighbour about the image
    centre on a same-size canvas with zero fill; boxes become the axis-aligned
    hull of their rotated corners, clamped to the image.
    """
    img = as_gray(img)
    boxes = list(boxes)
    if angle in RIGHT_ANGLES:
        k = int(angle) // 90
        out_boxes = boxes
        width = img.shape[1]
        for _ in range(k):
            out_boxes = [_rotate90_box(b, width) for b in out_boxes]
            img = np.rot90(img)
            width = img.shape[1]
        return np.ascontiguousarray(img), out_boxes
    if not (-SMALL_ANGLE_LIMIT <= angle <= SMALL_ANGLE_LIMIT):
        raise ValueError(
            f"unsupported rotation angle {angle!r}: use 90/180/270 or |angle| <= {SMALL_ANGLE_LIMIT}"
        )
    if angle == 0:
        return img.copy(), boxes
    height, width = img.shape
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    cx, cy = width / 2.0, height / 2.0

    # inverse map output pixel centres back to the source
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    sx = np.floor(cx + dx * cos - dy * sin).astype(np.intp)
    sy = np.floor(cy + dx * sin + dy * cos).astype(np.intp)
    valid = (sx >= 0) & (sx < width) & (sy >= 0) & (sy < height)
    out = np.zeros_like(img)
    out[valid] = img[sy[valid], sx[valid]]

    def forward(px, py):
        ddx, ddy = px - cx, py - cy
        return cx + ddx * cos + ddy * sin, cy - ddx * sin + ddy * cos

    out_boxes = []
    for b in boxes:
        pts = [forward(px, py) for px in (b.x, b.x + b.w) for py in (b.y, b.y + b.h)]
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        x1 = min(max(min(xs), 0.0), width)
        x2 = min(max(max(xs), 0.0), width)
        y1 = min(max(min(ys), 0.0), height)
        y2 = min(max(max(ys), 0.0), height)
        out_boxes.append(Box(x1, y1, x2 - x1, y2 - y1))
    return out, out_boxes


def _round(v: float) -> int:
    return math.floor(v + 0.5)


def crop(img, b: Box) -> np.ndarray:
    """Copy the sub-rectangle at the rounded box (rounded x, y, w, h)."""
    img = as_gray(img)
    height, width = img.shape
    x, y, w, h = _round(b.x), _round(b.y), _round(b.w), _round(b.h)
    if w <= 0 or h <= 0:
        raise ValueError(f"empty crop for box {b}")
    if x < 0 or y < 0 or x + w > width or y + h > height:
        raise ValueError(f"crop box {b} exceeds image bounds {width}x{height}")
    return img[y:y + h, x:x + w].copy()


def snap_box(b: Box, width: int, height: int) -> Box:
    """Round a box's corners to integers and clamp them to the image."""
    x1 = min(max(_round(b.x), 0), width)
    y1 = min(max(_round(b.y), 0), height)
    x2 = min(max(_round(b.x + b.w), 0), width)
    y2 = min(max(_round(b.y + b.h), 0), height)
    return Box(x1, y1, x2 - x1, y2 - y1)


# --------------------------------------------------------------------------- overlays

def outline_mask(shape: tuple[int, int], b: Box, thickness: int = 2) -> np.ndarray:
    """Boolean mask of a box outline drawn inside the snapped box."""
    height, width = shape
    s = snap_box(b, width, height)
    mask = np.zeros(shape, dtype=bool)
    x1, y1 = int(s.x), int(s.y)
    x2, y2 = int(s.x + s.w), int(s.y + s.h)
    if x2 <= x1 or y2 <= y1:
        return mask
    t = thickness
    mask[y1:min(y1 + t, y2), x1:x2] = True
    mask[max(y2 - t, y1):y2, x1:x2] = True
    mask[y1:y2, x1:min(x1 + t, x2)] = True
    mask[y1:y2, max(x2 - t, x1):x2] = True
    return mask


def text_mask(shape: tuple[int, int], text: str, x: int, y: int) -> np.ndarray:
    """Mask of ``text`` in the 5x7 font with its top-left corner at ``(x, y)``."""
    mask = np.zeros(shape, dtype=bool)
    height, width = shape
    cursor = x
    for ch in text.upper():
        glyph = _font.GLYPHS.get(ch, _font.GLYPHS["?"])
        for row, bits in enumerate(glyph):
            py = y + row
            if not 0 <= py < height:
                continue
            for col in range(_font.GLYPH_WIDTH):
                px = cursor + col
                if bits & (1 << (_font.GLYPH_WIDTH - 1 - col)) and 0 <= px < width:
                    mask[py, px] = True
        cursor += _font.GLYPH_WIDTH + 1
    return mask


def _tag_text(label: str | None, score: float | None) -> str:
    parts = []
    if label:
        parts.append(label)
    if score is not None:
        parts.append(f"{score:.2f}")
    return " ".join(parts)


def render_overlay(img, labeled_boxes: Iterable[tuple[Box, str | None, float | None]]) -> np.ndarray:
    """Burn 2-px outlines and ``LABEL 0.87`` tags into a copy of ``img`` at 255.

    The tag sits just above the box when there is room, otherwise just inside
    its top edge.
    """
    out = as_gray(img).copy()
    for b, label, score in labeled_boxes:
        out[outline_mask(out.shape, b)] = 255
        tag = _tag_text(label, score)
        if tag:
            s = snap_box(b, out.shape[1], out.shape[0])
            ty = int(s.y) - _font.GLYPH_HEIGHT - 2
            if ty < 0:
                ty = int(s.y) + 3
            out[text_mask(out.shape, tag, int(s.x) + 1, ty)] = 255
    return out


# --------------------------------------------------------------------------- I/O

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM with maxval <= 255."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise ValueError("truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ValueError("malformed PGM header") from None
    if width <= 0 or height <= 0 or not 0 < maxval <= 255:
        raise ValueError(f"unsupported PGM geometry {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    body = data[pos:pos + width * height]
    if len(body) != width * height:
        raise ValueError("truncated PGM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(img) -> bytes:
    img = as_gray(img)
    height, width = img.shape
    return b"P5\n%d %d\n255\n" % (width, height) + np.ascontiguousarray(img).tobytes()


def read_image(path) -> np.ndarray:
    """Read PGM natively; other formats (PNG, ...) via Pillow when installed."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P5":
        return decode_pgm(data)
    try:
        from PIL import Image
    except ImportError:
        raise ValueError(f"{path}: only binary PGM is supported without Pillow") from None
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def write_image(path, img) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".pgm", ""):
        with open(path, "wb") as fh:
            fh.write(encode_pgm(img))
        return
    from PIL import Image

    Image.fromarray(as_gray(img), mode="L").save(path)
