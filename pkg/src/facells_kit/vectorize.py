"""Raster-to-stroke conversion: Canny edges plus greedy edge-pixel tracing.

The pipeline is deterministic: identical image and config always produce a
byte-identical drawing. Only contour strokes are extracted, no tonal fill.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError
from .sketch import Drawing


class ImageTooSmallError(DataError):
    pass


@dataclass(frozen=True)
class RasterImage:
    """8-bit grayscale image; ``pixels`` is an (height, width) uint8 array."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.shape != (self.height, self.width):
            raise DataError(
                f"pixel buffer shape {px.shape} != (height={self.height}, width={self.width})")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class VectorizeConfig:
    blur_sigma: float = 1.4
    canny_low: float = 50.0
    canny_high: float = 120.0
    min_stroke_points: int = 4
    simplify_epsilon: float = 1.0

    def __post_init__(self):
        if self.blur_sigma <= 0:
            raise DataError("blur_sigma must be > 0")
        if not 0 < self.canny_low < self.canny_high:
            raise DataError("need 0 < canny_low < canny_high")
        if self.min_stroke_points < 2:
            raise DataError("min_stroke_points must be >= 2")
        if self.simplify_epsilon < 0:
            raise DataError("simplify_epsilon must be >= 0")


def read_pgm(path) -> RasterImage:
    """Binary 8-bit PGM (P5) reader."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(x) for x in fields)
    except ValueError as e:
        raise DataError(f"{path}: bad PGM header") from e
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    if raster.size != width * height:
        raise DataError(f"{path}: truncated pixel data")
    return RasterImage(width, height, raster.reshape(height, width).copy())


def write_pgm(pixels: np.ndarray, path) -> None:
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        px = np.clip(np.rint(px), 0, 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(px.tobytes())


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)


def canny_edges(img: RasterImage, cfg: VectorizeConfig) -> np.ndarray:
    """Boolean edge map: blur, Sobel gradient, non-max suppression, hysteresis."""
    if img.width < 3 or img.height < 3:
        raise ImageTooSmallError(f"image {img.width}x{img.height} smaller than 3x3")
    smooth = ndimage.gaussian_filter(img.pixels.astype(np.float64), cfg.blur_sigma,
                                     mode="nearest")
    gx = ndimage.convolve(smooth, _SOBEL_X, mode="nearest")
    gy = ndimage.convolve(smooth, _SOBEL_Y, mode="nearest")
    mag = np.hypot(gx, gy)

    # Non-maximum suppression along the quantized gradient direction. The
    # comparison is > on one side and >= on the other so a two-pixel plateau
    # keeps exactly one pixel (thin edges).
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    padded = np.pad(mag, 1, mode="constant")
    sector_offsets = {
        0: ((0, 1), (0, -1)),    # horizontal gradient: compare left/right
        1: ((1, 1), (-1, -1)),   # 45 degrees (y grows downward)
        2: ((1, 0), (-1, 0)),    # vertical gradient: compare up/down
        3: ((1, -1), (-1, 1)),   # 135 degrees
    }
    sector = ((angle + 22.5) // 45.0).astype(np.int64) % 4
    keep = np.zeros_like(mag, dtype=bool)
    for s, ((dy1, dx1), (dy2, dx2)) in sector_offsets.items():
        n1 = padded[1 + dy1:1 + dy1 + mag.shape[0], 1 + dx1:1 + dx1 + mag.shape[1]]
        n2 = padded[1 + dy2:1 + dy2 + mag.shape[0], 1 + dx2:1 + dx2 + mag.shape[1]]
        keep |= (sector == s) & (mag > n1) & (mag >= n2)

    strong = keep & (mag >= cfg.canny_high)
    candidate = keep & (mag >= cfg.canny_low)
    # hysteresis: keep weak pixels only in 8-connected components that
    # contain at least one strong pixel
    labels, n = ndimage.label(candidate, structure=np.ones((3, 3), dtype=np.int8))
    if n == 0:
        return np.zeros_like(candidate)
    strong_labels = np.unique(labels[strong])
    strong_labels = strong_labels[strong_labels > 0]
    return np.isin(labels, strong_labels)


# 8-neighbour offsets in a fixed deterministic precedence (row-major scan order)
_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def trace_strokes(edges: np.ndarray, cfg: VectorizeConfig,
                  id: str = "") -> Drawing:
    """Greedy tracing of an edge map into polylines.

    Unvisited edge pixels are picked in row-major order; each walk follows
    8-connected unvisited neighbours, preferring the continuation of the
    current direction, and stops at junctions (3+ unvisited neighbours).
    Short polylines are dropped, the rest simplified with RDP.
    """
    edges = np.asarray(edges, dtype=bool)
    h, w = edges.shape
    visited = ~edges  # non-edge pixels count as visited
    strokes = []
    for start in np.argwhere(edges):
        r, c = int(start[0]), int(start[1])
        if visited[r, c]:
            continue
        path = _walk(visited, r, c, h, w)
        if len(path) >= cfg.min_stroke_points:
            pts = np.array([(float(x), float(y)) for y, x in path])
            strokes.append(simplify_rdp(pts, cfg.simplify_epsilon))
    return Drawing(id, w, h, strokes)


def _walk(visited: np.ndarray, r: int, c: int, h: int, w: int) -> list[tuple[int, int]]:
    path = [(r, c)]
    visited[r, c] = True
    direction = None
    while True:
        candidates = []
        for dy, dx in _NEIGHBORS:
            nr, nc = r + dy, c + dx
            if 0 <= nr < h and 0 <= nc < w and not visited[nr, nc]:
                candidates.append((nr, nc, dy, dx))
        if not candidates:
            return path
        if len(candidates) >= 3 and len(path) > 1:
            return path  # junction: leave the branches for later scans
        if direction is None:
            nr, nc, dy, dx = candidates[0]
        else:
            # prefer the smallest turn; candidate order breaks ties
            nr, nc, dy, dx = max(
                candidates,
                key=lambda t: (direction[0] * t[2] + direction[1] * t[3])
                / math.hypot(t[2], t[3]))
        direction = (dy / math.hypot(dy, dx), dx / math.hypot(dy, dx))
        r, c = nr, nc
        visited[r, c] = True
        path.append((r, c))


def simplify_rdp(points: np.ndarray, epsilon: float) -> np.ndarray:
    """Ramer-Douglas-Peucker simplification (iterative, keeps endpoints)."""
    n = len(points)
    if epsilon <= 0 or n <= 2:
        return points
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        first, last = stack.pop()
        if last - first < 2:
            continue
        seg = points[first + 1:last]
        a, b = points[first], points[last]
        ab = b - a
        ab_sq = float(ab @ ab)
        rel = seg - a
        # distance to the *segment* a-b (not the infinite line) so dropped
        # points are provably within epsilon of the simplified polyline
        if ab_sq == 0.0:
            t = np.zeros(len(seg))
        else:
            t = np.clip((rel @ ab) / ab_sq, 0.0, 1.0)
        closest = np.outer(t, ab)
        dists = np.hypot(rel[:, 0] - closest[:, 0], rel[:, 1] - closest[:, 1])
        idx = int(np.argmax(dists))
        if dists[idx] > epsilon:
            split = first + 1 + idx
            keep[split] = True
            stack.append((first, split))
            stack.append((split, last))
    return points[keep]
