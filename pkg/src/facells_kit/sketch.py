"""Drawing data model and the two point-sequence encodings.

A drawing is an ordered list of strokes on a fixed canvas; a stroke is a
polyline of at least two points. Drawings flatten into sequences of
(a, b, p) triples where p marks begin/continue/end of a stroke, in either
an absolute or a relative (delta from previous point) coordinate format.
Both encodings invert losslessly via :func:`decode`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError

# Pen states: one stroke is exactly  BEGIN CONTINUE* END.
PEN_BEGIN = 1.0
PEN_CONTINUE = 0.0
PEN_END = -1.0

ABSOLUTE = "absolute"
RELATIVE = "relative"


class MalformedSequenceError(DataError):
    """Pen-state grammar violation; carries the offending triple index."""

    def __init__(self, index: int, message: str):
        super().__init__(f"malformed sequence at index {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class Stroke:
    """An immutable polyline. ``points`` is an (n, 2) float64 array, n >= 2."""

    points: np.ndarray

    def __init__(self, points) -> None:
        arr = np.asarray(points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise DataError(f"stroke points must be (n, 2), got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise DataError(f"stroke needs at least 2 points, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise DataError("stroke contains non-finite coordinates")
        arr.flags.writeable = False
        object.__setattr__(self, "points", arr)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def __eq__(self, other) -> bool:
        return isinstance(other, Stroke) and np.array_equal(self.points, other.points)

    @property
    def first(self) -> np.ndarray:
        return self.points[0]

    @property
    def last(self) -> np.ndarray:
        return self.points[-1]

    def reversed(self) -> "Stroke":
        return Stroke(self.points[::-1])

    def length(self) -> float:
        """Polyline arc length."""
        return float(np.sum(np.hypot(*np.diff(self.points, axis=0).T)))


@dataclass(frozen=True)
class Drawing:
    """Strokes on a canvas, with optional binary attribute labels in {-1, +1}."""

    id: str
    width: float
    height: float
    strokes: tuple[Stroke, ...]
    labels: Mapping[str, int] | None = None

    def __init__(self, id: str, width: float, height: float,
                 strokes: Iterable[Stroke | Sequence], labels=None) -> None:
        if not (width > 0 and height > 0):
            raise DataError(f"canvas must be positive, got {width}x{height}")
        ss = tuple(s if isinstance(s, Stroke) else Stroke(s) for s in strokes)
        for k, s in enumerate(ss):
            p = s.points
            if p[:, 0].min() < 0 or p[:, 0].max() > width or \
               p[:, 1].min() < 0 or p[:, 1].max() > height:
                raise DataError(f"stroke {k} leaves the canvas [0,{width}]x[0,{height}]")
        if labels is not None:
            labels = dict(labels)
            for name, v in labels.items():
                if v not in (-1, 1):
                    raise DataError(f"label {name!r} must be -1 or +1, got {v!r}")
        object.__setattr__(self, "id", str(id))
        object.__setattr__(self, "width", float(width))
        object.__setattr__(self, "height", float(height))
        object.__setattr__(self, "strokes", ss)
        object.__setattr__(self, "labels", labels)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Drawing) and self.id == other.id
                and self.width == other.width and self.height == other.height
                and self.strokes == other.strokes and self.labels == other.labels)

    @property
    def n_points(self) -> int:
        return sum(len(s) for s in self.strokes)

    def with_strokes(self, strokes: Iterable) -> "Drawing":
        return Drawing(self.id, self.width, self.height, strokes, self.labels)


@dataclass(frozen=True)
class EncodedSequence:
    """Flattened drawing: (L, 3) float64 triples (a, b, p).

    ``normalized`` records whether coordinates were mapped to the
    center-origin [-1, 1] frame (training default) or kept in raw canvas
    units (interchange default).
    """

    format: str
    triples: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.format not in (ABSOLUTE, RELATIVE):
            raise DataError(f"unknown sequence format {self.format!r}")
        arr = np.asarray(self.triples, dtype=np.float64)
        if arr.size == 0:
            arr = arr.reshape(0, 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise DataError(f"triples must be (L, 3), got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "triples", arr)

    def __len__(self) -> int:
        return int(self.triples.shape[0])


def _scale(width: float, height: float) -> float:
    return 2.0 / max(width, height)


def _flatten(d: Drawing) -> tuple[np.ndarray, np.ndarray]:
    """All points stacked in stroke order, plus the matching pen-state column."""
    if not d.strokes:
        return np.zeros((0, 2)), np.zeros((0,))
    pts = np.concatenate([s.points for s in d.strokes], axis=0)
    pen = np.concatenate([
        np.r_[PEN_BEGIN, np.full(len(s) - 2, PEN_CONTINUE), PEN_END]
        for s in d.strokes
    ])
    return pts, pen


def encode_absolute(d: Drawing, normalized: bool = False) -> EncodedSequence:
    """One (x, y, p) triple per point, in stroke order then point order.

    Normalized mode translates the canvas center to the origin and scales
    by 2/max(width, height), placing coordinates in [-1, 1].
    """
    pts, pen = _flatten(d)
    if normalized:
        center = np.array([d.width / 2.0, d.height / 2.0])
        pts = (pts - center) * _scale(d.width, d.height)
    return EncodedSequence(ABSOLUTE, np.column_stack([pts, pen]) if len(pen) else
                           np.zeros((0, 3)), normalized)


def encode_relative(d: Drawing, normalized: bool = False) -> EncodedSequence:
    """One (dx, dy, p) triple per point, each an offset from the previous point.

    The first point is referenced to the canvas center; deltas run across
    stroke boundaries so the flat sequence is self-contained.
    """
    abs_seq = encode_absolute(d, normalized)
    t = abs_seq.triples
    if len(t) == 0:
        return EncodedSequence(RELATIVE, t, normalized)
    center = np.zeros(2) if normalized else np.array([d.width / 2.0, d.height / 2.0])
    deltas = np.empty_like(t[:, :2])
    deltas[0] = t[0, :2] - center
    deltas[1:] = np.diff(t[:, :2], axis=0)
    return EncodedSequence(RELATIVE, np.column_stack([deltas, t[:, 2]]), normalized)


def check_pen_grammar(pen: np.ndarray) -> None:
    """Run the (BEGIN CONTINUE* END)+ automaton; raise on the first violation."""
    in_stroke = False
    for i, p in enumerate(pen):
        if p not in (PEN_BEGIN, PEN_CONTINUE, PEN_END):
            raise MalformedSequenceError(i, f"pen state {p!r} not in {{+1, 0, -1}}")
        if not in_stroke:
            if p != PEN_BEGIN:
                raise MalformedSequenceError(i, "expected stroke begin (+1)")
            in_stroke = True
        elif p == PEN_BEGIN:
            raise MalformedSequenceError(i, "begin (+1) inside an open stroke")
        elif p == PEN_END:
            in_stroke = False
    if in_stroke:
        raise MalformedSequenceError(len(pen), "sequence ends inside an open stroke")


def decode(s: EncodedSequence, width: float, height: float,
           id: str = "", labels=None) -> Drawing:
    """Invert either encoding back to a Drawing on the given canvas."""
    t = s.triples
    check_pen_grammar(t[:, 2])
    if len(t) == 0:
        return Drawing(id, width, height, [], labels)
    coords = t[:, :2]
    if s.format == RELATIVE:
        coords = np.cumsum(coords, axis=0)
        if not s.normalized:
            coords = coords + np.array([width / 2.0, height / 2.0])
    if s.normalized:
        coords = coords / _scale(width, height) + np.array([width / 2.0, height / 2.0])
    starts = np.flatnonzero(t[:, 2] == PEN_BEGIN)
    ends = np.flatnonzero(t[:, 2] == PEN_END)
    strokes = [coords[a:b + 1] for a, b in zip(starts, ends)]
    return Drawing(id, width, height, strokes, labels)


def total_ink_length(d: Drawing) -> float:
    """Sum of polyline lengths over all strokes."""
    return float(sum(s.length() for s in d.strokes))


def pen_up_length(d: Drawing) -> float:
    """Travel from each stroke's last point to the next stroke's first point."""
    total = 0.0
    for a, b in zip(d.strokes, d.strokes[1:]):
        total += math.hypot(b.first[0] - a.last[0], b.first[1] - a.last[1])
    return total


# --- interchange -----------------------------------------------------------

def drawing_to_json(d: Drawing) -> dict:
    obj = {
        "id": d.id,
        "width": d.width,
        "height": d.height,
        "strokes": [s.points.tolist() for s in d.strokes],
    }
    if d.labels is not None:
        obj["labels"] = dict(d.labels)
    return obj


def drawing_from_json(obj: Mapping) -> Drawing:
    try:
        return Drawing(obj["id"], obj["width"], obj["height"],
                       obj["strokes"], obj.get("labels"))
    except KeyError as e:
        raise DataError(f"drawing record missing field {e}") from e


def write_jsonl(drawings: Iterable[Drawing], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for d in drawings:
            f.write(json.dumps(drawing_to_json(d)) + "\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[Drawing]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from e
            yield drawing_from_json(obj)


def to_svg(d: Drawing) -> str:
    """Each stroke as a black 1px polyline on a white background."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {d.width:g} {d.height:g}" '
        f'width="{d.width:g}" height="{d.height:g}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for s in d.strokes:
        pts = " ".join(f"{x:g},{y:g}" for x, y in s.points)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts)
