"""Per-point attribute scores and FaCell composites.

A trained average-pooling (ga) classifier averages the last LSTM layer's
hidden vectors over time and applies an affine output map. Because affine
maps commute with means, applying that same map to each timestep's hidden
vector yields per-point logits whose mean is exactly the drawing's global
logit — a per-point attribution that costs one matrix product. Filtering
points (or whole lines) by a logit threshold and overlapping the survivors
from many drawings produces a FaCell: an image of where an attribute lives.

Scores are pre-sigmoid logits, not probabilities: useful thresholds exceed
1, and only logits make the mean identity exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import GA, ModelConfig, forward, make_batch
from .sketch import Drawing


@dataclass(frozen=True)
class PointScores:
    """Per-timestep logits (one column per attribute) plus the global logit."""

    id: str
    scores: np.ndarray                      # (length, outputs)
    logits: np.ndarray                      # (outputs,)
    attributes: tuple[str, ...] | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        logits = np.asarray(self.logits, dtype=np.float64)
        if scores.ndim != 2 or logits.shape != (scores.shape[1],):
            raise DataError(f"scores {scores.shape} and logits "
                            f"{logits.shape} do not line up")
        if self.attributes is not None and \
                len(self.attributes) != scores.shape[1]:
            raise DataError("one attribute name per score column required")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "logits", logits)

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    def column(self, attribute: str | None) -> int:
        if attribute is None or self.attributes is None:
            if self.scores.shape[1] == 1:
                return 0
            raise DataError("multi-attribute scores need an attribute name")
        try:
            return self.attributes.index(attribute)
        except ValueError:
            raise DataError(f"no scores for attribute {attribute!r}; "
                            f"have {list(self.attributes)}") from None


@dataclass(frozen=True)
class FaCellSpec:
    """Recipe for one FaCell: attribute, drawing count X, threshold Y."""

    attribute: str
    count: int
    threshold: float
    polarity: str = "positive"

    def __post_init__(self):
        if self.count < 1:
            raise DataError("FaCell drawing count must be >= 1")
        if self.polarity not in ("positive", "negative"):
            raise DataError("polarity must be 'positive' or 'negative'")

    def passes(self, scores: np.ndarray) -> np.ndarray:
        """Which scores clear the threshold under this polarity."""
        if self.polarity == "positive":
            return scores > self.threshold
        return scores < -self.threshold


def _require_affine_ga(cfg: ModelConfig) -> None:
    if cfg.head != GA:
        raise DataError(
            "per-point scores need an average-pooling (ga) head; an fs head "
            "reads only endpoint states and has no per-point decomposition")
    if cfg.dense:
        raise DataError(
            "per-point scores need a d1 (affine) head: with a ReLU dense "
            "layer the mean identity only holds pre-activation; retrain "
            "with d1 or score pre-ReLU explicitly")


def per_point_scores(cfg: ModelConfig, params: dict, triples: np.ndarray,
                     id: str = "", attributes=None) -> PointScores:
    """Score every timestep of one encoded sequence.

    The per-point scores are the output affine map applied to each hidden
    vector; the global logit is the same map applied to the time-averaged
    hidden vector. Their mean/logit agreement is the module's keystone
    identity and is computed by two routes on purpose.
    """
    _require_affine_ga(cfg)
    triples = np.asarray(triples, dtype=np.float64)
    if triples.ndim != 2 or triples.shape[1] != cfg.input_dim:
        raise DataError(f"expected (length, {cfg.input_dim}) triples, "
                        f"got {triples.shape}")
    batch = make_batch([triples], np.zeros((1, cfg.outputs)))
    _, hiddens = forward(cfg, params, batch)
    h = hiddens[-1][0]                      # (length, pooled_dim)
    scores = h @ params["out.W"] + params["out.b"]
    logits = h.mean(axis=0) @ params["out.W"] + params["out.b"]
    return PointScores(id=id, scores=scores, logits=logits,
                       attributes=tuple(attributes) if attributes else None)


def cell_trace(cfg: ModelConfig, params: dict, triples: np.ndarray,
               layer: int, cell: int) -> tuple[np.ndarray, np.ndarray | None]:
    """One cell's hidden value per timestep: (forward, backward or None)."""
    if not 0 <= layer < len(cfg.lstm_layers):
        raise DataError(f"layer {layer} out of range "
                        f"[0, {len(cfg.lstm_layers)})")
    cells, bidirectional = cfg.lstm_layers[layer]
    if not 0 <= cell < cells:
        raise DataError(f"cell {cell} out of range [0, {cells})")
    triples = np.asarray(triples, dtype=np.float64)
    batch = make_batch([triples], np.zeros((1, cfg.outputs)))
    _, hiddens = forward(cfg, params, batch)
    h = hiddens[layer][0]
    fw = h[:, cell].copy()
    bw = h[:, cells + cell].copy() if bidirectional else None
    return fw, bw


# ---------------------------------------------------------------------------
# filtering


@dataclass(frozen=True)
class FilterResult:
    """Point- and stroke-level pass masks plus the surviving sub-drawing."""

    point_mask: np.ndarray      # (n_points,) in encoding order
    stroke_mask: np.ndarray     # (n_strokes,)
    drawing: Drawing            # only the passing strokes


def filter_lines(d: Drawing, scores: PointScores, spec: FaCellSpec,
                 line_fraction: float = 0.5) -> FilterResult:
    """Keep strokes in which >= line_fraction of points clear the threshold."""
    if len(scores) != d.n_points:
        raise DataError(f"drawing {d.id!r} has {d.n_points} points but "
                        f"scores cover {len(scores)}")
    col = scores.column(spec.attribute)
    point_mask = spec.passes(scores.scores[:, col])
    stroke_mask = np.zeros(len(d.strokes), dtype=bool)
    start = 0
    for k, s in enumerate(d.strokes):
        window = point_mask[start:start + len(s)]
        stroke_mask[k] = window.mean() >= line_fraction
        start += len(s)
    kept = [s for k, s in enumerate(d.strokes) if stroke_mask[k]]
    return FilterResult(point_mask=point_mask, stroke_mask=stroke_mask,
                        drawing=d.with_strokes(kept))


# ---------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class FaCellImage:
    """Accumulated passing points of many drawings on one canvas.

    ``mass`` counts points per pixel (unclamped, so region totals are
    meaningful); rendering clamps. Accumulation is commutative, so the image
    does not depend on the order drawings were composed in.
    """

    width: int
    height: int
    mass: np.ndarray            # (height, width) float point counts
    points: np.ndarray          # (n, 2) all passing points
    used_ids: tuple[str, ...]

    def region_mass(self, x0: float, y0: float, x1: float, y1: float) -> float:
        """Total accumulated mass inside a pixel-aligned rectangle."""
        xs = slice(max(0, int(np.floor(x0))), min(self.width, int(np.ceil(x1))))
        ys = slice(max(0, int(np.floor(y0))), min(self.height, int(np.ceil(y1))))
        return float(self.mass[ys, xs].sum())

    def to_svg(self, radius: float = 0.8, opacity: float = 0.05) -> str:
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">',
            f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
        ]
        for x, y in self.points:
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{radius}" '
                         f'fill="black" fill-opacity="{opacity}"/>')
        parts.append("</svg>")
        return "\n".join(parts)

    def to_pgm(self, alpha: float = 0.08) -> bytes:
        """Binary PGM, white background darkening with accumulated mass."""
        ink = np.clip(self.mass * alpha, 0.0, 1.0)
        gray = np.round(255.0 * (1.0 - ink)).astype(np.uint8)
        header = f"P5\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + gray.tobytes()


def compose_facell(items, spec: FaCellSpec) -> FaCellImage:
    """Overlay passing points of the first X qualifying (drawing, scores).

    A drawing qualifies when its global logit agrees with the polarity
    (positive logit for positive polarity, negative for negative). Fewer
    than X qualifying drawings is an error that reports the achieved count.
    """
    items = list(items)
    if not items:
        raise DataError("no drawings to compose")
    width = int(round(items[0][0].width))
    height = int(round(items[0][0].height))
    mass = np.zeros((height, width))
    points = []
    used = []
    for d, scores in items:
        if len(used) == spec.count:
            break
        if (int(round(d.width)), int(round(d.height))) != (width, height):
            raise DataError(f"drawing {d.id!r} canvas {d.width}x{d.height} "
                            f"differs from {width}x{height}")
        if len(scores) != d.n_points:
            raise DataError(f"drawing {d.id!r} has {d.n_points} points but "
                            f"scores cover {len(scores)}")
        col = scores.column(spec.attribute)
        logit = scores.logits[col]
        if (logit <= 0.0) if spec.polarity == "positive" else (logit >= 0.0):
            continue
        mask = spec.passes(scores.scores[:, col])
        if mask.any():
            pts = np.concatenate([s.points for s in d.strokes])[mask]
            ix = np.clip(np.round(pts[:, 0]).astype(int), 0, width - 1)
            iy = np.clip(np.round(pts[:, 1]).astype(int), 0, height - 1)
            np.add.at(mass, (iy, ix), 1.0)
            points.append(pts)
        used.append(d.id)
    if len(used) < spec.count:
        raise DataError(f"only {len(used)} drawings qualify for "
                        f"{spec.attribute!r}, need {spec.count}")
    all_points = (np.concatenate(points) if points
                  else np.zeros((0, 2)))
    return FaCellImage(width=width, height=height, mass=mass,
                       points=all_points, used_ids=tuple(used))
