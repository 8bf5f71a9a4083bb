"""Dataset ingestion, staged training runs, and the format/ordering harness.

A run is described by an ExperimentPlan: which triple format to encode, how
to order strokes first, which model config to train, the train/test split,
and the optimizer settings. `run_stage` executes one plan end to end and
returns per-epoch metrics; `compare_matrix` runs several plans that differ
only in format/ordering/config and aligns their test losses for ranking.

Attribute labels use the CelebA text layout: a row count, a line of
attribute names, then one `image_id v1 ... vK` row per image with v in
{-1, +1}; -1 maps to target 0 and +1 to target 1.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import ordering, sketch
from .errors import DataError, NumericError
from .model import (
    ModelConfig,
    balanced_accuracy,
    bce_loss,
    clip_gradients,
    adam_step,
    forward,
    init_adam_state,
    init_params,
    loss_and_gradients,
    make_batch,
    parse_config,
    save_checkpoint,
)

STAGE_PRESETS = {
    "stage1": {"split": (0.30, 0.15), "epochs": 10},
    "stage2": {"split": (0.95, 0.05), "epochs": 10},
    "stage3": {"split": (0.95, 0.05), "epochs": 10},
}

FORMATS = (sketch.ABSOLUTE, sketch.RELATIVE)
ORDERINGS = (ordering.MIN_LENGTH, ordering.RANDOM, ordering.IDENTITY)
DEFAULT_SPLIT = (0.7, 0.3)

_CONFIG_HINT = ("valid config names look like 1bi-fs-d1, 1bi-ga-d40, "
                "3bi-ga-d1, 1bi(16)-ga-d1, 3bi-ga-d40(8)")


# ---------------------------------------------------------------------------
# attribute tables


@dataclass(frozen=True)
class AttributeTable:
    """Binary targets per image id, one column per named attribute."""

    names: tuple[str, ...]
    targets: dict[str, np.ndarray]  # id -> (len(names),) array of 0/1

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate attribute names")

    def __len__(self) -> int:
        return len(self.targets)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.targets

    def vector(self, image_id: str) -> np.ndarray:
        try:
            return self.targets[image_id]
        except KeyError:
            raise DataError(f"no attribute row for id {image_id!r}") from None

    def columns(self, ids, names) -> np.ndarray:
        """(len(ids), len(names)) target matrix in the requested order."""
        idx = []
        for name in names:
            try:
                idx.append(self.names.index(name))
            except ValueError:
                raise DataError(
                    f"unknown attribute {name!r}; have {list(self.names)}"
                    ) from None
        rows = np.stack([self.vector(i) for i in ids])
        return rows[:, idx]


def load_attributes(path) -> AttributeTable:
    """Parse a CelebA-layout attribute file; see the module docstring."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if len(lines) < 2:
        raise DataError(f"{path}: need a count line and a names line")
    try:
        declared = int(lines[0].strip())
    except ValueError:
        raise DataError(f"{path} line 1: row count expected, "
                        f"got {lines[0]!r}") from None
    names = tuple(lines[1].split())
    if not names:
        raise DataError(f"{path} line 2: no attribute names")
    targets: dict[str, np.ndarray] = {}
    rows = [ln for ln in lines[2:] if ln.strip()]
    for k, line in enumerate(rows):
        lineno = k + 3
        fields = line.split()
        if len(fields) != len(names) + 1:
            raise DataError(f"{path} line {lineno}: expected id plus "
                            f"{len(names)} values, got {len(fields)} fields")
        image_id = fields[0]
        vec = np.empty(len(names))
        for j, tok in enumerate(fields[1:]):
            if tok == "1":
                vec[j] = 1.0
            elif tok == "-1":
                vec[j] = 0.0
            else:
                raise DataError(f"{path} line {lineno}: value {tok!r} "
                                f"is not -1 or 1")
        if image_id in targets:
            raise DataError(f"{path} line {lineno}: duplicate id {image_id!r}")
        targets[image_id] = vec
    if len(targets) != declared:
        raise DataError(f"{path}: header declares {declared} rows, "
                        f"found {len(targets)}")
    return AttributeTable(names, targets)


def write_attributes(table: AttributeTable, path) -> None:
    """Write a table back out in the same layout load_attributes reads."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{len(table.targets)}\n")
        f.write(" ".join(table.names) + "\n")
        for image_id, vec in table.targets.items():
            vals = " ".join("1" if v == 1.0 else "-1" for v in vec)
            f.write(f"{image_id} {vals}\n")


def attributes_from_drawings(drawings) -> AttributeTable:
    """Collect the {-1,+1} label maps carried on drawings into one table."""
    names: tuple[str, ...] | None = None
    targets: dict[str, np.ndarray] = {}
    for d in drawings:
        if d.labels is None:
            raise DataError(f"drawing {d.id!r} has no labels")
        if names is None:
            names = tuple(sorted(d.labels))
        elif tuple(sorted(d.labels)) != names:
            raise DataError(f"drawing {d.id!r} labels {sorted(d.labels)} "
                            f"do not match {list(names)}")
        targets[d.id] = np.array([(d.labels[n] + 1) / 2.0 for n in names])
    if names is None:
        raise DataError("no drawings")
    return AttributeTable(names, targets)


# ---------------------------------------------------------------------------
# splits


def split(ids, spec, seed) -> tuple[list, list]:
    """Disjoint seed-deterministic (train, test) id lists, sizes by floor."""
    train_frac, test_frac = float(spec[0]), float(spec[1])
    if not (0.0 <= train_frac and 0.0 <= test_frac
            and train_frac + test_frac <= 1.0 + 1e-12):
        raise DataError(f"split fractions {spec} must be >= 0 and sum <= 1")
    ids = list(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = math.floor(len(ids) * train_frac)
    n_test = math.floor(len(ids) * test_frac)
    train = [ids[i] for i in order[:n_train]]
    test = [ids[i] for i in order[n_train:n_train + n_test]]
    return train, test


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class ExperimentPlan:
    format: str = sketch.ABSOLUTE
    ordering: str = ordering.MIN_LENGTH
    config: str = "1bi(16)-ga-d1"
    attributes: tuple[str, ...] = ("glasses",)
    split: tuple[float, float] = DEFAULT_SPLIT
    epochs: int = 10
    seed: int = 42
    lr: float = 3e-3
    batch_size: int = 32
    normalized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "split",
                           (float(self.split[0]), float(self.split[1])))
        if self.format not in FORMATS:
            raise DataError(f"format must be one of {FORMATS}")
        if self.ordering not in ORDERINGS:
            raise DataError(f"ordering must be one of {ORDERINGS}")
        if not self.attributes:
            raise DataError("at least one attribute is required")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.lr < 0.0:
            raise DataError("lr must be >= 0")
        if self.split[0] + self.split[1] > 1.0 + 1e-12:
            raise DataError("split fractions must sum to <= 1")

    @property
    def label(self) -> str:
        sort_tag = "sorted" if self.ordering == ordering.MIN_LENGTH \
            else "unsorted" if self.ordering == ordering.RANDOM else "as-is"
        return f"{self.format}-{sort_tag}-{self.config}"

    def model_config(self) -> ModelConfig:
        try:
            return parse_config(self.config, outputs=len(self.attributes))
        except DataError:
            raise DataError(f"unknown model config {self.config!r}; "
                            + _CONFIG_HINT) from None


_PLAN_KEYS = {
    "format": str, "ordering": str, "config": str, "stage": str,
    "attributes": str, "train_frac": float, "test_frac": float,
    "epochs": int, "seed": int, "lr": float, "batch_size": int,
    "normalized": str,
}


def parse_plan(text: str) -> ExperimentPlan:
    """Build a plan from flat `key=value` lines (# comments allowed)."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"plan line {lineno}: expected key=value, "
                            f"got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PLAN_KEYS:
            raise DataError(f"plan line {lineno}: unknown key {key!r}; "
                            f"known keys: {sorted(_PLAN_KEYS)}")
        if key in raw:
            raise DataError(f"plan line {lineno}: duplicate key {key!r}")
        raw[key] = value

    kwargs: dict = {}
    if "stage" in raw:
        preset = STAGE_PRESETS.get(raw.pop("stage"))
        if preset is None:
            raise DataError(f"unknown stage; have {sorted(STAGE_PRESETS)}")
        kwargs["split"] = preset["split"]
        kwargs["epochs"] = preset["epochs"]
    if "train_frac" in raw or "test_frac" in raw:
        base = kwargs.get("split", DEFAULT_SPLIT)
        kwargs["split"] = (float(raw.pop("train_frac", base[0])),
                           float(raw.pop("test_frac", base[1])))
    if "attributes" in raw:
        kwargs["attributes"] = tuple(
            a.strip() for a in raw.pop("attributes").split(",") if a.strip())
    if "normalized" in raw:
        value = raw.pop("normalized").lower()
        if value not in ("true", "false"):
            raise DataError("normalized must be true or false")
        kwargs["normalized"] = value == "true"
    for key, conv in (("format", str), ("ordering", str), ("config", str),
                      ("epochs", int), ("seed", int), ("lr", float),
                      ("batch_size", int)):
        if key in raw:
            try:
                kwargs[key] = conv(raw.pop(key))
            except ValueError:
                raise DataError(f"plan key {key}: cannot parse as "
                                f"{conv.__name__}") from None
    return ExperimentPlan(**kwargs)


def plan_to_text(plan: ExperimentPlan) -> str:
    lines = [
        f"format={plan.format}",
        f"ordering={plan.ordering}",
        f"config={plan.config}",
        f"attributes={','.join(plan.attributes)}",
        f"train_frac={plan.split[0]}",
        f"test_frac={plan.split[1]}",
        f"epochs={plan.epochs}",
        f"seed={plan.seed}",
        f"lr={plan.lr}",
        f"batch_size={plan.batch_size}",
        f"normalized={str(plan.normalized).lower()}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# encoding and batching


def encode_for_plan(drawings, plan: ExperimentPlan) -> list[np.ndarray]:
    """Order strokes per the plan, then encode triples per the plan."""
    encode = (sketch.encode_absolute if plan.format == sketch.ABSOLUTE
              else sketch.encode_relative)
    out = []
    for k, d in enumerate(drawings):
        od = ordering.reorder(d, plan.ordering, seed=plan.seed + k)
        seq = encode(od, normalized=plan.normalized)
        if len(seq) == 0:
            raise DataError(f"drawing {d.id!r} encodes to an empty sequence")
        out.append(seq.triples)
    return out


def bucket_batches(lengths, batch_size) -> list[np.ndarray]:
    """Indices grouped into batches of near-equal length (stable sort)."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    return [order[i:i + batch_size]
            for i in range(0, len(order), batch_size)]


def predict_probs(cfg, params, sequences, batch_size=64) -> np.ndarray:
    """(n, outputs) probabilities, rows aligned with the input order."""
    probs = np.empty((len(sequences), cfg.outputs))
    for bucket in bucket_batches([len(s) for s in sequences], batch_size):
        batch = make_batch([sequences[i] for i in bucket],
                           np.zeros((len(bucket), cfg.outputs)))
        p, _ = forward(cfg, params, batch)
        probs[bucket] = p
    return probs


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class StageResult:
    plan: ExperimentPlan
    config: ModelConfig
    params: dict
    metrics: list[dict] = field(compare=False)
    eligible: tuple[str, ...] = ()
    train_ids: tuple[str, ...] = ()
    test_ids: tuple[str, ...] = ()

    def epoch_losses(self, split_name: str) -> list[float]:
        return [row["loss"] for row in self.metrics
                if row["split"] == split_name]


def _metric_rows(epoch, split_name, probs, y, attributes):
    row = {"epoch": epoch, "split": split_name,
           "loss": bce_loss(probs, y)}
    for k, name in enumerate(attributes):
        try:
            row[f"bacc_{name}"] = balanced_accuracy(probs[:, k], y[:, k])
        except DataError:
            row[f"bacc_{name}"] = float("nan")  # a class is absent
    return row


def metrics_to_csv(metrics, attributes) -> str:
    buf = io.StringIO()
    fieldnames = (["epoch", "split", "loss"]
                  + [f"bacc_{a}" for a in attributes])
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in metrics:
        writer.writerow({k: f"{v:.10g}" if isinstance(v, float) else v
                         for k, v in row.items()})
    return buf.getvalue()


def run_stage(plan: ExperimentPlan, drawings, table: AttributeTable,
              out_dir=None, log=None, start_params=None) -> StageResult:
    """Train the planned config on the planned encoding; record metrics.

    Writes `metrics.csv`, `checkpoint.json`, and `eligible_attributes.txt`
    into out_dir when given. Eligible attributes are those whose final test
    balanced accuracy exceeds 0.5. `start_params` continues training from
    existing weights instead of a fresh seeded initialization.
    """
    drawings = list(drawings)
    if not drawings:
        raise DataError("no drawings to train on")
    cfg = plan.model_config()
    ids = [d.id for d in drawings]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate drawing ids")
    y_all = table.columns(ids, plan.attributes)
    sequences = encode_for_plan(drawings, plan)

    train_ids, test_ids = split(ids, plan.split, plan.seed)
    if not train_ids or not test_ids:
        raise DataError(f"split {plan.split} of {len(ids)} drawings leaves "
                        f"an empty train or test set")
    pos = {image_id: k for k, image_id in enumerate(ids)}
    train_idx = np.array([pos[i] for i in train_ids])
    test_idx = np.array([pos[i] for i in test_ids])
    train_seqs = [sequences[i] for i in train_idx]
    test_seqs = [sequences[i] for i in test_idx]
    y_train = y_all[train_idx]
    y_test = y_all[test_idx]

    rng = np.random.default_rng(plan.seed)
    params = init_params(cfg, rng)
    if start_params is not None:
        if set(start_params) != set(params) or any(
                start_params[k].shape != params[k].shape for k in params):
            raise DataError("start_params do not match the planned config")
        params = {k: v.copy() for k, v in start_params.items()}
    state = init_adam_state(params)
    buckets = bucket_batches([len(s) for s in train_seqs], plan.batch_size)

    metrics: list[dict] = []
    for epoch in range(1, plan.epochs + 1):
        for b in rng.permutation(len(buckets)):
            bucket = buckets[b]
            batch = make_batch([train_seqs[i] for i in bucket],
                               y_train[bucket])
            loss, _, grads = loss_and_gradients(cfg, params, batch)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch "
                                   f"{epoch}")
            clip_gradients(grads, 5.0)
            adam_step(params, grads, state, lr=plan.lr)
        p_train = predict_probs(cfg, params, train_seqs)
        p_test = predict_probs(cfg, params, test_seqs)
        metrics.append(_metric_rows(epoch, "train", p_train, y_train,
                                    plan.attributes))
        metrics.append(_metric_rows(epoch, "test", p_test, y_test,
                                    plan.attributes))
        if log is not None:
            row = metrics[-1]
            log(f"epoch {epoch}/{plan.epochs} "
                f"train_loss={metrics[-2]['loss']:.4f} "
                f"test_loss={row['loss']:.4f}")

    final_test = metrics[-1]
    eligible = tuple(a for a in plan.attributes
                     if final_test[f"bacc_{a}"] > 0.5)
    result = StageResult(plan=plan, config=cfg, params=params,
                         metrics=metrics, eligible=eligible,
                         train_ids=tuple(train_ids),
                         test_ids=tuple(test_ids))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w",
                  encoding="utf-8") as f:
            f.write(metrics_to_csv(metrics, plan.attributes))
        save_checkpoint(os.path.join(out_dir, "checkpoint.json"), cfg,
                        params, optimizer_state=state,
                        attributes=list(plan.attributes))
        with open(os.path.join(out_dir, "eligible_attributes.txt"), "w",
                  encoding="utf-8") as f:
            f.writelines(a + "\n" for a in eligible)
    return result


# ---------------------------------------------------------------------------
# comparison harness


@dataclass(frozen=True)
class ComparisonReport:
    labels: tuple[str, ...]
    test_losses: np.ndarray  # (epochs, len(labels))
    ranking: tuple[str, ...]  # best final test loss first
    results: tuple[StageResult, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", *self.labels])
        for e in range(self.test_losses.shape[0]):
            writer.writerow([e + 1] + [f"{v:.10g}"
                                       for v in self.test_losses[e]])
        return buf.getvalue()


def compare_matrix(plans, drawings, table: AttributeTable,
                   log=None) -> ComparisonReport:
    """Run plans that differ only in format/ordering/config; rank them."""
    plans = list(plans)
    if len(plans) < 2:
        raise DataError("need at least two plans to compare")
    base = plans[0]
    for p in plans[1:]:
        if replace(p, format=base.format, ordering=base.ordering,
                   config=base.config) != base:
            raise DataError("plans must differ only in format, ordering, "
                            "or config (same data, split, epochs, seed)")
    labels = [p.label for p in plans]
    for k, label in enumerate(labels):  # identical plans are allowed
        if labels.index(label) != k:
            labels[k] = f"{label}#{labels[:k].count(label) + 1}"
    drawings = list(drawings)
    results = []
    for p in plans:
        if log is not None:
            log(f"running {p.label}")
        results.append(run_stage(p, drawings, table, log=log))
    losses = np.column_stack([r.epoch_losses("test") for r in results])
    final = losses[-1]
    ranking = tuple(labels[i] for i in np.argsort(final, kind="stable"))
    return ComparisonReport(labels=tuple(labels), test_losses=losses,
                            ranking=ranking, results=tuple(results))


# ---------------------------------------------------------------------------
# toy data


def _arc(cx, cy, rx, ry, t0, t1, n, rng, jitter=0.6, closed=False):
    t = np.linspace(t0, t1, n, endpoint=not closed)
    pts = np.column_stack([cx + rx * np.cos(t), cy + ry * np.sin(t)])
    return pts + rng.normal(0.0, jitter, pts.shape)


def make_toy_dataset(n: int, seed: int = 42) -> tuple[list, AttributeTable]:
    """n synthetic face sketches on a 256x256 canvas, labeled by `glasses`.

    Each face has an oval outline, two eye strokes, and a mouth; half
    (independently, with probability 1/2) additionally wear glasses drawn
    as a circle around each eye. Geometry is jittered per drawing and
    strokes are emitted in random order so min_length ordering has work
    to do.
    """
    if n < 2:
        raise DataError("toy dataset needs n >= 2")
    drawings = []
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        glasses = bool(rng.random() < 0.5)
        cx, cy = rng.normal([128.0, 128.0], 3.0)
        strokes = [
            # face outline
            _arc(cx, cy, 70.0 * rng.normal(1.0, 0.04),
                 92.0 * rng.normal(1.0, 0.04), 0.0, 2.0 * np.pi,
                 int(rng.integers(32, 41)), rng, closed=True),
            # mouth
            _arc(cx, cy + 38.0 + rng.normal(0.0, 2.0), 20.0, 9.0,
                 0.15 * np.pi, 0.85 * np.pi, int(rng.integers(8, 11)), rng),
        ]
        for side in (-1.0, 1.0):
            ex = cx + side * (30.0 + rng.normal(0.0, 1.5))
            ey = cy - 26.0 + rng.normal(0.0, 1.5)
            # eye: a shallow arc
            strokes.append(_arc(ex, ey, 8.0, 3.0, np.pi, 2.0 * np.pi,
                                int(rng.integers(5, 8)), rng))
            if glasses:
                strokes.append(_arc(ex, ey, 17.0 * rng.normal(1.0, 0.05),
                                    15.0 * rng.normal(1.0, 0.05),
                                    0.0, 2.0 * np.pi,
                                    int(rng.integers(20, 27)), rng,
                                    closed=True))
        strokes = [np.clip(s, 1.0, 255.0) for s in strokes]
        order = rng.permutation(len(strokes))
        drawings.append(sketch.Drawing(
            f"toy-{k:05d}", 256.0, 256.0,
            [sketch.Stroke(strokes[i]) for i in order],
            labels={"glasses": 1 if glasses else -1}))
    return drawings, attributes_from_drawings(drawings)
