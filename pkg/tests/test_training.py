"""Tests for dataset ingestion, staged training, and the comparison harness."""

from __future__ import annotations

import numpy as np
import pytest

from facells_kit.errors import DataError
from facells_kit.model import load_checkpoint
from facells_kit.training import (
    AttributeTable,
    ExperimentPlan,
    STAGE_PRESETS,
    attributes_from_drawings,
    bucket_batches,
    compare_matrix,
    encode_for_plan,
    load_attributes,
    make_toy_dataset,
    metrics_to_csv,
    parse_plan,
    plan_to_text,
    predict_probs,
    run_stage,
    split,
    write_attributes,
)

TOY_FILE = """2
Male Young
a.jpg 1 -1
b.jpg -1 1
"""


def write(tmp_path, text, name="attrs.txt"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# attribute files


def test_load_attributes_toy_file(tmp_path):
    table = load_attributes(write(tmp_path, TOY_FILE))
    assert table.names == ("Male", "Young")
    assert list(table.vector("a.jpg")) == [1.0, 0.0]
    assert list(table.vector("b.jpg")) == [0.0, 1.0]
    assert len(table) == 2


def test_load_attributes_empty_table(tmp_path):
    table = load_attributes(write(tmp_path, "0\nMale Young\n"))
    assert len(table) == 0


def test_load_attributes_names_errors(tmp_path):
    with pytest.raises(DataError, match="line 3"):
        load_attributes(write(tmp_path, "1\nA B\nx.jpg 1\n"))  # short row
    with pytest.raises(DataError, match="line 4"):
        load_attributes(write(tmp_path, "2\nA\nx.jpg 1\ny.jpg 2\n"))
    with pytest.raises(DataError, match="declares 5"):
        load_attributes(write(tmp_path, "5\nA\nx.jpg 1\n"))
    with pytest.raises(DataError, match="duplicate id"):
        load_attributes(write(tmp_path, "2\nA\nx.jpg 1\nx.jpg -1\n"))


def test_write_attributes_round_trip(tmp_path):
    table = load_attributes(write(tmp_path, TOY_FILE))
    out = tmp_path / "copy.txt"
    write_attributes(table, out)
    again = load_attributes(out)
    assert again.names == table.names
    for image_id in table.targets:
        assert np.array_equal(again.vector(image_id), table.vector(image_id))


def test_columns_selects_and_orders(tmp_path):
    table = load_attributes(write(tmp_path, TOY_FILE))
    mat = table.columns(["b.jpg", "a.jpg"], ["Young", "Male"])
    assert mat.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    with pytest.raises(DataError, match="unknown attribute"):
        table.columns(["a.jpg"], ["Smiling"])
    with pytest.raises(DataError, match="no attribute row"):
        table.columns(["z.jpg"], ["Male"])


def test_attributes_from_drawings():
    drawings, table = make_toy_dataset(6, seed=1)
    assert table.names == ("glasses",)
    for d in drawings:
        expected = 1.0 if d.labels["glasses"] == 1 else 0.0
        assert table.vector(d.id)[0] == expected


# ---------------------------------------------------------------------------
# splits


def test_split_sizes_and_disjointness():
    ids = [f"img{i}" for i in range(100)]
    train, test = split(ids, (0.30, 0.15), seed=7)
    assert len(train) == 30 and len(test) == 15
    assert not set(train) & set(test)
    assert set(train) | set(test) <= set(ids)


def test_split_deterministic_per_seed():
    ids = list(range(50))
    assert split(ids, (0.5, 0.2), 3) == split(ids, (0.5, 0.2), 3)
    assert split(ids, (0.5, 0.2), 3) != split(ids, (0.5, 0.2), 4)


def test_split_95_5_sizes():
    train, test = split(range(2000), STAGE_PRESETS["stage2"]["split"], 0)
    assert len(train) == 1900 and len(test) == 100


def test_split_rejects_bad_fractions():
    with pytest.raises(DataError):
        split(range(10), (0.8, 0.3), 0)
    with pytest.raises(DataError):
        split(range(10), (-0.1, 0.5), 0)


# ---------------------------------------------------------------------------
# plans


def test_plan_text_round_trip():
    plan = ExperimentPlan(format="relative", ordering="random",
                          config="3bi(6)-ga-d40", attributes=("a", "b"),
                          split=(0.6, 0.2), epochs=4, seed=9, lr=0.01,
                          batch_size=16, normalized=False)
    assert parse_plan(plan_to_text(plan)) == plan


def test_parse_plan_stage_preset_and_comments():
    plan = parse_plan("""
        # stage II preset
        stage = stage2
        config = 3bi-ga-d1
        attributes = glasses
    """)
    assert plan.split == (0.95, 0.05)
    assert plan.epochs == 10
    assert plan.config == "3bi-ga-d1"


def test_parse_plan_rejects_garbage():
    with pytest.raises(DataError, match="unknown key"):
        parse_plan("fmt=absolute\n")
    with pytest.raises(DataError, match="duplicate key"):
        parse_plan("seed=1\nseed=2\n")
    with pytest.raises(DataError, match="key=value"):
        parse_plan("seed\n")
    with pytest.raises(DataError, match="cannot parse"):
        parse_plan("epochs=ten\n")
    with pytest.raises(DataError, match="unknown stage"):
        parse_plan("stage=stage9\n")


def test_plan_validation():
    with pytest.raises(DataError):
        ExperimentPlan(format="polar")
    with pytest.raises(DataError):
        ExperimentPlan(ordering="shuffled")
    with pytest.raises(DataError):
        ExperimentPlan(epochs=0)
    with pytest.raises(DataError):
        ExperimentPlan(split=(0.9, 0.2))
    with pytest.raises(DataError):
        ExperimentPlan(attributes=())


# ---------------------------------------------------------------------------
# encoding and batching


def test_encode_for_plan_formats():
    drawings, _ = make_toy_dataset(3, seed=0)
    plan_abs = ExperimentPlan(format="absolute")
    plan_rel = ExperimentPlan(format="relative")
    seqs_abs = encode_for_plan(drawings, plan_abs)
    seqs_rel = encode_for_plan(drawings, plan_rel)
    for a, r, d in zip(seqs_abs, seqs_rel, drawings):
        assert a.shape == (d.n_points, 3)
        assert a.shape == r.shape
        # normalized absolute coordinates live in [-1, 1]
        assert np.abs(a[:, :2]).max() <= 1.0
        # relative deltas integrate back to the absolute endpoint
        assert np.allclose(r[:, :2].sum(axis=0), a[-1, :2], atol=1e-9)


def test_min_length_ordering_sorts_training_input():
    drawings, _ = make_toy_dataset(4, seed=5)
    plan = ExperimentPlan(ordering="min_length")
    ordered = encode_for_plan(drawings, plan)
    shuffled = encode_for_plan(drawings, ExperimentPlan(ordering="identity"))
    assert any(not np.array_equal(a, b)
               for a, b in zip(ordered, shuffled))


def test_bucket_batches_partition():
    lengths = [5, 3, 9, 3, 7, 1, 4]
    buckets = bucket_batches(lengths, 3)
    flat = np.concatenate(buckets)
    assert sorted(flat.tolist()) == list(range(7))
    assert all(len(b) <= 3 for b in buckets)
    # batches see non-decreasing lengths
    seen = [lengths[i] for b in buckets for i in b]
    assert seen == sorted(seen)


def test_predict_probs_alignment(rng):
    from facells_kit.model import forward, init_params, make_batch, \
        parse_config
    cfg = parse_config("1bi(4)-ga-d1")
    params = init_params(cfg, rng)
    seqs = [rng.normal(size=(rng.integers(2, 9), 3)) for _ in range(11)]
    probs = predict_probs(cfg, params, seqs, batch_size=4)
    for k, s in enumerate(seqs):
        single, _ = forward(cfg, params, make_batch([s], [0.0]))
        assert abs(probs[k, 0] - single[0, 0]) < 1e-12


# ---------------------------------------------------------------------------
# toy dataset


def test_toy_dataset_basic_shape():
    drawings, table = make_toy_dataset(2, seed=11)
    assert len(drawings) == 2
    for d in drawings:
        assert d.labels["glasses"] in (-1, 1)
        assert d.width == 256.0 and d.height == 256.0
        # oval + mouth + 2 eyes, plus 2 glasses circles when labeled
        expected = 6 if d.labels["glasses"] == 1 else 4
        assert len(d.strokes) == expected


def test_toy_dataset_label_balance():
    _, table = make_toy_dataset(4000, seed=3)
    mean = np.mean([v[0] for v in table.targets.values()])
    assert abs(mean - 0.5) < 0.025


def test_toy_dataset_deterministic():
    a, _ = make_toy_dataset(5, seed=42)
    b, _ = make_toy_dataset(5, seed=42)
    assert a == b
    c, _ = make_toy_dataset(5, seed=43)
    assert a != c


def test_toy_dataset_rejects_tiny_n():
    with pytest.raises(DataError):
        make_toy_dataset(1)


# ---------------------------------------------------------------------------
# training runs (kept tiny; the full protocol runs in the acceptance suite)


def small_plan(**overrides):
    base = dict(config="1bi(6)-ga-d1", epochs=2, split=(0.6, 0.4),
                batch_size=16, lr=3e-3, seed=0)
    base.update(overrides)
    return ExperimentPlan(**base)


def test_run_stage_metrics_and_artifacts(tmp_path):
    drawings, table = make_toy_dataset(60, seed=2)
    result = run_stage(small_plan(), drawings, table, out_dir=tmp_path)
    assert len(result.metrics) == 2 * 2  # epochs x {train, test}
    assert [r["split"] for r in result.metrics] == ["train", "test"] * 2
    assert all(np.isfinite(r["loss"]) for r in result.metrics)

    csv_text = (tmp_path / "metrics.csv").read_text()
    assert csv_text.splitlines()[0] == "epoch,split,loss,bacc_glasses"
    assert len(csv_text.splitlines()) == 5

    cfg, params, extras = load_checkpoint(tmp_path / "checkpoint.json")
    assert cfg == result.config
    assert extras["attributes"] == ["glasses"]
    eligible = (tmp_path / "eligible_attributes.txt").read_text().split()
    assert set(eligible) == set(result.eligible)


def test_run_stage_deterministic():
    drawings, table = make_toy_dataset(40, seed=8)
    r1 = run_stage(small_plan(), drawings, table)
    r2 = run_stage(small_plan(), drawings, table)
    assert r1.metrics == r2.metrics
    assert r1.train_ids == r2.train_ids


def test_run_stage_zero_lr_is_constant():
    drawings, table = make_toy_dataset(40, seed=8)
    result = run_stage(small_plan(lr=0.0, epochs=3), drawings, table)
    for split_name in ("train", "test"):
        losses = result.epoch_losses(split_name)
        assert losses == [losses[0]] * 3


def test_run_stage_learns_on_toy_data():
    drawings, table = make_toy_dataset(150, seed=4)
    result = run_stage(small_plan(epochs=5), drawings, table)
    losses = result.epoch_losses("train")
    assert losses[-1] < losses[0]


def test_run_stage_error_messages():
    drawings, table = make_toy_dataset(10, seed=0)
    with pytest.raises(DataError, match="valid config names"):
        run_stage(small_plan(config="4bi-ga-d1"), drawings, table)
    with pytest.raises(DataError, match="unknown attribute"):
        run_stage(small_plan(attributes=("hat",)), drawings, table)
    with pytest.raises(DataError, match="empty train or test"):
        run_stage(small_plan(split=(0.05, 0.0)), drawings, table)


def test_metrics_csv_shape():
    rows = [{"epoch": 1, "split": "train", "loss": 0.5, "bacc_a": 0.75},
            {"epoch": 1, "split": "test", "loss": 0.6,
             "bacc_a": float("nan")}]
    text = metrics_to_csv(rows, ["a"])
    lines = text.splitlines()
    assert lines[0] == "epoch,split,loss,bacc_a"
    assert lines[1] == "1,train,0.5,0.75"
    assert lines[2].startswith("1,test,0.6,nan")


# ---------------------------------------------------------------------------
# comparison harness


def test_compare_matrix_two_by_two():
    drawings, table = make_toy_dataset(48, seed=6)
    plans = [small_plan(format=f, ordering=o)
             for f in ("absolute", "relative")
             for o in ("min_length", "random")]
    report = compare_matrix(plans, drawings, table)
    assert report.test_losses.shape == (2, 4)
    assert sorted(report.ranking) == sorted(report.labels)
    lines = report.to_csv().splitlines()
    assert len(lines) == 3  # header + one row per epoch
    assert lines[0].count(",") == 4


def test_compare_matrix_identical_plans_identical_columns():
    drawings, table = make_toy_dataset(30, seed=9)
    report = compare_matrix([small_plan(), small_plan()], drawings, table)
    assert np.array_equal(report.test_losses[:, 0], report.test_losses[:, 1])
    assert report.labels[0] != report.labels[1]  # disambiguated


def test_compare_matrix_rejects_mismatched_plans():
    drawings, table = make_toy_dataset(20, seed=1)
    with pytest.raises(DataError, match="differ only in"):
        compare_matrix([small_plan(), small_plan(seed=5)], drawings, table)
    with pytest.raises(DataError, match="at least two"):
        compare_matrix([small_plan()], drawings, table)
