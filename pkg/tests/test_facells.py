"""Tests for per-point scoring, line filtering, and FaCell composition."""

from __future__ import annotations

import numpy as np
import pytest

from facells_kit.errors import DataError
from facells_kit.facells import (
    FaCellSpec,
    FilterResult,
    PointScores,
    cell_trace,
    compose_facell,
    filter_lines,
    per_point_scores,
)
from facells_kit.model import (
    ModelConfig,
    forward,
    init_params,
    make_batch,
    parse_config,
)
from facells_kit.sketch import Drawing, Stroke


def random_model(name, seed, outputs=1):
    cfg = parse_config(name, outputs=outputs)
    return cfg, init_params(cfg, np.random.default_rng(seed))


def scores_for(d: Drawing, values, logit=None, attributes=None):
    values = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    logit = np.array([values.mean() if logit is None else logit])
    return PointScores(id=d.id, scores=values, logits=logit,
                       attributes=attributes)


def two_stroke_drawing():
    return Drawing("d", 64.0, 64.0, [
        Stroke([[4.0, 4.0], [10.0, 4.0], [16.0, 4.0]]),
        Stroke([[30.0, 30.0], [30.0, 40.0]]),
    ])


# ---------------------------------------------------------------------------
# per-point scores


def test_mean_of_point_scores_equals_global_logit(rng):
    cfg, params = random_model("1bi(8)-ga-d1", 3)
    for _ in range(20):
        triples = rng.normal(size=(int(rng.integers(2, 40)), 3))
        ps = per_point_scores(cfg, params, triples)
        assert abs(ps.scores.mean(axis=0)[0] - ps.logits[0]) < 1e-9


def test_identity_holds_for_multilabel(rng):
    cfg, params = random_model("1bi(6)-ga-d1", 5, outputs=4)
    triples = rng.normal(size=(25, 3))
    ps = per_point_scores(cfg, params, triples,
                          attributes=("a", "b", "c", "d"))
    assert np.abs(ps.scores.mean(axis=0) - ps.logits).max() < 1e-9
    assert ps.scores.shape == (25, 4)


def test_constant_hidden_scores_equal_logit(rng):
    # zero LSTM weights give all-zero hidden states, so every per-point
    # score collapses to the output bias, as does the global logit
    cfg, params = random_model("1bi(4)-ga-d1", 0)
    params = {k: np.zeros_like(v) for k, v in params.items()}
    params["out.b"] = np.array([0.7])
    ps = per_point_scores(cfg, params, rng.normal(size=(9, 3)))
    assert np.all(ps.scores == 0.7)
    assert ps.logits[0] == pytest.approx(0.7, abs=1e-15)


def test_per_point_scores_refuses_unsupported_heads(rng):
    cfg_fs, params_fs = random_model("1bi(4)-fs-d1", 1)
    with pytest.raises(DataError, match="ga"):
        per_point_scores(cfg_fs, params_fs, rng.normal(size=(5, 3)))
    cfg_d40, params_d40 = random_model("1bi(4)-ga-d40(6)", 2)
    with pytest.raises(DataError, match="d1"):
        per_point_scores(cfg_d40, params_d40, rng.normal(size=(5, 3)))


def test_multilabel_column_matches_single_output_model(rng):
    cfg, params = random_model("1bi(5)-ga-d1", 7, outputs=3)
    triples = rng.normal(size=(12, 3))
    ps_all = per_point_scores(cfg, params, triples)
    for k in range(3):
        single_cfg = ModelConfig(lstm_layers=cfg.lstm_layers, head=cfg.head,
                                 outputs=1)
        single_params = dict(params)
        single_params["out.W"] = params["out.W"][:, k:k + 1]
        single_params["out.b"] = params["out.b"][k:k + 1]
        ps_k = per_point_scores(single_cfg, single_params, triples)
        assert np.abs(ps_all.scores[:, k] - ps_k.scores[:, 0]).max() < 1e-12
        assert abs(ps_all.logits[k] - ps_k.logits[0]) < 1e-12


def test_point_scores_validation():
    with pytest.raises(DataError):
        PointScores("x", np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(DataError):
        PointScores("x", np.zeros((3, 2)), np.zeros(2), attributes=("a",))
    ps = PointScores("x", np.zeros((3, 2)), np.zeros(2),
                     attributes=("a", "b"))
    assert ps.column("b") == 1
    with pytest.raises(DataError, match="no scores"):
        ps.column("c")
    with pytest.raises(DataError, match="attribute name"):
        ps.column(None)


# ---------------------------------------------------------------------------
# cell traces


def test_cell_trace_shapes_and_range(rng):
    cfg, params = random_model("3bi(5)-ga-d1", 9)
    triples = rng.normal(size=(14, 3))
    fw, bw = cell_trace(cfg, params, triples, layer=2, cell=0)
    assert fw.shape == (14,) and bw.shape == (14,)
    assert np.abs(fw).max() < 1.0 and np.abs(bw).max() < 1.0


def test_cell_trace_zero_model_is_zero(rng):
    cfg, params = random_model("1bi(4)-ga-d1", 0)
    params = {k: np.zeros_like(v) for k, v in params.items()}
    fw, bw = cell_trace(cfg, params, rng.normal(size=(6, 3)), 0, 3)
    assert np.all(fw == 0.0) and np.all(bw == 0.0)


def test_cell_trace_unidirectional_has_no_backward(rng):
    cfg = ModelConfig(lstm_layers=((4, False),), head="ga")
    params = init_params(cfg, rng)
    fw, bw = cell_trace(cfg, params, rng.normal(size=(5, 3)), 0, 1)
    assert fw.shape == (5,) and bw is None


def test_cell_trace_index_errors(rng):
    cfg, params = random_model("1bi(4)-ga-d1", 2)
    triples = rng.normal(size=(4, 3))
    with pytest.raises(DataError, match="layer"):
        cell_trace(cfg, params, triples, 1, 0)
    with pytest.raises(DataError, match="cell"):
        cell_trace(cfg, params, triples, 0, 4)


# ---------------------------------------------------------------------------
# filtering


def test_filter_lines_threshold_and_fraction():
    d = two_stroke_drawing()
    ps = scores_for(d, [5.0, 20.0, 3.0, 12.0, 11.0])
    spec = FaCellSpec(attribute="a", count=1, threshold=10.0)
    result = filter_lines(d, ps, spec, line_fraction=0.5)
    assert result.point_mask.tolist() == [False, True, False, True, True]
    assert result.stroke_mask.tolist() == [False, True]
    assert len(result.drawing.strokes) == 1
    assert result.drawing.strokes[0] == d.strokes[1]


def test_filter_lines_very_low_threshold_passes_everything():
    d = two_stroke_drawing()
    ps = scores_for(d, [5.0, 20.0, 3.0, 12.0, 11.0])
    spec = FaCellSpec(attribute="a", count=1, threshold=-1e18)
    result = filter_lines(d, ps, spec)
    assert result.point_mask.all() and result.stroke_mask.all()


def test_filter_lines_negative_polarity():
    d = Drawing("d", 64.0, 64.0,
                [Stroke([[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]])])
    ps = scores_for(d, [-15.0, 0.0, 12.0])
    spec = FaCellSpec(attribute="a", count=1, threshold=10.0,
                      polarity="negative")
    result = filter_lines(d, ps, spec)
    assert result.point_mask.tolist() == [True, False, False]


def test_filter_lines_monotone_in_threshold(rng):
    d = two_stroke_drawing()
    ps = scores_for(d, rng.normal(scale=10.0, size=5))
    previous = None
    for y in np.linspace(-30.0, 30.0, 13):
        mask = filter_lines(d, ps, FaCellSpec("a", 1, y)).point_mask
        if previous is not None:
            assert not np.any(mask & ~previous)  # raising Y never adds
        previous = mask


def test_filter_lines_misaligned_scores():
    d = two_stroke_drawing()
    with pytest.raises(DataError, match="scores cover"):
        filter_lines(d, scores_for(d, [1.0, 2.0]), FaCellSpec("a", 1, 0.0))


def test_facell_spec_validation():
    with pytest.raises(DataError):
        FaCellSpec("a", 0, 1.0)
    with pytest.raises(DataError):
        FaCellSpec("a", 1, 1.0, polarity="both")


# ---------------------------------------------------------------------------
# composition


def dot_drawing(id, x, y, x2, y2):
    return Drawing(id, 64.0, 64.0, [Stroke([[x, y], [x2, y2]])])


def test_compose_single_drawing_is_a_dot_plot():
    d = two_stroke_drawing()
    ps = scores_for(d, [5.0] * 5, logit=1.0)
    img = compose_facell([(d, ps)], FaCellSpec("a", 1, 0.0))
    assert img.mass.sum() == 5.0
    expected = np.zeros((64, 64))
    pts = np.concatenate([s.points for s in d.strokes])
    np.add.at(expected, (np.round(pts[:, 1]).astype(int),
                         np.round(pts[:, 0]).astype(int)), 1.0)
    assert np.array_equal(img.mass, expected)
    assert img.used_ids == ("d",)


def test_compose_two_disjoint_points():
    # one passing point per drawing: exactly two marked pixels
    d1 = dot_drawing("a", 5.0, 5.0, 50.0, 50.0)
    d2 = dot_drawing("b", 20.0, 37.0, 50.0, 50.0)
    ps1 = scores_for(d1, [8.0, -8.0], logit=1.0)
    ps2 = scores_for(d2, [9.0, -9.0], logit=2.0)
    img = compose_facell([(d1, ps1), (d2, ps2)], FaCellSpec("a", 2, 0.0))
    assert img.mass.sum() == 2.0
    assert img.mass[5, 5] == 1.0 and img.mass[37, 20] == 1.0


def test_compose_skips_non_positive_predictions():
    d1 = dot_drawing("a", 5.0, 5.0, 6.0, 5.0)
    d2 = dot_drawing("b", 9.0, 9.0, 10.0, 9.0)
    items = [(d1, scores_for(d1, [4.0, 4.0], logit=-1.0)),
             (d2, scores_for(d2, [4.0, 4.0], logit=3.0))]
    img = compose_facell(items, FaCellSpec("a", 1, 0.0))
    assert img.used_ids == ("b",)  # d1 predicted negative, skipped
    with pytest.raises(DataError, match="only 1 .* need 2"):
        compose_facell(items, FaCellSpec("a", 2, 0.0))


def test_compose_negative_polarity_qualifier():
    d = dot_drawing("a", 5.0, 5.0, 6.0, 5.0)
    items = [(d, scores_for(d, [-20.0, -20.0], logit=-2.0))]
    spec = FaCellSpec("a", 1, 10.0, polarity="negative")
    img = compose_facell(items, spec)
    assert img.mass.sum() == 2.0  # both points below -10, logit negative


def test_compose_permutation_invariant(rng):
    drawings = [dot_drawing(f"d{i}", float(2 * i + 1), 7.0,
                            float(2 * i + 1), 9.0) for i in range(6)]
    items = [(d, scores_for(d, rng.normal(scale=5.0, size=2), logit=1.0))
             for d in drawings]
    spec = FaCellSpec("a", 6, 0.0)
    forward_img = compose_facell(items, spec)
    backward_img = compose_facell(items[::-1], spec)
    assert np.array_equal(forward_img.mass, backward_img.mass)


def test_compose_rejects_mismatched_canvas():
    d1 = dot_drawing("a", 5.0, 5.0, 6.0, 5.0)
    d2 = Drawing("b", 32.0, 64.0, [Stroke([[1.0, 1.0], [2.0, 2.0]])])
    items = [(d1, scores_for(d1, [1.0, 1.0], logit=1.0)),
             (d2, scores_for(d2, [1.0, 1.0], logit=1.0))]
    with pytest.raises(DataError, match="canvas"):
        compose_facell(items, FaCellSpec("a", 2, 0.0))


def test_compose_takes_first_x_qualifying():
    drawings = [dot_drawing(f"d{i}", float(i + 1), 3.0, float(i + 1), 5.0)
                for i in range(5)]
    items = [(d, scores_for(d, [1.0, 1.0], logit=1.0)) for d in drawings]
    img = compose_facell(items, FaCellSpec("a", 3, 0.0))
    assert img.used_ids == ("d0", "d1", "d2")
    assert img.mass.sum() == 6.0


def test_image_outputs():
    d = two_stroke_drawing()
    ps = scores_for(d, [5.0] * 5, logit=1.0)
    img = compose_facell([(d, ps)], FaCellSpec("a", 1, 0.0))
    svg = img.to_svg()
    assert svg.startswith("<svg") and svg.count("<circle") == 5
    pgm = img.to_pgm()
    assert pgm.startswith(b"P5\n64 64\n255\n")
    assert len(pgm) == len(b"P5\n64 64\n255\n") + 64 * 64
    assert img.region_mass(0, 0, 64, 64) == 5.0
    assert img.region_mass(25, 25, 35, 45) == 2.0  # second stroke only


def test_scores_from_real_model_align_with_forward(rng):
    # the scored global logit matches the model's own probability route
    cfg, params = random_model("1bi(6)-ga-d1", 11)
    triples = rng.normal(size=(10, 3))
    ps = per_point_scores(cfg, params, triples)
    probs, _ = forward(cfg, params, make_batch([triples], [0.0]))
    from scipy.special import expit
    assert abs(expit(ps.logits[0]) - probs[0, 0]) < 1e-12
