import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crophybrid.data import OTHERS, UNLABELED
from crophybrid.evaluation import (
    ClassPalette,
    ConfusionMatrix,
    MetricsError,
    PaletteError,
    VoteWarning,
    decode_map,
    parcel_metrics,
    parcel_vote,
    pixel_metrics,
    read_ppm,
    render_map,
    vote_plane,
    write_ppm,
)
from oracles import histogram_vote, tally_weighted_f1


def test_two_class_hand_counts():
    # class 1 is "positive": TP=3, FP=1, FN=1, TN=5
    truth = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0]
    pred = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    m = pixel_metrics(np.array(pred), np.array(truth))
    assert m.confusion.counts.tolist() == [[5, 1], [1, 3]]
    assert m.confusion.f1()[1] == pytest.approx(0.75, abs=1e-15)
    assert m.accuracy == pytest.approx(0.8)
    d = m.to_dict()
    assert d["per_class"]["1"] == {"p": 0.75, "r": 0.75, "f1": 0.75, "support": 4}
    assert json.loads(m.to_json())["confusion"] == [[5, 1], [1, 3]]


def test_identity_scores_one():
    plane = np.random.default_rng(0).integers(0, 4, (6, 6))
    m = pixel_metrics(plane, plane)
    assert m.accuracy == 1.0 and m.weighted_f1 == 1.0


def test_f1_defined_zero_without_predictions_or_support():
    cm = ConfusionMatrix.from_labels([0, 0], [0, 0], 3)
    assert cm.f1().tolist() == [1.0, 0.0, 0.0]
    assert cm.weighted_f1() == 1.0


@given(st.integers(0, 2**32 - 1))
def test_weighted_f1_matches_tally_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w, k = rng.integers(1, 11), rng.integers(1, 11), rng.integers(1, 6)
    truth = rng.integers(0, k, (h, w))
    pred = np.where(rng.random((h, w)) < 0.6, truth, rng.integers(0, k, (h, w)))
    mask = rng.random((h, w)) < 0.8
    mask.flat[0] = True
    m = pixel_metrics(pred, truth, mask=mask, classes=k)
    ref = tally_weighted_f1(truth[mask].tolist(), pred[mask].tolist())
    assert abs(m.weighted_f1 - ref) <= 1e-12
    assert 0.0 <= m.weighted_f1 <= 1.0
    assert (m.weighted_f1 == 1.0) == bool(np.all(pred[mask] == truth[mask]))
    assert m.confusion.total == int(mask.sum()) and np.all(m.confusion.counts >= 0)


def test_default_mask_drops_unlabeled():
    truth = np.array([[0, UNLABELED], [1, 1]])
    pred = np.array([[0, 1], [1, 0]])
    m = pixel_metrics(pred, truth)
    assert m.confusion.total == 3 and m.accuracy == pytest.approx(2 / 3)


def test_metric_errors():
    with pytest.raises(MetricsError):
        pixel_metrics(np.zeros((2, 2), int), np.full((2, 2), UNLABELED))
    with pytest.raises(MetricsError):
        pixel_metrics(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(MetricsError):
        ConfusionMatrix.from_labels([0, 5], [0, 1], 2)


def test_vote_examples():
    ids = np.array([1, 1, 1, 2, 2])
    assert parcel_vote(np.array([2, 2, 3, 1, 2]), ids) == {1: 2, 2: 1}


@given(st.integers(0, 2**32 - 1))
def test_vote_matches_histogram_oracle_and_ignores_order(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 200))
    ids = rng.integers(1, 12, n)
    pred = rng.integers(0, 4, n)
    got = parcel_vote(pred, ids, classes=4)
    for pid in np.unique(ids):
        assert got[int(pid)] == histogram_vote(pred[ids == pid].tolist())
    perm = rng.permutation(n)
    assert parcel_vote(pred[perm], ids[perm], classes=4) == got


def test_vote_skips_parcels_without_predictions():
    ids = np.array([1, 1, 2, 0])
    pred = np.array([0, 0, -1, 1])
    with pytest.warns(VoteWarning):
        assert parcel_vote(pred, ids) == {1: 0}


def test_parcel_metrics_counting():
    truth = {1: 0, 2: 1, 3: 1, 4: 2}
    assert parcel_metrics({1: 0, 2: 1, 3: 1, 4: 2}, truth).accuracy == 1.0
    m = parcel_metrics({1: 0, 2: 1, 3: 0, 4: 2}, truth)
    assert m.accuracy == 0.75 and m.unit == "parcel" and m.confusion.total == 4


def test_parcel_metrics_can_fall_below_pixel_metrics():
    # one large parcel mostly right, five single-pixel parcels wrong
    ids = np.array([1] * 10 + [2, 3, 4, 5, 6])
    truth = np.array([0] * 10 + [1] * 5)
    pred = np.array([0] * 6 + [1] * 4 + [0] * 5)
    pix = pixel_metrics(pred, truth)
    voted = parcel_vote(pred, ids)
    par = parcel_metrics(voted, {i: (0 if i == 1 else 1) for i in range(1, 7)})
    assert pix.accuracy == pytest.approx(6 / 15)
    assert par.accuracy == pytest.approx(1 / 6)
    assert par.accuracy < pix.accuracy


@given(st.integers(0, 2**32 - 1))
def test_single_pixel_parcels_equal_pixel_metrics(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 60))
    truth = rng.integers(0, 3, n)
    pred = rng.integers(0, 3, n)
    ids = np.arange(1, n + 1)
    pix = pixel_metrics(pred, truth, classes=3)
    par = parcel_metrics(parcel_vote(pred, ids, 3), dict(zip(ids.tolist(), truth.tolist())), classes=3)
    assert par.accuracy == pix.accuracy and par.weighted_f1 == pix.weighted_f1
    assert np.array_equal(par.confusion.counts, pix.confusion.counts)


def test_vote_plane():
    ids = np.array([[1, 1], [0, 2]])
    assert vote_plane({1: 3, 2: 0}, ids).tolist() == [[3, 3], [UNLABELED, 0]]


NAMES = ["Alfalfa", "Wheat", OTHERS]


def test_p6_golden_bytes(tmp_path):
    palette = ClassPalette({"Alfalfa": (255, 0, 0), "Wheat": (0, 0, 255), OTHERS: (0, 0, 0)})
    render_map(np.array([[0, 1], [1, 0]]), palette, NAMES, tmp_path / "m.ppm")
    golden = b"P6\n2 2\n255\n" + bytes([255, 0, 0, 0, 0, 255, 0, 0, 255, 255, 0, 0])
    assert (tmp_path / "m.ppm").read_bytes() == golden


def test_others_and_unlabeled_are_black(tmp_path):
    palette = ClassPalette.default(NAMES)
    rgb = render_map(np.full((3, 4), 2), palette, NAMES, tmp_path / "o.ppm")
    assert not rgb.any() and rgb.shape == (3, 4, 3)
    rgb = render_map(np.full((2, 2), UNLABELED), palette, NAMES, tmp_path / "u.ppm")
    assert not rgb.any()


def test_render_parse_round_trip(tmp_path):
    labels = np.random.default_rng(1).integers(0, 3, (5, 7))
    palette = ClassPalette.default(NAMES)
    render_map(labels, palette, NAMES, tmp_path / "r.ppm")
    assert np.array_equal(decode_map(read_ppm(tmp_path / "r.ppm"), palette, NAMES), labels)


def test_read_ppm_with_comment(tmp_path):
    rgb = np.arange(18, dtype=np.uint8).reshape(2, 3, 3)
    write_ppm(tmp_path / "a.ppm", rgb)
    raw = (tmp_path / "a.ppm").read_bytes()
    (tmp_path / "b.ppm").write_bytes(raw.replace(b"P6\n", b"P6\n# note\n", 1))
    assert np.array_equal(read_ppm(tmp_path / "b.ppm"), rgb)


def test_palette_errors(tmp_path):
    with pytest.raises(PaletteError):
        render_map(np.array([[0, 1]]), ClassPalette({"Alfalfa": (1, 2, 3)}), ["Alfalfa", "Wheat"], tmp_path / "x")
    with pytest.raises(PaletteError):
        ClassPalette({"a": (1, 2, 3), "b": (1, 2, 3)})
    with pytest.raises(PaletteError):
        ClassPalette({OTHERS: (9, 9, 9)})
    with pytest.raises(PaletteError):
        ClassPalette({"a": (0, 0, 0)})
    with pytest.raises(PaletteError):
        render_map(np.array([[5]]), ClassPalette.default(NAMES), NAMES, tmp_path / "y")
