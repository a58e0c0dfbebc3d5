import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdl.boxes import BBox, iou
from bdl.detect import Detection
from bdl.evaluate import GroundTruth, curve, evaluate, log_average_miss_rate, match, reasonable_filter
from oracle import brute_force_lamr


def det(x, y, w, h, s):
    return Detection(BBox(x, y, w, h), s)


def gt(x, y, w, h, occ=0.0):
    return GroundTruth(BBox(x, y, w, h), occ)


def test_reasonable_filter_examples():
    keep = reasonable_filter([gt(0, 0, 20, 49), gt(0, 0, 20, 50), gt(0, 0, 30, 80, 0.4), gt(0, 0, 30, 80, 0.35)])
    assert [(g.box.h, g.occlusion) for g in keep] == [(50, 0.0), (80, 0.35)]
    with pytest.raises(ValueError):
        gt(0, 0, 10, 10, 1.5)


def test_iou_examples():
    assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0
    assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 10, 10)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 10, 10)) == 0.0


boxes = st.builds(
    BBox, st.integers(-20, 20), st.integers(-20, 20), st.integers(1, 30), st.integers(1, 30)
)


@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert v == iou(b, a) and 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b)


def test_match_examples():
    r = match([det(0, 0, 10, 10, 0.9)], [gt(0, 0, 10, 10)])
    assert (r.tp, r.fp, r.missed) == (1, 0, 0)
    r = match([det(0, 0, 10, 10, 0.9)], [gt(5, 0, 10, 10)])
    assert (r.tp, r.fp, r.missed) == (0, 1, 1)
    r = match([det(0, 0, 10, 10, 0.9), det(1, 0, 10, 10, 0.8)], [gt(0, 0, 10, 10)])
    assert (r.tp, r.fp, r.missed) == (1, 1, 0)


def test_match_prefers_highest_iou_then_lower_index():
    gts = [gt(2, 0, 10, 10), gt(0, 0, 10, 10), gt(0, 0, 10, 10)]
    r = match([det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.5)], gts)
    assert r.scored == [(0.9, True), (0.5, True)] and r.tp == 2 and r.missed == 1


def test_curve_examples():
    # 2 images, 2 truths, one TP at 0.9 and one FP at 0.8
    res = [match([det(0, 0, 10, 10, 0.9)], [gt(0, 0, 10, 10)]), match([det(50, 50, 5, 5, 0.8)], [gt(0, 0, 10, 10)])]
    c = curve(res, 2, 2)
    assert c.points == [(0.9, 0.0, 0.5), (0.8, 0.5, 0.5)]
    assert c.lamr == pytest.approx(0.5, abs=1e-15)
    none = curve([match([], [gt(0, 0, 10, 10)])], 1, 1)
    assert none.lamr == 1.0 and none.points == []
    perfect = curve([match([det(0, 0, 10, 10, 0.9)], [gt(0, 0, 10, 10)])], 1, 1)
    assert perfect.lamr == pytest.approx(1e-10)
    with pytest.raises(ValueError):
        curve([], 1, 0)


def test_lamr_reference_points():
    lamr, sampled = log_average_miss_rate([(0.5, 0.1, 0.4), (0.3, 0.5, 0.2)])
    assert [f for f, _ in sampled] == pytest.approx([10 ** (-2 + k / 4) for k in range(9)])
    mrs = [mr for _, mr in sampled]
    assert mrs == [1.0, 1.0, 1.0, 1.0, 0.4, 0.4, 0.4, 0.2, 0.2]
    assert lamr == pytest.approx(math.exp((3 * math.log(0.4) + 2 * math.log(0.2)) / 9))


def test_evaluate_applies_filter_and_counts_empty_images():
    truths = {"a": [gt(0, 0, 20, 60)], "b": [gt(0, 0, 10, 30)], "c": []}
    c = evaluate({"a": [det(0, 0, 20, 60, 0.7)], "c": [det(0, 0, 20, 60, 0.6)]}, truths)
    assert c.points == [(0.7, 0.0, 0.0), (0.6, 1 / 3, 0.0)]
    with pytest.raises(ValueError, match="without annotations"):
        evaluate({"zzz": []}, truths)


def test_curve_csv(tmp_path):
    res = [match([det(0, 0, 10, 10, 0.9)], [gt(0, 0, 10, 10)])]
    c = curve(res, 1, 2)
    c.write_csv(tmp_path / "c.csv")
    c.write_reference_csv(tmp_path / "r.csv")
    assert (tmp_path / "c.csv").read_text() == "threshold,fppi,miss_rate\n0.900000,0.000000,0.500000\n"
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 10


small_box = st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(5, 20), st.integers(50, 70))
image_case = st.tuples(
    st.lists(st.tuples(small_box, st.sampled_from([0.1, 0.2, 0.35, 0.5, 0.7, 0.9])), max_size=5),
    st.lists(small_box, max_size=3),
)


@settings(max_examples=150, deadline=None)
@given(st.lists(image_case, min_size=1, max_size=4))
def test_matches_brute_force_oracle(images):
    dets = {f"i{n}": [det(*b, s) for b, s in d] for n, (d, _) in enumerate(images)}
    truths = {f"i{n}": [gt(*b) for b in g] for n, (_, g) in enumerate(images)}
    if not any(truths.values()):
        return
    ours = evaluate(dets, truths, reasonable=False)
    ref_lamr, ref_points = brute_force_lamr([(list(d), list(g)) for d, g in images])
    assert abs(ours.lamr - ref_lamr) <= 1e-12
    assert sorted((f, m) for _, f, m in ours.points) == pytest.approx(sorted(ref_points), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(image_case, min_size=1, max_size=3))
def test_lamr_invariant_to_duplication(images):
    dets = {f"i{n}": [det(*b, s) for b, s in d] for n, (d, _) in enumerate(images)}
    truths = {f"i{n}": [gt(*b) for b in g] for n, (_, g) in enumerate(images)}
    if not any(truths.values()):
        return
    doubled_d = {**dets, **{k + "x": v for k, v in dets.items()}}
    doubled_t = {**truths, **{k + "x": v for k, v in truths.items()}}
    assert evaluate(doubled_d, doubled_t, reasonable=False).lamr == pytest.approx(
        evaluate(dets, truths, reasonable=False).lamr, rel=1e-12
    )


def test_raising_tp_score_never_increases_lamr():
    truths = {"a": [gt(0, 0, 20, 60)], "b": [gt(30, 0, 20, 60)]}
    base = {"a": [det(0, 0, 20, 60, 0.4), det(40, 40, 10, 30, 0.6)], "b": [det(30, 0, 20, 60, 0.5)]}
    raised = {"a": [det(0, 0, 20, 60, 0.95), det(40, 40, 10, 30, 0.6)], "b": base["b"]}
    assert evaluate(raised, truths).lamr <= evaluate(base, truths).lamr
