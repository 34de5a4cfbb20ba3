import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fogdet import evalkit, fogsim, oracles
from fogdet.evalkit import EvalPrediction


def test_iou_identical_boxes():
    b = (0.5, 0.5, 0.2, 0.4)
    assert evalkit.iou(b, b) == pytest.approx(1.0, abs=1e-15)


def test_iou_disjoint_boxes():
    assert evalkit.iou((0.2, 0.2, 0.1, 0.1), (0.8, 0.8, 0.1, 0.1)) == 0.0


def test_iou_hand_computed_half_shift():
    # unit squares shifted by half a side: overlap 0.5, union 1.5
    a = (0.5, 0.5, 1.0, 1.0)
    b = (1.0, 0.5, 1.0, 1.0)
    assert evalkit.iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_iou_degenerate_box_is_zero():
    assert evalkit.iou((0.5, 0.5, 0.0, 0.0), (0.5, 0.5, 0.0, 0.0)) == 0.0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_iou_symmetric_and_bounded(seed):
    gen = np.random.default_rng(seed)
    a = tuple(np.abs(gen.normal(0.5, 0.3, 4)))
    b = tuple(np.abs(gen.normal(0.5, 0.3, 4)))
    ab, ba = evalkit.iou(a, b), evalkit.iou(b, a)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert 0.0 <= ab <= 1.0 + 1e-12
    assert evalkit.iou(a, b) == pytest.approx(oracles.iou_ref(a, b), abs=1e-12)


def _one_gt():
    return {"im0": ([(0.5, 0.5, 0.2, 0.2)], [1])}


def test_ap_perfect_prediction():
    preds = [EvalPrediction("im0", (0.5, 0.5, 0.2, 0.2), 1, 0.9)]
    assert evalkit.average_precision(preds, _one_gt(), 1) == 1.0


def test_ap_no_predictions_is_zero():
    assert evalkit.average_precision([], _one_gt(), 1) == 0.0


def test_ap_undefined_without_ground_truth():
    preds = [EvalPrediction("im0", (0.5, 0.5, 0.2, 0.2), 3, 0.9)]
    assert evalkit.average_precision(preds, _one_gt(), 3) is None


def test_ap_one_match_per_ground_truth():
    # two identical hits on one GT box: second must count as false positive
    preds = [EvalPrediction("im0", (0.5, 0.5, 0.2, 0.2), 1, 0.9),
             EvalPrediction("im0", (0.5, 0.5, 0.2, 0.2), 1, 0.8)]
    assert evalkit.average_precision(preds, _one_gt(), 1) == 1.0
    got = evalkit.average_precision(preds + preds, _one_gt(), 1)
    assert got == 1.0  # envelope keeps the early perfect-precision point


def test_ap_false_positive_before_hit():
    preds = [EvalPrediction("im0", (0.9, 0.9, 0.05, 0.05), 1, 0.9),
             EvalPrediction("im0", (0.5, 0.5, 0.2, 0.2), 1, 0.8)]
    assert evalkit.average_precision(preds, _one_gt(), 1) == pytest.approx(0.5)


def test_map_requires_some_ground_truth():
    with pytest.raises(ValueError):
        evalkit.map50([], {"im0": ([], [])})


def test_map_averages_only_present_categories():
    gts = {"im0": ([(0.5, 0.5, 0.2, 0.2), (0.2, 0.2, 0.1, 0.1)], [0, 2])}
    preds = [EvalPrediction("im0", (0.5, 0.5, 0.2, 0.2), 0, 0.9)]
    out = evalkit.map50(preds, gts)
    assert out["per_category"]["circle"] == 1.0
    assert out["per_category"]["triangle"] == 0.0
    assert out["per_category"]["square"] is None
    assert out["map50"] == pytest.approx(0.5)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_map_matches_exhaustive_reference(seed):
    gen = np.random.default_rng(seed)
    gts, preds = {}, []
    for img in range(int(gen.integers(1, 4))):
        image_id = f"im{img}"
        n_gt = int(gen.integers(1, 5))
        boxes = [tuple(np.abs(gen.normal(0.5, 0.2, 4))) for _ in range(n_gt)]
        labels = [int(gen.integers(fogsim.NUM_CATEGORIES)) for _ in range(n_gt)]
        gts[image_id] = (boxes, labels)
        for _ in range(int(gen.integers(0, 6))):
            if gen.random() < 0.5:
                j = int(gen.integers(n_gt))
                box = tuple(np.abs(np.array(boxes[j]) + gen.normal(0, 0.05, 4)))
                cat = labels[j]
            else:
                box = tuple(np.abs(gen.normal(0.5, 0.2, 4)))
                cat = int(gen.integers(fogsim.NUM_CATEGORIES))
            preds.append(EvalPrediction(image_id, box, cat, float(gen.uniform())))
    got = evalkit.map50(preds, gts)["map50"]
    _, want = oracles.map50_ref([(p.image_id, p.box, p.category, p.confidence)
                                 for p in preds], gts, fogsim.NUM_CATEGORIES)
    assert abs(got - want) <= 1e-9


def test_predictions_from_output_thresholds(monkeypatch):
    class FakeOutput:
        def __init__(self, probs, boxes):
            self._probs = np.asarray(probs)
            self.boxes = type("B", (), {"data": np.asarray(boxes)})()

        def class_probs(self):
            return self._probs

    out = FakeOutput([[0.9, 0.05, 0.05],       # confident class 0
                      [0.02, 0.03, 0.95]],     # background-dominated
                     [[0.5, 0.5, 0.2, 0.2], [0.1, 0.1, 0.1, 0.1]])
    preds = evalkit.predictions_from_output(out, "imX", min_confidence=0.05)
    assert len(preds) == 1
    assert preds[0].category == 0 and preds[0].confidence == pytest.approx(0.9)
    assert preds[0].image_id == "imX"


def test_format_table_contains_all_rows():
    rows = [{"model": "baseline", "split": "high",
             "per_category": {c: 0.5 for c in fogsim.CATEGORIES},
             "map50": 0.5}]
    text = evalkit.format_table(rows)
    assert "baseline" in text and "high" in text and "0.500" in text
    assert text.splitlines()[0].split()[0] == "Model"
