import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ngrec import synthbench as sb
from ngrec.domain import ExpressionRecord, PredictionRecord, ScaleClass
from ngrec.errors import DuplicatePrediction, EmptyTally, InvariantViolation, LengthMismatch, NoNegativeSamples
from ngrec.matching import MatchOutcome, match
from ngrec.metrics import (
    Tally,
    count_metrics,
    evaluate,
    image_level_outcome,
    instance_metrics,
    n_acc,
    pr_at,
    scale_stratified_acc,
)

from conftest import det

tallies = st.builds(Tally, *[st.integers(0, 50)] * 4)


def outcome(tp=0, fp=0, fn=0, tn=0):
    return MatchOutcome(tuple((i, i, 1.0) for i in range(tp)), tuple(range(tp, tp + fp)),
                        tuple(range(tp, tp + fn)), tn)


class TestInstanceMetrics:
    def test_perfect(self):
        assert instance_metrics(Tally(tp=1)) == (1.0, 1.0)

    def test_hand_example(self):
        acc, f1 = instance_metrics(Tally(tp=3, fp=1, fn=2, tn=0))
        assert acc == 0.5
        assert f1 == pytest.approx(2 / 3, abs=1e-15)

    def test_all_true_negatives(self):
        assert instance_metrics(Tally(tn=5)) == (1.0, 0.0)

    def test_empty(self):
        with pytest.raises(EmptyTally):
            instance_metrics(Tally())

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            Tally(tp=-1)

    @given(tallies, tallies, tallies)
    def test_tally_sum_is_associative_and_commutative(self, a, b, c):
        assert (a + b) + c == a + (b + c)
        assert a + b == b + a


class TestImageLevel:
    def test_exact_cover(self):
        assert image_level_outcome(outcome(tp=4), True) == Tally(tp=1)

    def test_missing_box(self):
        assert image_level_outcome(outcome(tp=3, fn=1), True) == Tally(fp=1)

    def test_extra_box(self):
        assert image_level_outcome(outcome(tp=4, fp=1), True) == Tally(fp=1)

    def test_inaccurate_box(self):
        # a box below the IoU threshold is both an FP and an FN at instance level
        assert image_level_outcome(outcome(tp=1, fp=1, fn=1), True) == Tally(fp=1)

    def test_no_target_with_prediction(self):
        assert image_level_outcome(outcome(fp=1), False) == Tally(fp=1)

    def test_no_target_empty(self):
        assert image_level_outcome(outcome(tn=1), False) == Tally(tn=1)


class TestPrAt:
    def test_all_perfect(self):
        g = det(0, 0, 10, 10)
        assert pr_at([([g], [g]), ([g], [g])], 0.5) == 1.0

    def test_half(self):
        g = det(0, 0, 10, 10)
        assert pr_at([([g], [g]), ([], [g])], 0.5) == 0.5

    def test_iou_062_counts_at_06_not_07(self):
        g = det(0, 0, 100, 10)
        p = det(0, 0, 62, 10)
        assert pr_at([([p], [g])], 0.6) == 1.0
        assert pr_at([([p], [g])], 0.7) == 0.0

    def test_no_target_cases_ignored(self):
        assert math.isnan(pr_at([([], [])], 0.5))

    def test_monotone_in_threshold(self):
        rng = random.Random(3)
        cases = []
        for _ in range(200):
            gts = [det(rng.uniform(0, 50), rng.uniform(0, 50), 20, 20) for _ in range(rng.randint(1, 3))]
            preds = [det(g.box.x + rng.uniform(-6, 6), g.box.y + rng.uniform(-6, 6), 20, 20) for g in gts]
            cases.append((preds, gts))
        values = [pr_at(cases, t) for t in (0.5, 0.6, 0.7, 0.8, 0.9)]
        assert values == sorted(values, reverse=True)
        assert values[0] > values[-1]


class TestNAcc:
    def test_all_empty(self):
        assert n_acc([0, 0, 0]) == 1.0

    def test_one_of_four(self):
        assert n_acc([0, 2, 1, 3]) == 0.25

    def test_requires_negatives(self):
        with pytest.raises(NoNegativeSamples):
            n_acc([])

    def test_planted_spurious_answers(self):
        scenes = sb.generate(sb.SynthConfig(n_scenes=1000, seed=5, no_target_rate=1.0))
        preds = sb.answer_key(scenes)
        rng = random.Random(0)
        planted = set(rng.sample(range(len(preds)), 300))
        spurious = det(1, 1, 20, 20, score=0.9)
        preds = [PredictionRecord(p.expression_id, (spurious,)) if k in planted else p for k, p in enumerate(preds)]
        report = evaluate(sb.to_records(scenes), preds)
        assert report.n_acc == 0.7


class TestScaleStrata:
    def strat(self, preds, gts):
        return scale_stratified_acc([(match(preds, gts), preds, gts)])

    def test_all_large_matched(self):
        g = [det(0, 0, 100, 100), det(200, 0, 100, 100)]
        assert self.strat(g, g) == {ScaleClass.LARGE: 1.0}

    def test_small_missed_medium_matched(self):
        small, medium = det(0, 0, 10, 10), det(100, 100, 40, 40)
        assert self.strat([medium], [small, medium]) == {ScaleClass.SMALL: 0.0, ScaleClass.MEDIUM: 1.0}

    def test_area_1024_is_medium(self):
        g = det(0, 0, 32, 32)
        assert self.strat([g], [g]) == {ScaleClass.MEDIUM: 1.0}

    def test_three_instance_fixture(self):
        # small GT matched, large GT missed, spurious medium prediction
        small, large = det(0, 0, 20, 20), det(300, 300, 100, 100)
        fp_medium = det(100, 0, 50, 50)
        got = self.strat([small, fp_medium], [small, large])
        assert got == {ScaleClass.SMALL: 1.0, ScaleClass.MEDIUM: 0.0, ScaleClass.LARGE: 0.0}

    def test_fp_uses_predicted_box_size(self):
        gt = det(0, 0, 20, 20)  # small
        far = det(300, 300, 100, 100)  # large, unmatched
        got = self.strat([far], [gt])
        assert got == {ScaleClass.SMALL: 0.0, ScaleClass.LARGE: 0.0}


class TestCountMetrics:
    def test_identical(self):
        assert count_metrics([0, 1, 4], [0, 1, 7]) == (0.0, 1.0)

    def test_hand_example(self):
        assert count_metrics([0, 4], [1, 2]) == (1.5, 0.0)

    def test_large_count_maps_to_last_bin(self):
        assert count_metrics([4], [242]) == (0.0, 1.0)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            count_metrics([1], [1, 2])


def tiny_suite():
    gt = [
        ExpressionRecord("a", "i", (400, 400), "two cars", (det(0, 0, 20, 20), det(50, 50, 40, 40))),
        ExpressionRecord("b", "i", (400, 400), "a bus", (det(100, 100, 100, 100),)),
        ExpressionRecord("c", "i", (400, 400), "nothing", ()),
        ExpressionRecord("d", "i", (400, 400), "nothing again", ()),
    ]
    preds = [
        PredictionRecord("a", (det(0, 0, 20, 20, 0.9), det(50, 50, 40, 40, 0.8))),
        PredictionRecord("b", (det(150, 150, 100, 100, 0.7),)),
        PredictionRecord("c", ()),
        PredictionRecord("d", (det(0, 0, 5, 5, 0.6),)),
    ]
    return gt, preds


class TestEvaluate:
    def test_hand_computed_suite(self):
        r = evaluate(*tiny_suite())
        # instance: a -> 2 TP; b -> 1 FP + 1 FN; c -> TN; d -> 1 FP
        assert r.acc_inst == pytest.approx(3 / 6)
        assert r.f1_inst == pytest.approx(4 / 7)
        # image: a TP, b FP, c TN, d FP
        assert r.acc_img == 0.5
        assert r.f1_img == pytest.approx(2 / 4)
        assert r.n_acc == 0.5
        assert r.pr_at[0.5] == 0.5
        assert r.config["matcher"] == "greedy" and r.config["category_strict"] is True

    def test_independent_recomputation(self):
        gt, preds = tiny_suite()
        tp = fp = fn = tn = 0
        for g, p in zip(gt, preds):
            m = match(p.boxes, g.targets)
            if g.targets:
                tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
            elif p.boxes:
                fp += m.fp
            else:
                tn += 1
        r = evaluate(gt, preds)
        assert r.acc_inst == (tp + tn) / (tp + tn + fp + fn)
        assert r.f1_inst == 2 * tp / (2 * tp + fp + fn)

    def test_duplicate_prediction(self):
        gt, preds = tiny_suite()
        with pytest.raises(DuplicatePrediction):
            evaluate(gt, preds + [preds[0]])

    def test_unknown_expression(self):
        gt, preds = tiny_suite()
        with pytest.raises(InvariantViolation):
            evaluate(gt, preds + [PredictionRecord("zzz", ())])

    def test_missing_prediction_is_empty_answer(self, caplog):
        gt, preds = tiny_suite()
        r = evaluate(gt, [p for p in preds if p.expression_id != "a"])
        assert "without predictions" in caplog.text
        # a now contributes 2 FN: TP 0, FP 2, FN 3, TN 1
        assert r.f1_inst == 0.0
        assert r.acc_inst == pytest.approx(1 / 6)

    def test_order_invariance_and_threads(self):
        scenes = sb.generate(sb.SynthConfig(n_scenes=80, seed=9))
        gt = sb.to_records(scenes)
        rng = random.Random(1)
        preds = [PredictionRecord(p.expression_id, p.boxes[: rng.randint(0, len(p.boxes))])
                 for p in sb.answer_key(scenes)]
        base = evaluate(gt, preds).to_dict()
        shuffled = list(zip(gt, preds))
        rng.shuffle(shuffled)
        assert evaluate([g for g, _ in shuffled], [p for _, p in shuffled]).to_dict() == base
        assert evaluate(gt, preds, threads=4).to_dict() == base

    def test_adding_correct_no_target_never_hurts(self):
        gt, preds = tiny_suite()
        before = evaluate(gt, preds)
        extra = ExpressionRecord("e", "i", (400, 400), "none", ())
        after = evaluate(gt + [extra], preds + [PredictionRecord("e", ())])
        assert after.acc_inst >= before.acc_inst
        assert after.acc_img >= before.acc_img
        assert after.n_acc >= before.n_acc

    def test_rates_in_unit_interval(self):
        r = evaluate(*tiny_suite())
        d = r.to_dict()
        for key in ("acc_inst", "f1_inst", "acc_img", "f1_img", "n_acc"):
            assert 0.0 <= d[key] <= 1.0
        assert set(r.pr_at) <= {0.5, 0.6, 0.7, 0.8, 0.9}
