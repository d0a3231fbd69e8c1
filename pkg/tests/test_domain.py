import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ngrec.domain import (
    BoundingBox,
    ExpressionRecord,
    ScaleClass,
    compute_stats,
    ground_truth_from_document,
    ground_truth_to_document,
    parse_ground_truth,
    parse_predictions,
    write_ground_truth,
)
from ngrec.errors import (
    EmptyDataset,
    InvariantViolation,
    IoFailure,
    MalformedDocument,
    SchemaViolation,
)
from ngrec import synthbench as sb

from conftest import det


def gt_doc(targets_per_expr=((("car", [10, 10, 20, 20]), ("car", [40, 40, 10, 10])),)):
    return {
        "images": [{"id": "img0", "width": 100, "height": 100}],
        "expressions": [
            {"id": f"e{i}", "image_id": "img0", "text": "the cars on the left",
             "targets": [{"bbox": b, "category": c} for c, b in tgts]}
            for i, tgts in enumerate(targets_per_expr)
        ],
    }


class TestBoundingBox:
    def test_area_and_corners(self):
        b = BoundingBox(1, 2, 3, 4)
        assert b.area() == 12
        assert b.xyxy() == (1, 2, 4, 6)

    @pytest.mark.parametrize("w,h", [(0, 1), (1, 0), (-1, 5)])
    def test_non_positive_size_rejected(self, w, h):
        with pytest.raises(InvariantViolation):
            BoundingBox(0, 0, w, h)

    def test_non_finite_rejected(self):
        with pytest.raises(InvariantViolation):
            BoundingBox(math.nan, 0, 1, 1)

    def test_normalized_centre_conversion(self):
        b = BoundingBox.from_normalized_cxcywh(0.5, 0.25, 0.2, 0.1, (200, 100))
        assert (b.x, b.y, b.w, b.h) == pytest.approx((80, 20, 40, 10))


class TestScaleClass:
    @pytest.mark.parametrize("area,expected", [
        (1023, ScaleClass.SMALL), (1023.999, ScaleClass.SMALL), (1024, ScaleClass.MEDIUM),
        (5000, ScaleClass.MEDIUM), (9216, ScaleClass.MEDIUM), (9216.001, ScaleClass.LARGE),
        (9217, ScaleClass.LARGE),
    ])
    def test_thresholds(self, area, expected):
        assert ScaleClass.of_area(area) is expected

    def test_box_squares_at_boundaries(self):
        assert BoundingBox(0, 0, 32, 32).scale_class() is ScaleClass.MEDIUM
        assert BoundingBox(0, 0, 96, 96).scale_class() is ScaleClass.MEDIUM
        assert BoundingBox(0, 0, 31, 33).scale_class() is ScaleClass.SMALL

    @given(st.floats(min_value=1e-6, max_value=1e7))
    def test_total_and_exclusive(self, area):
        s = ScaleClass.of_area(area)
        assert (s is ScaleClass.SMALL) == (area < 1024)
        assert (s is ScaleClass.LARGE) == (area > 9216)


class TestParseGroundTruth:
    def test_one_expression_two_targets(self, write_json):
        recs = parse_ground_truth(write_json("gt.json", gt_doc()))
        assert len(recs) == 1 and len(recs[0].targets) == 2
        assert recs[0].targets[0].score == 1.0
        assert recs[0].image_size == (100, 100)

    def test_zero_width_box(self, write_json):
        doc = gt_doc(((("car", [10, 10, 0, 20]),),))
        with pytest.raises(InvariantViolation) as exc:
            parse_ground_truth(write_json("gt.json", doc))
        assert "e0" in str(exc.value)

    def test_duplicate_expression_id(self, write_json):
        doc = gt_doc(((), ()))
        doc["expressions"][1]["id"] = "e0"
        with pytest.raises(InvariantViolation, match="e0"):
            parse_ground_truth(write_json("gt.json", doc))

    def test_out_of_bounds_box(self, write_json):
        with pytest.raises(InvariantViolation):
            parse_ground_truth(write_json("gt.json", gt_doc(((("car", [90, 90, 20, 5]),),))))

    def test_box_touching_image_edge_is_legal(self, write_json):
        recs = parse_ground_truth(write_json("gt.json", gt_doc(((("car", [80, 0, 20, 100]),),))))
        assert recs[0].targets[0].box.xyxy() == (80, 0, 100, 100)

    def test_syntax_error_reports_offset(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"images": [}', encoding="utf-8")
        with pytest.raises(MalformedDocument, match="byte offset"):
            parse_ground_truth(p)

    def test_missing_field(self, write_json):
        doc = gt_doc()
        del doc["expressions"][0]["text"]
        with pytest.raises(SchemaViolation, match="text"):
            parse_ground_truth(write_json("gt.json", doc))

    def test_wrong_type(self, write_json):
        doc = gt_doc()
        doc["images"][0]["width"] = "wide"
        with pytest.raises(SchemaViolation):
            parse_ground_truth(write_json("gt.json", doc))

    def test_unknown_field_strict_vs_lenient(self, write_json, caplog):
        doc = gt_doc()
        doc["expressions"][0]["note"] = "x"
        path = write_json("gt.json", doc)
        with pytest.raises(SchemaViolation, match="note"):
            parse_ground_truth(path)
        recs = parse_ground_truth(path, strict=False)
        assert len(recs) == 1
        assert "note" in caplog.text

    def test_unknown_image(self, write_json):
        doc = gt_doc()
        doc["expressions"][0]["image_id"] = "nope"
        with pytest.raises(InvariantViolation):
            parse_ground_truth(write_json("gt.json", doc))

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            parse_ground_truth(tmp_path / "absent.json")

    def test_normalized_centre_input(self, write_json):
        doc = gt_doc(((("car", [0.5, 0.5, 0.2, 0.1]),),))
        rec = parse_ground_truth(write_json("gt.json", doc), box_format="cxcywh_norm")[0]
        assert rec.targets[0].box.as_list() == pytest.approx([40, 45, 20, 10])


class TestParsePredictions:
    def test_empty_boxes_is_a_record(self, write_lines):
        recs = parse_predictions(write_lines("p.jsonl", [{"expression_id": "e0", "boxes": []}]))
        assert len(recs) == 1 and recs[0].boxes == ()

    def test_score_out_of_range(self, write_lines):
        path = write_lines("p.jsonl", [{"expression_id": "e0", "boxes": [{"bbox": [0, 0, 1, 1], "score": 1.3}]}])
        with pytest.raises(SchemaViolation):
            parse_predictions(path)

    def test_duplicates_retained_in_order(self, write_lines):
        rows = [{"expression_id": "e0", "boxes": []},
                {"expression_id": "e0", "boxes": [{"bbox": [0, 0, 1, 1], "score": 0.5}]}]
        recs = parse_predictions(write_lines("p.jsonl", rows))
        assert [len(r.boxes) for r in recs] == [0, 1]

    def test_bad_line_reports_byte_offset(self, tmp_path):
        p = tmp_path / "p.jsonl"
        p.write_text('{"expression_id": "a", "boxes": []}\n{oops\n', encoding="utf-8")
        with pytest.raises(MalformedDocument) as exc:
            parse_predictions(p)
        assert "line 2" in str(exc.value) and "byte offset 37" in str(exc.value)

    def test_category_optional(self, write_lines):
        rows = [{"expression_id": "e0", "boxes": [{"bbox": [0, 0, 1, 1], "score": 0.5, "category": "car"},
                                                   {"bbox": [0, 0, 1, 1], "score": 0.5}]}]
        recs = parse_predictions(write_lines("p.jsonl", rows))
        assert [b.category for b in recs[0].boxes] == ["car", None]


class TestStats:
    def test_average_targets(self):
        recs = [ExpressionRecord("a", "i", (100, 100), "one two", (det(0, 0, 5, 5),)),
                ExpressionRecord("b", "i", (100, 100), "x", tuple(det(i * 10, 0, 5, 5) for i in range(3)))]
        stats = compute_stats(recs)
        assert stats.avg_targets_per_expression == 2.0
        assert stats.avg_words_per_expression == 1.5
        assert stats.image_count == 1 and stats.instance_count == 4

    def test_area_1023_is_small(self):
        stats = compute_stats([ExpressionRecord("a", "i", (100, 100), "t", (det(0, 0, 1023, 1),))])
        assert stats.scale_histogram[ScaleClass.SMALL] == 1

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            compute_stats([])

    def test_generated_suite_matches_generator_totals(self):
        scenes = sb.generate(sb.SynthConfig(n_scenes=100, seed=11))
        stats = compute_stats(sb.to_records(scenes))
        declared = sb.declared_totals(scenes)
        assert stats.expression_count == declared["expression_count"]
        assert stats.instance_count == declared["instance_count"]
        assert stats.count_histogram == declared["count_histogram"]
        assert sum(stats.scale_histogram.values()) == stats.instance_count
        assert sum(stats.count_histogram.values()) == stats.expression_count

    def test_permutation_invariant(self):
        recs = sb.to_records(sb.generate(sb.SynthConfig(n_scenes=30, seed=2)))
        assert compute_stats(recs) == compute_stats(list(reversed(recs)))


def test_round_trip_preserves_records(tmp_path):
    recs = sb.to_records(sb.generate(sb.SynthConfig(n_scenes=25, seed=4)))
    path = tmp_path / "gt.json"
    write_ground_truth(recs, path)
    again = parse_ground_truth(path)
    assert again == recs
    assert ground_truth_from_document(ground_truth_to_document(again)) == recs
