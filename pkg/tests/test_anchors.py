"""Annotation ingestion, scale binning and IoU K-means."""
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from cslyolo.anchors import (AnnotationError, BoxWH, LoadStats, bin_by_scale, export_boxes, generate_anchors,
                             iou_wh, kmeans_iou, load_boxes, parse_coco, read_anchor_csv, scale_thresholds)

box_st = st.tuples(st.floats(1e-3, 1.0), st.floats(1e-3, 1.0)).map(lambda t: BoxWH(*t))


def coco(boxes_px, size=(640, 480)):
    return {"images": [{"id": 1, "width": size[0], "height": size[1]}],
            "annotations": [{"image_id": 1, "bbox": [0, 0, w, h]} for w, h in boxes_px]}


class TestIngestion:
    def test_normalization(self):
        assert parse_coco(coco([(320, 240)])) == [BoxWH(0.5, 0.5)]

    def test_degenerate_dropped_and_counted(self):
        stats = LoadStats()
        boxes = parse_coco(coco([(0, 10), (64, 48), (10, 0)]), stats)
        assert boxes == [BoxWH(0.1, 0.1)]
        assert stats.dropped_degenerate == 2 and stats.loaded == 1

    def test_unknown_image_rejected(self):
        doc = coco([(1, 1)])
        doc["annotations"][0]["image_id"] = 7
        with pytest.raises(AnnotationError, match=r"annotations\[0\]\.image_id"):
            parse_coco(doc)

    @pytest.mark.parametrize("doc,where", [
        ([], "<root>"),
        ({"images": []}, "annotations"),
        ({"images": [{"id": 1}], "annotations": []}, r"images\[0\]"),
        ({"images": [{"id": 1, "width": 4, "height": 4}], "annotations": [{"image_id": 1, "bbox": "x"}]},
         r"annotations\[0\]\.bbox"),
    ])
    def test_malformed_documents(self, doc, where):
        with pytest.raises(AnnotationError, match=where):
            parse_coco(doc)

    def test_bad_json_location(self, tmp_path):
        p = tmp_path / "a.json"
        p.write_text('{"images": [,]}')
        with pytest.raises(AnnotationError, match="line 1"):
            load_boxes(p)

    def test_export_reload_identity(self, tmp_path, rng):
        boxes = [BoxWH(*v) for v in rng.uniform(0.001, 1.0, (50, 2))]
        export_boxes(boxes, tmp_path / "b.json")
        assert load_boxes(tmp_path / "b.json") == boxes


class TestIou:
    def test_examples(self):
        assert iou_wh(BoxWH(0.2, 0.2), BoxWH(0.4, 0.4)) == pytest.approx(0.25)
        assert iou_wh(BoxWH(0.3, 0.7), BoxWH(0.3, 0.7)) == 1.0
        e = 1e-3
        assert iou_wh(BoxWH(1, e), BoxWH(e, 1)) == pytest.approx(e * e / (2 * e - e * e))

    def test_box_validation(self):
        with pytest.raises(ValueError):
            BoxWH(0.0, 0.5)
        with pytest.raises(ValueError):
            BoxWH(0.5, 1.2)

    @given(a=box_st, b=box_st)
    def test_matches_reference(self, a, b):
        v = iou_wh(a, b)
        assert v == pytest.approx(oracles.iou_wh((a.w, a.h), (b.w, b.h)), rel=1e-12)
        assert 0 < v <= 1 and v == pytest.approx(iou_wh(b, a), rel=1e-12)


class TestBinning:
    def test_thresholds(self):
        assert scale_thresholds(5) == [0, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 1]

    def test_examples(self):
        sb = bin_by_scale([BoxWH(0.3, 0.3), BoxWH(1.0, 1.0), BoxWH(0.01, 0.01)], 5)
        assert sb.bins[3] == [BoxWH(0.3, 0.3)]
        assert sb.bins[4] == [BoxWH(1.0, 1.0)]
        assert sb.bins[0] == [BoxWH(0.01, 0.01)]
        assert sb.empty == [1, 2]

    def test_max_rule(self):
        sb = bin_by_scale([BoxWH(0.9, 0.01)], 5, "max")
        assert sb.bins[4] == [BoxWH(0.9, 0.01)]

    @given(boxes=st.lists(box_st, max_size=60), levels=st.integers(2, 7))
    def test_partition(self, boxes, levels):
        sb = bin_by_scale(boxes, levels)
        s = sb.thresholds
        assert sum(len(b) for b in sb.bins) == len(boxes)
        for i, members in enumerate(sb.bins):
            for b in members:
                sc = np.sqrt(b.w * b.h)
                assert s[i] <= sc and (sc < s[i + 1] or (i == levels - 1 and sc <= 1.0))


class TestKMeans:
    def test_single_cluster_mean(self):
        r = kmeans_iou([BoxWH(0.2, 0.2), BoxWH(0.4, 0.4)], 1)
        np.testing.assert_allclose(r.centers, [[0.3, 0.3]])

    def test_k_distinct_boxes_are_fixed_point(self):
        boxes = [BoxWH(0.1, 0.3), BoxWH(0.5, 0.5), BoxWH(0.05, 0.02)]
        r = kmeans_iou(boxes, 3)
        assert r.objective == 0.0
        assert sorted(map(tuple, r.centers)) == sorted((b.w, b.h) for b in boxes)

    def test_too_few_boxes(self):
        with pytest.raises(ValueError):
            kmeans_iou([BoxWH(0.1, 0.1)], 2)

    def test_two_tight_clusters_match_oracles(self, rng):
        small = [(0.05 * f, 0.06 * g) for f, g in rng.uniform(0.95, 1.05, (6, 2))]
        large = [(0.4 * f, 0.3 * g) for f, g in rng.uniform(0.95, 1.05, (6, 2))]
        boxes = small + large
        r = kmeans_iou(np.array(boxes), 2, seed=3)
        for c, group in zip(r.centers, (small, large)):
            arr = np.array(group)
            assert np.all(c >= arr.min(axis=0)) and np.all(c <= arr.max(axis=0))
        assert r.objective == pytest.approx(oracles.best_assignment_cost(boxes, 2), abs=1e-12)
        assert r.objective == pytest.approx(oracles.best_single_step_cost(boxes, 2), abs=1e-12)

    @pytest.mark.parametrize("seed", range(12))
    def test_planted_instances_match_exhaustive_oracles(self, seed):
        rng = np.random.default_rng(seed)
        k = 1 + seed % 3
        boxes = oracles.planted_boxes(rng, k, 12 // k if k < 3 else 3)
        r = kmeans_iou(np.array(boxes), k, seed=seed)
        assert r.objective == pytest.approx(oracles.best_single_step_cost(boxes, k), abs=1e-12)
        assert r.objective == pytest.approx(oracles.best_assignment_cost(boxes, k), abs=1e-12)

    @given(data=st.data())
    def test_never_beats_global_optimum(self, data):
        n = data.draw(st.integers(2, 7))
        k = data.draw(st.integers(1, min(3, n)))
        boxes = [tuple(data.draw(st.tuples(st.floats(0.01, 1), st.floats(0.01, 1)))) for _ in range(n)]
        r = kmeans_iou(np.array(boxes), k)
        assert r.objective >= oracles.best_assignment_cost(boxes, k) - 1e-12

    @given(seed=st.integers(0, 10_000))
    def test_assignment_step_never_increases_cost(self, seed):
        # holds for any centres; the mean update step itself can raise the IoU cost
        rng = np.random.default_rng(seed)
        boxes = rng.uniform(0.01, 1.0, (20, 2))
        centers = rng.uniform(0.01, 1.0, (3, 2))
        prior = rng.integers(0, 3, 20)
        new = oracles.nearest([tuple(b) for b in boxes], [tuple(c) for c in centers])
        bl, cl = [tuple(b) for b in boxes], [tuple(c) for c in centers]
        assert oracles.assignment_cost(bl, cl, new) <= oracles.assignment_cost(bl, cl, prior) + 1e-12

    def test_objective_non_increasing_on_planted_corpus(self, rng):
        for trial in range(20):
            boxes = oracles.planted_boxes(rng, 3, 20, jitter=0.1)
            r = kmeans_iou(np.array(boxes), 3, seed=trial)
            assert r.converged
            assert all(b <= a + 1e-15 for a, b in zip(r.trace, r.trace[1:]))

    def test_mean_update_can_raise_cost(self):
        # documented behaviour: seed (0.2, 0.2) costs 0.375, the mean (0.3, 0.3) costs 0.4965
        boxes = [(0.2, 0.2), (0.4, 0.4)]
        seeded = oracles.assignment_cost(boxes, [(0.2, 0.2)], [0, 0])
        r = kmeans_iou(np.array(boxes), 1)
        assert seeded == pytest.approx(0.375) and r.objective == pytest.approx(0.49652777, abs=1e-7)

    def test_empty_cluster_reseeded(self):
        # both initial centres sit on the same point, one cluster starts empty
        boxes = np.array([[0.1, 0.1], [0.11, 0.1], [0.5, 0.5], [0.52, 0.5]])
        r = kmeans_iou(boxes, 2, init=[[0.1, 0.1], [0.1, 0.1]])
        assert len(set(r.assignment.tolist())) == 2

    def test_ties_go_to_lowest_index(self):
        r = kmeans_iou(np.array([[0.2, 0.2]]), 1, init=[[0.2, 0.2]])
        assert r.assignment.tolist() == [0]

    def test_centers_sorted_by_area(self, rng):
        r = kmeans_iou(rng.uniform(0.01, 1, (40, 2)), 4, seed=1)
        areas = r.centers.prod(axis=1)
        assert np.all(np.diff(areas) >= 0)

    def test_medoid_centres_are_members(self, rng):
        x = rng.uniform(0.01, 1, (25, 2))
        r = kmeans_iou(x, 3, center="medoid")
        for c in r.centers:
            assert any(np.array_equal(c, b) for b in x)

    def test_deterministic(self, rng):
        x = rng.uniform(0.01, 1, (40, 2))
        a, b = kmeans_iou(x, 3, seed=5), kmeans_iou(x, 3, seed=5)
        assert np.array_equal(a.centers, b.centers) and a.trace == b.trace


class TestGenerate:
    def _corpus(self, rng):
        boxes = []
        for scale in (0.04, 0.17, 0.7):
            for ar in (0.5, 1.0, 2.0):
                for f in rng.uniform(0.95, 1.05, (25, 2)):
                    boxes.append(BoxWH(min(scale * np.sqrt(ar) * f[0], 1), min(scale / np.sqrt(ar) * f[1], 1)))
        return boxes

    def test_fifteen_anchors_in_bins(self, rng):
        aset = generate_anchors(self._corpus(rng), 5, 3)
        assert aset.total == 15 and all(len(a) == 3 for a in aset.per_level)
        assert [lv.fallback for lv in aset.levels] == [False, True, False, True, False]
        for lv in aset.levels:
            for a in lv.anchors:
                s = np.sqrt(a.w * a.h)
                assert lv.lower <= s and (s < lv.upper or (lv.level == 4 and s <= 1))

    def test_identical_boxes(self):
        aset = generate_anchors([BoxWH(0.2, 0.15)] * 10, 5, 3)
        assert aset.levels[2].anchors == [BoxWH(0.2, 0.15)] * 3
        assert [lv.fallback for lv in aset.levels] == [True, True, False, True, True]

    def test_clamping_flags(self):
        # two elongated boxes of scale ~0.258; their mean (0.51, 0.51) has scale 0.51 and leaves [0.25, 0.5)
        boxes = [BoxWH(0.95, 0.07), BoxWH(0.07, 0.95)] * 3
        aset = generate_anchors(boxes, 5, 1)
        lv = aset.levels[3]
        assert lv.clamped
        s = np.sqrt(lv.anchors[0].w * lv.anchors[0].h)
        assert lv.lower <= s < lv.upper

    @given(seed=st.integers(0, 1000))
    def test_non_fallback_anchors_always_in_bin(self, seed):
        rng = np.random.default_rng(seed)
        boxes = [BoxWH(*v) for v in np.exp(rng.normal(-2.5, 1.0, (60, 2))).clip(1e-3, 1.0)]
        aset = generate_anchors(boxes, 5, 3, seed)
        for lv in aset.levels:
            for a in lv.anchors:
                s = float(np.sqrt(a.w * a.h))
                assert lv.lower <= s and (s < lv.upper or (lv.level == 4 and s <= 1))

    def test_outputs_roundtrip_and_determinism(self, tmp_path, rng):
        boxes = self._corpus(rng)
        a, b = generate_anchors(boxes, 5, 3, 7), generate_anchors(boxes, 5, 3, 7)
        assert a.to_text() == b.to_text() and a.to_csv() == b.to_csv()
        assert a.to_text().splitlines()[0].startswith("level 0: (")
        (tmp_path / "a.csv").write_text(a.to_csv())
        back = read_anchor_csv(tmp_path / "a.csv")
        assert back.per_level == a.per_level

    def test_from_file(self, tmp_path, rng):
        p = tmp_path / "ann.json"
        p.write_text(json.dumps(coco([(128, 96)] * 5)))
        from cslyolo.anchors import generate_anchors_from_file
        assert generate_anchors_from_file(p, 5, 3).levels[2].anchors == [BoxWH(0.2, 0.2)] * 3
