import json
import logging

import numpy as np
import pytest

from povmap.data_io import (
    DataError,
    Dataset,
    DetectionSet,
    SurveyRecord,
    fmt,
    load_dataset,
    load_detections,
    load_survey,
    read_csv,
    save_detections,
    save_survey,
    write_csv,
)
from povmap.geo_grid import GeoPoint

GOOD = {
    "cluster_id": "c1",
    "row": 0,
    "col": 0,
    "x_c": 100,
    "y_c": 100,
    "w": 10,
    "h": 8,
    "label": "Building",
    "score": 0.9,
}


def _jsonl(tmp_path, objs, name="d.jsonl"):
    p = tmp_path / name
    p.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")
    return p


def _survey(tmp_path, body, name="s.csv"):
    p = tmp_path / name
    p.write_text("cluster_id,lat,lon,poverty\n" + body, encoding="utf-8")
    return p


class TestLoadDetections:
    def test_well_formed(self, tmp_path, hierarchy):
        ds = load_detections(_jsonl(tmp_path, [GOOD]), hierarchy)
        recs = ds.tiles("c1")[(0, 0)]
        assert len(recs) == 1 and recs[0].label == "Building" and recs[0].score == 0.9
        assert (ds.n_read, ds.n_dropped) == (1, 0)

    def test_score_out_of_range_names_line(self, tmp_path, hierarchy):
        p = _jsonl(tmp_path, [GOOD, {**GOOD, "score": 1.3}])
        with pytest.raises(DataError, match=r"d\.jsonl:2.*score"):
            load_detections(p, hierarchy)

    def test_unparseable_line(self, tmp_path, hierarchy):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps(GOOD) + "\n{not json\n", encoding="utf-8")
        with pytest.raises(DataError, match=r":2: unparseable"):
            load_detections(p, hierarchy)

    def test_unknown_label(self, tmp_path, hierarchy):
        with pytest.raises(DataError, match="unknown label"):
            load_detections(_jsonl(tmp_path, [{**GOOD, "label": "Spaceship"}]), hierarchy)

    @pytest.mark.parametrize(
        "patch",
        [{"row": 34}, {"col": -1}, {"row": 1.5}, {"w": "wide"}, {"score": None}, {"cluster_id": ""}],
    )
    def test_invalid_fields(self, tmp_path, hierarchy, patch):
        with pytest.raises(DataError):
            load_detections(_jsonl(tmp_path, [{**GOOD, **patch}]), hierarchy)

    def test_missing_field(self, tmp_path, hierarchy):
        obj = dict(GOOD)
        del obj["h"]
        with pytest.raises(DataError, match="missing"):
            load_detections(_jsonl(tmp_path, [obj]), hierarchy)

    def test_empty_file_warns(self, tmp_path, hierarchy, caplog):
        p = tmp_path / "d.jsonl"
        p.write_text("", encoding="utf-8")
        with caplog.at_level(logging.WARNING):
            ds = load_detections(p, hierarchy)
        assert len(ds) == 0
        assert "empty" in caplog.text

    def test_degenerate_boxes_dropped_and_counted(self, tmp_path, hierarchy):
        objs = [GOOD, {**GOOD, "w": 0}, {**GOOD, "x_c": 1200}, {**GOOD, "label": "Pickup Truck"}]
        ds = load_detections(_jsonl(tmp_path, objs), hierarchy)
        assert ds.n_read == 4 and ds.n_dropped == 2
        assert len(ds) == ds.n_read - ds.n_dropped

    def test_box_clamped_to_tile(self, tmp_path, hierarchy):
        ds = load_detections(_jsonl(tmp_path, [{**GOOD, "x_c": 998, "w": 8}]), hierarchy)
        box = ds.tiles("c1")[(0, 0)][0].box
        assert box.w == 4 and box.x_c == 998

    def test_missing_file(self, tmp_path, hierarchy):
        with pytest.raises(DataError, match="nope.jsonl"):
            load_detections(tmp_path / "nope.jsonl", hierarchy)


class TestLoadSurvey:
    def test_well_formed(self, tmp_path):
        (rec,) = load_survey(_survey(tmp_path, "c1,0.35,32.58,1.25\n"))
        assert rec == SurveyRecord("c1", GeoPoint(0.35, 32.58), 1.25)

    def test_duplicate(self, tmp_path):
        with pytest.raises(DataError, match="duplicate cluster"):
            load_survey(_survey(tmp_path, "c1,0,32,1\nc1,0,32,2\n"))

    def test_negative_poverty(self, tmp_path):
        with pytest.raises(DataError, match="negative"):
            load_survey(_survey(tmp_path, "c1,0,32,-0.5\n"))

    @pytest.mark.parametrize("row", ["c1,0,32\n", "c1,x,32,1\n", "c1,0,32,nan\n", ",0,32,1\n", "c1,95,32,1\n"])
    def test_malformed(self, tmp_path, row):
        with pytest.raises(DataError):
            load_survey(_survey(tmp_path, row))

    def test_bad_header(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("id,lat,lon,y\nc1,0,0,1\n", encoding="utf-8")
        with pytest.raises(DataError, match="header"):
            load_survey(p)

    def test_line_numbers_count_comment_lines(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("# seed=1\ncluster_id,lat,lon,poverty\nc1,0,32,-1\n", encoding="utf-8")
        with pytest.raises(DataError, match=r"s\.csv:3"):
            load_survey(p)


class TestDataset:
    def test_detection_cluster_must_be_surveyed(self, tmp_path, hierarchy):
        dets = load_detections(_jsonl(tmp_path, [GOOD]), hierarchy)
        with pytest.raises(DataError, match="missing from survey"):
            Dataset([SurveyRecord("c2", GeoPoint(0, 32), 1.0)], dets)

    def test_clusters_without_detections_kept(self, tmp_path, hierarchy):
        det = _jsonl(tmp_path, [GOOD])
        sur = _survey(tmp_path, "c1,0,32,1\nc2,1,32,2\n")
        ds = load_dataset(det, sur, hierarchy)
        assert ds.cluster_ids == ["c1", "c2"]
        np.testing.assert_array_equal(ds.targets, [1.0, 2.0])


class TestRoundTrip:
    def test_detections(self, tmp_path, hierarchy, small_synth):
        dataset, _ = small_synth
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_detections(p1, dataset.detections.records())
        loaded = load_detections(p1, hierarchy)
        assert list(loaded.records()) == list(dataset.detections.records())
        save_detections(p2, loaded.records())
        assert p1.read_bytes() == p2.read_bytes()

    def test_survey(self, tmp_path, small_synth):
        dataset, _ = small_synth
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        save_survey(p1, dataset.surveys)
        loaded = load_survey(p1)
        assert loaded == dataset.surveys
        save_survey(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_float_text_is_exact(self):
        rng = np.random.default_rng(0)
        for v in rng.normal(size=200) * 10.0 ** rng.integers(-8, 8, size=200):
            assert float(fmt(v)) == v
        assert fmt(np.float64(0.1)) == "0.1"
        assert fmt(np.int64(3)) == "3"

    def test_csv_meta(self, tmp_path):
        p = tmp_path / "x.csv"
        write_csv(p, ["a", "b"], [[1, 0.5]], {"config_hash": "abc", "seed": 2})
        meta, header, rows = read_csv(p)
        assert meta == {"config_hash": "abc", "seed": "2"}
        assert header == ["a", "b"] and rows == [["1", "0.5"]]


class TestSuppression:
    def test_nms_counts_drops(self, tmp_path, hierarchy):
        objs = [GOOD, {**GOOD, "x_c": 101, "score": 0.5}, {**GOOD, "x_c": 400}]
        ds = load_detections(_jsonl(tmp_path, objs), hierarchy).suppressed(0.5)
        assert len(ds) == 2 and ds.n_dropped == 1
        assert [r.score for r in ds.records()] == [0.9, 0.9]

    def test_empty_set(self):
        assert len(DetectionSet().suppressed(0.5)) == 0
