import numpy as np
import pytest

from sammp.errors import DataError, ParseError, UsageError
from sammp.scenes import (
    SceneWindow,
    TrackPoint,
    load_manifest_windows,
    load_split,
    make_windows,
    parse_tracks_csv,
    read_manifest,
    split_dataset,
    write_manifest,
    write_tracks_csv,
)


def straight_track(n, x0=0.0, y0=0.0, v=20.0, start=0):
    return [TrackPoint(start + k, x0 + v * 0.2 * k, y0) for k in range(n)]


def write_csv(path, rows, header="vehicle_id,frame,x,y"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


class TestParse:
    def test_two_rows(self, tmp_path):
        tracks = parse_tracks_csv(write_csv(tmp_path / "a.csv", ["7,0,1.0,2.0", "7,1,5.0,2.5"]))
        assert list(tracks) == ["7"]
        assert tracks["7"] == [TrackPoint(0, 1.0, 2.0), TrackPoint(1, 5.0, 2.5)]

    def test_shuffled_rows(self, tmp_path):
        rows = [f"{v},{f},{f * 4.0},{v * 3.5}" for v in (1, 2) for f in range(6)]
        ordered = parse_tracks_csv(write_csv(tmp_path / "a.csv", rows))
        rng = np.random.default_rng(0)
        shuffled = parse_tracks_csv(write_csv(tmp_path / "b.csv", [rows[i] for i in rng.permutation(len(rows))]))
        assert ordered == shuffled

    def test_non_numeric_names_line(self, tmp_path):
        path = write_csv(tmp_path / "a.csv", ["1,0,0.0,0.0", "1,1,abc,0.0"])
        with pytest.raises(ParseError, match="line 3"):
            parse_tracks_csv(path)

    def test_bad_header(self, tmp_path):
        with pytest.raises(ParseError, match="line 1"):
            parse_tracks_csv(write_csv(tmp_path / "a.csv", ["1,0,0,0"], header="id,t,x,y"))

    def test_field_count(self, tmp_path):
        with pytest.raises(ParseError, match="line 2"):
            parse_tracks_csv(write_csv(tmp_path / "a.csv", ["1,0,0.0"]))

    def test_repeated_frame(self, tmp_path):
        with pytest.raises(DataError):
            parse_tracks_csv(write_csv(tmp_path / "a.csv", ["1,3,0.0,0.0", "1,3,1.0,0.0"]))

    def test_gaps_allowed(self, tmp_path):
        tracks = parse_tracks_csv(write_csv(tmp_path / "a.csv", ["1,0,0.0,0.0", "1,5,1.0,0.0"]))
        assert [p.t for p in tracks["1"]] == [0, 5]

    def test_write_round_trip(self, tmp_path):
        tracks = {"1": straight_track(5), "2": straight_track(3, y0=3.5, start=2)}
        write_tracks_csv(tmp_path / "t.csv", tracks)
        back = parse_tracks_csv(tmp_path / "t.csv")
        assert back.keys() == tracks.keys()
        for v in tracks:
            for a, b in zip(back[v], tracks[v]):
                assert a.t == b.t and a.x == pytest.approx(b.x, abs=1e-6) and a.y == pytest.approx(b.y, abs=1e-6)


class TestWindows:
    def test_single_vehicle_41_samples(self):
        ws = make_windows({"a": straight_track(41)})
        assert len(ws) == 1
        w = ws[0]
        assert w.n_veh == 1
        assert w.history.shape == (1, 16, 2) and w.future.shape == (1, 25, 2)
        assert w.t0 == 15
        np.testing.assert_array_equal(w.history[0, -1], [0.0, 0.0])

    def test_count_per_length(self):
        for length in (41, 45, 60):
            assert len(make_windows({"a": straight_track(length)})) == length - 40
        assert make_windows({"a": straight_track(40)}) == []

    def test_radius(self):
        tracks = {
            "ego": straight_track(41),
            "near": straight_track(41, x0=30.0, y0=3.5),
            "far": straight_track(41, x0=31.0, y0=-3.5),
        }
        ws = make_windows(tracks, egos={"ego"})
        assert ws[0].vehicle_ids == ["ego", "near"]

    def test_ego_centered_everywhere(self):
        tracks = {str(i): straight_track(50, x0=8.0 * i, y0=3.5 * (i % 3), v=18 + i) for i in range(5)}
        for w in make_windows(tracks):
            np.testing.assert_allclose(w.history[w.ego_index, -1], 0.0, atol=1e-12)

    def test_partial_coverage_excluded(self):
        tracks = {"ego": straight_track(41), "late": straight_track(30, x0=5.0, start=11)}
        ws = make_windows(tracks, egos={"ego"})
        assert ws[0].vehicle_ids == ["ego"]

    def test_offset_invariance(self):
        tracks = {str(i): straight_track(45, x0=6.0 * i, y0=3.5 * (i % 2)) for i in range(4)}
        shifted = {v: [TrackPoint(p.t, p.x + 1234.5, p.y - 17.25) for p in pts] for v, pts in tracks.items()}
        a, b = make_windows(tracks), make_windows(shifted)
        assert len(a) == len(b)
        for wa, wb in zip(a, b):
            assert wa.vehicle_ids == wb.vehicle_ids
            np.testing.assert_allclose(wa.history, wb.history, atol=1e-9)
            np.testing.assert_allclose(wa.future, wb.future, atol=1e-9)

    def test_truncates_to_30(self):
        tracks = {str(i): straight_track(41, x0=0.5 * i) for i in range(40)}
        ws = make_windows(tracks, egos={"0"})
        assert ws[0].n_veh == 30
        assert ws[0].vehicle_ids == [str(i) for i in range(30)]

    def test_stride(self):
        assert len(make_windows({"a": straight_track(60)}, stride=5)) == 4


def windows_for(scenes):
    return [SceneWindow(0, np.zeros((1, 16, 2)), np.zeros((1, 25, 2)), ["a"], scene_id=s) for s in scenes]


class TestSplit:
    def test_all_train(self):
        train, val, test = split_dataset(windows_for("abcabc"), (1, 0, 0), 0)
        assert len(train) == 6 and len(val) == 0 and len(test) == 0

    def test_deterministic(self):
        ws = windows_for([f"s{i}" for i in range(20)] * 3)
        a = split_dataset(ws, (0.6, 0.2, 0.2), 5)
        b = split_dataset(ws, (0.6, 0.2, 0.2), 5)
        for x, y in zip(a, b):
            assert [w.scene_id for w in x.windows] == [w.scene_id for w in y.windows]

    def test_no_scene_straddles(self):
        ws = windows_for([f"s{i}" for i in range(30)] * 4)
        parts = split_dataset(ws, (0.5, 0.25, 0.25), 1)
        sets = [{w.scene_id for w in p.windows} for p in parts]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
        assert sum(len(p) for p in parts) == len(ws)
        assert [p.split for p in parts] == ["train", "val", "test"]

    @pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (1.2, -0.2, 0.0), (0.5, 0.5)])
    def test_invalid(self, fractions):
        with pytest.raises(UsageError):
            split_dataset(windows_for("ab"), fractions, 0)


class TestManifest:
    def test_round_trip_and_load(self, tmp_path):
        for s in range(4):
            write_tracks_csv(tmp_path / f"scene{s}.csv", {"1": straight_track(42), "2": straight_track(42, x0=10.0)})
        write_manifest(tmp_path / "m.json", [f"scene{s}.csv" for s in range(4)], 3, (0.5, 0.25, 0.25))
        doc = read_manifest(tmp_path / "m.json")
        assert doc["seed"] == 3 and doc["fractions"] == [0.5, 0.25, 0.25]
        windows, _ = load_manifest_windows(tmp_path / "m.json")
        assert len(windows) == 4 * 2 * 2
        assert {w.scene_id for w in windows} == {f"scene{s}" for s in range(4)}
        train = load_split(tmp_path / "m.json", "train")
        assert len({w.scene_id for w in train.windows}) == 2
        with pytest.raises(UsageError):
            load_split(tmp_path / "m.json", "holdout")

    def test_missing_key(self, tmp_path):
        (tmp_path / "m.json").write_text('{"files": []}')
        with pytest.raises(ParseError, match="seed"):
            read_manifest(tmp_path / "m.json")

    def test_invalid_json(self, tmp_path):
        (tmp_path / "m.json").write_text("{")
        with pytest.raises(ParseError):
            read_manifest(tmp_path / "m.json")
