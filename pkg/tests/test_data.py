import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gctf import data as D
from gctf.data import ClipRecord, DataFormatError, Detection, FeatureVector


def det(*box, frame=0, conf=0.9):
    return Detection(frame, *map(float, box), conf)


# -- cropping ---------------------------------------------------------------------------------

def test_crop_empty_is_full_frame():
    assert D.crop_union(224, 224, []) == (0, 0, 224, 224)


def test_crop_two_boxes():
    assert D.crop_union(100, 100, [det(10, 20, 50, 60), det(40, 10, 80, 70)]) == (10, 10, 80, 70)


def test_crop_single_box():
    assert D.crop_union(100, 100, [det(5, 6, 7, 8)]) == (5, 6, 7, 8)


@pytest.mark.parametrize("box", [(10, 10, 10, 20), (30, 10, 20, 20), (0, 0, 120, 50), (-1, 0, 5, 5)])
def test_crop_malformed_box(box):
    with pytest.raises(ValueError):
        D.crop_union(100, 100, [det(*box)])


def test_crop_bad_confidence():
    with pytest.raises(ValueError):
        D.crop_union(100, 100, [det(1, 1, 5, 5, conf=1.5)])


boxes = st.tuples(st.integers(0, 90), st.integers(0, 90), st.integers(1, 10), st.integers(1, 10)).map(
    lambda b: det(b[0], b[1], b[0] + b[2], b[1] + b[3]))


@settings(max_examples=100, deadline=None)
@given(st.lists(boxes, max_size=6), boxes)
def test_crop_monotone(existing, extra):
    before = D.crop_union(100, 100, existing)
    after = D.crop_union(100, 100, existing + [extra])
    if existing:
        assert after[0] <= before[0] and after[1] <= before[1]
        assert after[2] >= before[2] and after[3] >= before[3]
    for d in existing + [extra]:
        assert after[0] <= d.x_min and after[1] <= d.y_min and after[2] >= d.x_max and after[3] >= d.y_max


def test_clip_crop_unions_frames():
    dets = [det(10, 10, 20, 20, frame=0), det(50, 5, 60, 15, frame=3)]
    assert D.clip_crop(100, 80, dets) == (10, 5, 60, 20)
    assert D.clip_crop(100, 80, []) == (0, 0, 100, 80)


def test_apply_crop_same_rect_every_frame(rng):
    video = rng.uniform(size=(3, 4, 20, 30))
    out = D.apply_crop(video, (5, 2, 15, 12))
    np.testing.assert_array_equal(out, video[:, :, 2:12, 5:15])
    assert D.apply_crop(video, (0, 0, 30, 20), (10, 15)).shape == (3, 4, 10, 15)


# -- manifest ----------------------------------------------------------------------------------

def test_manifest_hand_trace():
    recs = D.build_manifest([0, 0, 1, 1, -1, 0], 1.0)
    assert [(r.start_s, r.end_s, r.label) for r in recs] == [
        (0.0, 2.0, "violent"), (2.0, 4.0, "non-violent"), (5.0, 6.0, "violent")]


def test_manifest_all_ignore():
    assert D.build_manifest([-1, -1, -1], 30.0) == []
    assert D.build_manifest([], 30.0) == []


def test_manifest_single_frame():
    (r,) = D.build_manifest([0], 25.0)
    assert (r.start_s, r.end_s, r.label) == (0.0, 0.04, "violent")


@pytest.mark.parametrize("fps", [0.0, -5.0])
def test_manifest_bad_fps(fps):
    with pytest.raises(ValueError):
        D.build_manifest([0], fps)


def test_manifest_bad_label():
    with pytest.raises(ValueError):
        D.build_manifest([0, 2], 1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0, 1, -1]), max_size=60), st.sampled_from([1.0, 24.0, 25.0, 29.97]))
def test_manifest_reexpands_exactly(labels, fps):
    recs = D.build_manifest(labels, fps)
    assert D.expand_manifest(recs, len(labels)) == labels
    # maximality: neighbouring clips never share a label without a gap
    for a, b in zip(recs, recs[1:]):
        assert a.start_s < a.end_s and (a.label != b.label or b.start_s > a.end_s)


# -- similarity ---------------------------------------------------------------------------------

@pytest.mark.parametrize("a, b, expected", [
    ([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 1.0),
    ([1.0, 0.0], [0.0, 1.0], 0.0),
    ([1.0, 1.0], [1.0, 0.0], 0.70710678),
])
def test_cosine_examples(a, b, expected):
    assert D.cosine_similarity(a, b) == pytest.approx(expected, abs=1e-8)


def test_cosine_zero_norm():
    with pytest.raises(ValueError):
        D.cosine_similarity([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.floats(0.01, 100))
def test_cosine_symmetric_scale_invariant(a, b, lam):
    a, b = np.array(a), np.array(b)
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    s = D.cosine_similarity(a, b)
    assert abs(s - D.cosine_similarity(b, a)) <= 1e-12
    assert abs(s - D.cosine_similarity(lam * a, b)) <= 1e-12


def _fv(i, split, v):
    return FeatureVector(i, split, "x", np.array(v, dtype=float))


def test_leak_orthogonal_corpora():
    train = [_fv("a", "train", [1, 0, 0, 0]), _fv("b", "train", [0, 1, 0, 0])]
    test = [_fv("c", "test", [0, 0, 1, 0]), _fv("d", "test", [0, 0, 0, 1])]
    assert D.leakage_scan(train, test) == []


def test_leak_planted_duplicate():
    train = [_fv("a", "train", [0.2, 0.5, 0.1])]
    test = [_fv("c", "test", [0.2, 0.5, 0.1]), _fv("d", "test", [-1, 0, 0])]
    (flag,) = D.leakage_scan(train, test)
    assert (flag.train_id, flag.test_id) == ("a", "c") and flag.similarity == pytest.approx(1.0, abs=1e-12)


def test_leak_3x3_one_pair():
    train = [_fv("a1", "train", [1, 0, 0, 0]), _fv("a2", "train", [0, 1, 0, 0]), _fv("a3", "train", [0, 0, 1, 0])]
    test = [_fv("b1", "test", [0.8, 0, 0, 0.6]), _fv("b2", "test", [0, 0, 0, 1]), _fv("b3", "test", [0, 0.3, 0.3, 0.9])]
    brute = [(a.id, b.id) for a in train for b in test if D.cosine_similarity(a, b) >= 0.75]
    flags = D.leakage_scan(train, test, 0.75)
    assert [(f.train_id, f.test_id) for f in flags] == brute == [("a1", "b1")]
    assert flags[0].similarity == pytest.approx(0.8)
    assert max(D.cosine_similarity(a, b) for a in train for b in test if (a.id, b.id) != ("a1", "b1")) < 0.5


def test_leak_sorted_and_monotone(rng):
    # nonnegative vectors: every pair has positive similarity
    train = [_fv(f"t{i}", "train", rng.uniform(size=5)) for i in range(8)]
    test = [_fv(f"s{i}", "test", rng.uniform(size=5)) for i in range(6)]
    counts = []
    for thr in (1.0 + 1e-9, 0.95, 0.9, 0.8, 1e-9):
        flags = D.leakage_scan(train, test, thr)
        sims = [f.similarity for f in flags]
        assert sims == sorted(sims, reverse=True)
        counts.append(len(flags))
    assert counts[0] == 0 and counts == sorted(counts) and counts[-1] == 8 * 6


def test_leak_empty_split():
    with pytest.raises(ValueError):
        D.leakage_scan([], [_fv("a", "test", [1.0])])


# -- split statistics ------------------------------------------------------------------------------

def _published_entries():
    return [e for name, sp in D.PAPER_SPLITS.items() for e in D.entries_from_counts(name, sp)]


def test_table2_totals():
    table = D.combined_stats(_published_entries(), ["RLVS/test/violent/00000"])
    assert table["Total"] == {"train": [1832, 1832], "test": [457, 458]}
    assert table["RLVS"]["test"] == [199, 200]


def test_stats_identity_passthrough():
    entries = D.entries_from_counts("only", ((3, 4), (1, 2)))
    table = D.combined_stats(entries)
    assert table["only"] == table["Total"] == {"train": [3, 4], "test": [1, 2]}


def test_stats_remove_all_test():
    entries = _published_entries()
    table = D.combined_stats(entries, [e.id for e in entries if e.split == "test"])
    assert table["Total"]["test"] == [0, 0]


def test_stats_unknown_removal():
    with pytest.raises(KeyError):
        D.combined_stats(_published_entries(), ["RLVS/test/violent/99999"])


# -- synthetic corpus --------------------------------------------------------------------------------

def test_synth_deterministic():
    a, b = D.synth_corpus(4, 6, (4, 16, 16)), D.synth_corpus(4, 6, (4, 16, 16))
    np.testing.assert_array_equal(a.videos, b.videos)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.detections == b.detections


def test_synth_balance():
    assert np.bincount(D.synth_corpus(0, 10).labels).tolist() == [5, 5]


@pytest.mark.parametrize("dims", [(4, 16, 16), (2, 8, 8), (8, 32, 24)])
def test_synth_collision_geometry(dims):
    c = D.synth_corpus(11, 40, dims)
    for boxes, label in zip(c.boxes, c.labels):
        overlaps = [D._boxes_overlap(b[0], b[1]) for b in boxes]
        assert any(overlaps) if label == 0 else not any(overlaps)


def test_synth_detections_match_boxes_and_crop():
    c = D.synth_corpus(2, 4, (4, 16, 16))
    for dets, boxes in zip(c.detections, c.boxes):
        assert len(dets) == 2 * 4
        x0, y0, x1, y1 = D.clip_crop(16, 16, dets)
        assert (x0, y0, x1, y1) == (boxes[..., 0].min(), boxes[..., 1].min(), boxes[..., 2].max(), boxes[..., 3].max())


def test_clip_features_shape_and_centering(rng):
    f = D.clip_features(rng.uniform(size=(3, 4, 32, 32)))
    assert f.shape == (256,) and abs(f.mean()) < 1e-12
    assert D.clip_features(rng.uniform(size=(3, 2, 8, 8))).shape == (256,)


# -- file formats -------------------------------------------------------------------------------------

def test_label_stream_roundtrip(tmp_path):
    p = tmp_path / "s.txt"
    D.write_label_stream(p, [0, 1, -1, 1], 29.97)
    assert D.read_label_stream(p) == ([0, 1, -1, 1], 29.97)


@pytest.mark.parametrize("text, line", [("0\n1\n", 1), ("fps=abc\n0\n", 1), ("fps=10\n0\n3\n", 3), ("fps=10\n0\nx\n", 3)])
def test_label_stream_errors_name_line(tmp_path, text, line):
    p = tmp_path / "s.txt"
    p.write_text(text)
    with pytest.raises(DataFormatError, match=f"s.txt:{line}:"):
        D.read_label_stream(p)


def test_manifest_csv_roundtrip(tmp_path):
    recs = D.build_manifest([0, 0, 1, -1, 1], 25.0, "cam1", 640, 480)
    D.write_manifest(tmp_path / "m.csv", recs)
    assert D.read_manifest(tmp_path / "m.csv") == recs
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "source,start_s,end_s,label,fps,width,height"


def test_detections_csv(tmp_path):
    dets = [det(1, 2, 3, 4, frame=0), det(5, 6, 7, 8, frame=2, conf=0.5)]
    D.write_detections(tmp_path / "d.csv", dets)
    assert D.read_detections(tmp_path / "d.csv", 10, 10) == dets
    (tmp_path / "bad.csv").write_text("frame,x_min,y_min,x_max,y_max,confidence\n0,1,2,3,4,0.5\n1,9,2,3,4,0.5\n")
    with pytest.raises(DataFormatError, match="bad.csv:3:"):
        D.read_detections(tmp_path / "bad.csv", 10, 10)


def test_features_csv_roundtrip(tmp_path, rng):
    feats = [_fv("a", "train", rng.normal(size=4)), _fv("b", "test", rng.normal(size=4))]
    D.write_features(tmp_path / "f.csv", feats)
    back = D.read_features(tmp_path / "f.csv")
    assert [(f.id, f.split) for f in back] == [("a", "train"), ("b", "test")]
    for x, y in zip(feats, back):
        np.testing.assert_array_equal(x.values, y.values)


def test_corpus_roundtrip(tmp_path):
    c = D.synth_corpus(0, 4, (2, 8, 8))
    D.save_corpus(tmp_path / "c", c, ["train", "train", "test", "test"])
    back, splits = D.load_corpus(tmp_path / "c")
    assert back.ids == c.ids and splits == ["train", "train", "test", "test"]
    np.testing.assert_array_equal(back.labels, c.labels)
    np.testing.assert_allclose(back.videos, c.videos, atol=0.5 / 255 + 1e-12)
    assert back.detections == c.detections
