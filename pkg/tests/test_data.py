import json
import logging

import numpy as np
import pytest

from wsod.boxes import Box, Detection, clip_boxes, flip_boxes, iou, iou_matrix
from wsod.data import (DatasetError, SynthConfig, gen_synthetic, load_dataset, read_detections,
                       read_feature_header, save_dataset, synthetic_parts, write_detections, write_features)


def _write_record(tmp_path, rid="a", shape=(4, 5, 2), proposals=((0, 0, 2, 2),), labels=(0,), extra=None):
    write_features(tmp_path / f"{rid}.wsf", np.ones(shape))
    row = {"id": rid, "feature": f"{rid}.wsf", "proposals": [list(p) for p in proposals],
           "labels": list(labels)}
    row.update(extra or {})
    return row


def _manifest(tmp_path, rows, meta=None):
    path = tmp_path / "m.jsonl"
    lines = ([json.dumps({"meta": meta})] if meta else []) + [json.dumps(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_box_validation():
    assert Box(0, 0, 2, 3).area == 6
    with pytest.raises(ValueError):
        Box(1, 0, 1, 2)
    with pytest.raises(ValueError):
        Box(0, 0, float("nan"), 1)


def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(2, 0, 4, 2)) == 0.0
    assert iou(a, Box(1, 0, 3, 2)) == pytest.approx(1 / 3)
    assert iou_matrix(a.as_array(), np.array([[1, 0, 3, 2], [5, 5, 6, 6]])).tolist() == [[pytest.approx(1 / 3), 0.0]]


def test_clip_and_flip():
    assert clip_boxes(np.array([-1, 2, 7, 9]), 5, 4).tolist() == [[0, 2, 5, 4]]
    b = np.array([[1, 0, 3, 2]], dtype=float)
    assert flip_boxes(b, 10).tolist() == [[7, 0, 9, 2]]
    assert np.array_equal(flip_boxes(flip_boxes(b, 10), 10), b)


def test_load_two_records(tmp_path):
    rows = [_write_record(tmp_path, "a"), _write_record(tmp_path, "b", labels=(1,))]
    ds = load_dataset(_manifest(tmp_path, rows))
    assert len(ds) == 2 and ds.num_classes == 2
    assert ds.record("b").labels.tolist() == [0.0, 1.0]


def test_proposal_clipped_with_warning(tmp_path, caplog):
    rows = [_write_record(tmp_path, proposals=[(0, 0, 9, 2)])]
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(_manifest(tmp_path, rows))
    assert ds.records[0].proposals.tolist() == [[0, 0, 5, 2]]
    assert "clipped" in caplog.text


def test_bad_magic(tmp_path):
    rows = [_write_record(tmp_path)]
    (tmp_path / "a.wsf").write_bytes(b"NOTAFEATURE" + bytes(200))
    with pytest.raises(DatasetError, match="bad feature header"):
        load_dataset(_manifest(tmp_path, rows))


def test_dim_mismatch(tmp_path):
    rows = [_write_record(tmp_path)]
    with open(tmp_path / "a.wsf", "ab") as fh:
        fh.write(bytes(8))
    with pytest.raises(DatasetError, match="dim mismatch"):
        read_feature_header(tmp_path / "a.wsf")
    with pytest.raises(DatasetError, match="'a'"):
        load_dataset(_manifest(tmp_path, rows))


@pytest.mark.parametrize("rows_fn, msg", [
    (lambda t: [_write_record(t, "a"), _write_record(t, "a")], "duplicate id 'a'"),
    (lambda t: [_write_record(t, "x", proposals=[])], "record 'x': empty proposal list"),
    (lambda t: [{"id": "y", "feature": "y.wsf"}], "record 'y': missing key"),
    (lambda t: [_write_record(t, "z", labels=())], "record 'z': no positive label"),
])
def test_schema_errors_name_record(tmp_path, rows_fn, msg):
    with pytest.raises(DatasetError, match=msg):
        load_dataset(_manifest(tmp_path, rows_fn(tmp_path), meta={"num_classes": 2}))


def test_save_load_round_trip(tmp_path, tiny_synth):
    manifest = save_dataset(tiny_synth, tmp_path / "ds")
    back = load_dataset(manifest)
    assert back.equals(tiny_synth)


def test_gt_not_on_records(tiny_synth):
    r = tiny_synth.records[0]
    assert not hasattr(r, "gt_boxes")
    assert tiny_synth.without_ground_truth().ground_truth == {}


# --------------------------------------------------------------------------
# detections

def test_detections_empty_round_trip(tmp_path):
    path = tmp_path / "d.json"
    write_detections({}, path)
    assert path.read_text() == ""
    assert read_detections(path) == {}


def test_detections_single(tmp_path):
    d = {"i": [Detection("i", 0, 0.9, Box(0.1, 0.2, 3.3, 4.4))]}
    write_detections(d, tmp_path / "d.json")
    assert read_detections(tmp_path / "d.json") == d


def test_detections_many_bit_exact(tmp_path, rng):
    dets = {}
    for k in range(10_000):
        x, y = rng.uniform(0, 50, 2)
        w, h = rng.uniform(0.01, 20, 2)
        image_id = f"img{k % 97}"
        dets.setdefault(image_id, []).append(Detection(image_id, int(rng.integers(20)), float(rng.random()),
                                                       Box(x, y, x + w, y + h)))
    write_detections(dets, tmp_path / "d.json")
    assert read_detections(tmp_path / "d.json") == dets


def test_detections_io_error_names_path(tmp_path):
    with pytest.raises(OSError, match="missing.json"):
        read_detections(tmp_path / "missing.json")


# --------------------------------------------------------------------------
# synthetic generator

def test_synth_deterministic():
    cfg = SynthConfig(n_images=20, height=16, width=16, depth=8, num_classes=3)
    a, b = gen_synthetic(cfg, 7), gen_synthetic(cfg, 7)
    assert len(a) == 20 and a.equals(b)
    assert all(r.labels.sum() >= 1 for r in a.records)
    assert not a.equals(gen_synthetic(cfg, 8))


def test_synth_parts_nested():
    cfg = SynthConfig(n_images=40, part_classes=None)
    ds, parts = gen_synthetic(cfg, 1), synthetic_parts(cfg, 1)
    n = 0
    for r in ds.records:
        whole = dict(ds.ground_truth[r.id])
        for c, part in parts[r.id]:
            obj = whole[c]
            assert obj.x1 < part.x1 and part.x2 < obj.x2 and obj.y1 < part.y1 and part.y2 < obj.y2
            assert part.area <= 0.25 * obj.area
            assert iou(part, obj) < 0.5
            n += 1
    assert n > 0


def test_synth_whole_box_always_proposed():
    ds = gen_synthetic(SynthConfig(n_images=30), 2)
    for r in ds.records:
        for _, g in ds.ground_truth[r.id]:
            assert iou_matrix(r.proposals, g.as_array()).max() >= 0.5


def test_synth_equal_gain_equal_energy():
    cfg = SynthConfig(n_images=60, g_part=1.0, g_whole=1.0, noise=0.3, part_classes=None, n_distractors=0)
    ds, parts = gen_synthetic(cfg, 3), synthetic_parts(cfg, 3)
    e_part, e_rest = [], []
    for r in ds.records:
        x = r.feature
        whole = dict(ds.ground_truth[r.id])
        for c, p in parts[r.id]:
            o = whole[c]
            mask = np.zeros(x.shape[:2], dtype=bool)
            mask[int(o.y1):int(o.y2), int(o.x1):int(o.x2)] = True
            pmask = np.zeros_like(mask)
            pmask[int(p.y1):int(p.y2), int(p.x1):int(p.x2)] = True
            e = (x ** 2).sum(axis=2)
            e_part.append(e[pmask].mean())
            e_rest.append(e[mask & ~pmask].mean())
    assert abs(np.mean(e_part) - np.mean(e_rest)) < 0.1 * np.mean(e_rest)


def test_synth_part_gain_raises_energy():
    cfg = SynthConfig(n_images=10, g_part=2.5, part_classes=None)
    ds, parts = gen_synthetic(cfg, 3), synthetic_parts(cfg, 3)
    r = ds.records[0]
    c, p = parts[r.id][0]
    o = dict(ds.ground_truth[r.id])[c]
    e = (r.feature ** 2).sum(axis=2)
    assert e[int(p.y1):int(p.y2), int(p.x1):int(p.x2)].mean() > e[int(o.y1):int(o.y2), int(o.x1):int(o.x2)].mean()


@pytest.mark.parametrize("kw, msg", [
    ({"object_max": 20}, "infeasible geometry"),
    ({"g_part": 0.5}, "g_part"),
    ({"part_direction": "own", "depth": 4}, "depth"),
])
def test_synth_config_errors(kw, msg):
    with pytest.raises(ValueError, match=msg):
        gen_synthetic(SynthConfig(**kw), 0)


def test_synth_flip_variant():
    ds = gen_synthetic(SynthConfig(n_images=2), 0)
    r = ds.records[0]
    (v,) = r.variants
    assert v.flip and np.array_equal(v.feature, r.feature[:, ::-1])
