from dataclasses import replace

import numpy as np
import pytest

from wsod import model as M
from wsod.data import Dataset, ImageRecord, SynthConfig, Variant, gen_synthetic
from wsod.numeric import numerical_gradient, relative_error
from wsod.train import (Checkpoint, TrainConfig, detect_record, infer, initial_checkpoint, lr_multipliers,
                        predict_record, read_loss_log, sgd_step, smoothed, train, write_loss_log)

FAST = dict(iterations=40, drop_at_iter=30, hidden=(16,), k_stages=2)


def _one(v):
    return {"w": np.array([float(v)])}


# --------------------------------------------------------------------------
# optimiser and config

def test_sgd_single_step():
    cfg = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0)
    p, _ = sgd_step(_one(1), _one(1), cfg, {})
    assert p["w"][0] == pytest.approx(0.9)


def test_sgd_momentum_trace():
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.0)
    p, v = sgd_step(_one(0), _one(1), cfg, {})
    p, v = sgd_step(p, _one(1), cfg, v, it=1)
    assert p["w"][0] == pytest.approx(-0.1 * 1 - 0.1 * 1.9)


def test_sgd_weight_decay_and_multiplier():
    cfg = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.5)
    p, _ = sgd_step(_one(2), _one(0), cfg, {}, lr_mult={"w": 10.0})
    assert p["w"][0] == pytest.approx(2 - 0.1 * 10 * 1.0)


def test_sgd_nan_names_tensor():
    with pytest.raises(FloatingPointError, match="'w'"):
        sgd_step(_one(1), {"w": np.array([np.nan])}, TrainConfig(), {})


def test_lr_schedule_single_drop():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == 0.001 and cfg.lr_at(1199) == 0.001
    assert cfg.lr_at(1200) == pytest.approx(0.0001) and cfg.lr_at(1999) == pytest.approx(0.0001)


def test_config_round_trip_and_validation(tmp_path):
    cfg = TrainConfig(mode="mil_gam", hidden=(8, 4))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown config key"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError, match="unknown mode"):
        TrainConfig(mode="frcnn")
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0)


def test_lr_multipliers():
    m = lr_multipliers({"backbone.conv0.w": 0, "mil.cls.w": 0}, 10.0)
    assert m == {"backbone.conv0.w": 1.0, "mil.cls.w": 10.0}


# --------------------------------------------------------------------------
# model wiring

@pytest.fixture(scope="module")
def small():
    cfg = SynthConfig(n_images=2, height=8, width=8, depth=4, num_classes=2, object_min=4, object_max=6,
                      n_random=1, n_jitter=0, n_distractors=0, part_classes=None)
    rec = gen_synthetic(cfg, 3).records[0]
    rec = replace(rec, proposals=rec.proposals[:4])
    mc = M.ModelConfig(depth=4, num_classes=2, backbone_layers=2, hidden=(6, 5), k_stages=2, init_std=0.3)
    return rec, M.init_params(mc)


def test_full_pipeline_grad_check(small):
    rec, p = small
    p = {k: v.copy() for k, v in p.items()}
    heads = M.Heads()
    losses, cache = M.forward(p, rec.feature, rec.proposals, rec.labels, heads)
    grads = M.backward(p, cache)
    sig = cache.signature()

    def f():
        return M.forward(p, rec.feature, rec.proposals, rec.labels, heads, fixed_pgt=cache.pseudo_gt,
                         fixed_stage_sup=cache.stage_sup)[0].total

    def probe():
        return M.forward(p, rec.feature, rec.proposals, rec.labels, heads, fixed_pgt=cache.pseudo_gt,
                         fixed_stage_sup=cache.stage_sup)[1].signature() == sig

    for k, v in p.items():
        num = numerical_gradient(f, v, 1e-5, probe)
        assert relative_error(grads[k], num) < 1e-3, k


def test_composite_is_exact_sum(small):
    rec, p = small
    losses, _ = M.forward(p, rec.feature, rec.proposals, rec.labels, M.Heads())
    assert losses.total == losses.img_cls + losses.mil + losses.refine + losses.det


@pytest.mark.parametrize("mode, live", [
    ("mil_only", {"mil"}),
    ("mil_gam", {"img_cls", "mil"}),
    ("joint", {"img_cls", "mil", "refine", "det"}),
])
def test_mode_gating(small, mode, live):
    rec, p = small
    losses, cache = M.forward(p, rec.feature, rec.proposals, rec.labels, M.Heads.for_mode(mode))
    for name in ("img_cls", "mil", "refine", "det"):
        assert (getattr(losses, name) != 0) == (name in live), name
    grads = M.backward(p, cache)
    if mode == "mil_only":
        assert not np.any(grads["gam.gate_w"]) and not np.any(grads["refine0.w"]) and not np.any(grads["det.cls.w"])


def test_mining_blocks_gradient(small):
    """L_det does not reach the MIL scoring heads: mined pseudo-GT is a constant."""
    rec, p = small
    heads = replace(M.Heads(), img=False, mil=False, refine=False)
    _, cache = M.forward(p, rec.feature, rec.proposals, rec.labels, heads)
    g = M.backward(p, cache)
    assert not np.any(g["mil.det.w"]) and not np.any(g["mil.cls.w"]) and not np.any(g["refine0.w"])
    assert np.any(g["mil.fc0.w"])


# --------------------------------------------------------------------------
# training runs

def test_train_reduces_mil_loss():
    ds = gen_synthetic(SynthConfig(n_images=20), 0)
    res = train(ds, TrainConfig(iterations=300, drop_at_iter=200, mode="joint"))
    mil = smoothed([r[2] for r in res.log])
    assert mil[-1] < mil[49]


def test_same_seed_same_log(tiny_synth):
    cfg = TrainConfig(**FAST)
    assert train(tiny_synth, cfg).log == train(tiny_synth, cfg).log
    assert train(tiny_synth, replace(cfg, seed=1)).log != train(tiny_synth, cfg).log


def test_train_never_reads_ground_truth(tiny_synth):
    cfg = TrainConfig(**FAST)
    stripped = tiny_synth.without_ground_truth()
    assert train(stripped, cfg).log == train(tiny_synth, cfg).log


@pytest.mark.parametrize("mode", ["joint", "two_phase"])
def test_resume_matches_uninterrupted(tiny_synth, tmp_path, mode):
    cfg = TrainConfig(**FAST, mode=mode)
    full = train(tiny_synth, cfg)
    saved = []
    cut = 25 if mode == "joint" else 15

    def grab(ck):
        if ck.iteration == cut and (mode == "joint" or ck.phase == "B") and not saved:
            ck.save(tmp_path / "ck.bin")
            saved.append(True)

    train(tiny_synth, cfg, on_step=grab)
    resumed = train(tiny_synth, cfg, resume=Checkpoint.load(tmp_path / "ck.bin"))
    tail = full.log[-len(resumed.log):]
    assert resumed.log == tail
    for k, v in full.checkpoint.params.items():
        assert np.array_equal(v, resumed.checkpoint.params[k])


def test_checkpoint_round_trip_bit_exact(tiny_synth, tmp_path):
    res = train(tiny_synth, TrainConfig(**FAST, mode="two_phase"))
    ck = res.checkpoint
    ck.save(tmp_path / "c.bin")
    back = Checkpoint.load(tmp_path / "c.bin")
    assert back.config == ck.config and back.iteration == ck.iteration and back.phase == "B"
    for k in ck.params:
        assert back.params[k].tobytes() == ck.params[k].tobytes()
        assert back.velocity[k].tobytes() == ck.velocity[k].tobytes()
    for rid, pg in ck.pseudo_gt.items():
        assert np.array_equal(back.pseudo_gt[rid].boxes, pg.boxes)
    back.save(tmp_path / "d.bin")
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"garbage!" * 4)
    with pytest.raises(ValueError, match="bad magic"):
        Checkpoint.load(tmp_path / "x")


def test_mil_only_log_columns(tiny_synth, tmp_path):
    res = train(tiny_synth, TrainConfig(**FAST, mode="mil_only"))
    write_loss_log(res.log, tmp_path / "log.csv")
    rows = read_loss_log(tmp_path / "log.csv")
    assert rows == res.log
    arr = np.array([r[1:] for r in rows])
    assert np.all(arr[:, [0, 2, 3]] == 0) and np.all(arr[:, 1] > 0)
    assert np.array_equal(arr[:, 4], arr[:, 1])


def test_two_phase_protocol(tiny_synth):
    cfg = TrainConfig(**FAST, mode="two_phase", phase_b_iterations=10)
    seen = []
    res = train(tiny_synth, cfg, on_step=lambda ck: seen.append((ck.phase, ck.iteration)))
    assert [s for s in seen if s[0] == "A"][-1] == ("A", 40)
    assert [s for s in seen if s[0] == "B"] == [("B", i) for i in range(1, 11)]
    log = np.array(res.log)
    assert log[:40, 4].max() == 0 and log[40:, 4].min() > 0  # L_det only in phase B
    assert log[40:, 2].max() == 0 and log[40:, 3].max() == 0  # MIL and refinement off in phase B
    assert set(res.checkpoint.pseudo_gt) == {r.id for r in tiny_synth.records}


def test_training_rejects_unlabeled(tiny_synth):
    r = tiny_synth.records[0]
    bad = Dataset((replace(r, labels=np.zeros_like(r.labels)),), tiny_synth.num_classes, ("a", "b"))
    with pytest.raises(ValueError, match="positive label"):
        train(bad, TrainConfig(**FAST))


# --------------------------------------------------------------------------
# inference

@pytest.fixture(scope="module")
def trained(tiny_synth):
    return train(tiny_synth, TrainConfig(**FAST)).checkpoint


def _single(rec):
    return replace(rec, variants=())


def test_infer_single_variant_equals_raw_forward(trained, tiny_synth):
    rec = _single(tiny_synth.records[0])
    cfg = trained.config
    scores, boxes = predict_record(trained.params, rec, cfg)
    pred = M.predict(trained.params, rec.feature, rec.proposals, M.Heads(img=False, mil=False, refine=False))
    assert np.array_equal(scores, pred.scores) and np.array_equal(boxes, pred.boxes)


def test_infer_duplicate_variant_identical(trained, tiny_synth):
    rec = _single(tiny_synth.records[1])
    dup = replace(rec, variants=(Variant(rec.feature, False),))
    a = detect_record(trained.params, rec, trained.config)
    b = detect_record(trained.params, dup, trained.config)
    assert [(d.cls, d.box) for d in a] == [(d.cls, d.box) for d in b]
    assert np.allclose([d.score for d in a], [d.score for d in b], rtol=0, atol=1e-12)


def test_infer_flip_symmetric(trained):
    rng = np.random.default_rng(0)
    half = rng.standard_normal((8, 4, 6))
    feat = np.concatenate([half, half[:, ::-1]], axis=1)  # mirror-symmetric map
    props = np.array([[1, 1, 4, 6], [4, 2, 7, 7], [0, 0, 8, 8]], dtype=float)
    rec = ImageRecord("sym", feat, props, np.array([1.0, 0.0]), (Variant(feat.copy(), True),))
    _, boxes = predict_record(trained.params, rec, trained.config)
    # the symmetric proposal (0, 0, 8, 8) must yield a box symmetric about x = 4
    b = boxes[2]
    assert np.allclose(b[:, 0] + b[:, 2], 8.0, atol=1e-6)


def test_infer_dimension_mismatch(trained, tiny_synth):
    rec = tiny_synth.records[0]
    bad = replace(rec, variants=(Variant(np.zeros((10, 10, 3)), True),))
    with pytest.raises(ValueError, match="variant dimension mismatch"):
        predict_record(trained.params, bad, trained.config)


def test_infer_dataset(trained, tiny_synth):
    dets = infer(tiny_synth, trained)
    assert set(dets) == {r.id for r in tiny_synth.records}
    for rid, items in dets.items():
        for d in items:
            assert d.image_id == rid and 0 <= d.cls < 2 and np.isfinite(d.score)
    other = gen_synthetic(SynthConfig(n_images=2, num_classes=3), 0)
    with pytest.raises(ValueError, match="classes"):
        infer(other, trained)


def test_initial_checkpoint_shapes(tiny_synth):
    ck = initial_checkpoint(tiny_synth, TrainConfig(**FAST))
    assert ck.params["det.reg.w"].shape == (16, 8) and ck.params["refine1.w"].shape == (16, 3)
    assert "refine2.w" not in ck.params
