import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from einet.backbone import BackboneConfig
from einet.data.voc import load_dataset
from einet.data.weights_io import dumps_weights
from einet.detector import DetectorConfig, VariantConfig
from einet.errors import ConfigError, InputError, ShapeError
from einet.gradcheck import finite_diff_check
from einet.head import LevelPrediction, RawPrediction, encode_box
from einet.tensor import Tensor
from einet.tpe import WINDOW_GROUPS
from einet.train import (OptimState, PreparedVideo, TrainConfig, assign_level, assign_targets, cosine_lr,
                         detection_loss, format_history, make_batch, prepare_videos, sgd_step, train_loop)
from einet.weights import ModelWeights

TINY = DetectorConfig(BackboneConfig(4, (4, 8, 8), (1, 1, 1)), head_width=4, input_size=32)


class TestAssign:
    def test_centre_box_goes_to_stride_16(self):
        levels = assign_targets([(2, (24, 24, 40, 40))], 64)
        assert assign_level((24, 24, 40, 40)) == 1
        assert list(zip(*levels[1].positives())) == [(2, 2)]
        assert levels[1].cls[2, 2] == 2 and tuple(levels[1].boxes[2, 2]) == (24, 24, 40, 40)
        assert levels[0].obj.sum() == 0 and levels[2].obj.sum() == 0

    def test_small_and_large(self):
        assert assign_level((0, 0, 3, 3)) == 0
        assert assign_level((0, 0, 40, 10)) == 2

    def test_empty(self):
        assert all(lv.obj.sum() == 0 and (lv.cls == -1).all() for lv in assign_targets([], 64))

    @given(st.lists(st.tuples(st.integers(0, 6), st.floats(0, 60), st.floats(0, 60), st.floats(2, 40),
                              st.floats(2, 40)), max_size=6))
    def test_rule_oracle(self, objs):
        gts = [(c, (x, y, min(x + w, 64.0), min(y + h, 64.0))) for c, x, y, w, h in objs]
        gts = [g for g in gts if g[1][2] > g[1][0] and g[1][3] > g[1][1]]
        levels = assign_targets(gts, 64)
        want = {}
        for i, (c, b) in enumerate(gts):
            extent = max(b[2] - b[0], b[3] - b[1])
            li = max([k for k, s in enumerate((8, 16, 32)) if s <= extent], default=0)
            s, n = (8, 16, 32)[li], 64 // (8, 16, 32)[li]
            cell = (li, min(int((b[1] + b[3]) / 2 // s), n - 1), min(int((b[0] + b[2]) / 2 // s), n - 1))
            area = (b[2] - b[0]) * (b[3] - b[1])
            # smaller area wins a shared cell; among equal areas the later ground truth
            if cell not in want or area <= want[cell][0]:
                want[cell] = (area, c)
        got = {(li, r, col): int(lv.cls[r, col]) for li, lv in enumerate(levels) for r, col in zip(*lv.positives())}
        assert got == {k: v[1] for k, v in want.items()}


def raw_from(arrays, strides=(8, 16, 32)):
    return RawPrediction([LevelPrediction(s, Tensor(c), Tensor(o), Tensor(r)) for s, (c, o, r) in
                          zip(strides, arrays)])


def zeros_raw(n=1, k=7, size=64):
    return raw_from([(np.zeros((n, k, size // s, size // s)), np.zeros((n, 1, size // s, size // s)),
                      np.zeros((n, 4, size // s, size // s))) for s in (8, 16, 32)])


class TestLoss:
    def test_zero_logits_no_gt(self):
        assert detection_loss(zeros_raw(), [assign_targets([], 64)]).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_saturated_perfect_prediction(self):
        gts = [(3, (10.0, 12.0, 22.0, 30.0)), (0, (30.0, 30.0, 62.0, 50.0))]
        targets = assign_targets(gts, 64)
        arrays = []
        for lv in targets:
            n = lv.obj.shape[0]
            obj = np.where(lv.obj > 0, 30.0, -30.0)[None, None]
            cls = np.full((1, 7, n, n), -30.0)
            reg = np.zeros((1, 4, n, n))
            for r, c in zip(*lv.positives()):
                cls[0, lv.cls[r, c], r, c] = 30.0
                reg[0, :, r, c] = encode_box(lv.boxes[r, c], lv.stride)[2:]
            arrays.append((cls, obj, reg))
        assert detection_loss(raw_from(arrays), [targets]).item() < 1e-3

    def test_batch_size_mismatch(self):
        with pytest.raises(ShapeError):
            detection_loss(zeros_raw(n=2), [assign_targets([], 64)])

    def test_gradients_on_toy_grid(self, rng):
        targets = [assign_targets([(1, (1.0, 2.0, 7.0, 9.0))], 16, strides=(8,))]
        params = {"cls": rng.standard_normal((1, 3, 2, 2)), "obj": rng.standard_normal((1, 1, 2, 2)),
                  "reg": rng.standard_normal((1, 4, 2, 2)) * 0.3}
        rep = finite_diff_check(
            lambda p: detection_loss(RawPrediction([LevelPrediction(8, p["cls"], p["obj"], p["reg"])]), targets),
            params, max_checks=None)
        assert rep.passed, rep.errors


class TestSGD:
    def test_zero_everything_is_noop(self):
        w = ModelWeights({"a": np.array([1.5, -2.0])})
        sgd_step(w, {"a": np.zeros(2)}, OptimState(0.1, 0.9, 0.0))
        assert np.array_equal(w["a"], [1.5, -2.0])

    def test_hand_iterated_momentum(self):
        w = ModelWeights({"a": np.array([1.0])})
        st_ = OptimState(0.1, 0.9, 0.0)
        sgd_step(w, {"a": np.array([1.0])}, st_)
        assert w["a"][0] == pytest.approx(0.9)
        sgd_step(w, {"a": np.array([1.0])}, st_)
        assert st_.velocity["a"][0] == pytest.approx(1.9) and w["a"][0] == pytest.approx(0.71)

    def test_weight_decay_and_norm_exemption(self):
        w = ModelWeights({"x.conv.weight": np.array([1.0]), "x.bn.scale": np.array([1.0])})
        sgd_step(w, {k: np.zeros(1) for k in w}, OptimState(1.0, 0.9, 0.0005))
        assert w["x.conv.weight"][0] == pytest.approx(0.9995) and w["x.bn.scale"][0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step(ModelWeights({"a": np.zeros(2)}), {"a": np.zeros(3)}, OptimState())


def test_cosine_schedule():
    cfg = TrainConfig(lr=0.1, lr_final=0.001)
    assert cosine_lr(cfg, 0, 11) == pytest.approx(0.1)
    assert cosine_lr(cfg, 10, 11) == pytest.approx(0.001)
    assert cosine_lr(cfg, 5, 11) == pytest.approx(0.0505)


def test_config_validation():
    for bad in ({"epochs": 0}, {"lr": 0}, {"batch_size": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


@pytest.fixture(scope="module")
def prepared(tiny_dataset):
    return prepare_videos(load_dataset(tiny_dataset.root, "train"), TINY.input_size)


def test_make_batch_clamps_and_flips(prepared):
    cfg = VariantConfig("full", window=WINDOW_GROUPS["h"])
    rgb, th, targets = make_batch(prepared, [(0, 0), (1, 2)], cfg, 32, flips=[False, True])
    assert set(rgb) == {-2, -1, 0, 1, 2}
    v0 = prepared[0].rgb
    assert np.array_equal(rgb[-2].data[0], v0[0]) and np.array_equal(rgb[2].data[0], v0[2])
    assert np.array_equal(th[1].data[1], prepared[1].thermal[2][..., ::-1])
    _, box = prepared[1].gts[2][0]
    flipped = [lv.boxes[r, col] for lv in targets[1] for r, col in zip(*lv.positives())]
    assert any(np.allclose(b, (32 - box[2], box[1], 32 - box[0], box[3])) for b in flipped)


def test_one_epoch_deterministic(tiny_dataset, prepared):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=5)
    a = train_loop(None, cfg, VariantConfig("full"), TINY, prepared=prepared)
    b = train_loop(None, cfg, VariantConfig("full"), TINY, prepared=prepared)
    assert dumps_weights(a.weights) == dumps_weights(b.weights) and a.history == b.history
    assert format_history(a.history).startswith("epoch,loss\n1,")


def test_flip_disabled_equals_zero_probability(prepared):
    v = VariantConfig("mi_erasure")
    a = train_loop(None, TrainConfig(epochs=1, batch_size=4, horizontal_flip=False), v, TINY, prepared=prepared)
    b = train_loop(None, TrainConfig(epochs=1, batch_size=4, flip_prob=0.0), v, TINY, prepared=prepared)
    assert dumps_weights(a.weights) == dumps_weights(b.weights)


def test_overfit_ten_samples(prepared):
    ten = list(prepared[:3]) + [PreparedVideo(prepared[3].rgb[:1], prepared[3].thermal[:1], prepared[3].gts[:1])]
    assert sum(len(p.rgb) for p in ten) == 10
    res = train_loop(None, TrainConfig(epochs=50, batch_size=2, lr=0.02), VariantConfig("baseline_rgb"), TINY,
                     prepared=ten)
    assert res.history[-1][1] < res.history[0][1]


def test_empty_dataset():
    with pytest.raises(InputError):
        train_loop([], TrainConfig(epochs=1), VariantConfig("baseline_rgb"), TINY)
