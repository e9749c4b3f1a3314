"""Finite-difference gradient suite over every parameterized module, on toy shapes."""

from __future__ import annotations

import zlib
from typing import Callable, Mapping

import numpy as np

from . import fusion, nn
from .backbone import BackboneConfig, extract_features, init_branch
from .detector import DetectorConfig, VariantConfig, forward, init_detector
from .gradcheck import GradCheckReport, finite_diff_check
from .head import LevelPrediction, RawPrediction, detect_heads, init_head, init_neck, pafpn
from .tensor import Tensor, neg_silu, sigmoid, silu
from .tpe import TemporalWindow, tpe_fuse, tpe_fuse_window
from .train import assign_targets, detection_loss
from .weights import ModelWeights, is_buffer

TOY_BACKBONE = BackboneConfig(stem_channels=4, stage_channels=(4, 8, 8), blocks_per_stage=(1, 1, 1))
TOY_DET = DetectorConfig(backbone=TOY_BACKBONE, num_classes=3, head_width=4, input_size=32)

Case = tuple[Callable[[Mapping[str, Tensor]], Tensor], dict[str, np.ndarray]]


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _project(out: Tensor, seed: int) -> Tensor:
    """Scalarize with a fixed random projection (a plain sum hides too much)."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * r).sum()


def _split(weights: Mapping[str, np.ndarray]):
    buffers = {k: np.asarray(v, np.float64) for k, v in weights.items() if is_buffer(k)}
    trainable = {k: np.asarray(v, np.float64) for k, v in weights.items() if not is_buffer(k)}
    return trainable, buffers


def _cases(seed: int) -> dict[str, Case]:
    g = lambda name, *shape: _rng(seed, name).standard_normal(shape)  # noqa: E731
    cases: dict[str, Case] = {}

    cases["conv2d"] = (
        lambda p: _project(nn.conv2d(p["x"], p["k"], stride=2, padding=1, bias=p["b"]), seed),
        {"x": g("x", 1, 2, 5, 5), "k": g("k", 3, 2, 3, 3), "b": g("b", 3)},
    )
    stats = {"m": np.zeros(3), "v": np.ones(3)}
    cases["batch_norm"] = (
        lambda p: _project(nn.batch_norm(p["x"], p["scale"], p["shift"], stats["m"], stats["v"], mode="train"), seed),
        {"x": g("x", 2, 3, 3, 3), "scale": g("s", 3) + 1.5, "shift": g("sh", 3)},
    )
    cases["activations"] = (
        lambda p: _project(silu(p["x"]) + neg_silu(p["x"]) * 0.7 + sigmoid(p["x"]) * 1.3, seed),
        {"x": g("x", 4, 5) * 3},
    )
    cases["pooling"] = (
        lambda p: _project(nn.nearest_upsample(nn.max_pool(p["x"])), seed)
        + _project(nn.channel_max(p["x"]), seed + 1) + _project(nn.global_avg_pool(p["x"]), seed + 2),
        {"x": g("x", 3, 4, 4)},
    )
    cases["fully_connected"] = (
        lambda p: _project(nn.fully_connected(p["x"], p["w"], p["b"]), seed),
        {"x": g("x", 2, 4), "w": g("w", 3, 4), "b": g("b", 3)},
    )

    bb = init_branch(TOY_BACKBONE, seed, "t")
    bb_train, bb_buf = _split(bb)
    img = _rng(seed, "img").uniform(0, 1, (1, 3, 32, 32))

    def backbone_f(p):
        pyr = extract_features(Tensor(img), {**bb_buf, **p}, "t", emit_inactive=True, config=TOY_BACKBONE)
        return sum((_project(lv.activated, seed + i) + _project(lv.inactive, seed + 10 + i)
                    for i, lv in enumerate(pyr.levels)), Tensor(0.0))

    cases["backbone"] = (backbone_f, bb_train)

    window = TemporalWindow((-2, -1, 1))
    cases["tpe"] = (
        lambda p: _project(tpe_fuse(p["prev"], p["next"]), seed)
        + _project(tpe_fuse_window({-2: p["prev2"], -1: p["prev"], 1: p["next"]}, window), seed + 1),
        {"prev": g("prev", 4, 3, 3), "next": g("next", 4, 3, 3), "prev2": g("prev2", 4, 3, 3)},
    )

    fw = ModelWeights()
    fusion.init_erasure_level(fw, seed, "f", 8)
    fusion.init_cat_level(fw, seed, "f", 8)
    f_train, f_buf = _split(fw)
    feats = {"F_rgb": g("F_rgb", 1, 8, 4, 4), "F_t": g("F_t", 1, 8, 4, 4), "F_ti": g("F_ti", 1, 8, 4, 4)}
    att_keys = [k for k in f_train if k.startswith(("f.spatial", "f.channel"))]
    cases["attention"] = (
        lambda p: _project(fusion.spatial_attention(p["F_rgb"], p, "f.spatial"), seed)
        + _project(fusion.channel_attention(p["F_rgb"], p, "f.channel"), seed + 1),
        {"F_rgb": feats["F_rgb"], **{k: f_train[k] for k in att_keys}},
    )
    cases["erasure_fusion"] = (
        lambda p: _project(fusion.fuse_level(p["F_rgb"], p["F_t"], p["F_ti"], {**f_buf, **p}, "f"), seed),
        {**feats, **{k: v for k, v in f_train.items() if not k.startswith("f.cat")}},
    )
    cases["cat_fusion"] = (
        lambda p: _project(fusion.cat_fuse(p["F_rgb"], p["F_t"], {**f_buf, **p}, "f"), seed),
        {"F_rgb": feats["F_rgb"], "F_t": feats["F_t"], **{k: v for k, v in f_train.items() if k.startswith("f.cat")}},
    )

    ch = TOY_DET.channels
    nw = ModelWeights()
    init_neck(nw, seed, ch)
    n_train, n_buf = _split(nw)
    levels = {f"L{i}": g(f"L{i}", 1, c, 32 // s, 32 // s) for i, (c, s) in enumerate(zip(ch, (8, 16, 32)))}
    cases["pafpn"] = (
        lambda p: sum((_project(o, seed + i) for i, o in enumerate(
            pafpn([p["L0"], p["L1"], p["L2"]], {**n_buf, **p}))), Tensor(0.0)),
        {**levels, **n_train},
    )
    hw = ModelWeights()
    init_head(hw, seed, ch, TOY_DET.num_classes, TOY_DET.head_width)
    h_train, h_buf = _split(hw)

    def head_f(p):
        raw = detect_heads([p["L0"], p["L1"], p["L2"]], {**h_buf, **p})
        return sum((_project(lv.cls_logits, seed + i) + _project(lv.obj_logit, seed + 10 + i)
                    + _project(lv.reg, seed + 20 + i) for i, lv in enumerate(raw.levels)), Tensor(0.0))

    cases["head"] = (head_f, {**levels, **h_train})

    targets = [assign_targets([(0, (3.0, 4.0, 12.0, 13.0)), (2, (10.0, 6.0, 30.0, 24.0))], 32),
               assign_targets([(1, (18.0, 17.0, 25.0, 29.0))], 32)]
    k = TOY_DET.num_classes
    pred = {}
    for i, s in enumerate((8, 16, 32)):
        n = 32 // s
        pred[f"cls{i}"] = g(f"cls{i}", 2, k, n, n)
        pred[f"obj{i}"] = g(f"obj{i}", 2, 1, n, n)
        pred[f"reg{i}"] = g(f"reg{i}", 2, 4, n, n) * 0.3

    def loss_f(p):
        raw = RawPrediction([LevelPrediction(s, p[f"cls{i}"], p[f"obj{i}"], p[f"reg{i}"])
                             for i, s in enumerate((8, 16, 32))])
        return detection_loss(raw, targets)

    cases["detection_loss"] = (loss_f, pred)

    variant = VariantConfig("full")
    dw = init_detector(variant, seed, TOY_DET)
    d_train, d_buf = _split(dw)
    frames = {o: Tensor(_rng(seed, f"frame{o}").uniform(0, 1, (1, 3, 32, 32))) for o in (-1, 0, 1)}

    def detector_f(p):
        raw = forward(frames, frames, {**d_buf, **p}, variant, TOY_DET)
        return sum((_project(lv.obj_logit, seed + i) + _project(lv.reg, seed + 10 + i)
                    for i, lv in enumerate(raw.levels)), Tensor(0.0))

    cases["detector_full"] = (detector_f, d_train)
    return cases


MODULES = ("conv2d", "batch_norm", "activations", "pooling", "fully_connected", "backbone", "tpe",
           "attention", "erasure_fusion", "cat_fusion", "pafpn", "head", "detection_loss", "detector_full")


def gradient_suite(seed: int = 0, h: float = 1e-3, tol: float = 1e-3, max_checks: int = 6,
                   modules=MODULES) -> dict[str, GradCheckReport]:
    """Run central differences for each module; returns one report per module."""
    cases = _cases(seed)
    return {m: finite_diff_check(cases[m][0], cases[m][1], h=h, tol=tol, max_checks=max_checks, seed=seed)
            for m in modules}
