import csv
import shutil
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from einet.data.letterbox import PAD_VALUE, letterbox
from einet.data.synthetic import THERMAL_LEVELS, SyntheticConfig, generate_synthetic, render_video
from einet.data.voc import (ANN_DIR, SETS_DIR, T_DIR, AnnotatedObject, Annotation, load_dataset,
                            parse_annotation, split_frame_id, write_annotation)
from einet.data.weights_io import MAGIC, dumps_weights, load_weights, loads_weights, save_weights
from einet.errors import (ConfigError, FormatError, InputError, LayoutError, LengthError, PairingError,
                          ParseError, TaxonomyError)
from einet.weights import ModelWeights

CAR_XML = """<annotation>
  <filename>v000_000001.png</filename>
  <size><width>64</width><height>64</height><depth>3</depth></size>
  <object><name>car</name><bndbox><xmin>10</xmin><ymin>10</ymin><xmax>50</xmax><ymax>40</ymax></bndbox></object>
</annotation>
"""


class TestXML:
    def test_minimal_car(self):
        ann = parse_annotation(CAR_XML)
        assert ann.frame_id == "v000_000001" and (ann.width, ann.height) == (64, 64)
        assert ann.objects == [AnnotatedObject("car", (10, 10, 50, 40))]
        assert ann.objects[0].class_id == 0

    def test_round_trip(self):
        ann = Annotation("v001_000002", 80, 60, [AnnotatedObject("person", (1, 2, 9, 30)),
                                                 AnnotatedObject("bus", (20, 5, 70, 40), difficult=True)])
        assert parse_annotation(write_annotation(ann)) == ann

    def test_unknown_class(self):
        with pytest.raises(TaxonomyError):
            parse_annotation(CAR_XML.replace(">car<", ">dog<"))

    def test_malformed_reports_line(self):
        with pytest.raises(ParseError, match="line 3"):
            parse_annotation(CAR_XML.replace("</size>", "</sise>"))

    @pytest.mark.parametrize("edit", [("<xmax>50</xmax>", "<xmax>5</xmax>"), ("<ymax>40</ymax>", "<ymax>90</ymax>"),
                                      ("<xmin>10</xmin>", "<xmin>ten</xmin>"), ("<filename>v000_000001.png</filename>", "")])
    def test_invalid_content(self, edit):
        with pytest.raises(ParseError):
            parse_annotation(CAR_XML.replace(*edit))

    def test_frame_ids(self):
        assert split_frame_id("city_a_000012") == ("city_a", 12)
        for bad in ("v000_12", "noindex", "_000001"):
            with pytest.raises(LayoutError):
                split_frame_id(bad)


@pytest.fixture
def copy_of(tiny_dataset, tmp_path):
    dst = tmp_path / "ds"
    shutil.copytree(tiny_dataset.root, dst)
    return dst


class TestLoader:
    def test_loads_videos(self, tiny_dataset):
        train = load_dataset(tiny_dataset.root, "train")
        assert [len(v) for v in train] == [3, 3, 3, 3]
        rgb, th = train[0][1].load()
        assert rgb.shape == th.shape == (3, 64, 64) and rgb.dtype == np.float32
        assert np.array_equal(th[0], th[2])
        assert len(load_dataset(tiny_dataset.root, "test")) == 2

    def test_two_videos_three_frames(self, copy_of):
        ids = [f"v00{v}_{t:06d}" for v in (0, 1) for t in range(3)]
        (copy_of / SETS_DIR / "train.txt").write_text("\n".join(ids) + "\n")
        assert [(v.video_id, len(v)) for v in load_dataset(copy_of, "train")] == [("v000", 3), ("v001", 3)]

    def test_empty_split(self, copy_of):
        (copy_of / SETS_DIR / "train.txt").write_text("")
        assert load_dataset(copy_of, "train") == []

    def test_missing_thermal(self, copy_of):
        (copy_of / T_DIR / "v000_000001.png").unlink()
        with pytest.raises(PairingError, match="v000_000001"):
            load_dataset(copy_of, "train")

    def test_missing_annotation(self, copy_of):
        (copy_of / ANN_DIR / "v001_000000.xml").unlink()
        with pytest.raises(PairingError, match="annotation"):
            load_dataset(copy_of, "train")

    @pytest.mark.parametrize("ids", [["v000_000001", "v000_000000"], ["v000_000000", "v000_000000"]])
    def test_layout_errors(self, copy_of, ids):
        (copy_of / SETS_DIR / "train.txt").write_text("\n".join(ids) + "\n")
        with pytest.raises(LayoutError):
            load_dataset(copy_of, "train")

    def test_missing_root_and_split(self, copy_of):
        with pytest.raises(InputError):
            load_dataset(copy_of / "nope")
        with pytest.raises(LayoutError):
            load_dataset(copy_of, "val")


class TestLetterbox:
    def test_square_identity(self, rng):
        img = rng.uniform(0, 1, (3, 64, 64)).astype(np.float32)
        out, tf = letterbox(img, 64)
        assert np.array_equal(out, img) and (tf.pad_x, tf.pad_y, tf.scale_x) == (0, 0, 1.0)

    def test_landscape_pads_top_and_bottom(self):
        out, tf = letterbox(np.zeros((3, 32, 64), np.float32), 64)
        assert (tf.pad_x, tf.pad_y) == (0, 16)
        assert np.all(out[:, :16] == np.float32(PAD_VALUE)) and np.all(out[:, 48:] == np.float32(PAD_VALUE))
        assert np.all(out[:, 16:48] == 0)

    @given(st.integers(8, 200), st.integers(8, 200), st.lists(st.floats(0, 1), min_size=4, max_size=4))
    def test_box_round_trip(self, w, h, u):
        _, tf = letterbox(np.zeros((1, h, w), np.float32), 64)
        box = (u[0] * w / 2, u[1] * h / 2, w / 2 + u[2] * w / 2, h / 2 + u[3] * h / 2)
        assert np.abs(np.subtract(tf.inverse_box(tf.forward_box(box)), box)).max() < 1e-4

    def test_errors(self):
        with pytest.raises(InputError):
            letterbox(np.zeros((3, 0, 5)), 64)
        with pytest.raises(ConfigError):
            letterbox(np.zeros((3, 5, 5)), 50)


class TestWeightsIO:
    def test_round_trip(self, tmp_path, rng):
        w = ModelWeights({"a.weight": rng.standard_normal((2, 3, 1, 1)).astype(np.float32),
                          "b": np.float32(rng.standard_normal(5)), "scalar": np.array(2.5, np.float32)})
        save_weights(w, tmp_path / "w.einw")
        back = load_weights(tmp_path / "w.einw")
        assert list(back) == list(w)
        assert all(back[k].shape == np.shape(w[k]) and np.array_equal(back[k], w[k]) for k in w)

    def test_empty_is_twelve_bytes(self):
        blob = dumps_weights({})
        assert blob == MAGIC + struct.pack("<II", 1, 0) and len(blob) == 12
        assert loads_weights(blob) == {}

    def test_bad_magic_and_version(self):
        with pytest.raises(FormatError):
            loads_weights(b"XXXX" + bytes(8))
        with pytest.raises(FormatError):
            loads_weights(MAGIC + struct.pack("<II", 2, 0))

    def test_truncation(self):
        blob = dumps_weights({"a": np.ones(4, np.float32)})
        for cut in (5, len(blob) - 1):
            with pytest.raises(LengthError):
                loads_weights(blob[:cut])
        with pytest.raises(FormatError):
            loads_weights(blob + b"\0")

    def test_non_finite_refused(self):
        with pytest.raises(ValueError):
            dumps_weights({"a": np.array([np.nan])})


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSynthetic:
    CFG = SyntheticConfig(regime="night", num_videos=2, num_test_videos=1, frames_per_video=3, seed=7)

    def test_deterministic(self, tmp_path):
        generate_synthetic(self.CFG, tmp_path / "a")
        generate_synthetic(self.CFG, tmp_path / "b")
        assert _tree(tmp_path / "a") == _tree(tmp_path / "b")

    def test_night_is_dark(self):
        day = replace(self.CFG, regime="day")
        lum = lambda cfg: np.mean([f.mean() for f in render_video(cfg, 0)[0]])  # noqa: E731
        assert lum(self.CFG) < 0.25 * lum(day)

    def test_regimes_share_labels(self):
        boxes = {r: [rec.box for rec in render_video(replace(self.CFG, regime=r), 1)[2]]
                 for r in ("day", "night", "motion_blur")}
        assert boxes["day"] == boxes["night"] == boxes["motion_blur"]

    def test_manifest_matches_annotations(self, tiny_dataset):
        with open(tiny_dataset.root / "manifest.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(tiny_dataset.records)
        from_xml = sum(len(fr.annotation.objects) for split in ("train", "test")
                       for v in load_dataset(tiny_dataset.root, split) for fr in v)
        assert from_xml == len(rows)
        assert {r["regime"] for r in rows} == {"night"}

    def test_boxes_match_thermal_silhouettes(self):
        cfg = replace(self.CFG, regime="day", objects_per_frame=(1, 3))
        checked = 0
        for v in range(4):
            _, ths, recs = render_video(cfg, v)
            for r in recs:
                others = [o for o in recs if o is not r and o.frame_index == r.frame_index]
                if any(o.box[0] < r.box[2] + 2 and r.box[0] < o.box[2] + 2 and o.box[1] < r.box[3] + 2
                       and r.box[1] < o.box[3] + 2 for o in others):
                    continue
                level = np.round(THERMAL_LEVELS[r.class_name] * 255)
                ys, xs = np.nonzero(ths[r.frame_index] == level)
                near = (np.abs(xs - (r.box[0] + r.box[2]) / 2) < 20) & (np.abs(ys - (r.box[1] + r.box[3]) / 2) < 20)
                xs, ys = xs[near], ys[near]
                sil = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
                assert np.abs(np.subtract(sil, r.box)).max() <= 2
                checked += 1
        assert checked >= 5

    def test_small_objects_missing_in_thermal(self):
        recs = render_video(replace(self.CFG, regime="distant_small", objects_per_frame=(4, 6)), 0)[2]
        assert all(r.thermal_visible == (r.w * r.h >= 48.0) for r in recs)

    def test_validation(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(frames_per_video=2)
        with pytest.raises(ConfigError):
            SyntheticConfig(regime="fog")
        with pytest.raises(ConfigError):
            SyntheticConfig(image_size=70)
