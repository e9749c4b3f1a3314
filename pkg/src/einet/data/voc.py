"""VOC-style RGBT dataset layout.

::

    root/
      JPEGImages_RGB/<id>.png      3-channel
      JPEGImages_T/<id>.png        1-channel (expanded to 3 at load)
      Annotations/<id>.xml         one file per RGBT pair
      ImageSets/Main/{train,test}.txt

Frame ids are ``<video>_<6-digit frame index>``.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from ..errors import InputError, LayoutError, PairingError, ParseError, TaxonomyError

CLASSES = ("car", "van", "electromobile", "person", "bus", "truck", "bicycle")
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
RGB_DIR, T_DIR, ANN_DIR, SETS_DIR = "JPEGImages_RGB", "JPEGImages_T", "Annotations", "ImageSets/Main"


@dataclass(frozen=True)
class AnnotatedObject:
    class_name: str
    box: tuple[int, int, int, int]
    difficult: bool = False

    @property
    def class_id(self) -> int:
        return CLASS_INDEX[self.class_name]


@dataclass
class Annotation:
    frame_id: str
    width: int
    height: int
    objects: list[AnnotatedObject] = field(default_factory=list)

    def validate(self) -> None:
        for o in self.objects:
            if o.class_name not in CLASS_INDEX:
                raise TaxonomyError(f"{self.frame_id}: unknown class {o.class_name!r}")
            x1, y1, x2, y2 = o.box
            if not (x1 < x2 and y1 < y2):
                raise ParseError(f"{self.frame_id}: degenerate box {o.box}")
            if x1 < 0 or y1 < 0 or x2 > self.width or y2 > self.height:
                raise ParseError(f"{self.frame_id}: box {o.box} outside {self.width}x{self.height} image")


def _text(node: ET.Element, path: str, frame: str) -> str:
    found = node.find(path)
    if found is None or found.text is None:
        raise ParseError(f"{frame or 'annotation'}: missing <{path}>")
    return found.text.strip()


def _int(node: ET.Element, path: str, frame: str) -> int:
    raw = _text(node, path, frame)
    try:
        return int(round(float(raw)))
    except ValueError:
        raise ParseError(f"{frame}: <{path}> is not a number: {raw!r}") from None


def parse_annotation(xml_text: str) -> Annotation:
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise ParseError(f"malformed XML at line {line}, column {col}: {exc}") from None
    filename = _text(root, "filename", "")
    frame_id = Path(filename).stem
    ann = Annotation(frame_id, _int(root, "size/width", frame_id), _int(root, "size/height", frame_id))
    for obj in root.findall("object"):
        name = _text(obj, "name", frame_id)
        if name not in CLASS_INDEX:
            raise TaxonomyError(f"{frame_id}: unknown class {name!r} (expected one of {', '.join(CLASSES)})")
        diff = obj.find("difficult")
        box = tuple(_int(obj, f"bndbox/{k}", frame_id) for k in ("xmin", "ymin", "xmax", "ymax"))
        ann.objects.append(AnnotatedObject(name, box, diff is not None and (diff.text or "0").strip() == "1"))
    ann.validate()
    return ann


def write_annotation(ann: Annotation) -> str:
    ann.validate()
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = f"{ann.frame_id}.png"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = "3"
    for o in ann.objects:
        node = ET.SubElement(root, "object")
        ET.SubElement(node, "name").text = o.class_name
        ET.SubElement(node, "difficult").text = "1" if o.difficult else "0"
        bb = ET.SubElement(node, "bndbox")
        for k, v in zip(("xmin", "ymin", "xmax", "ymax"), o.box):
            ET.SubElement(bb, k).text = str(int(v))
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def split_frame_id(frame_id: str) -> tuple[str, int]:
    video, sep, idx = frame_id.rpartition("_")
    if not sep or not video or len(idx) != 6 or not idx.isdigit():
        raise LayoutError(f"frame id {frame_id!r} is not <video>_<6-digit index>")
    return video, int(idx)


def load_image(path: Path) -> np.ndarray:
    """``3 x H x W`` float32 in [0, 1]; grayscale files are replicated to 3 channels."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L") if im.mode in ("L", "I;16", "I") else im.convert("RGB"))
    arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


@dataclass
class RGBTFrame:
    video_id: str
    frame_index: int
    rgb_path: Path
    thermal_path: Path
    annotation: Annotation

    @property
    def frame_id(self) -> str:
        return f"{self.video_id}_{self.frame_index:06d}"

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        rgb, th = load_image(self.rgb_path), load_image(self.thermal_path)
        if rgb.shape != th.shape:
            raise PairingError(f"{self.frame_id}: RGB {rgb.shape[1:]} and thermal {th.shape[1:]} sizes differ")
        return rgb, th


@dataclass
class Video:
    video_id: str
    frames: list[RGBTFrame]

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[RGBTFrame]:
        return iter(self.frames)

    def __getitem__(self, i: int) -> RGBTFrame:
        return self.frames[i]


def _find_image(folder: Path, frame_id: str) -> Path | None:
    for suf in IMAGE_SUFFIXES:
        p = folder / f"{frame_id}{suf}"
        if p.is_file():
            return p
    return None


def read_split(root: Path, split: str) -> list[str]:
    path = Path(root) / SETS_DIR / f"{split}.txt"
    if not path.is_file():
        raise LayoutError(f"split file {path} not found")
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def load_dataset(root, split: str = "train") -> list[Video]:
    """Frames of ``split`` grouped by video, each video in frame order."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset root {root} does not exist")
    ids = read_split(root, split)
    seen: set[str] = set()
    videos: dict[str, list[RGBTFrame]] = {}
    for fid in ids:
        if fid in seen:
            raise LayoutError(f"duplicate frame id {fid!r} in {split}.txt")
        seen.add(fid)
        video, idx = split_frame_id(fid)
        frames = videos.setdefault(video, [])
        if frames and frames[-1].frame_index >= idx:
            raise LayoutError(f"frame ids of video {video!r} are not in ascending order at {fid!r}")
        rgb = _find_image(root / RGB_DIR, fid)
        th = _find_image(root / T_DIR, fid)
        xml = root / ANN_DIR / f"{fid}.xml"
        missing = [n for n, p in (("RGB image", rgb), ("thermal image", th)) if p is None]
        if not xml.is_file():
            missing.append("annotation")
        if missing:
            raise PairingError(f"frame {fid!r} has no {' / '.join(missing)}")
        ann = parse_annotation(xml.read_text())
        ann.frame_id = fid
        frames.append(RGBTFrame(video, idx, rgb, th, ann))
    return [Video(v, fr) for v, fr in videos.items()]
