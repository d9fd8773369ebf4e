"""Whole-body annotation model and the COCO-style whole-body JSON interchange.

Keypoints of one person are held as a ``(133, 3)`` float array of
``(x, y, v)`` rows in the global order body, feet, face, left hand, right
hand.  ``v`` follows the COCO convention: 0 not labeled, 1 labeled but
occluded, 2 labeled and visible.  Coordinates of ``v == 0`` rows carry no
meaning.

Foot keypoints are gated by ``foot_valid``, the same way face and hands are
gated by their box validity flags.  The release format is the source of that
convention; nothing else ties foot labels to a separate flag.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:
    from .evaluation import SigmaTable


class AnnotationError(ValueError):
    """Base class for every failure raised while reading or writing annotations."""


class ParseError(AnnotationError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(AnnotationError):
    def __init__(self, message: str, instance_id: Any = None):
        prefix = f"instance {instance_id!r}: " if instance_id is not None else ""
        super().__init__(prefix + message)
        self.instance_id = instance_id


class ValidationError(AnnotationError):
    def __init__(self, problems: Sequence[Tuple[Any, str]]):
        self.problems = list(problems)
        lines = "; ".join(f"instance {iid!r}: {msg}" for iid, msg in self.problems)
        super().__init__(f"{len(self.problems)} invalid instance(s): {lines}")


@dataclass(frozen=True)
class KeypointLayout:
    total: int
    slices: Tuple[Tuple[str, int, int], ...]

    def __getitem__(self, name: str) -> slice:
        for part, start, stop in self.slices:
            if part == name:
                return slice(start, stop)
        raise KeyError(name)

    @property
    def parts(self) -> Tuple[str, ...]:
        return tuple(p for p, _, _ in self.slices)

    def part_of(self, index: int) -> str:
        for part, start, stop in self.slices:
            if start <= index < stop:
                return part
        raise IndexError(index)


LAYOUT = KeypointLayout(
    total=133,
    slices=(
        ("body", 0, 17),
        ("foot", 17, 23),
        ("face", 23, 91),
        ("left_hand", 91, 112),
        ("right_hand", 112, 133),
    ),
)

BODY = LAYOUT["body"]
FOOT = LAYOUT["foot"]
FACE = LAYOUT["face"]
LEFT_HAND = LAYOUT["left_hand"]
RIGHT_HAND = LAYOUT["right_hand"]

BODY_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
FOOT_NAMES = (
    "left_big_toe", "left_small_toe", "left_heel",
    "right_big_toe", "right_small_toe", "right_heel",
)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``(x, y, w, h)`` in pixels.

    ``score`` is only set on predicted boxes.
    """

    x: float
    y: float
    w: float
    h: float
    valid: bool = True
    score: Optional[float] = None

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def xyxy(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @classmethod
    def from_xyxy(cls, x0, y0, x1, y1, valid=True, score=None) -> "Box":
        return cls(float(x0), float(y0), float(x1 - x0), float(y1 - y0), valid, score)

    @classmethod
    def invalid(cls) -> "Box":
        return cls(0.0, 0.0, 0.0, 0.0, False)

    def iou(self, other: "Box") -> float:
        ax0, ay0, ax1, ay1 = self.xyxy
        bx0, by0, bx1, by1 = other.xyxy
        iw = min(ax1, bx1) - max(ax0, bx0)
        ih = min(ay1, by1) - max(ay0, by0)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0


def minimal_rect(kps: np.ndarray) -> Box:
    """Tight box around the labeled (``v > 0``) rows of a keypoint slice."""
    kps = np.asarray(kps, dtype=float).reshape(-1, 3)
    labeled = kps[kps[:, 2] > 0]
    if len(labeled) == 0:
        return Box.invalid()
    x0, y0 = labeled[:, :2].min(axis=0)
    x1, y1 = labeled[:, :2].max(axis=0)
    return Box.from_xyxy(x0, y0, x1, y1)


# which keypoint slice each gated part owns, with its box attribute
PART_BOXES = (
    ("face", "face_box", FACE),
    ("left_hand", "lhand_box", LEFT_HAND),
    ("right_hand", "rhand_box", RIGHT_HAND),
)


@dataclass(frozen=True, eq=False)
class PersonInstance:
    id: Any
    image_id: Any
    person_box: Box
    keypoints: np.ndarray
    area: float
    face_box: Box = field(default_factory=Box.invalid)
    lhand_box: Box = field(default_factory=Box.invalid)
    rhand_box: Box = field(default_factory=Box.invalid)
    foot_valid: bool = True
    score: Optional[float] = None
    category_id: int = 1
    iscrowd: int = 0
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        kps = np.array(self.keypoints, dtype=float).reshape(LAYOUT.total, 3)
        kps.flags.writeable = False
        object.__setattr__(self, "keypoints", kps)

    def __eq__(self, other):
        if not isinstance(other, PersonInstance):
            return NotImplemented
        return (
            self.id == other.id
            and self.image_id == other.image_id
            and self.person_box == other.person_box
            and self.face_box == other.face_box
            and self.lhand_box == other.lhand_box
            and self.rhand_box == other.rhand_box
            and self.foot_valid == other.foot_valid
            and self.area == other.area
            and self.score == other.score
            and self.category_id == other.category_id
            and self.iscrowd == other.iscrowd
            and dict(self.extra) == dict(other.extra)
            and np.array_equal(self.keypoints, other.keypoints)
        )

    __hash__ = None

    def part(self, name: str) -> np.ndarray:
        return self.keypoints[LAYOUT[name]]

    def part_box(self, name: str) -> Box:
        return {"face": self.face_box, "left_hand": self.lhand_box,
                "right_hand": self.rhand_box, "body": self.person_box,
                "foot": self.person_box}[name]

    def with_keypoints(self, kps: np.ndarray) -> "PersonInstance":
        return replace(self, keypoints=np.asarray(kps, dtype=float))


@dataclass(frozen=True)
class ImageInfo:
    id: Any
    width: int
    height: int
    file_name: str = ""
    extra: Mapping[str, Any] = field(default_factory=dict)


def _sort_key(value):
    # ids are ints in the release but may be strings elsewhere
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return (0, value, "")
    return (1, 0, str(value))


@dataclass(frozen=True)
class Dataset:
    images: Tuple[ImageInfo, ...] = ()
    instances: Tuple[PersonInstance, ...] = ()
    categories: Tuple[Mapping[str, Any], ...] = ()
    sigma_table: Optional["SigmaTable"] = None
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(
            self, "instances",
            tuple(sorted(self.instances, key=lambda i: (_sort_key(i.image_id), _sort_key(i.id)))),
        )
        object.__setattr__(self, "categories", tuple(self.categories))

    def image(self, image_id) -> ImageInfo:
        for info in self.images:
            if info.id == image_id:
                return info
        raise KeyError(image_id)

    def by_image(self) -> Dict[Any, List[PersonInstance]]:
        out: Dict[Any, List[PersonInstance]] = {info.id: [] for info in self.images}
        for inst in self.instances:
            out.setdefault(inst.image_id, []).append(inst)
        return out

    def with_instances(self, instances: Iterable[PersonInstance]) -> "Dataset":
        return replace(self, instances=tuple(instances))


# ---------------------------------------------------------------------------
# interchange format

_PART_KEYS = (
    ("face", "face_kpts", "face_box", "face_valid"),
    ("left_hand", "lefthand_kpts", "lefthand_box", "lefthand_valid"),
    ("right_hand", "righthand_kpts", "righthand_box", "righthand_valid"),
)
_KNOWN_ANN_KEYS = {
    "id", "image_id", "category_id", "iscrowd", "bbox", "area", "score",
    "keypoints", "num_keypoints", "foot_kpts", "foot_valid",
    "face_kpts", "face_box", "face_valid", "face_box_score",
    "lefthand_kpts", "lefthand_box", "lefthand_valid", "lefthand_box_score",
    "righthand_kpts", "righthand_box", "righthand_valid", "righthand_box_score",
}
_KNOWN_IMAGE_KEYS = {"id", "width", "height", "file_name"}


def _flat_kpts(values, n: int, key: str, iid) -> np.ndarray:
    if not isinstance(values, list):
        raise SchemaError(f"'{key}' must be a list", iid)
    if len(values) != 3 * n:
        raise SchemaError(f"'{key}' has {len(values)} entries, expected {3 * n}", iid)
    try:
        arr = np.array(values, dtype=float).reshape(n, 3)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"'{key}' contains non-numeric values", iid) from exc
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"'{key}' contains non-finite values", iid)
    if not np.all(np.isin(arr[:, 2], (0, 1, 2))):
        raise SchemaError(f"'{key}' visibility flags must be 0, 1 or 2", iid)
    return arr


def _box(values, key: str, iid, valid=True, score=None) -> Box:
    if not isinstance(values, list) or len(values) != 4:
        raise SchemaError(f"'{key}' must be [x, y, w, h]", iid)
    try:
        x, y, w, h = (float(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"'{key}' contains non-numeric values", iid) from exc
    if w < 0 or h < 0:
        raise SchemaError(f"'{key}' has negative size", iid)
    return Box(x, y, w, h, bool(valid), None if score is None else float(score))


def _parse_instance(ann: Mapping[str, Any]) -> PersonInstance:
    if not isinstance(ann, dict):
        raise SchemaError("annotation entry is not an object")
    if "id" not in ann or "image_id" not in ann:
        raise SchemaError("annotation is missing 'id' or 'image_id'", ann.get("id"))
    iid = ann["id"]

    raw = ann.get("keypoints", [0.0] * 51)
    if isinstance(raw, list) and len(raw) == 3 * 23:
        fused = _flat_kpts(raw, 23, "keypoints", iid)
        body, foot = fused[:17], fused[17:]
        if "foot_kpts" in ann:
            foot = _flat_kpts(ann["foot_kpts"], 6, "foot_kpts", iid)
    else:
        body = _flat_kpts(raw, 17, "keypoints", iid)
        foot = _flat_kpts(ann.get("foot_kpts", [0.0] * 18), 6, "foot_kpts", iid)
    foot_valid = bool(ann.get("foot_valid", bool(np.any(foot[:, 2] > 0))))

    kps = np.zeros((LAYOUT.total, 3))
    kps[BODY] = body
    kps[FOOT] = foot

    boxes = {}
    for part, kkey, bkey, vkey in _PART_KEYS:
        part_kps = _flat_kpts(ann.get(kkey, [0.0] * (3 * (LAYOUT[part].stop - LAYOUT[part].start))),
                              LAYOUT[part].stop - LAYOUT[part].start, kkey, iid)
        valid = bool(ann.get(vkey, False))
        boxes[part] = _box(ann.get(bkey, [0.0, 0.0, 0.0, 0.0]), bkey, iid, valid,
                           ann.get(bkey.replace("_box", "_box_score")))
        kps[LAYOUT[part]] = part_kps

    if "bbox" not in ann:
        raise SchemaError("annotation is missing 'bbox'", iid)
    person_box = _box(ann["bbox"], "bbox", iid)
    try:
        area = float(ann.get("area", person_box.area))
        score = None if ann.get("score") is None else float(ann["score"])
    except (TypeError, ValueError) as exc:
        raise SchemaError("'area'/'score' must be numeric", iid) from exc

    inst = PersonInstance(
        id=iid,
        image_id=ann["image_id"],
        person_box=person_box,
        keypoints=kps,
        area=area,
        face_box=boxes["face"],
        lhand_box=boxes["left_hand"],
        rhand_box=boxes["right_hand"],
        foot_valid=foot_valid,
        score=score,
        category_id=int(ann.get("category_id", 1)),
        iscrowd=int(ann.get("iscrowd", 0)),
        extra={k: v for k, v in ann.items() if k not in _KNOWN_ANN_KEYS},
    )
    return normalize_validity(inst)


def normalize_validity(inst: PersonInstance) -> PersonInstance:
    """Zero keypoints of invalid parts and drop validity of parts with no labels."""
    kps = np.array(inst.keypoints)
    changes: Dict[str, Any] = {}
    for part, attr, sl in PART_BOXES:
        box = getattr(inst, attr)
        if not box.valid:
            kps[sl] = 0.0
        elif not np.any(kps[sl, 2] > 0):
            changes[attr] = replace(box, valid=False)
    if not inst.foot_valid:
        kps[FOOT] = 0.0
    elif not np.any(kps[FOOT, 2] > 0):
        changes["foot_valid"] = False
    return replace(inst, keypoints=kps, **changes)


def _parse_image(entry) -> ImageInfo:
    if not isinstance(entry, dict) or "id" not in entry:
        raise SchemaError("image entry must be an object with an 'id'")
    try:
        return ImageInfo(
            id=entry["id"],
            width=int(entry.get("width", 0)),
            height=int(entry.get("height", 0)),
            file_name=str(entry.get("file_name", "")),
            extra={k: v for k, v in entry.items() if k not in _KNOWN_IMAGE_KEYS},
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"image {entry.get('id')!r}: width/height must be integers") from exc


def parse_dataset(data: bytes) -> Dataset:
    """Parse a COCO-style whole-body annotation or prediction file.

    A bare JSON list is read as a results file: annotations only, no image
    table.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("file is not valid UTF-8", exc.start) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed JSON: {exc.msg}", offset) from exc

    if isinstance(doc, list):
        doc = {"annotations": doc}
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object or a list of annotations")
    anns = doc.get("annotations", [])
    images = doc.get("images", [])
    if not isinstance(anns, list) or not isinstance(images, list):
        raise SchemaError("'annotations' and 'images' must be lists")

    instances = [_parse_instance(a) for a in anns]
    seen = set()
    for inst in instances:
        key = (_sort_key(inst.image_id), _sort_key(inst.id))
        if key in seen:
            raise SchemaError("duplicate annotation id", inst.id)
        seen.add(key)

    categories = doc.get("categories", [])
    if not isinstance(categories, list):
        raise SchemaError("'categories' must be a list")
    return Dataset(
        images=tuple(_parse_image(e) for e in images),
        instances=tuple(instances),
        categories=tuple(categories),
        extra={k: v for k, v in doc.items() if k not in {"annotations", "images", "categories"}},
    )


def validate_dataset(d: Dataset, ground_truth: bool = True) -> List[Tuple[Any, str]]:
    problems: List[Tuple[Any, str]] = []
    sizes = {info.id: (info.width, info.height) for info in d.images}
    for inst in d.instances:
        for name in ("person_box", "face_box", "lhand_box", "rhand_box"):
            b = getattr(inst, name)
            if b.w < 0 or b.h < 0:
                problems.append((inst.id, f"{name} has negative size"))
        for part, attr, sl in PART_BOXES:
            if not getattr(inst, attr).valid and np.any(inst.keypoints[sl, 2] > 0):
                problems.append((inst.id, f"{part} keypoints labeled on an invalid box"))
        if not inst.foot_valid and np.any(inst.keypoints[FOOT, 2] > 0):
            problems.append((inst.id, "foot keypoints labeled while foot_valid is false"))
        if ground_truth and not inst.area > 0:
            problems.append((inst.id, "area must be positive"))
        if d.images:
            if inst.image_id not in sizes:
                problems.append((inst.id, f"image_id {inst.image_id!r} not in image table"))
                continue
            w, h = sizes[inst.image_id]
            lab = inst.keypoints[inst.keypoints[:, 2] > 0]
            if len(lab) and (lab[:, 0].min() < 0 or lab[:, 1].min() < 0
                             or lab[:, 0].max() > w or lab[:, 1].max() > h):
                problems.append((inst.id, "labeled keypoint outside the image"))
    return problems


def _num(value: float):
    value = round(float(value), 2)
    return int(value) if value.is_integer() else value


def _flat(arr: np.ndarray) -> List:
    out = []
    for x, y, v in arr:
        out.extend((_num(x), _num(y), int(v)))
    return out


def _box_list(b: Box) -> List:
    return [_num(b.x), _num(b.y), _num(b.w), _num(b.h)]


def instance_to_json(inst: PersonInstance, foot_form: str = "separate") -> Dict[str, Any]:
    kps = inst.keypoints
    ann: Dict[str, Any] = {
        "id": inst.id,
        "image_id": inst.image_id,
        "category_id": inst.category_id,
        "iscrowd": inst.iscrowd,
        "bbox": _box_list(inst.person_box),
        "area": _num(inst.area),
    }
    if foot_form == "fused":
        ann["keypoints"] = _flat(kps[:23])
    elif foot_form == "separate":
        ann["keypoints"] = _flat(kps[BODY])
        ann["foot_kpts"] = _flat(kps[FOOT])
    else:
        raise ValueError(f"unknown foot form {foot_form!r}")
    ann["num_keypoints"] = int(np.count_nonzero(kps[BODY, 2] > 0))
    ann["foot_valid"] = bool(inst.foot_valid)
    for part, kkey, bkey, vkey in _PART_KEYS:
        box = inst.part_box(part)
        ann[bkey] = _box_list(box)
        ann[vkey] = bool(box.valid)
        ann[kkey] = _flat(kps[LAYOUT[part]])
        if box.score is not None:
            ann[bkey.replace("_box", "_box_score")] = float(box.score)
    if inst.score is not None:
        ann["score"] = float(inst.score)
    ann.update(inst.extra)
    return ann


def write_dataset(d: Dataset, foot_form: str = "separate", ground_truth: Optional[bool] = None) -> bytes:
    """Serialize ``d``; coordinates are written with at most two decimals.

    ``ground_truth`` defaults to "no instance carries a score".
    """
    if ground_truth is None:
        ground_truth = all(inst.score is None for inst in d.instances)
    problems = validate_dataset(d, ground_truth=ground_truth)
    if problems:
        raise ValidationError(problems)
    doc: Dict[str, Any] = dict(d.extra)
    doc["images"] = [
        {"id": i.id, "width": i.width, "height": i.height, "file_name": i.file_name, **i.extra}
        for i in sorted(d.images, key=lambda i: _sort_key(i.id))
    ]
    doc["annotations"] = [instance_to_json(inst, foot_form) for inst in d.instances]
    doc["categories"] = [dict(c) for c in d.categories]
    return (json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


def make_instance(id, image_id, keypoints, person_box: Optional[Box] = None, score=None,
                  area: Optional[float] = None, **kwargs) -> PersonInstance:
    """Build an instance whose face/hand boxes are the minimal rectangles of its keypoints.

    Validity of each part follows from whether it has any labeled keypoint.
    """
    kps = np.asarray(keypoints, dtype=float).reshape(LAYOUT.total, 3)
    boxes = {attr: minimal_rect(kps[sl]) for _, attr, sl in PART_BOXES}
    if person_box is None:
        person_box = minimal_rect(kps)
        if not person_box.valid:
            raise ValueError("cannot infer a person box without labeled keypoints")
    if area is None:
        area = person_box.area
    kwargs = {**boxes, **kwargs}
    kwargs.setdefault("foot_valid", bool(np.any(kps[FOOT, 2] > 0)))
    return normalize_validity(PersonInstance(
        id=id, image_id=image_id, person_box=person_box, keypoints=kps,
        area=float(area), score=score, **kwargs,
    ))
