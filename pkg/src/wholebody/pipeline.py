"""Two-stage whole-body inference over pluggable predictors.

A person box is cropped to the network input, the feature stage produces two
feature maps, the body stage emits 38 heatmaps (body, feet, and corner/center
points of the face and hand boxes), and for each decoded face/hand box the
features are RoI-aligned and handed to the matching head.  All decoded
locations are composed back to image coordinates.

Every stage boundary checks exact array shapes and raises
:class:`ContractError` on mismatch.
"""
from __future__ import annotations

import json
import os
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import cv2
import numpy as np

from . import geom
from .anno import (BODY, FACE, FOOT, LAYOUT, LEFT_HAND, RIGHT_HAND, Box, Dataset,
                   ParseError, PersonInstance, SchemaError, _sort_key, normalize_validity)
from .geom import (BOX_TYPES, STAGE_SHAPES, AffineTransform, CornerBoxChannels, Heatmap,
                   RoiFrame, StageShapes)

PART_SLICE = {"face": FACE, "left_hand": LEFT_HAND, "right_hand": RIGHT_HAND}
BOX_ATTR = {"face": "face_box", "left_hand": "lhand_box", "right_hand": "rhand_box"}


class PipelineError(ValueError):
    pass


class ContractError(PipelineError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class StageMeta:
    """What the orchestrator knows about the current call; learned predictors can ignore it."""

    image_id: Any
    det_id: Any
    person_box: Box
    crop_transform: AffineTransform
    part: Optional[str] = None
    roi_box: Optional[Box] = None


class Predictor(Protocol):
    reentrant: bool

    def feature_stage(self, crop: np.ndarray, meta: StageMeta) -> Tuple[np.ndarray, np.ndarray]: ...

    def body_stage(self, f1: np.ndarray, f2: np.ndarray, meta: StageMeta) -> np.ndarray: ...

    def face_stage(self, f1_roi: np.ndarray, f2_roi: np.ndarray, meta: StageMeta) -> np.ndarray: ...

    def hand_stage(self, f1_roi: np.ndarray, f2_roi: np.ndarray, meta: StageMeta) -> np.ndarray: ...


@dataclass(frozen=True)
class PipelineConfig:
    shapes: StageShapes = STAGE_SHAPES
    channels: CornerBoxChannels = CornerBoxChannels()
    person_padding: float = 1.25
    # decoded face/hand boxes are enlarged before RoI cropping so edge keypoints stay inside
    part_padding: float = 1.25
    min_part_size: float = 8.0
    center_threshold: float = 0.3
    samples_per_bin: int = 2
    subpixel_shift: bool = True


@dataclass
class WholeBodyResult:
    instance: PersonInstance
    keypoint_scores: np.ndarray
    part_confidence: Dict[str, float]
    zoom_boxes: Dict[str, Box] = field(default_factory=dict)


def _check(stage: str, arr, shape: Tuple[int, ...], channels: Optional[int] = None) -> np.ndarray:
    if isinstance(arr, Heatmap):
        arr = arr.data
    if not isinstance(arr, np.ndarray):
        raise ContractError(stage, f"expected an array, got {type(arr).__name__}")
    if arr.ndim != 3 or tuple(arr.shape[1:]) != tuple(shape):
        raise ContractError(stage, f"expected (C, {shape[0]}, {shape[1]}), got {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise ContractError(stage, f"expected {channels} channels, got {arr.shape[0]}")
    return arr


def _crop(image: np.ndarray, fwd: AffineTransform, shape: Tuple[int, int]) -> np.ndarray:
    h, w = shape
    crop = cv2.warpAffine(image, fwd.matrix, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if crop.ndim == 2:
        crop = np.repeat(crop[:, :, None], 3, axis=2)
    return crop


def run_person(image: np.ndarray, person_box: Box, p: Predictor, cfg: PipelineConfig = PipelineConfig(),
               image_id: Any = None, det_id: Any = None, score: float = 1.0,
               part_boxes: Optional[Dict[str, Box]] = None) -> WholeBodyResult:
    """Whole-body keypoints for one person box.

    ``part_boxes`` (image coordinates) replaces the decoded face/hand boxes,
    e.g. with ground truth to measure how much box accuracy matters.
    """
    image = np.asarray(image)
    if image.ndim not in (2, 3) or image.size == 0:
        raise PipelineError(f"image must be (H, W) or (H, W, C), got shape {image.shape}")
    img_h, img_w = image.shape[:2]
    if not person_box.valid or not (person_box.w > 0 and person_box.h > 0):
        raise PipelineError(f"person box must be valid with positive area, got {person_box}")
    if person_box.w > img_w or person_box.h > img_h:
        raise PipelineError(f"image {img_w}x{img_h} is smaller than person box {person_box}")

    shapes = cfg.shapes
    fwd, inv = geom.crop_and_resize_person(person_box, shapes.input, cfg.person_padding)
    meta = StageMeta(image_id, det_id, person_box, fwd)
    crop = _crop(image, fwd, shapes.input)

    feats = p.feature_stage(crop, meta)
    if not isinstance(feats, tuple) or len(feats) != 2:
        raise ContractError("feature_stage", "must return (F1, F2)")
    f1 = _check("feature_stage F1", feats[0], shapes.f1)
    f2 = _check("feature_stage F2", feats[1], shapes.f2)

    body_out = _check("body_stage", p.body_stage(f1, f2, meta), shapes.f2, geom.TOTAL_BODY_OUTPUT)
    body_hm = Heatmap(body_out, shapes.input[0] / shapes.f2[0])
    pts, conf = geom.decode_heatmap(body_hm, shift=cfg.subpixel_shift)

    kps = np.zeros((LAYOUT.total, 3))
    scores = np.zeros(LAYOUT.total)
    n_body = geom.BODY_CHANNELS
    kps[:n_body, :2] = inv.apply(pts[:n_body, :2])
    kps[:n_body, 2] = pts[:n_body, 2]
    scores[:n_body] = conf[:n_body]

    decoded = geom.decode_boxes(body_hm, cfg.channels, cfg.center_threshold, shift=cfg.subpixel_shift)
    f1_map = Heatmap(f1, shapes.f1_stride)
    f2_map = Heatmap(f2, shapes.f2_stride)
    crop_h, crop_w = shapes.input
    out_boxes: Dict[str, Box] = {}
    zoom: Dict[str, Box] = {}
    part_conf = {"body": float(conf[BODY].mean()), "foot": float(conf[FOOT].mean())}

    for box_type in BOX_TYPES:
        if part_boxes is not None:
            img_box = part_boxes[box_type]
            crop_box = fwd.apply_box(img_box)
        else:
            crop_box = decoded[box_type]
            img_box = inv.apply_box(crop_box)
        out_boxes[box_type] = img_box
        part_conf[box_type] = 0.0
        if not crop_box.valid:
            continue
        roi = geom.scale_box(crop_box, cfg.part_padding, cfg.min_part_size)
        roi = geom.clamp_box(roi, crop_h, crop_w)
        if not (roi.w > 0 and roi.h > 0):
            out_boxes[box_type] = replace(img_box, valid=False)
            continue
        f1_roi = geom.roi_align(f1_map, roi, shapes.head_input_f1, cfg.samples_per_bin)
        f2_roi = geom.roi_align(f2_map, roi, shapes.head_input_f2, cfg.samples_per_bin)
        head_meta = replace(meta, part=box_type, roi_box=roi)
        sl = PART_SLICE[box_type]
        n = sl.stop - sl.start
        stage = "face_stage" if box_type == "face" else "hand_stage"
        head = getattr(p, stage)(f1_roi.data, f2_roi.data, head_meta)
        head = _check(stage, head, shapes.head_output, n)
        hp, hc = geom.decode_heatmap(Heatmap(head, 1.0), shift=cfg.subpixel_shift)
        frame = RoiFrame(roi, *shapes.head_output)
        kps[sl, :2] = inv.apply(frame.from_grid(hp[:, :2]))
        kps[sl, 2] = hp[:, 2]
        scores[sl] = hc
        part_conf[box_type] = float(hc.mean())
        zoom[box_type] = inv.apply_box(roi)

    kps[:, 0] = np.clip(kps[:, 0], 0.0, img_w)
    kps[:, 1] = np.clip(kps[:, 1], 0.0, img_h)
    kps[kps[:, 2] == 0, :2] = 0.0
    inst = PersonInstance(
        id=det_id,
        image_id=image_id,
        person_box=person_box,
        keypoints=kps,
        area=person_box.area,
        face_box=out_boxes["face"],
        lhand_box=out_boxes["left_hand"],
        rhand_box=out_boxes["right_hand"],
        foot_valid=bool(np.any(kps[FOOT, 2] > 0)),
        score=float(score * part_conf["body"]),
        extra={"keypoint_scores": [round(float(s), 4) for s in scores]},
    )
    return WholeBodyResult(normalize_validity(inst), scores, part_conf, zoom)


@dataclass(frozen=True)
class Detection:
    image_id: Any
    box: Box
    score: float = 1.0
    id: Any = None


def parse_detections(data: bytes) -> List[Detection]:
    """Person detections from a COCO detection-results JSON list.

    Each entry needs ``image_id`` and ``bbox`` (x, y, w, h); ``score``
    defaults to 1 and ``id`` is optional.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    try:
        doc = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ParseError("file is not valid UTF-8", exc.start) from exc
    except json.JSONDecodeError as exc:
        offset = len(data.decode("utf-8")[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed JSON: {exc.msg}", offset) from exc
    if isinstance(doc, dict) and "annotations" in doc:
        doc = doc["annotations"]
    if not isinstance(doc, list):
        raise SchemaError("detections must be a JSON list")
    out = []
    for n, entry in enumerate(doc):
        if not isinstance(entry, dict) or "image_id" not in entry or "bbox" not in entry:
            raise SchemaError(f"detection #{n} needs 'image_id' and 'bbox'")
        bbox = entry["bbox"]
        try:
            x, y, w, h = (float(v) for v in bbox)
            score = float(entry.get("score", 1.0))
        except (TypeError, ValueError):
            raise SchemaError(f"detection #{n}: bbox must be 4 numbers and score a number") from None
        if not all(np.isfinite([x, y, w, h, score])):
            raise SchemaError(f"detection #{n}: non-finite value")
        out.append(Detection(entry["image_id"], Box(x, y, w, h), score, entry.get("id")))
    return out


def _det_key(det: Detection):
    b = det.box
    return (_sort_key(det.image_id), b.x, b.y, b.w, b.h, -det.score, _sort_key(det.id))


def blank_image_loader(d: Dataset) -> Callable[[Any], np.ndarray]:
    """Loader returning black canvases sized from the image table."""
    def load(image_id):
        try:
            info = d.image(image_id)
        except KeyError:
            raise PipelineError(f"image {image_id!r} not in the image table") from None
        if info.width <= 0 or info.height <= 0:
            raise PipelineError(f"image {image_id!r} has no width/height metadata")
        return np.zeros((info.height, info.width, 3), dtype=np.uint8)
    return load


def file_image_loader(d: Dataset, images_dir: str) -> Callable[[Any], np.ndarray]:
    blank = blank_image_loader(d)

    def load(image_id):
        ref = blank(image_id)
        path = os.path.join(images_dir, d.image(image_id).file_name)
        img = cv2.imread(path, cv2.IMREAD_COLOR)
        if img is None:
            raise PipelineError(f"cannot read image {path}")
        if img.shape[:2] != ref.shape[:2]:
            raise PipelineError(f"image {path} size {img.shape[1]}x{img.shape[0]} disagrees with metadata")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return load


def run_dataset(d: Dataset, detections: Sequence[Detection], p: Predictor,
                cfg: PipelineConfig = PipelineConfig(), image_loader=None, jobs: int = 1,
                progress: Optional[Callable[[int, int], None]] = None,
                part_boxes: Optional[Callable[[Detection], Dict[str, Box]]] = None) -> List[WholeBodyResult]:
    """Run every detection; results come back sorted by image id, then box.

    Detections without an id are numbered 1..N in that order.  Non-reentrant
    predictors always run serially.
    """
    known = {info.id for info in d.images}
    for det in detections:
        if det.image_id not in known:
            raise PipelineError(f"detection on unknown image {det.image_id!r}")
    loader = image_loader or blank_image_loader(d)
    ordered = sorted(detections, key=_det_key)
    ordered = [det if det.id is not None else replace(det, id=i + 1) for i, det in enumerate(ordered)]
    total = len(ordered)
    done = [0]
    lock = threading.Lock()

    def work(det: Detection) -> WholeBodyResult:
        pb = part_boxes(det) if part_boxes is not None else None
        res = run_person(loader(det.image_id), det.box, p, cfg, det.image_id, det.id, det.score, pb)
        with lock:
            done[0] += 1
            if progress is not None:
                progress(done[0], total)
        return res

    workers = jobs if getattr(p, "reentrant", False) else 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, ordered))
    return [work(det) for det in ordered]


# ---------------------------------------------------------------------------
# predictors without learned weights

def _stable_seed(*parts) -> int:
    return zlib.crc32(repr(parts).encode("utf-8"))


class GroundTruthStubPredictor:
    """Emits heatmaps rendered from known ground truth.

    Each stage encodes the matching ground-truth person (highest IoU with the
    person box) on the stage's own output grid, so the pipeline output
    differs from ground truth only by heatmap quantization.  ``box_noise``
    moves every face/hand box edge by up to that fraction of the box size
    before its corners are encoded; the heads still only see what falls
    inside the RoI they are given.
    """

    reentrant = True

    def __init__(self, gt: Dataset, sigma: float = 3.0, box_noise: float = 0.0, seed: int = 0,
                 shapes: StageShapes = STAGE_SHAPES):
        self.gt = gt
        self.sigma = sigma
        self.box_noise = box_noise
        self.seed = seed
        self.shapes = shapes
        self._by_image = gt.by_image()

    def person(self, meta: StageMeta) -> Optional[PersonInstance]:
        candidates = self._by_image.get(meta.image_id, [])
        best, best_iou = None, 0.0
        for inst in candidates:
            iou = inst.person_box.iou(meta.person_box)
            if iou > best_iou:
                best, best_iou = inst, iou
        return best

    def noisy_box(self, inst: PersonInstance, box_type: str) -> Box:
        box = getattr(inst, BOX_ATTR[box_type])
        if not self.box_noise or not box.valid:
            return box
        rng = np.random.default_rng(_stable_seed(self.seed, inst.image_id, inst.id, box_type))
        e = rng.uniform(-self.box_noise, self.box_noise, size=4)
        x0, y0, x1, y1 = box.xyxy
        x0, x1 = x0 + e[0] * box.w, x1 + e[1] * box.w
        y0, y1 = y0 + e[2] * box.h, y1 + e[3] * box.h
        return Box.from_xyxy(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))

    def feature_stage(self, crop, meta):
        return (np.zeros((1,) + self.shapes.f1), np.zeros((1,) + self.shapes.f2))

    def body_stage(self, f1, f2, meta):
        out_shape = self.shapes.f2
        stride = self.shapes.input[0] / out_shape[0]
        inst = self.person(meta)
        if inst is None:
            return np.zeros((geom.TOTAL_BODY_OUTPUT,) + out_shape)
        pts = np.zeros((geom.TOTAL_BODY_OUTPUT, 3))
        body = inst.keypoints[:geom.BODY_CHANNELS]
        pts[:geom.BODY_CHANNELS, :2] = meta.crop_transform.apply(body[:, :2])
        pts[:geom.BODY_CHANNELS, 2] = body[:, 2]
        channels = CornerBoxChannels()
        for box_type in BOX_TYPES:
            box = meta.crop_transform.apply_box(self.noisy_box(inst, box_type))
            pts[list(channels.of(box_type))] = geom.box_points(box)
        hm, _ = geom.encode_heatmap(pts, out_shape, stride, self.sigma)
        return hm.data

    def _head(self, meta, n):
        out_shape = self.shapes.head_output
        inst = self.person(meta)
        if inst is None:
            return np.zeros((n,) + out_shape)
        kps = np.array(inst.keypoints[PART_SLICE[meta.part]])
        kps[:, :2] = meta.crop_transform.apply(kps[:, :2])
        grid = RoiFrame(meta.roi_box, *out_shape).to_grid(kps)
        hm, _ = geom.encode_heatmap(grid, out_shape, 1.0, self.sigma)
        return hm.data

    def face_stage(self, f1_roi, f2_roi, meta):
        return self._head(meta, FACE.stop - FACE.start)

    def hand_stage(self, f1_roi, f2_roi, meta):
        return self._head(meta, LEFT_HAND.stop - LEFT_HAND.start)


class ExternalBlobPredictor:
    """Replays stage outputs serialized as heatmap blobs.

    Files are looked up per detection id: ``<id>_body.bin`` for the 38-channel
    body output and ``<id>_face.bin``, ``<id>_left_hand.bin``,
    ``<id>_right_hand.bin`` for the heads (needed only when that box decodes
    as valid).
    """

    reentrant = True

    def __init__(self, blob_dir: str, shapes: StageShapes = STAGE_SHAPES):
        self.blob_dir = blob_dir
        self.shapes = shapes

    def _load(self, meta: StageMeta, name: str) -> np.ndarray:
        path = os.path.join(self.blob_dir, f"{meta.det_id}_{name}.bin")
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError:
            raise PipelineError(f"instance {meta.det_id!r}: missing blob {path}") from None
        try:
            return geom.heatmap_from_blob(blob).data
        except ValueError as exc:
            raise PipelineError(f"instance {meta.det_id!r}: bad blob {path}: {exc}") from exc

    def feature_stage(self, crop, meta):
        return (np.zeros((1,) + self.shapes.f1), np.zeros((1,) + self.shapes.f2))

    def body_stage(self, f1, f2, meta):
        return self._load(meta, "body")

    def face_stage(self, f1_roi, f2_roi, meta):
        return self._load(meta, "face")

    def hand_stage(self, f1_roi, f2_roi, meta):
        return self._load(meta, meta.part)


def results_to_dataset(d: Dataset, results: Sequence[WholeBodyResult]) -> Dataset:
    """Predictions packaged with the image table of ``d``, ready for writing."""
    return Dataset(images=d.images, instances=tuple(r.instance for r in results),
                   categories=d.categories)
