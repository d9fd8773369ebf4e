"""Whole-body evaluation: OKS-based AP/AR per part, NME, EPE, box AP and sigma derivation.

Matching and precision accumulation follow the COCO keypoint evaluator:
per image, detections are visited by descending score and greedily take the
unmatched ground truth of highest similarity at or above the threshold; AP
is the 101-point interpolated precision averaged over thresholds.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .anno import BODY, FACE, FOOT, LAYOUT, LEFT_HAND, RIGHT_HAND, Box, Dataset, PersonInstance

# published COCO per-keypoint standard deviations for the 17 body keypoints
COCO_BODY_SIGMAS = np.array([
    0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72,
    0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89,
]) / 10.0

SIGMA_FLOOR = 0.001
DEFAULT_THRESHOLDS = tuple(np.linspace(0.5, 0.95, 10))
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)

PART_SLICES: Dict[str, Tuple[slice, ...]] = {
    "body": (BODY,),
    "foot": (FOOT,),
    "face": (FACE,),
    "left_hand": (LEFT_HAND,),
    "right_hand": (RIGHT_HAND,),
    "hand": (LEFT_HAND, RIGHT_HAND),
    "wholebody": (slice(0, LAYOUT.total),),
}
REPORT_PARTS = ("body", "foot", "face", "hand", "wholebody")


class EvaluationError(ValueError):
    pass


def part_indices(part: str) -> np.ndarray:
    try:
        slices = PART_SLICES[part]
    except KeyError:
        raise EvaluationError(f"unknown part {part!r}; expected one of {sorted(PART_SLICES)}") from None
    return np.concatenate([np.arange(s.start, s.stop) for s in slices])


@dataclass(frozen=True, eq=False)
class SigmaTable:
    """Per-keypoint annotation standard deviations, normalized by object scale.

    The OKS falloff constant of keypoint ``i`` is ``2 * sigmas[i]``, as in the
    COCO evaluator, so tables published for COCO-style evaluators load as-is.
    """

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=float).ravel()
        if s.shape != (LAYOUT.total,):
            raise EvaluationError(f"sigma table needs {LAYOUT.total} values, got {s.size}")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise EvaluationError("sigmas must be finite and non-negative")
        s = np.maximum(s, SIGMA_FLOOR)
        s.flags.writeable = False
        object.__setattr__(self, "sigmas", s)

    @property
    def falloff(self) -> np.ndarray:
        return 2.0 * self.sigmas

    @classmethod
    def from_parts(cls, foot, face, left_hand, right_hand, body=COCO_BODY_SIGMAS) -> "SigmaTable":
        s = np.empty(LAYOUT.total)
        for sl, vals in ((BODY, body), (FOOT, foot), (FACE, face),
                         (LEFT_HAND, left_hand), (RIGHT_HAND, right_hand)):
            vals = np.broadcast_to(np.asarray(vals, dtype=float), (sl.stop - sl.start,))
            s[sl] = vals
        return cls(s)

    @classmethod
    def parse(cls, text: str) -> "SigmaTable":
        tokens = []
        for line in text.splitlines():
            tokens.extend(line.split("#", 1)[0].split())
        try:
            values = [float(t) for t in tokens]
        except ValueError as exc:
            raise EvaluationError(f"sigma config: {exc}") from exc
        return cls(np.array(values))

    @classmethod
    def load(cls, path) -> "SigmaTable":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def to_text(self) -> str:
        lines = []
        for part, start, stop in LAYOUT.slices:
            lines.append(f"# {part}")
            lines.append(" ".join(f"{v:.6f}" for v in self.sigmas[start:stop]))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class AreaRange:
    lo: float
    hi: float = math.inf
    include_lo: bool = True

    def contains(self, area: float) -> bool:
        above = area >= self.lo if self.include_lo else area > self.lo
        return above and area <= self.hi


COCO_AREA_RANGES: Mapping[str, AreaRange] = {
    "all": AreaRange(0.0),
    "medium": AreaRange(32.0 ** 2, 96.0 ** 2),
    "large": AreaRange(96.0 ** 2),
}


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings.

    ``area_source="part"`` scales face OKS by the face-box area and hand OKS by
    the hand-box areas; ``"person"`` uses the person area for every part.
    """

    part: str = "wholebody"
    oks_thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    max_detections: int = 20
    area_source: str = "part"
    area_ranges: Mapping[str, AreaRange] = field(default_factory=lambda: dict(COCO_AREA_RANGES))
    sigmas: Optional[SigmaTable] = None

    def __post_init__(self):
        part_indices(self.part)
        t = np.asarray(self.oks_thresholds, dtype=float)
        if t.size == 0 or np.any(t <= 0) or np.any(t > 1) or np.any(np.diff(t) <= 0):
            raise EvaluationError("thresholds must be strictly increasing in (0, 1]")
        if self.area_source not in ("part", "person"):
            raise EvaluationError("area_source must be 'part' or 'person'")
        if "all" not in self.area_ranges:
            raise EvaluationError("area ranges must include 'all'")
        if self.max_detections <= 0:
            raise EvaluationError("max_detections must be positive")


def keypoint_areas(inst: PersonInstance, part: str, area_source: str = "part") -> np.ndarray:
    """Scale area per keypoint of ``part`` for ``inst`` (used as ``s**2`` in OKS)."""
    idx = part_indices(part)
    areas = np.full(len(idx), float(inst.area))
    if area_source == "part" and part in ("face", "left_hand", "right_hand", "hand"):
        for sl, box in ((FACE, inst.face_box), (LEFT_HAND, inst.lhand_box), (RIGHT_HAND, inst.rhand_box)):
            areas[(idx >= sl.start) & (idx < sl.stop)] = box.area
    return areas


def oks_arrays(gt_kps, dt_kps, falloff, area) -> float:
    """OKS between ``(K, 3)`` keypoint rows; ``area`` may be a scalar or per keypoint.

    Only ground-truth rows with ``v > 0`` count.  Detected rows with ``v == 0``
    were not predicted and contribute zero similarity.  Returns NaN when no
    ground-truth row is labeled.
    """
    gt_kps = np.asarray(gt_kps, dtype=float)
    dt_kps = np.asarray(dt_kps, dtype=float)
    labeled = gt_kps[:, 2] > 0
    n = np.count_nonzero(labeled)
    if n == 0:
        return math.nan
    area = np.broadcast_to(np.asarray(area, dtype=float), labeled.shape)[labeled]
    k = np.asarray(falloff, dtype=float)[labeled]
    d2 = np.sum((gt_kps[labeled, :2] - dt_kps[labeled, :2]) ** 2, axis=1)
    ks = np.exp(-d2 / (2.0 * area * k ** 2))
    ks[dt_kps[labeled, 2] <= 0] = 0.0
    return float(ks.sum() / n)


def _gt_usable(inst: PersonInstance, part: str, area_source: str) -> bool:
    idx = part_indices(part)
    labeled = inst.keypoints[idx, 2] > 0
    if inst.iscrowd or not np.any(labeled):
        return False
    return bool(np.all(keypoint_areas(inst, part, area_source)[labeled] > 0))


def _dt_usable(inst: PersonInstance, part: str) -> bool:
    return bool(np.any(inst.keypoints[part_indices(part), 2] > 0))


def oks(gt: PersonInstance, dt: PersonInstance, part: str, sigmas: SigmaTable,
        area: Optional[float] = None, area_source: str = "part") -> Optional[float]:
    """Object keypoint similarity over one part; None when the part is unlabeled in ``gt``.

    ``area`` overrides the per-part scale; by default it comes from
    :func:`keypoint_areas`.
    """
    idx = part_indices(part)
    if area is None:
        if not _gt_usable(gt, part, area_source):
            return None
        areas = keypoint_areas(gt, part, area_source)
    else:
        if not area > 0:
            raise EvaluationError("area must be positive")
        areas = area
    value = oks_arrays(gt.keypoints[idx], dt.keypoints[idx], sigmas.falloff[idx], areas)
    return None if math.isnan(value) else value


# ---------------------------------------------------------------------------
# matching and accumulation, shared by keypoint and box evaluation

def greedy_match(sim: np.ndarray, gt_ignore: np.ndarray, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """COCO greedy assignment.

    ``sim`` is ``(D, G)`` with detections in descending score order and
    ignored ground truths last.  Returns the matched gt column per detection
    (-1 if none) and whether each detection matched an ignored gt.
    """
    n_dt, n_gt = sim.shape
    thr = min(threshold, 1 - 1e-10)
    gt_taken = np.zeros(n_gt, dtype=bool)
    dt_match = np.full(n_dt, -1, dtype=int)
    dt_ignore = np.zeros(n_dt, dtype=bool)
    for d in range(n_dt):
        best = thr
        m = -1
        for g in range(n_gt):
            if gt_taken[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if sim[d, g] < best:
                continue
            best = sim[d, g]
            m = g
        if m == -1:
            continue
        dt_match[d] = m
        dt_ignore[d] = gt_ignore[m]
        gt_taken[m] = True
    return dt_match, dt_ignore


@dataclass
class _ImageData:
    image_id: Any
    gt_ids: List[Any]
    gt_areas: np.ndarray
    dt_ids: List[Any]
    dt_scores: np.ndarray
    dt_areas: np.ndarray
    sim: np.ndarray  # (D, G)


@dataclass
class _RangeResult:
    dt_scores: np.ndarray
    matched: np.ndarray  # (T, D)
    dt_ignore: np.ndarray  # (T, D)
    n_gt: int


def _eval_range(img: _ImageData, rng: AreaRange, thresholds) -> Tuple[_RangeResult, List[Tuple]]:
    ignore = np.array([not rng.contains(a) for a in img.gt_areas], dtype=bool)
    order = np.argsort(ignore, kind="mergesort")
    sim = img.sim[:, order]
    ig = ignore[order]
    n_t, n_d = len(thresholds), len(img.dt_ids)
    matched = np.zeros((n_t, n_d), dtype=bool)
    dt_ig = np.zeros((n_t, n_d), dtype=bool)
    pairs = []
    out_of_range = np.array([not rng.contains(a) for a in img.dt_areas], dtype=bool)
    for t, thr in enumerate(thresholds):
        m, mig = greedy_match(sim, ig, thr)
        matched[t] = m >= 0
        dt_ig[t] = mig | ((m < 0) & out_of_range)
        for d in np.flatnonzero(m >= 0):
            g = order[m[d]]
            pairs.append((thr, img.dt_ids[d], img.gt_ids[g], float(img.sim[d, g])))
    return _RangeResult(img.dt_scores, matched, dt_ig, int(np.count_nonzero(~ignore))), pairs


def accumulate(results: Sequence[_RangeResult], n_thresholds: int) -> Tuple[np.ndarray, np.ndarray]:
    """Interpolated precision ``(T, 101)`` and final recall ``(T,)``; -1 where no gt exists."""
    precision = -np.ones((n_thresholds, len(RECALL_THRESHOLDS)))
    recall = -np.ones(n_thresholds)
    n_gt = sum(r.n_gt for r in results)
    if n_gt == 0:
        return precision, recall
    if results:
        scores = np.concatenate([r.dt_scores for r in results])
        matched = np.concatenate([r.matched for r in results], axis=1)
        dt_ig = np.concatenate([r.dt_ignore for r in results], axis=1)
    else:
        scores = np.zeros(0)
        matched = dt_ig = np.zeros((n_thresholds, 0), dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    matched = matched[:, order]
    dt_ig = dt_ig[:, order]
    tps = np.cumsum(matched & ~dt_ig, axis=1, dtype=float)
    fps = np.cumsum(~matched & ~dt_ig, axis=1, dtype=float)
    for t in range(n_thresholds):
        tp, fp = tps[t], fps[t]
        nd = len(tp)
        rc = tp / n_gt
        pr = tp / (fp + tp + np.spacing(1))
        recall[t] = rc[-1] if nd else 0.0
        pr = np.maximum.accumulate(pr[::-1])[::-1] if nd else pr
        inds = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
        q = np.zeros(len(RECALL_THRESHOLDS))
        ok = inds < nd
        q[ok] = pr[inds[ok]]
        precision[t] = q
    return precision, recall


def _summary(precision: np.ndarray, recall: np.ndarray) -> Tuple[float, float]:
    if np.all(recall < 0):
        return math.nan, math.nan
    return float(precision.mean()), float(recall.mean())


@dataclass(frozen=True)
class MatchRecord:
    image_id: Any
    threshold: float
    dt_id: Any
    gt_id: Any
    oks: float


@dataclass(eq=False)
class EvalReport:
    part: str
    ap: float
    ar: float
    ap_by_range: Dict[str, float]
    ar_by_range: Dict[str, float]
    precision: np.ndarray
    recall: np.ndarray
    thresholds: Tuple[float, ...]
    matches: List[MatchRecord]
    gt: Dataset
    dt: Tuple[PersonInstance, ...]
    config: EvalConfig

    def ap_at(self, threshold: float) -> float:
        t = int(np.argmin(np.abs(np.asarray(self.thresholds) - threshold)))
        return float(self.precision[t].mean())


def _image_ids(gt: Dataset) -> List[Any]:
    # instances may name images missing from a results-style table
    ids = [info.id for info in gt.images]
    ids.extend(i.image_id for i in gt.instances)
    return list(dict.fromkeys(ids))


def _check_dts(gt_ids, dt: Sequence[PersonInstance]):
    known = set(gt_ids)
    seen = set()
    for inst in dt:
        if inst.id in seen:
            raise EvaluationError(f"duplicate detection id {inst.id!r}")
        seen.add(inst.id)
        if inst.image_id not in known:
            raise EvaluationError(f"detection {inst.id!r} refers to unknown image {inst.image_id!r}")
        if inst.score is None:
            raise EvaluationError(f"detection {inst.id!r} has no score")


def _sorted_dts(dts: List[PersonInstance], limit: int) -> List[PersonInstance]:
    order = np.argsort([-d.score for d in dts], kind="mergesort")
    return [dts[i] for i in order[:limit]]


def evaluate(gt: Dataset, dt: Sequence[PersonInstance], cfg: EvalConfig = EvalConfig(),
             jobs: int = 1) -> EvalReport:
    sigmas = cfg.sigmas or gt.sigma_table
    if sigmas is None:
        raise EvaluationError("no sigma table: set EvalConfig.sigmas or Dataset.sigma_table")
    image_ids = _image_ids(gt)
    _check_dts(image_ids, dt)
    part = cfg.part
    idx = part_indices(part)
    falloff = sigmas.falloff[idx]

    gts_by_image: Dict[Any, List[PersonInstance]] = {i: [] for i in image_ids}
    for inst in gt.instances:
        if _gt_usable(inst, part, cfg.area_source):
            gts_by_image[inst.image_id].append(inst)
    dts_by_image: Dict[Any, List[PersonInstance]] = {i: [] for i in image_ids}
    for inst in dt:
        if _dt_usable(inst, part):
            dts_by_image[inst.image_id].append(inst)

    def prepare(image_id) -> _ImageData:
        gts = gts_by_image[image_id]
        dts = _sorted_dts(dts_by_image[image_id], cfg.max_detections)
        sim = np.zeros((len(dts), len(gts)))
        for g, ginst in enumerate(gts):
            areas = keypoint_areas(ginst, part, cfg.area_source)
            gk = ginst.keypoints[idx]
            for d, dinst in enumerate(dts):
                sim[d, g] = oks_arrays(gk, dinst.keypoints[idx], falloff, areas)
        return _ImageData(
            image_id, [g.id for g in gts], np.array([g.area for g in gts], dtype=float),
            [d.id for d in dts], np.array([d.score for d in dts], dtype=float),
            np.array([d.area for d in dts], dtype=float), sim,
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            images = list(pool.map(prepare, image_ids))
    else:
        images = [prepare(i) for i in image_ids]
    return _report(part, images, cfg, gt, tuple(dt))


def _report(part, images: Sequence[_ImageData], cfg: EvalConfig, gt, dt) -> EvalReport:
    thresholds = tuple(float(t) for t in cfg.oks_thresholds)
    ap_by_range, ar_by_range = {}, {}
    precision_all = recall_all = None
    matches: List[MatchRecord] = []
    for name, rng in cfg.area_ranges.items():
        results = []
        for img in images:
            res, pairs = _eval_range(img, rng, thresholds)
            results.append(res)
            if name == "all":
                matches.extend(MatchRecord(img.image_id, *p) for p in pairs)
        precision, recall = accumulate(results, len(thresholds))
        ap_by_range[name], ar_by_range[name] = _summary(precision, recall)
        if name == "all":
            precision_all, recall_all = precision, recall
    return EvalReport(
        part=part, ap=ap_by_range["all"], ar=ar_by_range["all"],
        ap_by_range=ap_by_range, ar_by_range=ar_by_range,
        precision=precision_all, recall=recall_all, thresholds=thresholds,
        matches=matches, gt=gt, dt=dt, config=cfg,
    )


def evaluate_parts(gt: Dataset, dt: Sequence[PersonInstance], parts=REPORT_PARTS,
                   cfg: EvalConfig = EvalConfig(), jobs: int = 1) -> Dict[str, EvalReport]:
    out = {}
    for part in parts:
        out[part] = evaluate(gt, dt, replace(cfg, part=part), jobs=jobs)
    return out


# ---------------------------------------------------------------------------
# face/hand box detection

BOX_ATTRS = {"face": "face_box", "left_hand": "lhand_box", "right_hand": "rhand_box"}


@dataclass(frozen=True)
class BoxReport:
    box_type: str
    ap: float
    ar: float


def box_detection_eval(gt: Dataset, dt: Sequence[PersonInstance],
                       iou_thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                       max_detections: int = 100) -> Dict[str, BoxReport]:
    """AP/AR of the face, left-hand and right-hand boxes.

    A detected box scores ``instance.score * box.score`` (missing factors
    count as 1).  Invalid boxes on either side are not evaluated.
    """
    image_ids = _image_ids(gt)
    known = set(image_ids)
    for inst in dt:
        if inst.image_id not in known:
            raise EvaluationError(f"detection {inst.id!r} refers to unknown image {inst.image_id!r}")
    out = {}
    for box_type, attr in BOX_ATTRS.items():
        gts: Dict[Any, List[Box]] = {i: [] for i in image_ids}
        dts: Dict[Any, List[Tuple[float, Box]]] = {i: [] for i in image_ids}
        for inst in gt.instances:
            b = getattr(inst, attr)
            if b.valid and not inst.iscrowd:
                gts[inst.image_id].append(b)
        for inst in dt:
            b = getattr(inst, attr)
            if b.valid:
                score = (1.0 if inst.score is None else inst.score) * (1.0 if b.score is None else b.score)
                dts[inst.image_id].append((score, b))
        out[box_type] = _eval_boxes(box_type, image_ids, gts, dts, iou_thresholds, max_detections)
    return out


def evaluate_boxes(gt_boxes: Mapping[Any, Sequence[Box]], dt_boxes: Mapping[Any, Sequence[Tuple[float, Box]]],
                   iou_thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                   max_detections: int = 100, box_type: str = "box") -> BoxReport:
    """Box AP/AR from per-image lists: gt boxes, and ``(score, box)`` detections."""
    image_ids = list(dict.fromkeys(list(gt_boxes) + list(dt_boxes)))
    gts = {i: list(gt_boxes.get(i, ())) for i in image_ids}
    dts = {i: list(dt_boxes.get(i, ())) for i in image_ids}
    return _eval_boxes(box_type, image_ids, gts, dts, iou_thresholds, max_detections)


def _eval_boxes(box_type, image_ids, gts, dts, iou_thresholds, max_detections) -> BoxReport:
    thresholds = tuple(float(t) for t in iou_thresholds)
    results = []
    for image_id in image_ids:
        g = gts[image_id]
        order = np.argsort([-s for s, _ in dts[image_id]], kind="mergesort")[:max_detections]
        d = [dts[image_id][i] for i in order]
        sim = np.array([[db.iou(gb) for gb in g] for _, db in d]).reshape(len(d), len(g))
        img = _ImageData(image_id, list(range(len(g))), np.array([b.area for b in g], dtype=float),
                         list(range(len(d))), np.array([s for s, _ in d], dtype=float),
                         np.array([b.area for _, b in d], dtype=float), sim)
        res, _ = _eval_range(img, AreaRange(0.0), thresholds)
        results.append(res)
    precision, recall = accumulate(results, len(thresholds))
    ap, ar = _summary(precision, recall)
    return BoxReport(box_type, ap, ar)


# ---------------------------------------------------------------------------
# landmark errors

# outer eye corners in the 68-point face layout
OUTER_EYE_CORNERS = (36, 45)


def interocular_distance(face_kps) -> float:
    face_kps = np.asarray(face_kps, dtype=float)
    a, b = face_kps[OUTER_EYE_CORNERS[0], :2], face_kps[OUTER_EYE_CORNERS[1], :2]
    return float(np.linalg.norm(a - b))


def hand_norm(box: Box) -> float:
    return math.sqrt(box.w * box.h)


def _labeled_errors(gt, dt) -> np.ndarray:
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    dt = np.asarray(dt, dtype=float).reshape(-1, 3)
    if gt.shape != dt.shape:
        raise EvaluationError("gt and dt keypoint sets differ in length")
    labeled = gt[:, 2] > 0
    if not np.any(labeled):
        raise EvaluationError("no labeled ground-truth keypoint")
    return np.linalg.norm(gt[labeled, :2] - dt[labeled, :2], axis=1)


def nme(gt, dt, norm: float) -> float:
    """Mean error over labeled ground-truth points divided by ``norm``."""
    if not norm > 0:
        raise EvaluationError("normalization length must be positive")
    return float(_labeled_errors(gt, dt).mean() / norm)


def epe(gt, dt) -> float:
    """Mean end-point error in pixels over labeled ground-truth points."""
    return float(_labeled_errors(gt, dt).mean())


# ---------------------------------------------------------------------------
# annotator statistics

def derive_sigmas(annotations, norms, ddof: int = 1) -> np.ndarray:
    """Per-keypoint annotation spread from repeated independent labels.

    ``annotations`` is ``(N, A, K, 3)``: N instances, A annotators.  ``norms``
    is ``(N,)`` or ``(N, K)``, the scale (square root of the relevant box
    area) dividing coordinates.  For each instance and keypoint with at least
    two labeling annotators the per-axis variances of the normalized
    coordinates are summed; these are averaged over instances and the square
    root is returned.  The result is the RMS Euclidean deviation from the
    annotator mean, the quantity COCO publishes as its per-keypoint sigma.
    Keypoints with no usable instance are NaN.
    """
    ann = np.asarray(annotations, dtype=float)
    if ann.ndim != 4 or ann.shape[-1] != 3:
        raise EvaluationError("annotations must have shape (instances, annotators, keypoints, 3)")
    n, a, k, _ = ann.shape
    norms = np.broadcast_to(np.asarray(norms, dtype=float).reshape(n, -1), (n, k))
    if np.any(norms <= 0):
        raise EvaluationError("normalization scales must be positive")
    labeled = ann[..., 2] > 0  # (N, A, K)
    counts = labeled.sum(axis=1)  # (N, K)
    usable = counts >= 2
    if not np.any(usable):
        raise EvaluationError("no keypoint has two or more annotators")
    xy = ann[..., :2] / norms[:, None, :, None]
    w = labeled[..., None].astype(float)
    cnt = np.maximum(counts, 1)[..., None]
    mean = (xy * w).sum(axis=1) / cnt  # (N, K, 2)
    sq = (((xy - mean[:, None]) ** 2) * w).sum(axis=1)  # (N, K, 2)
    denom = np.maximum(counts - ddof, 1)[..., None]
    var = (sq / denom).sum(axis=-1)  # (N, K)
    var[~usable] = 0.0
    n_used = usable.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        pooled = var.sum(axis=0) / n_used
    return np.where(n_used > 0, np.sqrt(pooled), np.nan)
