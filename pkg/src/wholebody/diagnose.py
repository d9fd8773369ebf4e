"""Keypoint error taxonomy (Good/Jitter/Inversion/Swap/Miss) and AP gain from correcting it.

Each labeled ground-truth keypoint of a matched (detection, ground truth)
pair gets exactly one verdict from its per-keypoint similarity
``ks = exp(-d**2 / (2 * s**2 * k**2))``.  Poor keypoints are then explained,
in order, by a different keypoint of the same person (Inversion), by any
keypoint of another person in the image (Swap), or by nothing (Miss).
"""
from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .anno import Dataset, PersonInstance
from .evaluation import (AreaRange, EvalConfig, EvalReport, EvaluationError, SigmaTable,
                         _gt_usable, evaluate, keypoint_areas, part_indices)

CATEGORIES = ("Good", "Jitter", "Inversion", "Swap", "Miss")
ERROR_CATEGORIES = CATEGORIES[1:]
DEFAULT_THRESHOLDS = (0.85, 0.5)
MATCH_OKS = 0.1


@dataclass(frozen=True)
class KeypointVerdict:
    category: str
    index: int
    dt_id: Any
    gt_id: Any
    image_id: Any
    ks: float


@dataclass(frozen=True)
class SizeBucket:
    name: str
    lo: float
    hi: float = math.inf

    def contains(self, area: float) -> bool:
        return self.lo < area <= self.hi

    def area_range(self) -> AreaRange:
        return AreaRange(self.lo, self.hi, include_lo=False)


# half-open (lo, hi] so that the buckets partition (32**2, inf)
SIZE_BUCKETS = (
    SizeBucket("M", 32.0 ** 2, 64.0 ** 2),
    SizeBucket("L", 64.0 ** 2, 96.0 ** 2),
    SizeBucket("XL", 96.0 ** 2, 128.0 ** 2),
    SizeBucket("XX", 128.0 ** 2),
)


def size_bucket(area: float) -> Optional[SizeBucket]:
    """Bucket holding a person of ``area``; None at or below 32**2."""
    for b in SIZE_BUCKETS:
        if b.contains(area):
            return b
    return None


def _check_thresholds(thresholds):
    t_good, t_jitter = thresholds
    if not 0.0 < t_jitter < t_good <= 1.0:
        raise ValueError(f"need 0 < t_jitter < t_good <= 1, got {thresholds}")
    return float(t_good), float(t_jitter)


def _similarity(points: np.ndarray, gt: PersonInstance, idx: np.ndarray, k: np.ndarray,
                areas: np.ndarray) -> np.ndarray:
    """``(P, K)`` similarity of each point against each labeled keypoint of ``gt``; 0 where unlabeled."""
    g = gt.keypoints[idx]
    d2 = np.sum((points[:, None, :2] - g[None, :, :2]) ** 2, axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ks = np.exp(-d2 / (2.0 * areas[None, :] * k[None, :] ** 2))
    ks[:, (g[:, 2] <= 0) | ~(areas > 0)] = 0.0
    return ks


def _classify_pair(dt: PersonInstance, gt: PersonInstance, others: Sequence[PersonInstance],
                   idx, k, area_source, part, t_good, t_jitter, image_id) -> List[KeypointVerdict]:
    areas = keypoint_areas(gt, part, area_source)
    own = _similarity(dt.keypoints[idx], gt, idx, k, areas)
    pts = dt.keypoints[idx]
    other_ks = [_similarity(pts, o, idx, k, keypoint_areas(o, part, area_source)) for o in others]
    out = []
    for j in np.flatnonzero(gt.keypoints[idx, 2] > 0):
        predicted = pts[j, 2] > 0
        ks = float(own[j, j]) if predicted else 0.0
        if ks >= t_good:
            cat = "Good"
        elif ks >= t_jitter:
            cat = "Jitter"
        elif predicted and np.any(np.delete(own[j], j) >= t_good):
            cat = "Inversion"
        elif predicted and any(np.any(o[j] >= t_good) for o in other_ks):
            cat = "Swap"
        else:
            cat = "Miss"
        out.append(KeypointVerdict(cat, int(idx[j]), dt.id, gt.id, image_id, ks))
    return out


def match_pairs(gt: Dataset, dts: Sequence[PersonInstance], sigmas: SigmaTable, part: str = "wholebody",
                match_oks: float = MATCH_OKS, area_source: str = "part",
                max_detections: int = 20) -> List[Tuple[Any, Any, Any]]:
    """(image_id, dt_id, gt_id) pairs from greedy matching at a single loose OKS threshold."""
    cfg = EvalConfig(part=part, oks_thresholds=(match_oks,), max_detections=max_detections,
                     area_source=area_source, sigmas=sigmas)
    report = evaluate(gt, dts, cfg)
    return [(m.image_id, m.dt_id, m.gt_id) for m in report.matches]


def classify_keypoints(gt: Dataset, dts: Sequence[PersonInstance], sigmas: Optional[SigmaTable] = None,
                       thresholds: Tuple[float, float] = DEFAULT_THRESHOLDS, part: str = "wholebody",
                       match_oks: float = MATCH_OKS, area_source: str = "part",
                       pairs: Optional[Iterable[Tuple[Any, Any, Any]]] = None,
                       jobs: int = 1) -> List[KeypointVerdict]:
    """Verdict for every labeled ground-truth keypoint of every matched pair.

    ``pairs`` may carry (image_id, dt_id, gt_id) matching records from an
    earlier evaluation; otherwise they are computed at ``match_oks``.
    Inversion and Swap candidates are limited to keypoints of ``part``.
    """
    t_good, t_jitter = _check_thresholds(thresholds)
    sigmas = sigmas or gt.sigma_table
    if sigmas is None:
        raise EvaluationError("no sigma table supplied")
    if pairs is None:
        pairs = match_pairs(gt, dts, sigmas, part, match_oks, area_source)
    idx = part_indices(part)
    k = sigmas.falloff[idx]
    gt_by_id = {g.id: g for g in gt.instances}
    dt_by_id = {d.id: d for d in dts}
    by_image = gt.by_image()

    def one(pair):
        image_id, dt_id, gt_id = pair
        g = gt_by_id[gt_id]
        others = [o for o in by_image.get(image_id, ()) if o.id != gt_id and not o.iscrowd
                  and _gt_usable(o, part, area_source)]
        return _classify_pair(dt_by_id[dt_id], g, others, idx, k, area_source, part,
                              t_good, t_jitter, image_id)

    pairs = list(pairs)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(one, pairs))
    else:
        chunks = [one(p) for p in pairs]
    return [v for chunk in chunks for v in chunk]


def correct(dts: Sequence[PersonInstance], gt: Dataset, verdicts: Iterable[KeypointVerdict]) -> List[PersonInstance]:
    """Copy of ``dts`` with each verdict's keypoint moved onto its ground truth."""
    gt_by_id = {g.id: g for g in gt.instances}
    fixes: Dict[Any, List[KeypointVerdict]] = {}
    for v in verdicts:
        fixes.setdefault(v.dt_id, []).append(v)
    out = []
    for d in dts:
        todo = fixes.get(d.id)
        if not todo:
            out.append(d)
            continue
        kps = np.array(d.keypoints)
        for v in todo:
            kps[v.index, :2] = gt_by_id[v.gt_id].keypoints[v.index, :2]
            kps[v.index, 2] = 2
        out.append(d.with_keypoints(kps))
    return out


@dataclass
class CorrectionGain:
    """Baseline AP per bucket and AP gain per (category, bucket).

    Bucket ``"all"`` covers every person; category ``"all"`` moves every
    evaluated keypoint, Good ones included, onto its ground truth.
    """
    baseline: Dict[str, float]
    delta: Dict[str, Dict[str, float]]
    corrected: Dict[str, Dict[str, float]] = field(default_factory=dict)


def _bucket_ap(gt, dts, cfg: EvalConfig, bucket: Optional[SizeBucket]) -> float:
    rng = AreaRange(0.0) if bucket is None else bucket.area_range()
    return evaluate(gt, dts, replace(cfg, area_ranges={"all": rng})).ap


def correction_gain(report: EvalReport, verdicts: Sequence[KeypointVerdict],
                    buckets: Sequence[SizeBucket] = SIZE_BUCKETS) -> CorrectionGain:
    """AP gain from correcting each error category, overall and per size bucket.

    Per bucket, only keypoints of ground-truth persons in that bucket are
    corrected and AP is measured over that bucket's persons.
    """
    gt, dts, cfg = report.gt, list(report.dt), report.config
    area_of = {g.id: g.area for g in gt.instances}
    names = ["all"] + [b.name for b in buckets]
    scopes: Dict[str, Optional[SizeBucket]] = {"all": None, **{b.name: b for b in buckets}}
    baseline = {n: _bucket_ap(gt, dts, cfg, scopes[n]) for n in names}
    delta: Dict[str, Dict[str, float]] = {}
    corrected: Dict[str, Dict[str, float]] = {}
    for cat in ERROR_CATEGORIES + ("all",):
        wanted = set(CATEGORIES) if cat == "all" else {cat}
        delta[cat], corrected[cat] = {}, {}
        for n in names:
            b = scopes[n]
            sel = [v for v in verdicts if v.category in wanted
                   and (b is None or b.contains(area_of[v.gt_id]))]
            ap = _bucket_ap(gt, correct(dts, gt, sel), cfg, b) if sel else baseline[n]
            corrected[cat][n] = ap
            delta[cat][n] = ap - baseline[n]
    return CorrectionGain(baseline, delta, corrected)


DIAGNOSE_PARTS = ("body", "foot", "face", "hand", "wholebody")


def pie_breakdown(verdicts: Sequence[KeypointVerdict], parts: Sequence[str] = DIAGNOSE_PARTS) -> Dict[str, Dict[str, float]]:
    """Fraction of verdicts per category within each part; parts without verdicts are left out."""
    if not verdicts:
        raise ValueError("no verdicts to break down")
    out = {}
    for part in parts:
        members = set(part_indices(part).tolist())
        counts = Counter(v.category for v in verdicts if v.index in members)
        total = sum(counts.values())
        if total:
            out[part] = {c: counts.get(c, 0) / total for c in CATEGORIES}
    return out


def category_counts(verdicts: Sequence[KeypointVerdict]) -> Mapping[str, int]:
    counts = Counter(v.category for v in verdicts)
    return {c: counts.get(c, 0) for c in CATEGORIES}
