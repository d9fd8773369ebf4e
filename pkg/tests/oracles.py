"""Brute-force reference implementations used to check the package.

Written from the formulas with plain loops; they only read instance fields
and never call into the code under test.
"""
import math

import numpy as np

PART_RANGES = {
    "body": [(0, 17)],
    "foot": [(17, 23)],
    "face": [(23, 91)],
    "left_hand": [(91, 112)],
    "right_hand": [(112, 133)],
    "hand": [(91, 112), (112, 133)],
    "wholebody": [(0, 133)],
}


def indices(part):
    return [i for a, b in PART_RANGES[part] for i in range(a, b)]


def keypoint_area(inst, part, i):
    """Scale area for keypoint ``i``: part boxes for face/hand parts, person area otherwise."""
    if part in ("face", "left_hand", "right_hand", "hand"):
        if 23 <= i < 91:
            b = inst.face_box
        elif 91 <= i < 112:
            b = inst.lhand_box
        else:
            b = inst.rhand_box
        return b.w * b.h
    return inst.area


def oks_brute(gt, dt, part, falloff):
    total, n = 0.0, 0
    for i in indices(part):
        gx, gy, gv = gt.keypoints[i]
        if gv <= 0:
            continue
        n += 1
        dx, dy, dv = dt.keypoints[i]
        if dv <= 0:
            continue
        d2 = (dx - gx) ** 2 + (dy - gy) ** 2
        a = keypoint_area(gt, part, i)
        total += math.exp(-d2 / (2.0 * a * falloff[i] * falloff[i]))
    return None if n == 0 else total / n


def gt_counts(gt, part):
    labeled = any(gt.keypoints[i][2] > 0 for i in indices(part))
    if not labeled or gt.iscrowd:
        return False
    return all(keypoint_area(gt, part, i) > 0 for i in indices(part) if gt.keypoints[i][2] > 0)


def map_oracle(gt_dataset, dts, part, falloff, thresholds, area_lo=0.0, area_hi=float("inf"),
               max_det=20):
    """AP and AR by enumerating the precision-recall curve."""
    gts_by_image = {}
    for g in gt_dataset.instances:
        if gt_counts(g, part):
            gts_by_image.setdefault(g.image_id, []).append(g)
    dts_by_image = {}
    for d in dts:
        if any(d.keypoints[i][2] > 0 for i in indices(part)):
            dts_by_image.setdefault(d.image_id, []).append(d)

    def in_range(a):
        return area_lo <= a <= area_hi

    cache = {}

    def sim(g, d):
        key = (id(g), id(d))
        if key not in cache:
            cache[key] = oks_brute(g, d, part, falloff)
        return cache[key]

    aps, ars = [], []
    for t in thresholds:
        thr = min(t, 1 - 1e-10)
        records = []  # (score, is_tp) for non-ignored detections, image order then score order
        n_pos = 0
        for info in gt_dataset.images:
            gts = gts_by_image.get(info.id, [])
            n_pos += sum(1 for g in gts if in_range(g.area))
            dlist = sorted(dts_by_image.get(info.id, []), key=lambda d: -d.score)[:max_det]
            taken = [False] * len(gts)
            for d in dlist:
                sims = [sim(g, d) for g in gts]
                best, best_j = None, None
                # prefer unmatched in-range gts; among them the highest OKS, later gt on ties
                for want_ignored in (False, True):
                    for j, g in enumerate(gts):
                        if taken[j] or (not in_range(g.area)) != want_ignored:
                            continue
                        if sims[j] >= thr and (best is None or sims[j] >= best):
                            best, best_j = sims[j], j
                    if best_j is not None:
                        break
                if best_j is not None:
                    taken[best_j] = True
                    if in_range(gts[best_j].area):
                        records.append((d.score, True))
                elif in_range(d.area):
                    records.append((d.score, False))
        if n_pos == 0:
            return float("nan"), float("nan")
        # stable sort by score, like the reference evaluator
        order = sorted(range(len(records)), key=lambda k: -records[k][0])
        tp = fp = 0
        prec, rec = [], []
        for k in order:
            if records[k][1]:
                tp += 1
            else:
                fp += 1
            prec.append(tp / (tp + fp))
            rec.append(tp / n_pos)
        # precision envelope from the right
        for k in range(len(prec) - 2, -1, -1):
            prec[k] = max(prec[k], prec[k + 1])
        sampled = []
        for r in np.linspace(0, 1, 101):
            p = 0.0
            for k in range(len(rec)):
                if rec[k] >= r:
                    p = prec[k]
                    break
            sampled.append(p)
        aps.append(sum(sampled) / len(sampled))
        ars.append(rec[-1] if rec else 0.0)
    return sum(aps) / len(aps), sum(ars) / len(ars)


def roi_align_brute(data, stride, box, out_h, out_w, s):
    """Loop-based bilinear RoI sampling in pixel-area convention (cell i centred at (i + 0.5) * stride)."""
    c_n, h, w = data.shape
    out = np.zeros((c_n, out_h, out_w))
    bw = box.w / stride / out_w
    bh = box.h / stride / out_h

    def sample(c, y, x):
        y = min(max(y, 0.0), h - 1.0)
        x = min(max(x, 0.0), w - 1.0)
        y0, x0 = int(math.floor(y)), int(math.floor(x))
        y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
        ly, lx = y - y0, x - x0
        return ((1 - ly) * (1 - lx) * data[c, y0, x0] + (1 - ly) * lx * data[c, y0, x1]
                + ly * (1 - lx) * data[c, y1, x0] + ly * lx * data[c, y1, x1])

    for c in range(c_n):
        for i in range(out_h):
            for j in range(out_w):
                acc = 0.0
                for a in range(s):
                    for b in range(s):
                        y = box.y / stride + (i + (a + 0.5) / s) * bh - 0.5
                        x = box.x / stride + (j + (b + 0.5) / s) * bw - 0.5
                        acc += sample(c, y, x)
                out[c, i, j] = acc / (s * s)
    return out


def verdict_brute(dt, gt, others, part, falloff, t_good, t_jitter):
    """Taxonomy of every labeled gt keypoint of one matched pair, by direct rule application."""
    idx = indices(part)
    out = {}

    def ks(point, person, j):
        if person.keypoints[j][2] <= 0:
            return 0.0
        a = keypoint_area(person, part, j)
        if a <= 0:
            return 0.0
        d2 = (point[0] - person.keypoints[j][0]) ** 2 + (point[1] - person.keypoints[j][1]) ** 2
        return math.exp(-d2 / (2 * a * falloff[j] ** 2))

    for i in idx:
        if gt.keypoints[i][2] <= 0:
            continue
        p = dt.keypoints[i]
        if p[2] <= 0:
            out[i] = "Miss"
            continue
        own = ks(p, gt, i)
        if own >= t_good:
            out[i] = "Good"
        elif own >= t_jitter:
            out[i] = "Jitter"
        elif any(ks(p, gt, j) >= t_good for j in idx if j != i):
            out[i] = "Inversion"
        elif any(ks(p, o, j) >= t_good for o in others for j in idx):
            out[i] = "Swap"
        else:
            out[i] = "Miss"
    return out
