"""Dataset analysis: image blurriness, keypoint scale histograms, hand gestures and label counts."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np

from .anno import BODY, FACE, FOOT, LAYOUT, LEFT_HAND, RIGHT_HAND, Dataset

BLUR_SIZE = 112
BLUR_EPS = 1e-12
LUMA = (0.299, 0.587, 0.114)


class StatsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# blurriness

def load_image(path) -> np.ndarray:
    """RGB (or grayscale) pixel array read with OpenCV."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise StatsError(f"cannot decode image {path}")
    if img.ndim == 3:
        code = cv2.COLOR_BGRA2RGB if img.shape[2] == 4 else cv2.COLOR_BGR2RGB
        img = cv2.cvtColor(img, code)
    return img


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] in (3, 4):
        return img[..., :3] @ np.asarray(LUMA)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    raise StatsError(f"unsupported image shape {img.shape}")


def laplacian(gray: np.ndarray) -> np.ndarray:
    """4-neighbour Laplacian over the interior (no border padding)."""
    g = gray
    return g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]


def blurriness(image: np.ndarray, size: int = BLUR_SIZE, eps: float = BLUR_EPS) -> float:
    """log10 of the Laplacian response variance on a ``size`` x ``size`` grayscale resample.

    Pixel values are used as given, so pass 0..255 images to compare with
    published ranges.  Higher means sharper.
    """
    gray = to_gray(image)
    if gray.size == 0:
        raise StatsError("empty image")
    if gray.shape != (size, size):
        gray = cv2.resize(gray, (size, size), interpolation=cv2.INTER_LINEAR)
    return float(math.log10(float(np.var(laplacian(gray))) + eps))


BLUR_EDGES = (1.0, 2.0, 3.0)
BLUR_LABELS = ("<1", "1-2", "2-3", ">3")
YAW_EDGES = (15.0, 30.0, 45.0)
YAW_LABELS = ("<15", "15-30", "30-45", ">45")


def bucket_label(value: float, edges: Sequence[float], labels: Sequence[str]) -> str:
    """Label of the interval holding ``value``; intervals are closed on the left."""
    if len(labels) != len(edges) + 1:
        raise ValueError("need one more label than edges")
    return labels[int(np.searchsorted(np.asarray(edges), value, side="right"))]


def blur_bucket(score: float) -> str:
    return bucket_label(score, BLUR_EDGES, BLUR_LABELS)


def yaw_bucket(yaw_degrees: float) -> str:
    """Bucket for an externally estimated face yaw; the sign is ignored."""
    return bucket_label(abs(yaw_degrees), YAW_EDGES, YAW_LABELS)


# ---------------------------------------------------------------------------
# skeleton tree and scale histograms

TREE_PARTS = {
    "body": range(BODY.start, BODY.stop),
    "left_foot": (17, 18, 19),
    "right_foot": (20, 21, 22),
    "face": range(FACE.start, FACE.stop),
    "left_hand": range(LEFT_HAND.start, LEFT_HAND.stop),
    "right_hand": range(RIGHT_HAND.start, RIGHT_HAND.stop),
}
LINK = "link"
# histogram part -> tree parts that each contribute one sample per instance
SCALE_PARTS = {
    "body": ("body",),
    "foot": ("left_foot", "right_foot"),
    "face": ("face",),
    "hand": ("left_hand", "right_hand"),
}


def _components(n_nodes: int, edges) -> int:
    parent = list(range(n_nodes))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    count = n_nodes
    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra == rb:
            raise StatsError(f"edge {a}-{b} closes a cycle")
        parent[ra] = rb
        count -= 1
    return count


@dataclass(frozen=True)
class SkeletonTree:
    edges: Tuple[Tuple[int, int, str], ...]

    def __post_init__(self):
        n = LAYOUT.total
        for a, b, part in self.edges:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise StatsError(f"bad edge {a}-{b}")
            if part != LINK:
                members = TREE_PARTS.get(part)
                if members is None:
                    raise StatsError(f"unknown part {part!r}")
                if a not in members or b not in members:
                    raise StatsError(f"edge {a}-{b} leaves part {part}")
        _components(n, [(a, b) for a, b, _ in self.edges])
        for part, members in TREE_PARTS.items():
            local = {k: i for i, k in enumerate(members)}
            inner = [(local[a], local[b]) for a, b, p in self.edges if p == part]
            if _components(len(local), inner) != 1:
                raise StatsError(f"part {part} is not connected")

    def part_edges(self, part: str) -> np.ndarray:
        return np.array([(a, b) for a, b, p in self.edges if p == part], dtype=int).reshape(-1, 2)

    @classmethod
    def parse(cls, text: str) -> "SkeletonTree":
        edges = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 3:
                raise StatsError(f"line {lineno}: expected '<i> <j> <part>'")
            try:
                edges.append((int(fields[0]), int(fields[1]), fields[2]))
            except ValueError:
                raise StatsError(f"line {lineno}: indices must be integers") from None
        return cls(tuple(edges))

    @classmethod
    def load(cls, path=None) -> "SkeletonTree":
        if path is None:
            text = resources.files("wholebody").joinpath("data/skeleton.txt").read_text()
        else:
            with open(path) as f:
                text = f.read()
        return cls.parse(text)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    values: np.ndarray  # one entry per contributing sample

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def mean_edge_length(kps: np.ndarray, edges: np.ndarray) -> Optional[float]:
    """Mean length over edges whose endpoints are both labeled; None if there is none."""
    if len(edges) == 0:
        return None
    a, b = kps[edges[:, 0]], kps[edges[:, 1]]
    usable = (a[:, 2] > 0) & (b[:, 2] > 0)
    if not np.any(usable):
        return None
    return float(np.mean(np.hypot(*(a[usable, :2] - b[usable, :2]).T)))


def scale_distribution(d: Dataset, tree: Optional[SkeletonTree] = None, bin_width: float = 10.0,
                       parts: Sequence[str] = tuple(SCALE_PARTS)) -> Dict[str, Histogram]:
    """Histogram per part of the mean skeleton edge length of each instance, bins from 0."""
    if not bin_width > 0:
        raise StatsError("bin width must be positive")
    tree = tree or SkeletonTree.load()
    out = {}
    for part in parts:
        groups = [tree.part_edges(p) for p in SCALE_PARTS[part]]
        values = []
        for inst in d.instances:
            for edges in groups:
                m = mean_edge_length(inst.keypoints, edges)
                if m is not None:
                    values.append(m)
        values = np.asarray(values, dtype=float)
        top = max(1, int(math.floor(values.max() / bin_width)) + 1) if len(values) else 1
        bins = np.arange(top + 1) * bin_width
        counts, _ = np.histogram(values, bins=bins)
        out[part] = Histogram(bins, counts, values)
    return out


# ---------------------------------------------------------------------------
# hand gestures

WRIST, MIDDLE_BASE = 0, 9
FINGERTIPS = (4, 8, 12, 16, 20)


def normalize_hand_pose(kps) -> np.ndarray:
    """42-vector of hand keypoints with the wrist at the origin and the middle-finger base at (0, 1).

    Accepts ``(21, 2)`` or ``(21, 3)``; with visibilities, the wrist and the
    middle-finger base must be labeled.
    """
    kps = np.asarray(kps, dtype=float)
    if kps.shape[0] != 21 or kps.shape[1] not in (2, 3):
        raise StatsError(f"expected 21 hand keypoints, got shape {kps.shape}")
    if kps.shape[1] == 3 and not (kps[WRIST, 2] > 0 and kps[MIDDLE_BASE, 2] > 0):
        raise StatsError("wrist and middle-finger base must be labeled")
    pts = kps[:, :2] - kps[WRIST, :2]
    ref = pts[MIDDLE_BASE]
    length = float(np.hypot(*ref))
    if not length > 1e-12:
        raise StatsError("wrist and middle-finger base coincide")
    ux, uy = ref / length
    rot = np.array([[uy, -ux], [ux, uy]])
    return (pts @ rot.T / length).ravel()


GESTURES = ("fist", "palm", "others")


@dataclass
class GestureClusters:
    assignments: np.ndarray  # cluster index per pose, in input order
    names: Tuple[str, ...]  # name per cluster index
    centers: np.ndarray

    @property
    def labels(self) -> List[str]:
        return [self.names[i] for i in self.assignments]


def fingertip_spread(pose: np.ndarray) -> float:
    """Mean fingertip distance from the wrist of a normalized 42-vector."""
    p = np.asarray(pose).reshape(21, 2)
    return float(np.mean(np.hypot(*p[list(FINGERTIPS)].T)))


def cluster_gestures(poses, k: int = 3, seed: int = 0, max_iter: int = 100) -> GestureClusters:
    """k-means over normalized hand poses, clusters named by fingertip spread.

    The tightest cluster is 'fist', the widest 'palm' and the rest 'others'.
    Rows are sorted before fitting so the partition does not depend on
    input order.
    """
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    x = np.asarray(poses, dtype=float)
    if x.ndim != 2 or x.shape[1] != 42:
        raise StatsError("poses must be an (N, 42) array")
    if k < 2:
        raise StatsError("need at least two clusters")
    if len(x) < k:
        raise StatsError(f"need at least {k} poses, got {len(x)}")
    order = np.lexsort(x.T[::-1])
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km.fit(x[order])
    assignments = np.empty(len(x), dtype=int)
    assignments[order] = km.labels_
    spread = [fingertip_spread(c) for c in km.cluster_centers_]
    rank = np.argsort(spread, kind="mergesort")
    names = ["others"] * k
    names[rank[0]] = "fist"
    names[rank[-1]] = "palm"
    return GestureClusters(assignments, tuple(names), km.cluster_centers_)


# ---------------------------------------------------------------------------
# annotation counts

COUNT_KEYPOINT_PARTS = {"body": BODY, "foot": FOOT, "face": FACE, "left_hand": LEFT_HAND,
                        "right_hand": RIGHT_HAND}
COUNT_BOX_PARTS = {"body": "person_box", "face": "face_box", "left_hand": "lhand_box",
                   "right_hand": "rhand_box"}


@dataclass
class AnnotationCounts:
    boxes: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(COUNT_BOX_PARTS, 0))
    keypoints: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(COUNT_KEYPOINT_PARTS, 0))

    @property
    def total_boxes(self) -> int:
        return sum(self.boxes.values())

    @property
    def total_keypoints(self) -> int:
        return sum(self.keypoints.values())

    @property
    def hand_keypoints(self) -> int:
        return self.keypoints["left_hand"] + self.keypoints["right_hand"]

    @property
    def hand_boxes(self) -> int:
        return self.boxes["left_hand"] + self.boxes["right_hand"]

    def __add__(self, other: "AnnotationCounts") -> "AnnotationCounts":
        return AnnotationCounts({k: v + other.boxes[k] for k, v in self.boxes.items()},
                                {k: v + other.keypoints[k] for k, v in self.keypoints.items()})

    def rows(self) -> List[Tuple[str, int, int]]:
        """(part, boxes, keypoints) rows with a closing total; foot has no box."""
        parts = ("body", "foot", "face", "left_hand", "right_hand")
        out = [(p, self.boxes.get(p, 0), self.keypoints[p]) for p in parts]
        out.append(("total", self.total_boxes, self.total_keypoints))
        return out


def count_annotations(d: Dataset) -> AnnotationCounts:
    """Valid boxes and labeled (v > 0) keypoints per part."""
    c = AnnotationCounts()
    for inst in d.instances:
        for part, attr in COUNT_BOX_PARTS.items():
            c.boxes[part] += int(getattr(inst, attr).valid)
        labeled = inst.keypoints[:, 2] > 0
        for part, sl in COUNT_KEYPOINT_PARTS.items():
            c.keypoints[part] += int(np.count_nonzero(labeled[sl]))
    return c
