"""Non-learned geometry of the staged whole-body network.

Coordinate conventions, shared by everything in this package:

* Heatmap cell ``(row, col)`` sits at input-crop position ``(col * stride,
  row * stride)``.  Encoding divides crop coordinates by the stride, decoding
  multiplies back.
* Feature maps passed to :func:`roi_align` use pixel-area semantics: feature
  pixel ``i`` covers ``[i, i + 1)`` in feature units, its center at ``i + 0.5``.
  A box given in crop pixels is divided by the feature stride.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .anno import Box


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Channel-major ``(C, H, W)`` grid with its stride relative to the input crop."""

    data: np.ndarray
    stride: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"heatmap data must be (C, H, W), got shape {data.shape}")
        if not self.stride > 0:
            raise ValueError("heatmap stride must be positive")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Heatmap):
            return NotImplemented
        return self.stride == other.stride and np.array_equal(self.data, other.data)

    __hash__ = None


_BLOB_HEADER = struct.Struct("<IIIf")


def heatmap_to_blob(h: Heatmap) -> bytes:
    """Little-endian header ``(channels, height, width, stride)`` then float32 data."""
    header = _BLOB_HEADER.pack(h.channels, h.height, h.width, h.stride)
    return header + h.data.astype("<f4").tobytes()


def heatmap_from_blob(blob: bytes) -> Heatmap:
    if len(blob) < _BLOB_HEADER.size:
        raise ValueError("heatmap blob shorter than its header")
    c, hh, ww, stride = _BLOB_HEADER.unpack_from(blob)
    expected = _BLOB_HEADER.size + 4 * c * hh * ww
    if len(blob) != expected:
        raise ValueError(f"heatmap blob has {len(blob)} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_BLOB_HEADER.size).reshape(c, hh, ww)
    return Heatmap(data.astype(np.float64), float(stride))


def encode_heatmap(kps, shape: Tuple[int, int], stride: float = 1.0,
                   sigma: float = 3.0) -> Tuple[Heatmap, np.ndarray]:
    """Render one unnormalized Gaussian per keypoint.

    ``sigma`` is in heatmap cells.  Returns the heatmap and a boolean mask
    that is True where a channel was rendered; unlabeled keypoints and
    keypoints whose nearest cell falls off the grid leave their channel zero.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    height, width = shape
    if height <= 0 or width <= 0:
        raise ValueError("heatmap shape must be positive")
    kps = np.asarray(kps, dtype=float).reshape(-1, 3)
    u = kps[:, 0] / stride
    v = kps[:, 1] / stride
    rendered = (
        (kps[:, 2] > 0)
        & (u >= -0.5) & (u < width - 0.5)
        & (v >= -0.5) & (v < height - 0.5)
    )
    cols = np.arange(width, dtype=float)
    rows = np.arange(height, dtype=float)
    gx = np.exp(-((cols[None, :] - u[:, None]) ** 2) / (2 * sigma ** 2))
    gy = np.exp(-((rows[None, :] - v[:, None]) ** 2) / (2 * sigma ** 2))
    data = gy[:, :, None] * gx[:, None, :]
    data[~rendered] = 0.0
    return Heatmap(data, stride), rendered


def decode_heatmap(h: Heatmap, shift: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax decoding with the quarter-cell shift toward the higher neighbor.

    Returns ``(K, 3)`` keypoints ``(x, y, v)`` in crop pixels (``v`` is 2 for
    a decoded point, 0 for an empty channel) and the per-channel peak value.
    Ties resolve to the lowest row, then the lowest column.
    """
    data = h.data
    c, height, width = data.shape
    flat = data.reshape(c, -1)
    idx = np.argmax(flat, axis=1)
    conf = flat[np.arange(c), idx]
    py, px = np.divmod(idx, width)
    x = px.astype(float)
    y = py.astype(float)
    if shift:
        ch = np.arange(c)
        inner_x = (px > 0) & (px < width - 1)
        inner_y = (py > 0) & (py < height - 1)
        dx = np.zeros(c)
        dy = np.zeros(c)
        dx[inner_x] = (data[ch[inner_x], py[inner_x], px[inner_x] + 1]
                       - data[ch[inner_x], py[inner_x], px[inner_x] - 1])
        dy[inner_y] = (data[ch[inner_y], py[inner_y] + 1, px[inner_y]]
                       - data[ch[inner_y], py[inner_y] - 1, px[inner_y]])
        x += 0.25 * np.sign(dx)
        y += 0.25 * np.sign(dy)
    found = conf > 0
    out = np.zeros((c, 3))
    out[:, 0] = np.where(found, x * h.stride, 0.0)
    out[:, 1] = np.where(found, y * h.stride, 0.0)
    out[:, 2] = np.where(found, 2.0, 0.0)
    return out, np.where(found, conf, 0.0)


BOX_TYPES = ("face", "left_hand", "right_hand")
CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right", "center")


@dataclass(frozen=True)
class CornerBoxChannels:
    """Channel indices of the 5 box points per box type in the 38-channel body output.

    Channels 0-16 are body keypoints, 17-22 feet, then face, left hand and
    right hand, each as top-left, top-right, bottom-left, bottom-right, center.
    """

    face: Tuple[int, int, int, int, int] = (23, 24, 25, 26, 27)
    left_hand: Tuple[int, int, int, int, int] = (28, 29, 30, 31, 32)
    right_hand: Tuple[int, int, int, int, int] = (33, 34, 35, 36, 37)

    def __post_init__(self):
        used = self.face + self.left_hand + self.right_hand
        if len(set(used)) != 15:
            raise ValueError("box channels must be 15 distinct indices")

    def of(self, box_type: str) -> Tuple[int, int, int, int, int]:
        return getattr(self, box_type)


BODY_CHANNELS = 23
TOTAL_BODY_OUTPUT = 38


def box_points(box: Box) -> np.ndarray:
    """The 5 encoded points of a box as ``(5, 3)`` rows, all labeled when the box is valid."""
    x0, y0, x1, y1 = box.xyxy
    cx, cy = box.center
    pts = np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1], [cx, cy]], dtype=float)
    v = np.full((5, 1), 2.0 if box.valid else 0.0)
    return np.hstack([pts, v])


def decode_boxes(h: Heatmap, channels: CornerBoxChannels = CornerBoxChannels(),
                 center_threshold: float = 0.3, shift: bool = True) -> Dict[str, Box]:
    """Recover face and hand boxes from their corner and center heatmaps.

    Each edge is the mean of the two corners that share it, which is the
    axis-aligned rectangle minimizing the summed squared corner distance.
    The center peak is the box confidence (``Box.score``).
    """
    needed = max(channels.face + channels.left_hand + channels.right_hand)
    if h.channels <= needed:
        raise ValueError(f"heatmap has {h.channels} channels, box channels need {needed + 1}")
    pts, conf = decode_heatmap(h, shift=shift)
    out = {}
    for box_type in BOX_TYPES:
        tl, tr, bl, br, ctr = channels.of(box_type)
        corners = pts[[tl, tr, bl, br]]
        score = float(conf[ctr])
        if np.any(corners[:, 2] == 0):
            out[box_type] = Box(0.0, 0.0, 0.0, 0.0, False, score)
            continue
        x0 = (corners[0, 0] + corners[2, 0]) / 2.0
        x1 = (corners[1, 0] + corners[3, 0]) / 2.0
        y0 = (corners[0, 1] + corners[1, 1]) / 2.0
        y1 = (corners[2, 1] + corners[3, 1]) / 2.0
        # corners decoded in the wrong order cannot form a box
        valid = score >= center_threshold and x1 >= x0 and y1 >= y0
        out[box_type] = Box.from_xyxy(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1),
                                      valid, score)
    return out


def _bilinear_weights(coords: np.ndarray, size: int) -> np.ndarray:
    """Matrix ``(len(coords), size)`` of 1-D linear interpolation weights, clamped to the border."""
    c = np.clip(coords, 0.0, size - 1)
    lo = np.floor(c).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = c - lo
    w = np.zeros((len(coords), size))
    rows = np.arange(len(coords))
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def roi_align(feat: Heatmap, box: Box, out: Tuple[int, int], samples_per_bin: int = 2) -> Heatmap:
    """Crop ``box`` (input-crop pixels) out of ``feat`` by averaged bilinear sampling.

    Each output bin averages ``samples_per_bin ** 2`` samples on a regular
    grid inside the bin.  Sample positions are never rounded; positions past
    the feature extent are clamped to the border.  The result's stride is
    the box size per output cell along x.
    """
    out_h, out_w = out
    if out_h <= 0 or out_w <= 0 or samples_per_bin <= 0:
        raise ValueError("output size and samples per bin must be positive")
    if not (box.w > 0 and box.h > 0):
        raise ValueError(f"degenerate RoI {box}")
    s = samples_per_bin
    x0 = box.x / feat.stride
    y0 = box.y / feat.stride
    bw = box.w / feat.stride / out_w
    bh = box.h / feat.stride / out_h
    offsets = (np.arange(s) + 0.5) / s
    xs = x0 + (np.arange(out_w)[:, None] + offsets[None, :]).ravel() * bw - 0.5
    ys = y0 + (np.arange(out_h)[:, None] + offsets[None, :]).ravel() * bh - 0.5
    # sampling and bin averaging are both linear, so pool the weights first
    wx = _bilinear_weights(xs, feat.width).reshape(out_w, s, feat.width).mean(axis=1)
    wy = _bilinear_weights(ys, feat.height).reshape(out_h, s, feat.height).mean(axis=1)
    pooled = wy @ feat.data @ wx.T
    return Heatmap(pooled, box.w / out_w)


@dataclass(frozen=True)
class StageShapes:
    input: Tuple[int, int] = (384, 288)
    f1: Tuple[int, int] = (192, 144)
    f2: Tuple[int, int] = (96, 72)
    head_input_f1: Tuple[int, int] = (64, 64)
    head_input_f2: Tuple[int, int] = (32, 32)
    head_output: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        h, w = self.input
        if self.f1 != (h // 2, w // 2) or self.f2 != (h // 4, w // 4) or h % 4 or w % 4:
            raise ValueError("feature shapes must be exactly 1/2 and 1/4 of the input")

    @property
    def f1_stride(self) -> float:
        return self.input[0] / self.f1[0]

    @property
    def f2_stride(self) -> float:
        return self.input[0] / self.f2[0]


STAGE_SHAPES = StageShapes()


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """2x3 affine map acting on ``(N, 2)`` point arrays."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(2, 3)
        object.__setattr__(self, "matrix", m)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, 2)
        res = flat @ self.matrix[:, :2].T + self.matrix[:, 2]
        return res.reshape(pts.shape)

    def inverse(self) -> "AffineTransform":
        full = np.vstack([self.matrix, [0.0, 0.0, 1.0]])
        return AffineTransform(np.linalg.inv(full)[:2])

    def then(self, other: "AffineTransform") -> "AffineTransform":
        """``other`` applied after ``self``."""
        a = np.vstack([self.matrix, [0.0, 0.0, 1.0]])
        b = np.vstack([other.matrix, [0.0, 0.0, 1.0]])
        return AffineTransform((b @ a)[:2])

    def apply_box(self, box: Box) -> Box:
        """Map an axis-aligned box; only exact for scale-plus-translation maps."""
        (x0, y0), (x1, y1) = self.apply(np.array([[box.x, box.y], [box.x + box.w, box.y + box.h]]))
        return Box.from_xyxy(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1), box.valid, box.score)


def pad_box_to_aspect(box: Box, aspect_hw: float, padding: float = 1.0) -> Box:
    """Grow ``box`` about its center to height/width ratio ``aspect_hw``, then scale by ``padding``."""
    cx, cy = box.center
    w, h = box.w, box.h
    if h > w * aspect_hw:
        w = h / aspect_hw
    else:
        h = w * aspect_hw
    w *= padding
    h *= padding
    return Box(cx - w / 2.0, cy - h / 2.0, w, h, box.valid)


def crop_and_resize_person(image_box: Box, target: Tuple[int, int] = STAGE_SHAPES.input,
                           padding: float = 1.0) -> Tuple[AffineTransform, AffineTransform]:
    """Affine map from image pixels to the ``target`` (h, w) crop, and its inverse.

    The box is padded to the target aspect ratio (and scaled by ``padding``)
    about its center, then mapped onto the full crop.  Aspect ratio is
    preserved, so the map is a uniform scale plus a translation.
    """
    if not image_box.valid or not (image_box.w > 0 and image_box.h > 0):
        raise ValueError(f"person box must have positive area, got {image_box}")
    th, tw = target
    padded = pad_box_to_aspect(image_box, th / tw, padding)
    scale = tw / padded.w
    m = np.array([[scale, 0.0, -padded.x * scale],
                  [0.0, scale, -padded.y * scale]])
    fwd = AffineTransform(m)
    return fwd, fwd.inverse()


def clamp_box(box: Box, height: float, width: float) -> Box:
    x0, y0, x1, y1 = box.xyxy
    x0, x1 = np.clip([x0, x1], 0.0, width)
    y0, y1 = np.clip([y0, y1], 0.0, height)
    return Box.from_xyxy(x0, y0, x1, y1, box.valid, box.score)


def scale_box(box: Box, factor: float, min_size: float = 0.0) -> Box:
    cx, cy = box.center
    w = max(box.w * factor, min_size)
    h = max(box.h * factor, min_size)
    return Box(cx - w / 2.0, cy - h / 2.0, w, h, box.valid, box.score)


@dataclass(frozen=True)
class RoiFrame:
    """Grid frame of a head output laid over an RoI.

    Output cell ``j`` is centered on the ``j``-th RoI bin, at crop position
    ``box.x + (j + 0.5) * box.w / width``.
    """

    box: Box
    height: int = 64
    width: int = 64

    def to_grid(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = np.array(pts, dtype=float)
        out[..., 0] = (pts[..., 0] - self.box.x) * self.width / self.box.w - 0.5
        out[..., 1] = (pts[..., 1] - self.box.y) * self.height / self.box.h - 0.5
        return out

    def from_grid(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = np.array(pts, dtype=float)
        out[..., 0] = self.box.x + (pts[..., 0] + 0.5) * self.box.w / self.width
        out[..., 1] = self.box.y + (pts[..., 1] + 0.5) * self.box.h / self.height
        return out
