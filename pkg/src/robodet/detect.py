"""Anchor priors, grid decoding of raw head outputs, box geometry,
confidence filtering and optional per-class non-maximum suppression.

Boxes are center-parameterized and normalized to the full image:
cx, cy in [0, 1], w, h > 0 (may exceed 1 for boxes spilling past borders).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import CLASS_NAMES, HeadSpec
from .tensor import ShapeError

DEFAULT_CONF_THRESHOLD = 0.5
DEFAULT_NMS_IOU = 0.5


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    confidence: float


def compute_anchors(annotations) -> np.ndarray:
    """Per-class mean (width, height) over (class_id, BBox) pairs.

    Returns a (4, 2) float32 array ordered like CLASS_NAMES.
    """
    sums = np.zeros((len(CLASS_NAMES), 2), dtype=np.float64)
    counts = np.zeros(len(CLASS_NAMES), dtype=np.int64)
    for class_id, box in annotations:
        sums[class_id, 0] += box.w
        sums[class_id, 1] += box.h
        counts[class_id] += 1
    for c, n in enumerate(counts):
        if n == 0:
            raise ValueError(f"no annotations for class '{CLASS_NAMES[c]}'")
    return (sums / counts[:, None]).astype(np.float32)


def decode(raw: np.ndarray, head: HeadSpec, anchors: np.ndarray, grid) -> list[Detection]:
    """Turn one head's raw tensor into a candidate per (cell, owned class).

    Channel block [5c, 5c+5) of slot c holds (tx, ty, tw, th, to); the cell
    offset goes through a sigmoid, the size through exp against the class
    anchor, and the objectness through a sigmoid.
    """
    gh, gw = grid
    if raw.shape != (1, head.channels, gh, gw):
        raise ShapeError(
            f"raw head tensor shape {tuple(raw.shape)} does not match "
            f"(1, {head.channels}, {gh}, {gw})"
        )
    out = []
    for slot, class_id in enumerate(head.classes_owned):
        tx, ty, tw, th, to = raw[0, 5 * slot : 5 * slot + 5].astype(np.float64)
        cx = (np.arange(gw) + expit(tx)) / gw
        cy = (np.arange(gh)[:, None] + expit(ty)) / gh
        w = anchors[class_id, 0] * np.exp(tw)
        h = anchors[class_id, 1] * np.exp(th)
        conf = expit(to)
        for i in range(gh):
            for j in range(gw):
                out.append(
                    Detection(
                        BBox(cx[i, j], cy[i, j], w[i, j], h[i, j]),
                        class_id,
                        conf[i, j],
                    )
                )
    return out


def encode(gt, anchors: np.ndarray, grid):
    """Map a ground-truth (class_id, BBox) to its responsible cell and the
    regression targets ((i, j), (tx, ty, tw, th)).

    tx, ty are targets for the sigmoid offsets in [0, 1); tw, th are log
    size ratios against the class anchor.  A center exactly at 1.0 clamps
    to the last cell.
    """
    class_id, box = gt
    if not (0.0 <= box.cx <= 1.0 and 0.0 <= box.cy <= 1.0):
        raise ValueError(f"box center ({box.cx}, {box.cy}) outside the image")
    gh, gw = grid
    i = min(int(box.cy * gh), gh - 1)
    j = min(int(box.cx * gw), gw - 1)
    tx = box.cx * gw - j
    ty = box.cy * gh - i
    tw = math.log(box.w / anchors[class_id, 0])
    th = math.log(box.h / anchors[class_id, 1])
    return (i, j), (tx, ty, tw, th)


def iou(a: BBox, b: BBox) -> float:
    ax0, ax1 = a.cx - a.w / 2, a.cx + a.w / 2
    ay0, ay1 = a.cy - a.h / 2, a.cy + a.h / 2
    bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
    by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def nms(detections, iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression of boxes overlapping a kept box by more
    than the threshold; ties in confidence keep the earlier detection."""
    kept: list[Detection] = []
    for class_id in range(len(CLASS_NAMES)):
        cls = [d for d in detections if d.class_id == class_id]
        cls.sort(key=lambda d: -d.confidence)
        survivors: list[Detection] = []
        for d in cls:
            if all(iou(d.box, s.box) <= iou_threshold for s in survivors):
                survivors.append(d)
        kept.extend(survivors)
    return kept


def postprocess(
    dets_lo,
    dets_hi,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    nms_iou: float | None = None,
) -> list[Detection]:
    """Merge both heads' candidates, drop low confidences, optionally NMS."""
    merged = [d for d in list(dets_lo) + list(dets_hi) if d.confidence >= conf_threshold]
    if nms_iou is not None:
        merged = nms(merged, nms_iou)
    return merged


def decode_network_output(raw_lo, raw_hi, spec, anchors) -> list[Detection]:
    """Decode both heads of a single-image forward pass (batch size 1)."""
    lo = decode(raw_lo, spec.head("head_lo"), anchors, spec.head_grid(spec.head("head_lo")))
    hi = decode(raw_hi, spec.head("head_hi"), anchors, spec.head_grid(spec.head("head_hi")))
    return lo, hi


# ---------------------------------------------------------------------------
# Text formats.


def format_detections(detections) -> str:
    """One `class_id confidence cx cy w h` line per detection, 6 decimals."""
    lines = [
        f"{d.class_id} {d.confidence:.6f} {d.box.cx:.6f} {d.box.cy:.6f} "
        f"{d.box.w:.6f} {d.box.h:.6f}"
        for d in detections
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text: str) -> list[Detection]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        class_id = int(parts[0])
        conf, cx, cy, w, h = (float(p) for p in parts[1:])
        out.append(Detection(BBox(cx, cy, w, h), class_id, conf))
    return out


def save_anchors(path, anchors: np.ndarray) -> None:
    with open(path, "w") as f:
        for name, (aw, ah) in zip(CLASS_NAMES, anchors):
            f.write(f"{name} {aw:.6f} {ah:.6f}\n")


def load_anchors(path) -> np.ndarray:
    table = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] not in CLASS_NAMES:
                raise ValueError(f"{path}:{lineno}: expected '<class> <w> <h>'")
            table[parts[0]] = (float(parts[1]), float(parts[2]))
    missing = [n for n in CLASS_NAMES if n not in table]
    if missing:
        raise ValueError(f"{path}: missing anchors for {', '.join(missing)}")
    return np.array([table[n] for n in CLASS_NAMES], dtype=np.float32)
