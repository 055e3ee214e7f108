"""Dataset I/O and the deterministic toy soccer-scene generator.

Images are 8-bit RGB numpy arrays of shape (h, w, 3) stored as binary PPM
(P6).  Annotations are text files with one `class_id cx cy w h` line per
object, all fields normalized to the image.  A dataset directory holds an
`index.txt` with one `image.ppm annotations.txt` pair per line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detect import BBox
from .model import CLASS_NAMES

INDEX_FILE = "index.txt"
TOY_WIDTH = 256
TOY_HEIGHT = 192

# Default minimum box side: 8 pixels of a VGA-width image.
DEFAULT_MIN_WH = 8 / 640


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: BBox


@dataclass
class DatasetIndex:
    root: Path
    entries: list[tuple[str, str]]  # (image path, annotation path), relative
    image_size: tuple[int, int]  # (width, height) in pixels
    split: str = "train"

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# PPM (P6) image container.


def write_ppm(path, image: np.ndarray) -> None:
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("write_ppm expects a (h, w, 3) uint8 array")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # Header: magic, width, height, maxval; '#' comments allowed between tokens.
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def ppm_size(path) -> tuple[int, int]:
    """Read (width, height) from a PPM header without decoding pixels."""
    with open(path, "rb") as f:
        head = f.read(128)
    if not head.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    tokens = []
    for token in head[2:].split():
        if token.startswith(b"#"):
            continue
        tokens.append(int(token))
        if len(tokens) == 2:
            return tokens[0], tokens[1]
    raise ValueError(f"{path}: malformed PPM header")


# ---------------------------------------------------------------------------
# Annotations.


def load_annotations(path) -> list[Annotation]:
    out = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(
                    f"{path}:{lineno}: expected 'class_id cx cy w h', got {len(parts)} fields"
                )
            try:
                class_id = int(parts[0])
                cx, cy, w, h = (float(p) for p in parts[1:])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            if not 0 <= class_id < len(CLASS_NAMES):
                raise ValueError(
                    f"{path}:{lineno}: class_id {class_id} outside 0..{len(CLASS_NAMES) - 1}"
                )
            if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
                raise ValueError(f"{path}:{lineno}: box center outside [0, 1]")
            if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
                raise ValueError(f"{path}:{lineno}: box size outside (0, 1]")
            out.append(Annotation(class_id, BBox(cx, cy, w, h)))
    return out


def save_annotations(path, annotations) -> None:
    with open(path, "w") as f:
        for ann in annotations:
            b = ann.box
            f.write(f"{ann.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n")


def filter_min_size(annotations, min_wh: float = DEFAULT_MIN_WH):
    return [a for a in annotations if a.box.w >= min_wh and a.box.h >= min_wh]


# ---------------------------------------------------------------------------
# Color conversion (BT.601 full range, the JFIF YCbCr matrix).


def rgb_to_yuv(image: np.ndarray) -> np.ndarray:
    """8-bit (h, w, 3) RGB -> float32 (3, h, w) YUV with channels in [0, 1];
    chroma is centered at 0.5."""
    rgb = image.astype(np.float32) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b
    v = 0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, u, v]).astype(np.float32)


def yuv_to_rgb(yuv: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_yuv, back to 8-bit (h, w, 3) RGB."""
    y, u, v = yuv[0], yuv[1] - 0.5, yuv[2] - 0.5
    r = y + 1.402 * v
    g = y - 0.344136 * u - 0.714136 * v
    b = y + 1.772 * u
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Dataset index.


def load_index(root, split: str = "train") -> DatasetIndex:
    root = Path(root)
    index_path = root / INDEX_FILE
    if not index_path.exists():
        raise FileNotFoundError(f"no {INDEX_FILE} in {root}")
    entries = []
    with open(index_path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{index_path}:{lineno}: expected 'image annotations'")
            entries.append((parts[0], parts[1]))
    if not entries:
        raise ValueError(f"{index_path}: empty dataset index")
    image_size = ppm_size(root / entries[0][0])
    return DatasetIndex(root, entries, image_size, split)


def load_sample(index: DatasetIndex, i: int):
    img_rel, ann_rel = index.entries[i]
    image = read_ppm(index.root / img_rel)
    annotations = load_annotations(index.root / ann_rel)
    return image, annotations


def loader_workers() -> int:
    """Data-loading worker cap, from the ROBODET_THREADS env var."""
    try:
        return max(1, int(os.environ.get("ROBODET_THREADS", "1")))
    except ValueError:
        return 1


def load_all_samples(index: DatasetIndex, workers: int | None = None):
    """Load every (image, annotations) pair, optionally with a thread pool."""
    workers = loader_workers() if workers is None else workers
    if workers <= 1 or len(index) < 2:
        return [load_sample(index, i) for i in range(len(index))]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: load_sample(index, i), range(len(index))))


def load_all_annotations(index: DatasetIndex) -> list[Annotation]:
    out = []
    for _, ann_rel in index.entries:
        out.extend(load_annotations(index.root / ann_rel))
    return out


# ---------------------------------------------------------------------------
# Toy scene generator.  Two palettes (A, B) share geometry so that a model
# pretrained on one style can be transferred to the other.

STYLES = {
    "A": {
        "field": (45, 110, 50),
        "ball": (250, 140, 30),
        "crossing": (240, 240, 240),
        "goalpost": (235, 235, 225),
        "robot": (40, 40, 55),
    },
    "B": {
        "field": (110, 150, 75),
        "ball": (205, 40, 45),
        "crossing": (205, 205, 255),
        "goalpost": (255, 250, 190),
        "robot": (80, 40, 30),
    },
}


def _paint(image, mask, color, jitter):
    image[mask] = np.clip(np.asarray(color, dtype=np.float32) + jitter, 0, 255)


def _sample_geometry(class_id, rng, w, h):
    """Class-plausible (cx, cy, half_w, half_h, extra) in pixel units."""
    if class_id == 0:  # ball
        r = rng.uniform(6, 14)
        return _place(rng, w, h, r, r) + (r,)
    if class_id == 1:  # crossing
        s = rng.uniform(6, 13)
        t = rng.uniform(1.0, 2.0)
        return _place(rng, w, h, s, s) + (t,)
    if class_id == 2:  # goalpost
        a = rng.uniform(2.5, 6)
        b = rng.uniform(18, 42)
        return _place(rng, w, h, a, b) + (0.0,)
    a = rng.uniform(9, 19)  # robot
    b = rng.uniform(15, 33)
    return _place(rng, w, h, a, b) + (0.0,)


def _place(rng, w, h, half_w, half_h):
    cx = rng.uniform(half_w + 2, w - half_w - 2)
    cy = rng.uniform(half_h + 2, h - half_h - 2)
    return cx, cy, half_w, half_h


def _rasterize(image, grids, class_id, geom, color, jitter):
    yy, xx = grids
    cx, cy, a, b, extra = geom
    dx, dy = np.abs(xx - cx), np.abs(yy - cy)
    if class_id == 0:
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= a * a
    elif class_id == 1:
        t = extra
        mask = ((dx <= a) & (dy <= t)) | ((dx <= t) & (dy <= b))
    elif class_id == 2:
        mask = (dx <= a) & (dy <= b)
    else:
        rho = 0.4 * min(a, b)
        inner = np.maximum(dx - (a - rho), 0) ** 2 + np.maximum(dy - (b - rho), 0) ** 2
        mask = (dx <= a) & (dy <= b) & (inner <= rho * rho)
    _paint(image, mask, color, jitter)


def _draw_object(image, grids, class_id, rng, palette, existing):
    """Rasterize one object fully inside the image, resampling its position
    a few times to avoid heavy overlap; returns its exact BBox."""
    from .detect import iou

    h, w = image.shape[:2]
    geom = _sample_geometry(class_id, rng, w, h)
    for _ in range(8):
        cx, cy, a, b, _extra = geom
        box = BBox(cx / w, cy / h, 2 * a / w, 2 * b / h)
        if all(iou(box, other.box) < 0.25 for other in existing):
            break
        geom = _sample_geometry(class_id, rng, w, h)
    jitter = rng.uniform(-7, 7, size=3).astype(np.float32)
    _rasterize(image, grids, class_id, geom, palette[CLASS_NAMES[class_id]], jitter)
    cx, cy, a, b, _extra = geom
    return BBox(cx / w, cy / h, 2 * a / w, 2 * b / h)


def generate_toy_dataset(n_images: int, style: str = "A", seed: int = 0, out_dir=".") -> DatasetIndex:
    """Render n deterministic 256x192 field scenes with exact annotations.

    Each image holds 0..4 objects; classes are dealt from a shuffled
    round-robin stream so the dataset stays balanced.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}, pick one of {sorted(STYLES)}")
    palette = STYLES[style]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:TOY_HEIGHT, 0:TOY_WIDTH].astype(np.float32)

    class_queue: list[int] = []

    def next_class() -> int:
        if not class_queue:
            class_queue.extend(rng.permutation(len(CLASS_NAMES)))
        return int(class_queue.pop())

    entries = []
    for i in range(n_images):
        base = np.asarray(palette["field"], dtype=np.float32)
        shade = rng.uniform(0.93, 1.07)
        image = np.tile(base * shade, (TOY_HEIGHT, TOY_WIDTH, 1))
        image += rng.normal(0, 3, size=image.shape).astype(np.float32)
        annotations = []
        for _ in range(int(rng.integers(0, 5))):
            class_id = next_class()
            box = _draw_object(image, (yy, xx), class_id, rng, palette, annotations)
            annotations.append(Annotation(class_id, box))
        img_name = f"img_{i:05d}.ppm"
        ann_name = f"img_{i:05d}.txt"
        write_ppm(out / img_name, np.clip(image, 0, 255).astype(np.uint8))
        save_annotations(out / ann_name, annotations)
        entries.append((img_name, ann_name))
    with open(out / INDEX_FILE, "w") as f:
        for img_name, ann_name in entries:
            f.write(f"{img_name} {ann_name}\n")
    return DatasetIndex(out, entries, (TOY_WIDTH, TOY_HEIGHT), "train")
