"""Raster types, binary PPM/PGM I/O, and shared numeric kernels.

All downstream modules operate on the three raster types defined here:
8-bit RGB images, 8-bit grayscale images, and integer label maps whose
value 0 means background and k > 0 means entity k. Entity bookkeeping
(centroids, bounding boxes, areas) lives in :class:`EntityTable`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class RasterIOError(ValueError):
    """Base class for raster parse/serialize failures."""


class HeaderError(RasterIOError):
    """Magic number or dimension line is malformed."""


class MaxvalError(RasterIOError):
    """File declares a maxval other than 255."""


class PayloadError(RasterIOError):
    """Pixel payload is shorter than the header promises."""


@dataclass
class Image:
    """H x W x 3 8-bit RGB raster."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image dimensions must be >= 1, got {px.shape[:2]}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


@dataclass
class GrayImage:
    """H x W 8-bit luminance raster."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 2:
            raise ValueError(f"expected (H, W) array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image dimensions must be >= 1, got {px.shape}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, GrayImage) and np.array_equal(self.pixels, other.pixels)


@dataclass
class LabelMap:
    """H x W non-negative integer raster; 0 = background, k > 0 = entity k.

    Positive labels must form the contiguous set {1, ..., L} with every
    value present at least once.
    """

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.shape[0] < 1 or lab.shape[1] < 1:
            raise ValueError(f"expected non-empty (H, W) array, got shape {lab.shape}")
        if lab.size and lab.min() < 0:
            raise ValueError("labels must be non-negative")
        lab = lab.astype(np.int32)
        present = np.unique(lab)
        positive = present[present > 0]
        if positive.size and not np.array_equal(positive, np.arange(1, positive.size + 1)):
            raise ValueError("positive labels must be contiguous 1..L")
        self.labels = lab

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def num_labels(self) -> int:
        return int(self.labels.max(initial=0))

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelMap) and np.array_equal(self.labels, other.labels)


@dataclass
class EntityTable:
    """Per-entity registry derived from a LabelMap.

    ids are strictly increasing; centroids are (row, col) in float pixels;
    bboxes are (r0, c0, r1, c1) inclusive; areas are pixel counts.
    """

    ids: np.ndarray         # (N,) int
    centroids: np.ndarray   # (N, 2) float64
    bboxes: np.ndarray      # (N, 4) int
    areas: np.ndarray       # (N,) int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int32)
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        self.bboxes = np.asarray(self.bboxes, dtype=np.int32).reshape(-1, 4)
        self.areas = np.asarray(self.areas, dtype=np.int64)
        n = len(self.ids)
        if not (len(self.centroids) == len(self.bboxes) == len(self.areas) == n):
            raise ValueError("entity table columns disagree on length")
        if n and np.any(np.diff(self.ids) <= 0):
            raise ValueError("entity ids must be strictly increasing")
        if np.any(self.areas < 1):
            raise ValueError("entity areas must be >= 1")
        r0, c0, r1, c1 = self.bboxes.T if n else (0, 0, 0, 0)
        if n and (
            np.any(self.centroids[:, 0] < r0) or np.any(self.centroids[:, 0] > r1)
            or np.any(self.centroids[:, 1] < c0) or np.any(self.centroids[:, 1] > c1)
        ):
            raise ValueError("centroids must lie inside their bounding boxes")

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5) binary I/O
# ---------------------------------------------------------------------------

def _decode_netpbm(data: bytes, magic: bytes, channels: int, path: str) -> np.ndarray:
    if not data.startswith(magic):
        raise HeaderError(f"{path}: expected magic {magic.decode()}")
    # Header tokens may be separated by arbitrary whitespace; '#' starts a
    # comment running to end of line.
    pos = len(magic)
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            eol = data.find(b"\n", pos)
            if eol == -1:
                raise HeaderError(f"{path}: unterminated comment in header")
            pos = eol + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise HeaderError(f"{path}: non-numeric header token {token!r}")
        tokens.append(int(token))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise HeaderError(f"{path}: missing whitespace after maxval")
    pos += 1  # single whitespace byte separates header from payload
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise HeaderError(f"{path}: dimensions must be >= 1, got {width}x{height}")
    if maxval != 255:
        raise MaxvalError(f"{path}: only maxval 255 is supported, got {maxval}")
    expected = height * width * channels
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise PayloadError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3).copy()
    return arr.reshape(height, width).copy()


def decode_ppm(data: bytes, source: str = "<bytes>") -> Image:
    """Decode binary PPM (P6, maxval 255) bytes."""
    return Image(_decode_netpbm(data, b"P6", 3, source))


def encode_ppm(img: Image) -> bytes:
    """Canonical P6 bytes: header ``P6\\n{w} {h}\\n255\\n`` then raw triplets."""
    if not isinstance(img, Image):
        raise ValueError("encode_ppm expects an Image")
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def read_ppm(path: str) -> Image:
    """Decode a binary PPM (P6, maxval 255) file."""
    with open(path, "rb") as fh:
        return decode_ppm(fh.read(), path)


def write_ppm(img: Image, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def decode_pgm(data: bytes, source: str = "<bytes>") -> GrayImage:
    """Decode binary PGM (P5, maxval 255) bytes."""
    return GrayImage(_decode_netpbm(data, b"P5", 1, source))


def encode_pgm(img: GrayImage) -> bytes:
    if not isinstance(img, GrayImage):
        raise ValueError("encode_pgm expects a GrayImage")
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def read_pgm(path: str) -> GrayImage:
    """Decode a binary PGM (P5, maxval 255) file."""
    with open(path, "rb") as fh:
        return decode_pgm(fh.read(), path)


def write_pgm(img: GrayImage, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))


# ---------------------------------------------------------------------------
# LabelMap / EntityTable serialization
# ---------------------------------------------------------------------------

def write_label_map(labels: LabelMap, path: str) -> None:
    """Serialize a LabelMap as JSON (handles label counts beyond 255)."""
    doc = {
        "height": labels.height,
        "width": labels.width,
        "labels": labels.labels.ravel().tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def read_label_map(path: str) -> LabelMap:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("height", "width", "labels"):
        if key not in doc:
            raise RasterIOError(f"{path}: label map JSON missing key {key!r}")
    h, w = int(doc["height"]), int(doc["width"])
    flat = np.asarray(doc["labels"], dtype=np.int64)
    if flat.size != h * w:
        raise RasterIOError(f"{path}: labels length {flat.size} != {h}*{w}")
    return LabelMap(flat.reshape(h, w))


ENTITY_CSV_COLUMNS = [
    "id", "centroid_row", "centroid_col", "area",
    "bbox_r0", "bbox_c0", "bbox_r1", "bbox_c1",
]


def entity_table_to_csv(table: EntityTable) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(ENTITY_CSV_COLUMNS)
    for i in range(len(table)):
        writer.writerow([
            int(table.ids[i]),
            format(table.centroids[i, 0], ".17g"),
            format(table.centroids[i, 1], ".17g"),
            int(table.areas[i]),
            int(table.bboxes[i, 0]), int(table.bboxes[i, 1]),
            int(table.bboxes[i, 2]), int(table.bboxes[i, 3]),
        ])
    return out.getvalue()


def entity_table_from_csv(text: str) -> EntityTable:
    return _entity_table_from_rows(list(csv.reader(io.StringIO(text))), "<csv text>")


def write_entity_table(table: EntityTable, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(entity_table_to_csv(table))


def _entity_table_from_rows(rows: list[list[str]], source: str) -> EntityTable:
    if not rows or rows[0] != ENTITY_CSV_COLUMNS:
        raise RasterIOError(f"{source}: bad entity CSV header")
    ids, cents, boxes, areas = [], [], [], []
    for row in rows[1:]:
        ids.append(int(row[0]))
        cents.append((float(row[1]), float(row[2])))
        areas.append(int(row[3]))
        boxes.append(tuple(int(v) for v in row[4:8]))
    return EntityTable(np.array(ids, dtype=np.int32).reshape(-1),
                       np.array(cents, dtype=np.float64).reshape(-1, 2),
                       np.array(boxes, dtype=np.int32).reshape(-1, 4),
                       np.array(areas, dtype=np.int64).reshape(-1))


def read_entity_table(path: str) -> EntityTable:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return _entity_table_from_rows(rows, path)


def entity_table_from_labels(labels: LabelMap) -> EntityTable:
    """Derive the per-entity registry (centroid, bbox, area) from a LabelMap."""
    lab = labels.labels
    n = labels.num_labels
    if n == 0:
        return EntityTable(np.empty(0, np.int32), np.empty((0, 2)), np.empty((0, 4), np.int32),
                           np.empty(0, np.int64))
    flat = lab.ravel()
    areas = np.bincount(flat, minlength=n + 1)[1:]
    rows = np.repeat(np.arange(labels.height, dtype=np.int64), labels.width)
    cols = np.tile(np.arange(labels.width, dtype=np.int64), labels.height)
    sum_r = np.bincount(flat, weights=rows, minlength=n + 1)[1:]
    sum_c = np.bincount(flat, weights=cols, minlength=n + 1)[1:]
    centroids = np.stack([sum_r / areas, sum_c / areas], axis=1)
    slices = ndimage.find_objects(lab, max_label=n)
    bboxes = np.zeros((n, 4), dtype=np.int32)
    for i, sl in enumerate(slices):
        if sl is None:  # unreachable for a valid LabelMap; keep the guard
            raise ValueError(f"label {i + 1} missing from label map")
        bboxes[i] = (sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1)
    return EntityTable(np.arange(1, n + 1, dtype=np.int32), centroids, bboxes, areas)


# ---------------------------------------------------------------------------
# Numeric kernels
# ---------------------------------------------------------------------------

def to_gray(img: Image) -> GrayImage:
    """Luminance = round(0.299 R + 0.587 G + 0.114 B), half rounded up."""
    px = img.pixels.astype(np.float64)
    lum = 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]
    return GrayImage(np.clip(np.floor(lum + 0.5), 0, 255).astype(np.uint8))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian with radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur_f64(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a float array with edge replication."""
    kernel = gaussian_kernel(sigma)
    out = ndimage.convolve1d(np.asarray(arr, dtype=np.float64), kernel, axis=0, mode="nearest")
    return ndimage.convolve1d(out, kernel, axis=1, mode="nearest")


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Blur an 8-bit image; output rounds back to 8 bits (half up)."""
    out = gaussian_blur_f64(img.pixels, sigma)
    return GrayImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def otsu_threshold(hist: np.ndarray) -> int:
    """Threshold t in [0, 255] maximizing between-class variance.

    Classes split as {0..t} / {t+1..255}; ties resolve to the smallest t.
    """
    h = np.asarray(hist, dtype=np.float64)
    if h.shape != (256,):
        raise ValueError(f"expected 256 histogram bins, got shape {h.shape}")
    if np.any(h < 0):
        raise ValueError("histogram counts must be non-negative")
    total = h.sum()
    if total <= 0:
        raise ValueError("histogram is empty")
    bins = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(h)
    mu0_sum = np.cumsum(h * bins)
    mu_total = mu0_sum[-1]
    w1 = total - w0
    # sigma_b^2(t) = w0 * w1 * (mu0 - mu1)^2, zero where either class is empty
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(w0 > 0, mu0_sum / w0, 0.0)
        mu1 = np.where(w1 > 0, (mu_total - mu0_sum) / w1, 0.0)
    sigma_b = w0 * w1 * (mu0 - mu1) ** 2
    sigma_b[(w0 == 0) | (w1 == 0)] = 0.0
    return int(np.argmax(sigma_b))  # argmax returns the first (smallest) maximizer


def histogram_256(gray: GrayImage) -> np.ndarray:
    return np.bincount(gray.pixels.ravel(), minlength=256).astype(np.int64)


_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


def _relabel_raster_order(lab: np.ndarray) -> np.ndarray:
    """Remap positive labels to 1..L in order of first raster-scan encounter."""
    flat = lab.ravel()
    values, first = np.unique(flat, return_index=True)
    mask = values > 0
    values, first = values[mask], first[mask]
    order = np.argsort(first, kind="stable")
    mapping = np.zeros(int(values.max(initial=0)) + 1, dtype=np.int32)
    mapping[values[order]] = np.arange(1, len(values) + 1, dtype=np.int32)
    return mapping[lab]


def connected_components(binary: GrayImage | np.ndarray, connectivity: int = 8) -> LabelMap:
    """Label foreground (nonzero) components 1..L in first-encounter raster order."""
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    arr = binary.pixels if isinstance(binary, GrayImage) else np.asarray(binary)
    structure = _STRUCT_4 if connectivity == 4 else _STRUCT_8
    raw, _ = ndimage.label(arr != 0, structure=structure)
    return LabelMap(_relabel_raster_order(raw))
