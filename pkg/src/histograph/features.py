"""Per-entity handcrafted features: morphology, co-occurrence texture, crowdedness.

Every extractor returns a :class:`FeatureMatrix` whose rows follow entity id
order; matrices from different extractors concatenate column-wise via
:func:`assemble_features`. Externally computed features (e.g. CNN embeddings
produced elsewhere) enter through :func:`load_external_features`, keyed by
entity id.

Conventions that the formulas below rely on:

* second central moments carry the +1/12 pixel-integration term, so a single
  pixel behaves like a unit square instead of a degenerate point;
* perimeter is the traced outer boundary with orthogonal steps counting 1 and
  diagonal steps sqrt(2); sub-2-pixel entities fall back to perimeter 1 to
  keep derived ratios finite;
* "dispersion" is the variance of the co-occurrence row index (the marginal
  distribution of the reference pixel level).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from histograph.raster import EntityTable, Image, LabelMap, to_gray

log = logging.getLogger(__name__)

MORPHOLOGY_NAMES = [
    "area", "convex_area", "eccentricity", "equivalent_diameter", "euler_number",
    "major_axis_length", "minor_axis_length", "orientation", "perimeter",
    "solidity", "convex_perimeter", "roughness", "shape_factor", "ellipticity",
    "roundness",
]

GLCM_NAMES = [
    "glcm_contrast", "glcm_dissimilarity", "glcm_homogeneity", "glcm_asm",
    "glcm_energy", "glcm_dispersion",
]

CROWDEDNESS_NAMES = ["crowdedness_mean", "crowdedness_var"]


@dataclass
class FeatureMatrix:
    """N x D feature block with unique column names; rows follow entity id order."""

    values: np.ndarray
    names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected 2-D feature array, got shape {self.values.shape}")
        if self.values.shape[1] != len(self.names):
            raise ValueError("column count does not match name count")
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        if self.values.size and not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains NaN or Inf")

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]


@dataclass
class GlcmParams:
    levels: int = 32
    offsets: list[tuple[int, int]] = field(
        default_factory=lambda: [(0, 1), (1, 0), (1, 1), (1, -1)])
    symmetric: bool = True
    normalize: bool = True

    def __post_init__(self):
        if not 2 <= self.levels <= 256:
            raise ValueError("levels must be in [2, 256]")
        if not self.offsets:
            raise ValueError("need at least one offset")
        self.offsets = [(int(r), int(c)) for r, c in self.offsets]


# ---------------------------------------------------------------------------
# Morphology
# ---------------------------------------------------------------------------

_TRACE_STEPS = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _trace_contour_length(mask: np.ndarray) -> float:
    """Weighted outer-contour length of every 8-connected component."""
    from scipy import ndimage
    padded = np.pad(mask, 1)
    comps, n = ndimage.label(padded, structure=np.ones((3, 3), dtype=bool))
    total = 0.0
    for cid in range(1, n + 1):
        where = np.argwhere(comps == cid)
        if len(where) == 1:
            continue
        start = tuple(where[np.lexsort((where[:, 1], where[:, 0]))[0]])
        comp = comps == cid
        # Moore-neighbor tracing, entering from the left of the start pixel
        current = start
        backtrack_dir = 6  # pointing left
        length = 0.0
        first_move = None
        while True:
            found = None
            for turn in range(8):
                d = (backtrack_dir + 1 + turn) % 8
                nr = current[0] + _TRACE_STEPS[d][0]
                nc = current[1] + _TRACE_STEPS[d][1]
                if comp[nr, nc]:
                    found = (d, (nr, nc))
                    break
            if found is None:
                break  # isolated pixel; handled above but keep the guard
            d, nxt = found
            length += math.sqrt(2.0) if _TRACE_STEPS[d][0] and _TRACE_STEPS[d][1] else 1.0
            if first_move is None:
                first_move = (current, nxt)
            elif (current, nxt) == first_move:
                length -= math.sqrt(2.0) if _TRACE_STEPS[d][0] and _TRACE_STEPS[d][1] else 1.0
                break
            backtrack_dir = (d + 4) % 8
            current = nxt
        total += length
    return total


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull of integer pixel centers, counter-clockwise."""
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=np.float64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


def _hull_metrics(mask: np.ndarray) -> tuple[float, float]:
    """(convex area in filled lattice points, hull perimeter)."""
    points = np.argwhere(mask)
    hull = _convex_hull(points)
    if len(hull) == 1:
        return 1.0, 0.0
    if len(hull) == 2:
        seg = np.linalg.norm(hull[1] - hull[0])
        return float(len(points)), 2.0 * float(seg)
    perimeter = float(np.sum(np.linalg.norm(np.roll(hull, -1, axis=0) - hull, axis=1)))
    # count lattice points inside/on the hull polygon within the bbox
    r0, c0 = points.min(axis=0)
    r1, c1 = points.max(axis=0)
    rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    inside = np.ones(len(grid), dtype=bool)
    for i in range(len(hull)):
        o, a = hull[i], hull[(i + 1) % len(hull)]
        cross = (a[0] - o[0]) * (grid[:, 1] - o[1]) - (a[1] - o[1]) * (grid[:, 0] - o[0])
        inside &= cross >= -1e-9
    return float(inside.sum()), perimeter


def _euler_number(mask: np.ndarray) -> int:
    """Foreground components (8-connected) minus holes (4-connected background)."""
    from scipy import ndimage
    _, n_fg = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    padded = np.pad(~mask.astype(bool), 1, constant_values=True)
    _, n_bg = ndimage.label(padded,
                            structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool))
    return int(n_fg - (n_bg - 1))


def _entity_masks(labels: LabelMap, table: EntityTable):
    for i, entity_id in enumerate(table.ids):
        r0, c0, r1, c1 = table.bboxes[i]
        crop = labels.labels[r0 : r1 + 1, c0 : c1 + 1]
        yield int(entity_id), i, crop == entity_id


def morphology_features(labels: LabelMap, table: EntityTable) -> FeatureMatrix:
    """Shape and size descriptors per entity (15 columns)."""
    out = np.zeros((len(table), len(MORPHOLOGY_NAMES)), dtype=np.float64)
    for _, i, mask in _entity_masks(labels, table):
        area = float(mask.sum())
        coords = np.argwhere(mask).astype(np.float64)
        centered = coords - coords.mean(axis=0)
        mu20 = float(np.mean(centered[:, 0] ** 2)) + 1.0 / 12.0
        mu02 = float(np.mean(centered[:, 1] ** 2)) + 1.0 / 12.0
        mu11 = float(np.mean(centered[:, 0] * centered[:, 1]))
        common = math.sqrt((mu20 - mu02) ** 2 + 4.0 * mu11 ** 2)
        lam1 = (mu20 + mu02 + common) / 2.0
        lam2 = (mu20 + mu02 - common) / 2.0
        major = 4.0 * math.sqrt(max(lam1, 0.0))
        minor = 4.0 * math.sqrt(max(lam2, 0.0))
        eccentricity = math.sqrt(max(0.0, 1.0 - lam2 / lam1)) if lam1 > 0 else 0.0
        orientation = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
        equivalent_diameter = math.sqrt(4.0 * area / math.pi)
        euler = _euler_number(mask)
        perimeter = max(_trace_contour_length(mask), 1.0)
        convex_area, convex_perimeter = _hull_metrics(mask)
        convex_area = max(convex_area, 1.0)
        convex_perimeter = max(convex_perimeter, 1.0)
        solidity = area / convex_area
        roughness = perimeter / convex_perimeter
        shape_factor = 4.0 * math.pi * area / (perimeter ** 2)
        ellipticity = minor / major if major > 0 else 1.0
        roundness = 4.0 * area / (math.pi * major ** 2) if major > 0 else 1.0
        out[i] = (area, convex_area, eccentricity, equivalent_diameter, euler,
                  major, minor, orientation, perimeter, solidity,
                  convex_perimeter, roughness, shape_factor, ellipticity, roundness)
    return FeatureMatrix(out, list(MORPHOLOGY_NAMES))


# ---------------------------------------------------------------------------
# Co-occurrence texture
# ---------------------------------------------------------------------------

def glcm_features(img: Image, labels: LabelMap, table: EntityTable,
                  params: GlcmParams | None = None) -> FeatureMatrix:
    """Texture features from per-entity gray-level co-occurrence matrices.

    Pixels quantize to `levels` uniform bins of [0, 255]; pairs accumulate
    only when both endpoints belong to the entity. Features are averaged
    over offsets (offsets with no pairs are skipped); entities with no
    co-occurring pixels at any offset get an all-zero row and a warning.
    """
    if params is None:
        params = GlcmParams()
    gray = to_gray(img).pixels
    quant = np.minimum(gray.astype(np.int64) * params.levels // 256, params.levels - 1)
    g = params.levels
    i_idx, j_idx = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    gap2 = (i_idx - j_idx) ** 2

    out = np.zeros((len(table), len(GLCM_NAMES)), dtype=np.float64)
    empty_ids = []
    for entity_id, i, mask in _entity_masks(labels, table):
        r0, c0, _, _ = table.bboxes[i]
        q = quant[r0 : r0 + mask.shape[0], c0 : c0 + mask.shape[1]]
        per_offset = []
        for dr, dc in params.offsets:
            h, w = mask.shape
            src = (slice(max(0, -dr), min(h, h - dr)), slice(max(0, -dc), min(w, w - dc)))
            dst = (slice(max(0, dr), min(h, h + dr)), slice(max(0, dc), min(w, w + dc)))
            pair_mask = mask[src] & mask[dst]
            if not pair_mask.any():
                continue
            counts = np.zeros((g, g), dtype=np.float64)
            np.add.at(counts, (q[src][pair_mask], q[dst][pair_mask]), 1.0)
            if params.symmetric:
                counts = counts + counts.T
            p = counts / counts.sum() if params.normalize else counts
            asm = float(np.sum(p * p))
            marginal = p.sum(axis=1)
            mu_i = float(np.sum(np.arange(g) * marginal))
            per_offset.append((
                float(np.sum(p * gap2)),
                float(np.sum(p * np.abs(i_idx - j_idx))),
                float(np.sum(p / (1.0 + gap2))),
                asm,
                math.sqrt(asm),
                float(np.sum(marginal * (np.arange(g) - mu_i) ** 2)),
            ))
        if per_offset:
            out[i] = np.mean(per_offset, axis=0)
        else:
            empty_ids.append(entity_id)
    if empty_ids:
        log.warning("entities with no co-occurring pixel pairs get zero texture: %s",
                    empty_ids)
    return FeatureMatrix(out, list(GLCM_NAMES))


# ---------------------------------------------------------------------------
# Crowdedness
# ---------------------------------------------------------------------------

def crowdedness_features(table: EntityTable, k: int = 5) -> FeatureMatrix:
    """Mean and population variance of distances to the k nearest entities."""
    n = len(table)
    if n < 2:
        raise ValueError("crowdedness needs at least 2 entities")
    if k < 1:
        raise ValueError("k must be >= 1")
    cents = table.centroids
    diff = cents[:, None, :] - cents[None, :, :]
    dists = np.sqrt(np.sum(diff * diff, axis=2))
    np.fill_diagonal(dists, np.inf)
    take = min(k, n - 1)
    nearest = np.sort(dists, axis=1)[:, :take]
    means = nearest.mean(axis=1)
    variances = nearest.var(axis=1)
    return FeatureMatrix(np.stack([means, variances], axis=1), list(CROWDEDNESS_NAMES))


# ---------------------------------------------------------------------------
# Assembly and I/O
# ---------------------------------------------------------------------------

def assemble_features(parts: list[FeatureMatrix], min_max_normalize: bool = False) -> FeatureMatrix:
    """Column-wise concatenation; optionally min-max scale each column to [0, 1].

    Constant columns normalize to all-zero.
    """
    parts = [p for p in parts if p.values.shape[1] > 0]
    if not parts:
        raise ValueError("nothing to assemble")
    rows = {p.num_rows for p in parts}
    if len(rows) != 1:
        raise ValueError(f"feature blocks disagree on row count: {sorted(rows)}")
    names: list[str] = []
    for p in parts:
        names.extend(p.names)
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate feature names: {dupes}")
    values = np.concatenate([p.values for p in parts], axis=1)
    if min_max_normalize and values.size:
        lo = values.min(axis=0)
        hi = values.max(axis=0)
        span = hi - lo
        scaled = np.where(span > 0, (values - lo) / np.where(span > 0, span, 1.0), 0.0)
        values = scaled
    return FeatureMatrix(values, names)


def feature_csv_text(feats: FeatureMatrix, ids: np.ndarray) -> str:
    """CSV with an id column and 17-significant-digit float cells."""
    if len(ids) != feats.num_rows:
        raise ValueError("id count does not match feature rows")
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["id"] + feats.names)
    for i, entity_id in enumerate(ids):
        writer.writerow([int(entity_id)] + [format(v, ".17g") for v in feats.values[i]])
    return out.getvalue()


def write_feature_csv(feats: FeatureMatrix, ids: np.ndarray, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(feature_csv_text(feats, ids))


def load_external_features(path: str, table: EntityTable) -> FeatureMatrix:
    """Read an id-keyed feature CSV and align rows to entity id order.

    The file's id set must match the table exactly; cells must be numeric.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "id":
        raise ValueError(f"{path}: expected header starting with 'id'")
    names = rows[0][1:]
    by_id: dict[int, list[float]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(names) + 1:
            raise ValueError(f"{path}:{lineno}: expected {len(names) + 1} cells, got {len(row)}")
        try:
            entity_id = int(row[0])
            values = [float(cell) for cell in row[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
        if entity_id in by_id:
            raise ValueError(f"{path}: duplicate id {entity_id}")
        by_id[entity_id] = values
    table_ids = [int(v) for v in table.ids]
    missing = sorted(set(table_ids) - set(by_id))
    extra = sorted(set(by_id) - set(table_ids))
    if missing or extra:
        raise ValueError(f"{path}: id mismatch; missing {missing}, unexpected {extra}")
    values = np.array([by_id[i] for i in table_ids],
                      dtype=np.float64).reshape(len(table_ids), len(names))
    return FeatureMatrix(values, names)


def _feature_rows_to_matrix(rows: list[list[str]], source: str):
    if not rows or not rows[0] or rows[0][0] != "id":
        raise ValueError(f"{source}: expected header starting with 'id'")
    names = rows[0][1:]
    ids = np.array([int(r[0]) for r in rows[1:]], dtype=np.int32)
    values = np.array([[float(c) for c in r[1:]] for r in rows[1:]], dtype=np.float64)
    return ids, FeatureMatrix(values.reshape(len(ids), len(names)), names)


def read_feature_csv(path: str) -> tuple[np.ndarray, FeatureMatrix]:
    """Read a feature CSV back as (ids, FeatureMatrix) without a table check."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return _feature_rows_to_matrix(rows, path)


def feature_csv_from_text(text: str) -> tuple[np.ndarray, FeatureMatrix]:
    return _feature_rows_to_matrix(list(csv.reader(io.StringIO(text))), "<csv text>")


def extract_default_features(img: Image, labels: LabelMap, table: EntityTable,
                             groups: list[str] | None = None,
                             glcm_params: GlcmParams | None = None,
                             crowdedness_k: int = 5) -> FeatureMatrix:
    """The standard feature stack: morphology + texture (+ crowdedness if N >= 2)."""
    if groups is None:
        groups = ["morphology", "glcm", "crowdedness"]
    parts = []
    for group in groups:
        if group == "morphology":
            parts.append(morphology_features(labels, table))
        elif group == "glcm":
            parts.append(glcm_features(img, labels, table, glcm_params))
        elif group == "crowdedness":
            if len(table) >= 2:
                parts.append(crowdedness_features(table, crowdedness_k))
        else:
            raise ValueError(f"unknown feature group {group!r}")
    return assemble_features(parts)
