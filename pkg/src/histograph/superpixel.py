"""Superpixel oversegmentation and hierarchical merging into tissue regions.

The oversegmentation follows the classic k-means-style superpixel scheme:
seeds on a regular grid with spacing S = sqrt(H*W/K), perturbed to the
lowest-gradient spot in a 3x3 neighborhood, then iterative assignment of
each pixel within a 2Sx2S window around a center under the combined
distance D = sqrt(d_lab^2 + (d_xy/S)^2 * m^2), followed by connectivity
enforcement. Neighboring superpixels are then merged smallest-color-gap
first until no adjacent pair is closer than the threshold, giving coherent
tissue components.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from histograph.raster import Image, LabelMap, _relabel_raster_order

# sRGB (D65) -> XYZ and the D65 white point
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(img: Image) -> np.ndarray:
    """CIELAB (D65) conversion, shape (H, W, 3) float64."""
    srgb = img.pixels.astype(np.float64) / 255.0
    linear = np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T
    t = xyz / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


@dataclass
class SlicParams:
    num_superpixels: int = 400
    compactness: float = 10.0
    iterations: int = 10
    min_size_fraction: float = 0.25  # of S^2; smaller fragments get absorbed

    def __post_init__(self):
        if self.num_superpixels < 1:
            raise ValueError("num_superpixels must be >= 1")
        if self.compactness <= 0:
            raise ValueError("compactness must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class MergeParams:
    color_threshold: float = 8.0      # CIELAB distance below which regions merge
    target_min_regions: int | None = None  # optional floor on the region count

    def __post_init__(self):
        if self.color_threshold < 0:
            raise ValueError("color threshold must be >= 0")
        if self.target_min_regions is not None and self.target_min_regions < 1:
            raise ValueError("target_min_regions must be >= 1")


def _seed_grid(height: int, width: int, k: int, spacing: float) -> list[tuple[int, int]]:
    cols = max(1, round(width / spacing))
    rows = math.ceil(k / cols)
    seeds = []
    for i in range(rows):
        for j in range(cols):
            if len(seeds) == k:
                return seeds
            r = min(height - 1, int((i + 0.5) * height / rows))
            c = min(width - 1, int((j + 0.5) * width / cols))
            seeds.append((r, c))
    return seeds


def _perturb_to_low_gradient(seeds, lab):
    """Nudge each seed to the lowest-gradient pixel in its 3x3 neighborhood."""
    h, w = lab.shape[:2]
    grad = np.zeros((h, w))
    dr = lab[2:, :] - lab[:-2, :]
    dc = lab[:, 2:] - lab[:, :-2]
    grad[1:-1, :] += np.sum(dr * dr, axis=2)
    grad[:, 1:-1] += np.sum(dc * dc, axis=2)
    out = []
    for r, c in seeds:
        best = (grad[r, c], r, c)
        for nr in range(max(0, r - 1), min(h, r + 2)):
            for nc in range(max(0, c - 1), min(w, c + 2)):
                cand = (grad[nr, nc], nr, nc)
                if cand < best:
                    best = cand
        out.append((best[1], best[2]))
    return out


def _enforce_connectivity(labels: np.ndarray, min_size: float) -> np.ndarray:
    """Split disconnected fragments, then absorb small ones into their
    largest adjacent region. Relabels contiguously in raster order."""
    h, w = labels.shape
    comp = np.zeros((h, w), dtype=np.int64)
    next_id = 0
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    for value in np.unique(labels):
        mask = labels == value
        sub, n = ndimage.label(mask, structure=structure)
        comp[mask] = sub[mask] + next_id
        next_id += n

    areas = np.bincount(comp.ravel())
    # adjacency over 4-neighbor component pairs
    pairs = set()
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        pairs.update(zip(a[diff].tolist(), b[diff].tolist()))
    neighbors: dict[int, set[int]] = {}
    for a, b in pairs:
        neighbors.setdefault(a, set()).add(b)
        neighbors.setdefault(b, set()).add(a)

    parent = np.arange(next_id + 1)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    sizes = areas.copy()
    order = sorted(range(1, next_id + 1), key=lambda cid: (areas[cid], cid))
    for cid in order:
        root = find(cid)
        if sizes[root] >= min_size:
            continue
        adjacent = {find(n) for n in neighbors.get(cid, ())} - {root}
        if not adjacent:
            continue
        target = max(adjacent, key=lambda n: (sizes[n], -n))
        parent[root] = target
        sizes[target] += sizes[root]

    roots = np.array([find(i) for i in range(next_id + 1)])
    return _relabel_raster_order(roots[comp])


def slic(img: Image, params: SlicParams | None = None) -> LabelMap:
    """Oversegment into superpixels; labels are contiguous 1..L."""
    if params is None:
        params = SlicParams()
    h, w = img.height, img.width
    k = params.num_superpixels
    if k > h * w:
        raise ValueError(f"requested {k} superpixels for {h * w} pixels")
    lab = rgb_to_lab(img)
    spacing = math.sqrt(h * w / k)
    seeds = _perturb_to_low_gradient(_seed_grid(h, w, k, spacing), lab)

    centers = np.array([[*lab[r, c], r, c] for r, c in seeds], dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    half = max(1, int(math.ceil(spacing)))
    weight = (params.compactness / spacing) ** 2

    assign = np.zeros((h, w), dtype=np.int64)
    for _ in range(params.iterations):
        best = np.full((h, w), np.inf)
        assign.fill(0)
        for idx in range(len(centers)):
            lc = centers[idx, :3]
            rc, cc = centers[idx, 3], centers[idx, 4]
            r0, r1 = max(0, int(rc) - half), min(h, int(rc) + half + 1)
            c0, c1 = max(0, int(cc) - half), min(w, int(cc) + half + 1)
            if r0 >= r1 or c0 >= c1:
                continue
            patch = lab[r0:r1, c0:c1]
            d_lab = np.sum((patch - lc) ** 2, axis=2)
            d_r = (rows[r0:r1, None] - rc) ** 2
            d_c = (cols[None, c0:c1] - cc) ** 2
            dist = d_lab + (d_r + d_c) * weight
            window_best = best[r0:r1, c0:c1]
            better = dist < window_best
            window_best[better] = dist[better]
            assign[r0:r1, c0:c1][better] = idx
        # pixels missed by every window snap to the spatially nearest center
        missed = ~np.isfinite(best)
        if missed.any():
            mr, mc = np.nonzero(missed)
            d = (mr[:, None] - centers[None, :, 3]) ** 2 + (mc[:, None] - centers[None, :, 4]) ** 2
            assign[mr, mc] = np.argmin(d, axis=1)
        # recompute centers as the mean of their pixels (empty centers stay put)
        flat = assign.ravel()
        counts = np.bincount(flat, minlength=len(centers)).astype(np.float64)
        sums = np.zeros((len(centers), 5))
        for ch in range(3):
            sums[:, ch] = np.bincount(flat, weights=lab[:, :, ch].ravel(), minlength=len(centers))
        rr = np.repeat(rows, w)
        cc_full = np.tile(cols, h)
        sums[:, 3] = np.bincount(flat, weights=rr, minlength=len(centers))
        sums[:, 4] = np.bincount(flat, weights=cc_full, minlength=len(centers))
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]

    min_size = params.min_size_fraction * spacing * spacing
    return LabelMap(_enforce_connectivity(assign, min_size))


def _region_adjacency_pairs(labels: np.ndarray) -> set[tuple[int, int]]:
    """8-adjacent region pairs (a < b), ignoring label 0."""
    pairs: set[tuple[int, int]] = set()
    shifts = ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :]),
              (labels[:-1, :-1], labels[1:, 1:]), (labels[:-1, 1:], labels[1:, :-1]))
    for a, b in shifts:
        mask = (a != b) & (a > 0) & (b > 0)
        lo = np.minimum(a[mask], b[mask])
        hi = np.maximum(a[mask], b[mask])
        pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def merge_superpixels(img: Image, sp: LabelMap, params: MergeParams | None = None) -> LabelMap:
    """Hierarchically merge adjacent superpixels by mean-CIELAB similarity.

    Always merges the currently closest adjacent pair while its distance is
    below the threshold (ties resolve to the smaller label pair); the output
    partition is a coarsening of the input.
    """
    if params is None:
        params = MergeParams()
    if sp.labels.shape != (img.height, img.width):
        raise ValueError("superpixel map does not match image dimensions")
    lab = rgb_to_lab(img)
    labels = sp.labels
    n = sp.num_labels
    if n == 0:
        return LabelMap(labels.copy())
    target_min = params.target_min_regions or 1

    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n + 1).astype(np.float64)
    sums = np.zeros((n + 1, 3))
    for ch in range(3):
        sums[:, ch] = np.bincount(flat, weights=lab[:, :, ch].ravel(), minlength=n + 1)

    neighbors: dict[int, set[int]] = {i: set() for i in range(1, n + 1)}
    for a, b in _region_adjacency_pairs(labels):
        neighbors[a].add(b)
        neighbors[b].add(a)

    def mean_of(region: int) -> np.ndarray:
        return sums[region] / counts[region]

    def distance(a: int, b: int) -> float:
        return float(np.linalg.norm(mean_of(a) - mean_of(b)))

    heap = [(distance(a, b), a, b) for a, b in _region_adjacency_pairs(labels)]
    heapq.heapify(heap)
    parent = np.arange(n + 1)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    alive = n
    while heap and alive > target_min:
        d, a, b = heapq.heappop(heap)
        if find(a) != a or find(b) != b or b not in neighbors[a]:
            continue  # stale entry
        current = distance(a, b)
        if abs(current - d) > 1e-9:
            heapq.heappush(heap, (current, a, b))
            continue
        if d >= params.color_threshold:
            break
        # merge b into a (a < b by construction of the pairs)
        parent[b] = a
        sums[a] += sums[b]
        counts[a] += counts[b]
        neighbors[a].discard(b)
        for other in neighbors.pop(b):
            if other == a:
                continue
            neighbors[other].discard(b)
            lo, hi = (a, other) if a < other else (other, a)
            neighbors[lo].add(hi)
            neighbors[hi].add(lo)
            heapq.heappush(heap, (distance(lo, hi), lo, hi))
        alive -= 1

    roots = np.array([find(i) for i in range(n + 1)])
    return LabelMap(_relabel_raster_order(roots[labels]))
