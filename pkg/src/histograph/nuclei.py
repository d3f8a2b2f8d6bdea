"""Classical nuclei instance detection.

Nuclei are found on the hematoxylin concentration channel: blur, Otsu
threshold (bright class = nuclei), Euclidean distance transform, spaced
local maxima as markers, and marker-based watershed to split touching
instances. Components outside the configured area band are dropped and the
survivors are relabeled in raster order. Any label map produced elsewhere
(e.g. a learned segmenter) can be substituted downstream; this detector
just keeps the toolkit self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.segmentation import watershed

from histograph import stain
from histograph.raster import (
    EntityTable, GrayImage, Image, LabelMap, entity_table_from_labels,
    gaussian_blur, histogram_256, otsu_threshold, _relabel_raster_order,
)


@dataclass
class NucleiParams:
    min_area: int = 20
    max_area: int = 5000
    sigma: float = 2.0            # smoothing of the hematoxylin channel
    peak_min_distance: int = 5    # minimum marker spacing in pixels

    def __post_init__(self):
        if not 0 < self.min_area < self.max_area:
            raise ValueError("need 0 < min_area < max_area")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.peak_min_distance < 1:
            raise ValueError("peak min distance must be >= 1")


def hematoxylin_channel(img: Image, stains: np.ndarray) -> GrayImage:
    """Hematoxylin concentration rescaled to 0-255 by its own 99th percentile."""
    conc = stain.fit_concentrations(img, stains)[:, 0]
    p99 = float(np.percentile(conc, 99))
    if p99 <= 0:
        return GrayImage(np.zeros((img.height, img.width), dtype=np.uint8))
    scaled = np.clip(conc / p99 * 255.0, 0, 255)
    return GrayImage(np.floor(scaled + 0.5).astype(np.uint8).reshape(img.height, img.width))


def _spaced_maxima(dist: np.ndarray, min_distance: int) -> list[tuple[int, int]]:
    """Local maxima of the distance map, greedily thinned to the given spacing.

    Candidates are window maxima; acceptance order is (descending value,
    row, col), so equal-height plateaus resolve lexicographically.
    """
    size = 2 * min_distance + 1
    localmax = ndimage.maximum_filter(dist, size=size, mode="nearest")
    cand_mask = (dist > 0) & (dist == localmax)
    rows, cols = np.nonzero(cand_mask)
    if len(rows) == 0:
        return []
    order = np.lexsort((cols, rows, -dist[rows, cols]))
    accepted: list[tuple[int, int]] = []
    acc = np.empty((0, 2), dtype=np.float64)
    for idx in order:
        r, c = int(rows[idx]), int(cols[idx])
        if acc.shape[0]:
            if np.min(np.hypot(acc[:, 0] - r, acc[:, 1] - c)) < min_distance:
                continue
        accepted.append((r, c))
        acc = np.concatenate([acc, [[r, c]]])
    return accepted


def detect_nuclei(img: Image, params: NucleiParams | None = None,
                  stains: np.ndarray | None = None) -> tuple[LabelMap, EntityTable]:
    """Segment nuclei instances; returns the label map and its entity table."""
    if params is None:
        params = NucleiParams()
    if stains is None:
        try:
            stains = stain.estimate_stains_macenko(img)
        except stain.StainEstimationError:
            stains = stain.DEFAULT_REFERENCE_STAINS
    channel = hematoxylin_channel(img, stains)
    blurred = gaussian_blur(channel, params.sigma)
    threshold = otsu_threshold(histogram_256(blurred))
    binary = blurred.pixels > threshold
    if not binary.any():
        empty = LabelMap(np.zeros(binary.shape, dtype=np.int32))
        return empty, entity_table_from_labels(empty)

    dist = ndimage.distance_transform_edt(binary)
    markers = np.zeros(binary.shape, dtype=np.int32)
    for i, (r, c) in enumerate(_spaced_maxima(dist, params.peak_min_distance), start=1):
        markers[r, c] = i
    if markers.max() == 0:
        labels = np.zeros(binary.shape, dtype=np.int32)
    else:
        labels = watershed(-dist, markers=markers, mask=binary).astype(np.int64)

    areas = np.bincount(labels.ravel())
    keep = np.zeros(len(areas), dtype=bool)
    keep[1:] = (areas[1:] >= params.min_area) & (areas[1:] <= params.max_area)
    labels[~keep[labels]] = 0
    label_map = LabelMap(_relabel_raster_order(labels))
    return label_map, entity_table_from_labels(label_map)
