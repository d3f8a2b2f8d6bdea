"""Tissue-versus-background detection.

Iteratively smooths the grayscale image and Otsu-thresholds it, keeping the
darker class as tissue (H&E tissue absorbs light; background glass is near
white). The loop widens the blur each round until the surviving background
is close enough to white, measured on the *unblurred* grayscale image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from histograph.raster import (
    GrayImage, Image, LabelMap, gaussian_blur, histogram_256, otsu_threshold,
    to_gray,
)


@dataclass
class TissueMaskParams:
    sigma: float = 1.0          # initial blur width
    sigma_growth: float = 2.0   # multiplier per iteration
    stop_threshold: float = 10.0  # max allowed background deviation from white
    max_iterations: int = 5

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.sigma_growth < 1:
            raise ValueError("sigma growth must be >= 1")
        if not 0 <= self.stop_threshold <= 255:
            raise ValueError("stop threshold must be in [0, 255]")
        if self.max_iterations < 1:
            raise ValueError("max iterations must be >= 1")


def detect_tissue(img: Image, params: TissueMaskParams | None = None) -> LabelMap:
    """Binary tissue mask (1 = tissue) via iterative blur + Otsu."""
    if params is None:
        params = TissueMaskParams()
    gray = to_gray(img)
    sigma = params.sigma
    mask = np.zeros(gray.pixels.shape, dtype=np.int32)
    for _ in range(params.max_iterations):
        blurred = gaussian_blur(gray, sigma)
        threshold = otsu_threshold(histogram_256(blurred))
        mask = (blurred.pixels <= threshold).astype(np.int32)
        background = gray.pixels[mask == 0]
        mean_bg = float(background.mean()) if background.size else 255.0
        if (255.0 - mean_bg) < params.stop_threshold:
            break
        sigma *= params.sigma_growth
    return LabelMap(mask)


def mask_to_gray(mask: LabelMap) -> GrayImage:
    """Render a binary mask as a 0/255 grayscale image (PGM-friendly)."""
    return GrayImage((mask.labels > 0).astype(np.uint8) * 255)
