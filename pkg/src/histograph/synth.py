"""Seeded synthetic H&E-like imagery for demos, tests, and benchmarks.

Images are composed in optical-density space: elliptical eosin-stained
regions over a near-white background, with small dark hematoxylin disks
(nucleus stand-ins) scattered on top. Rendering is deterministic per
(side, seed) pair.
"""

from __future__ import annotations

import numpy as np

from histograph.raster import Image
from histograph.stain import DEFAULT_REFERENCE_STAINS, od_to_rgb


def synth_tissue_image(side: int, seed: int = 0,
                       nuclei_density: float = 1.0 / 1500.0,
                       region_density: float = 1.0 / 12000.0) -> Image:
    """Pseudo-tissue raster: pink stroma blobs plus dark nuclei over glass."""
    if side < 16:
        raise ValueError("side must be >= 16")
    rng = np.random.default_rng(seed)
    conc_h = np.zeros((side, side))
    conc_e = np.zeros((side, side))

    def stamp(conc: np.ndarray, row: float, col: float, r_a: float, r_b: float,
              amount: float) -> None:
        r0 = max(0, int(row - r_a)); r1 = min(side, int(row + r_a) + 1)
        c0 = max(0, int(col - r_b)); c1 = min(side, int(col + r_b) + 1)
        if r0 >= r1 or c0 >= c1:
            return
        rr = np.arange(r0, r1)[:, None] - row
        cc = np.arange(c0, c1)[None, :] - col
        mask = (rr / r_a) ** 2 + (cc / r_b) ** 2 <= 1.0
        conc[r0:r1, c0:c1][mask] += amount

    num_regions = max(3, int(side * side * region_density))
    for _ in range(num_regions):
        stamp(conc_e,
              rng.uniform(0, side), rng.uniform(0, side),
              rng.uniform(side * 0.06, side * 0.18),
              rng.uniform(side * 0.06, side * 0.18),
              rng.uniform(0.8, 1.3))

    num_nuclei = max(10, int(side * side * nuclei_density))
    for _ in range(num_nuclei):
        stamp(conc_h,
              rng.uniform(0, side), rng.uniform(0, side),
              rng.uniform(3.0, 7.0), rng.uniform(3.0, 7.0),
              rng.uniform(0.9, 1.6))

    conc_e = np.minimum(conc_e, 1.8)
    conc_h = np.minimum(conc_h, 2.2)
    od = (conc_h[:, :, None] * DEFAULT_REFERENCE_STAINS[:, 0]
          + conc_e[:, :, None] * DEFAULT_REFERENCE_STAINS[:, 1])
    # faint neutral haze so the background is not perfectly white
    od += rng.uniform(0.0, 0.01, size=od.shape)
    return od_to_rgb(od)
