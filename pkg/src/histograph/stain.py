"""Stain separation and appearance normalization for H&E images.

Works in optical-density space, OD = -log10((I + 1) / 256) per channel, where
dye absorbances combine linearly. A stain basis is a 3x2 matrix whose unit,
non-negative columns are the hematoxylin (column 0) and eosin (column 1)
absorbance directions. Two estimators are provided:

* plane-fitting on the OD point cloud with angular percentiles (fast), and
* sparse non-negative matrix factorization, ``min ||V - WH||_F^2 + lam*||H||_1``
  with unit-column W >= 0 and H >= 0, solved by alternating a coordinate-descent
  non-negative lasso in H with a backtracking projected-gradient step in W.

Normalization rescales per-stain concentrations to a reference profile and
recomposes the image through the reference basis. Without an explicit
reference the module falls back to :data:`DEFAULT_REFERENCE`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from histograph.raster import Image


class StainEstimationError(ValueError):
    """Estimation preconditions violated (too few tissue pixels, rank loss)."""


LOG_RANGE = float(np.log10(256.0))  # OD of a fully black pixel

# Reference-free fallback: the classic H&E absorbance directions and robust
# maximum concentrations used across published normalizer implementations.
DEFAULT_REFERENCE_STAINS = np.array([
    [0.5626, 0.2159],
    [0.7201, 0.8012],
    [0.4062, 0.5581],
])
DEFAULT_REFERENCE_STAINS /= np.linalg.norm(DEFAULT_REFERENCE_STAINS, axis=0)
DEFAULT_REFERENCE_MAX_CONC = np.array([1.9705, 1.0308])


@dataclass
class StainProfile:
    """Stain basis plus per-stain 99th-percentile concentration of an image."""

    stain_matrix: np.ndarray  # (3, 2), unit non-negative columns, H then E
    max_conc: np.ndarray      # (2,)

    def __post_init__(self):
        self.stain_matrix = _checked_stain_matrix(self.stain_matrix)
        self.max_conc = np.asarray(self.max_conc, dtype=np.float64).reshape(2)

    def to_dict(self) -> dict:
        # serialized rows are stains: [hematoxylin, eosin]
        return {"stain_matrix": self.stain_matrix.T.tolist(),
                "max_conc": self.max_conc.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "StainProfile":
        return cls(np.asarray(doc["stain_matrix"], dtype=np.float64).T,
                   np.asarray(doc["max_conc"], dtype=np.float64))


def write_stain_profile(profile: StainProfile, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(profile.to_dict(), fh)


def read_stain_profile(path: str) -> StainProfile:
    with open(path, "r", encoding="utf-8") as fh:
        return StainProfile.from_dict(json.load(fh))


def default_reference() -> StainProfile:
    return StainProfile(DEFAULT_REFERENCE_STAINS.copy(), DEFAULT_REFERENCE_MAX_CONC.copy())


def _checked_stain_matrix(stains: np.ndarray) -> np.ndarray:
    w = np.asarray(stains, dtype=np.float64)
    if w.shape != (3, 2):
        raise ValueError(f"stain matrix must be 3x2, got {w.shape}")
    norms = np.linalg.norm(w, axis=0)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError(f"stain columns must be unit norm, got norms {norms}")
    if np.any(w < -1e-12):
        raise ValueError("stain components must be non-negative")
    return w


# ---------------------------------------------------------------------------
# Beer-Lambert transforms
# ---------------------------------------------------------------------------

_LN10 = float(np.log(10.0))

# -log10((v + 1) / 256) for all 256 channel values; elementwise log10 makes
# the table lookup bit-identical to computing the formula per pixel
_OD_TABLE = -np.log10((np.arange(256, dtype=np.float64) + 1.0) / 256.0)


def rgb_to_od(img: Image) -> np.ndarray:
    """Per-pixel optical density field, shape (H, W, 3), values in [0, log10(256)]."""
    return _OD_TABLE[img.pixels]


def od_to_rgb(od: np.ndarray) -> Image:
    """Invert :func:`rgb_to_od`; intensities clamp to the 8-bit range."""
    work = np.array(od, dtype=np.float64)
    work *= -_LN10
    np.exp(work, out=work)
    work *= 256.0
    work -= 0.5  # -1 then +0.5 for half-up rounding
    np.floor(work, out=work)
    np.clip(work, 0, 255, out=work)
    return Image(work.astype(np.uint8))


def _tissue_od(od_flat: np.ndarray, beta: float) -> np.ndarray:
    """OD rows of pixels whose every channel exceeds beta."""
    keep = np.all(od_flat > beta, axis=1)
    return od_flat[keep]


# ---------------------------------------------------------------------------
# Stain matrix estimation
# ---------------------------------------------------------------------------

def _orient_nonnegative(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    return np.clip(v, 0.0, None)


def _label_hematoxylin(v_low: np.ndarray, v_high: np.ndarray) -> np.ndarray:
    """Column 0 is the vector absorbing red more strongly (hematoxylin).

    Ties resolve toward the vector from the lower angle percentile.
    """
    if v_low[0] >= v_high[0]:
        stains = np.stack([v_low, v_high], axis=1)
    else:
        stains = np.stack([v_high, v_low], axis=1)
    return stains


def _plane_from_moments(count: int, moment1: np.ndarray, moment2: np.ndarray) -> np.ndarray:
    """Oriented dominant-plane eigenvectors of the OD covariance."""
    mean = moment1 / count
    cov = (moment2 - count * np.outer(mean, mean)) / (count - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    # eigh sorts ascending: columns 1 and 2 span the dominant plane
    if eigvals[1] <= 1e-10 * max(eigvals[2], 1e-30) or eigvals[1] <= 1e-16:
        raise StainEstimationError("degenerate OD covariance (rank < 2)")
    plane = eigvecs[:, 1:3]
    # fix eigenvector orientation so angle percentiles are reproducible
    for j in range(2):
        if plane[:, j].sum() < 0:
            plane[:, j] = -plane[:, j]
    return plane


def _stains_from_angles(plane: np.ndarray, phi_low: float, phi_high: float) -> np.ndarray:
    v_low = _orient_nonnegative(plane @ np.array([np.cos(phi_low), np.sin(phi_low)]))
    v_high = _orient_nonnegative(plane @ np.array([np.cos(phi_high), np.sin(phi_high)]))
    stains = _label_hematoxylin(v_low, v_high)
    norms = np.linalg.norm(stains, axis=0)
    if np.any(norms <= 0):
        raise StainEstimationError("degenerate stain direction")
    return stains / norms


def estimate_stains_macenko(img: Image, beta: float = 0.15, alpha: float = 1.0,
                            od_field: np.ndarray | None = None) -> np.ndarray:
    """Estimate the H&E basis by plane-fitting the OD cloud.

    Projects tissue OD onto the two leading eigenvectors of its covariance
    and takes the directions at the alpha-th and (100-alpha)-th angular
    percentiles as the stain columns. `od_field` lets callers reuse an
    already-computed optical-density field.
    """
    if od_field is None:
        od_field = rgb_to_od(img)
    od = _tissue_od(od_field.reshape(-1, 3), beta)
    if len(od) < 100:
        raise StainEstimationError(
            f"need >= 100 tissue pixels with OD > {beta}, found {len(od)}")
    plane = _plane_from_moments(len(od), od.sum(axis=0), od.T @ od)
    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    phi_low, phi_high = np.percentile(phi, [alpha, 100.0 - alpha])
    return _stains_from_angles(plane, phi_low, phi_high)


def _lasso_sweeps(h: np.ndarray, wtv: np.ndarray, gram: np.ndarray, lam: float,
                  sweeps: int = 8) -> np.ndarray:
    """Coordinate descent for min_{h>=0} ||v - W h||^2 + lam*|h|_1, vectorized over pixels."""
    g00, g01, g11 = gram[0, 0], gram[0, 1], gram[1, 1]
    h0, h1 = h[0], h[1]
    for _ in range(sweeps):
        h0 = np.maximum(0.0, (wtv[0] - g01 * h1 - lam / 2.0) / g00)
        h1 = np.maximum(0.0, (wtv[1] - g01 * h0 - lam / 2.0) / g11)
    return np.stack([h0, h1])


def _nmf_objective(v: np.ndarray, w: np.ndarray, h: np.ndarray, lam: float) -> float:
    resid = v - w @ h
    return float(np.sum(resid * resid) + lam * np.sum(h))


def sparse_nmf(v: np.ndarray, w_init: np.ndarray, lam: float, iters: int):
    """Solve min ||V - WH||_F^2 + lam*|H|_1 with W >= 0 unit columns, H >= 0.

    Alternates H updates (coordinate-descent non-negative lasso) with
    projected-gradient W steps followed by column renormalization (H rows
    rescale inversely so the product is preserved). Stops after `iters`
    outer iterations or when the relative objective change drops below 1e-4.
    Returns (W, H, objective trace); the trace is non-increasing across
    accepted updates and an increase beyond 1e-6 raises.
    """
    v = np.asarray(v, dtype=np.float64)
    w = _checked_stain_matrix(w_init).copy()
    h = np.zeros((2, v.shape[1]))
    h = _lasso_sweeps(h, w.T @ v, w.T @ w, lam)
    objective = _nmf_objective(v, w, h, lam)
    trace = [objective]

    def accept(candidate: float) -> bool:
        nonlocal objective
        if candidate > objective + 1e-6:
            raise RuntimeError(
                f"objective increased {objective} -> {candidate}; update rejected upstream")
        objective = candidate
        trace.append(candidate)
        return True

    for _ in range(iters):
        previous = objective
        # H step: exact coordinate descent, never increases the objective
        h = _lasso_sweeps(h, w.T @ v, w.T @ w, lam)
        accept(_nmf_objective(v, w, h, lam))
        # W step: projected gradient with backtracking; renormalized columns
        # rescale H rows so the product W @ H is preserved
        hht = h @ h.T
        lipschitz = 2.0 * max(np.linalg.norm(hht, 2), 1e-12)
        step = 1.0 / lipschitz
        grad = -2.0 * (v - w @ h) @ h.T
        for _ in range(20):
            w_cand = np.clip(w - step * grad, 0.0, None)
            norms = np.linalg.norm(w_cand, axis=0)
            if np.all(norms > 1e-12):
                w_cand = w_cand / norms
                h_cand = h * norms[:, None]
                cand_obj = _nmf_objective(v, w_cand, h_cand, lam)
                if cand_obj <= objective + 1e-12:
                    w, h = w_cand, h_cand
                    accept(cand_obj)
                    break
            step *= 0.5
        if abs(previous - objective) < 1e-4 * max(previous, 1e-12):
            break
    return w, h, trace


def estimate_stains_vahadane(img: Image, lam: float = 0.1, iters: int = 50,
                             beta: float = 0.15, return_trace: bool = False,
                             od_field: np.ndarray | None = None):
    """Estimate the H&E basis by sparse non-negative matrix factorization.

    Runs :func:`sparse_nmf` on the tissue-pixel OD matrix, initialized from
    the plane-fit estimate.
    """
    if od_field is None:
        od_field = rgb_to_od(img)
    od = _tissue_od(od_field.reshape(-1, 3), beta)
    if len(od) < 100:
        raise StainEstimationError(
            f"need >= 100 tissue pixels with OD > {beta}, found {len(od)}")
    w_init = estimate_stains_macenko(img, beta=beta, od_field=od_field)
    w, _, trace = sparse_nmf(od.T, w_init, lam, iters)
    # order columns by the hematoxylin rule (larger red-channel component first)
    stains = w if w[0, 0] >= w[0, 1] else w[:, ::-1]
    stains = stains / np.linalg.norm(stains, axis=0)
    if return_trace:
        return stains, trace
    return stains


# ---------------------------------------------------------------------------
# Concentration fitting and normalization
# ---------------------------------------------------------------------------

def fit_concentrations(img: Image, stains: np.ndarray,
                       od_field: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel least-squares stain concentrations, clamped >= 0; shape (H*W, 2)."""
    w = _checked_stain_matrix(stains)
    gram = w.T @ w
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] ** 2
    if det < 1e-12:
        raise StainEstimationError("stain columns are (near-)parallel; cannot unmix")
    if od_field is None:
        od_field = rgb_to_od(img)
    od = od_field.reshape(-1, 3)
    inv = np.array([[gram[1, 1], -gram[0, 1]], [-gram[0, 1], gram[0, 0]]]) / det
    conc = od @ (w @ inv.T)  # normal equations folded into one projection
    return np.clip(conc, 0.0, None, out=conc)


def _profile_and_conc(img: Image, method: str, beta: float, alpha: float,
                      lam: float, iters: int, od_field: np.ndarray):
    if method == "macenko":
        stains = estimate_stains_macenko(img, beta=beta, alpha=alpha, od_field=od_field)
    elif method == "vahadane":
        stains = estimate_stains_vahadane(img, lam=lam, iters=iters, beta=beta,
                                          od_field=od_field)
    else:
        raise ValueError(f"unknown stain estimation method {method!r}")
    conc = fit_concentrations(img, stains, od_field=od_field)
    max_conc = np.array([
        _partitioned_percentile(np.ascontiguousarray(conc[:, 0]), 99.0),
        _partitioned_percentile(np.ascontiguousarray(conc[:, 1]), 99.0),
    ])
    return StainProfile(stains, max_conc), conc


def estimate_profile(img: Image, method: str = "macenko", beta: float = 0.15,
                     alpha: float = 1.0, lam: float = 0.1, iters: int = 50,
                     od_field: np.ndarray | None = None) -> StainProfile:
    """Stain matrix plus robust (99th percentile) per-stain maximum concentration."""
    if od_field is None:
        od_field = rgb_to_od(img)
    profile, _ = _profile_and_conc(img, method, beta, alpha, lam, iters, od_field)
    return profile


_BLOCK = 1 << 18  # pixels per streaming block; OD block stays cache-resident


def _recompose_block(conc_block: np.ndarray, scale: np.ndarray,
                     ref_t: np.ndarray) -> np.ndarray:
    """uint8 RGB for one block of concentrations (same math as od_to_rgb)."""
    seg = (conc_block * scale) @ ref_t
    seg *= -_LN10
    np.exp(seg, out=seg)
    seg *= 256.0
    seg -= 0.5
    np.floor(seg, out=seg)
    np.clip(seg, 0, 255, out=seg)
    return seg.astype(np.uint8)


def _partitioned_percentile(values: np.ndarray, q: float) -> float:
    """np.percentile with linear interpolation, partitioning in place."""
    n = values.size
    pos = q / 100.0 * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    values.partition([lo, hi])
    frac = pos - lo
    return float(values[lo] * (1.0 - frac) + values[hi] * frac)


def _normalize_macenko_streamed(img: Image, reference: StainProfile, beta: float,
                                alpha: float) -> Image:
    """Blocked normalization: no full-size float64 field is materialized.

    Three passes over the uint8 pixels, each re-deriving per-block OD from
    the lookup table: (1) tissue moments for the covariance plane, (2)
    angle then concentration statistics, (3) recomposition.
    """
    px = img.pixels.reshape(-1, 3)
    total = px.shape[0]

    count = 0
    moment1 = np.zeros(3)
    moment2 = np.zeros((3, 3))
    for start in range(0, total, _BLOCK):
        od_b = _OD_TABLE[px[start : start + _BLOCK]]
        tissue = od_b[np.all(od_b > beta, axis=1)]
        if len(tissue):
            count += len(tissue)
            moment1 += tissue.sum(axis=0)
            moment2 += tissue.T @ tissue
    if count == 0:
        return Image(img.pixels.copy())
    if count < 100:
        raise StainEstimationError(
            f"need >= 100 tissue pixels with OD > {beta}, found {count}")
    plane = _plane_from_moments(count, moment1, moment2)

    phi = np.empty(count)
    filled = 0
    for start in range(0, total, _BLOCK):
        od_b = _OD_TABLE[px[start : start + _BLOCK]]
        tissue = od_b[np.all(od_b > beta, axis=1)]
        if len(tissue):
            proj = tissue @ plane
            phi[filled : filled + len(tissue)] = np.arctan2(proj[:, 1], proj[:, 0])
            filled += len(tissue)
    phi_low = _partitioned_percentile(phi, alpha)
    phi_high = _partitioned_percentile(phi, 100.0 - alpha)
    stains = _stains_from_angles(plane, phi_low, phi_high)

    w = _checked_stain_matrix(stains)
    gram = w.T @ w
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] ** 2
    if det < 1e-12:
        raise StainEstimationError("stain columns are (near-)parallel; cannot unmix")
    inv = np.array([[gram[1, 1], -gram[0, 1]], [-gram[0, 1], gram[0, 0]]]) / det
    proj_mat = w @ inv.T
    conc = np.empty((total, 2))
    for start in range(0, total, _BLOCK):
        od_b = _OD_TABLE[px[start : start + _BLOCK]]
        block = od_b @ proj_mat
        conc[start : start + len(block)] = np.clip(block, 0.0, None, out=block)
    max_conc = np.array([
        _partitioned_percentile(np.ascontiguousarray(conc[:, 0]), 99.0),
        _partitioned_percentile(np.ascontiguousarray(conc[:, 1]), 99.0),
    ])
    scale = np.where(max_conc > 1e-8, reference.max_conc / max_conc, 1.0)

    ref_t = reference.stain_matrix.T
    out = np.empty((total, 3), dtype=np.uint8)
    for start in range(0, total, _BLOCK):
        block = conc[start : start + _BLOCK]
        out[start : start + len(block)] = _recompose_block(block, scale, ref_t)
    return Image(out.reshape(img.height, img.width, 3))


def normalize(img: Image, method: str = "macenko",
              reference: StainProfile | None = None, beta: float = 0.15,
              alpha: float = 1.0, lam: float = 0.1, iters: int = 50) -> Image:
    """Normalize an image's stain appearance to a reference profile.

    Estimates the source profile, rescales each stain's concentrations by
    reference.max_conc / source.max_conc, and recomposes through the
    reference stain matrix. Images with no tissue (no pixel with OD above
    beta in every channel) pass through unchanged.
    """
    if reference is None:
        reference = default_reference()
    if method == "macenko":
        return _normalize_macenko_streamed(img, reference, beta, alpha)
    # the sparse-factorization estimator needs the tissue OD matrix resident,
    # so this path keeps whole-image fields
    od_field = rgb_to_od(img)
    if not np.any(np.all(od_field.reshape(-1, 3) > beta, axis=1)):
        return Image(img.pixels.copy())
    source, conc = _profile_and_conc(img, method, beta, alpha, lam, iters, od_field)
    scale = np.where(source.max_conc > 1e-8, reference.max_conc / source.max_conc, 1.0)
    ref_t = reference.stain_matrix.T
    out = np.empty((img.height * img.width, 3), dtype=np.uint8)
    for start in range(0, conc.shape[0], _BLOCK):
        out[start : start + _BLOCK] = _recompose_block(
            conc[start : start + _BLOCK], scale, ref_t)
    return Image(out.reshape(img.height, img.width, 3))
