"""Post-hoc node attribution for trained graph models.

Four methods produce per-node importance scores for a chosen class:

* activation-gradient maps (CAM-style), plain and the squared-gradient
  weighted variant, read at a chosen layer's output activations;
* a learned node mask that keeps the prediction while being pushed toward
  sparsity (mask optimization under a budget + entropy penalty);
* relevance propagation with the epsilon rule, conserving the class logit
  down to the input nodes (sum-aggregation stacks only).

Scores come back in a :class:`Saliency` record; :func:`top_k_entities` maps
them onto entity ids, and :func:`render_overlay` paints them on the source
image for visual inspection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from histograph.graphs import EntityGraph
from histograph.gnn import GnnModel, cross_entropy
from histograph.gnn.train import Adam, TrainConfig
from histograph.raster import EntityTable, Image

EPS_RULE = 1e-6


@dataclass
class Saliency:
    scores: np.ndarray
    class_index: int
    method: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("saliency contains NaN or Inf")

    def to_dict(self) -> dict:
        return {"scores": self.scores.tolist(), "class": int(self.class_index),
                "method": self.method}

    @classmethod
    def from_dict(cls, doc: dict) -> "Saliency":
        return cls(np.asarray(doc["scores"], dtype=np.float64), int(doc["class"]),
                   str(doc["method"]))


def _min_max(scores: np.ndarray) -> np.ndarray:
    # constant maps: all-zero when nothing fired, all-one when uniformly positive
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo <= 0:
        return np.full_like(scores, 1.0 if hi > 0 else 0.0)
    return (scores - lo) / (hi - lo)


def _resolve_class(model: GnnModel, logits: np.ndarray, class_index: int | None) -> int:
    if class_index is None:
        return int(np.argmax(logits))
    if not 0 <= class_index < model.config.num_classes:
        raise ValueError(f"class index {class_index} out of range")
    return class_index


def _layer_activation_grads(model: GnnModel, g: EntityGraph, class_index: int | None,
                            layer: int | str):
    """(activations, d y_c / d activations, class, logit) at a layer's output."""
    logits, tape = model.forward(g, keep_tape=True)
    c = _resolve_class(model, logits, class_index)
    dlogits = np.zeros_like(logits)
    dlogits[c] = 1.0
    _, _, dacts = model.backward(tape, dlogits)
    num_layers = len(model.layers)
    idx = num_layers - 1 if layer == "last" else int(layer)
    if not -num_layers <= idx < num_layers:
        raise ValueError(f"layer selector {layer!r} out of range")
    idx = idx % num_layers
    return tape["acts"][idx + 1], dacts[idx + 1], c, float(logits[c])


def graph_gradcam(model: GnnModel, g: EntityGraph, class_index: int | None = None,
                  layer: int | str = "last") -> Saliency:
    """Channel weights = node-mean class gradient; scores = ReLU(weighted activations)."""
    acts, grads, c, _ = _layer_activation_grads(model, g, class_index, layer)
    alpha = grads.mean(axis=0)
    scores = np.maximum(acts @ alpha, 0.0)
    return Saliency(_min_max(scores), c, "gradcam")


def graph_gradcam_pp(model: GnnModel, g: EntityGraph, class_index: int | None = None,
                     layer: int | str = "last") -> Saliency:
    """Squared-gradient weighting of the class-exponential score.

    With s = exp(y_c), the per-unit weights are
    alpha = g^2 / (2 g^2 + sum_u A_u g_u^3) for g = s * G, which reduces to
    G^2 / (2 G^2 + s * sum_u A_u G_u^3); the leftover positive factor s in
    the channel weights cancels in the final min-max normalization.
    """
    acts, grads, c, y_c = _layer_activation_grads(model, g, class_index, layer)
    g2 = grads * grads
    g3 = g2 * grads
    s = math.exp(min(y_c, 700.0))
    denom = 2.0 * g2 + s * np.sum(acts * g3, axis=0)[None, :]
    alpha = np.where(np.abs(denom) > 1e-12, g2 / np.where(denom != 0, denom, 1.0), 0.0)
    weights = np.sum(alpha * np.maximum(grads, 0.0), axis=0)
    scores = np.maximum(acts @ weights, 0.0)
    return Saliency(_min_max(scores), c, "gradcampp")


# ---------------------------------------------------------------------------
# Mask optimization
# ---------------------------------------------------------------------------

def gnn_explainer(model: GnnModel, g: EntityGraph, class_index: int | None = None,
                  steps: int = 100, lr: float = 0.01, lambda_sparsity: float = 0.05,
                  lambda_entropy: float = 0.1, seed: int = 0,
                  init_logits: np.ndarray | None = None) -> Saliency:
    """Optimize a per-node feature mask keeping the class probability high.

    Objective: -log p_c(X * sigmoid(m)) + ls * mean(sigmoid(m))
    + le * mean(binary_entropy(sigmoid(m))), minimized with Adam from a
    seeded Normal(0, 0.1) init (or `init_logits` when given, which makes the
    optimization reproducible under node permutations).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = g.num_nodes
    base = g.node_features.copy()
    c = _resolve_class(model, model.forward(g), class_index)
    rng = np.random.default_rng(seed)
    m = rng.normal(0.0, 0.1, size=n) if init_logits is None \
        else np.asarray(init_logits, dtype=np.float64).copy()
    masked = EntityGraph(n, g.edges, base.copy(), g.centroids, list(g.feature_names))
    optimizer = Adam([("mask", m)], TrainConfig(learning_rate=lr, seed=seed))
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-m))
        dp_dm = p * (1.0 - p)
        masked.node_features[...] = base * p[:, None]
        logits, tape = model.forward(masked, keep_tape=True)
        loss_pred, dlogits = cross_entropy(logits, c)
        pc = np.clip(p, 1e-12, 1.0 - 1e-12)
        entropy = -pc * np.log(pc) - (1.0 - pc) * np.log(1.0 - pc)
        objective = loss_pred + lambda_sparsity * float(p.mean()) \
            + lambda_entropy * float(entropy.mean())
        if not math.isfinite(objective):
            raise RuntimeError("mask optimization objective became non-finite")
        _, dx, _ = model.backward(tape, dlogits)
        dm = np.sum(dx * base, axis=1) * dp_dm
        dm += lambda_sparsity * dp_dm / n
        dm += lambda_entropy * np.log((1.0 - pc) / pc) * dp_dm / n
        optimizer.step({"mask": dm})
    return Saliency(1.0 / (1.0 + np.exp(-m)), c, "gnnexplainer")


# ---------------------------------------------------------------------------
# Relevance propagation
# ---------------------------------------------------------------------------

def _eps_rule(a_in: np.ndarray, w: np.ndarray, z: np.ndarray,
              r_out: np.ndarray) -> np.ndarray:
    denom = z + EPS_RULE * np.where(z >= 0, 1.0, -1.0)
    s = r_out / denom
    return a_in * (s @ w.T)


def graph_lrp(model: GnnModel, g: EntityGraph,
              class_index: int | None = None) -> Saliency:
    """Epsilon-rule relevance propagation from the class logit to the nodes.

    Only sum-aggregation (gin) stacks decompose linearly; min/max/std
    aggregators are rejected. Bias relevance is absorbed, so conservation is
    exact (up to epsilon slack) for zero-bias models.
    """
    if model.config.layer_type != "gin":
        raise ValueError("relevance propagation is only defined for the gin stack")
    logits, tape = model.forward(g, keep_tape=True)
    c = _resolve_class(model, logits, class_index)

    r = np.zeros((1, model.config.num_classes))
    r[0, c] = logits[c]
    for i in range(len(model.head.weights) - 1, -1, -1):
        x, z = tape["head"][i]
        r = _eps_rule(x, model.head.weights[i], z, r)

    h_last = tape["acts"][-1]
    n = g.num_nodes
    pooled_contrib = h_last / n if model.config.readout == "mean" else h_last
    pooled = pooled_contrib.sum(axis=0, keepdims=True)
    denom = pooled + EPS_RULE * np.where(pooled >= 0, 1.0, -1.0)
    r_nodes = pooled_contrib * (r / denom)

    topo = tape["topo"]
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        cache = tape["layer_caches"][li]
        for i in range(len(layer.mlp.weights) - 1, -1, -1):
            x, z = cache["mlp"][i]
            r_nodes = _eps_rule(x, layer.mlp.weights[i], z, r_nodes)
        # split aggregation relevance into the self and neighbor shares
        h_in, agg = cache["x"], cache["agg"]
        denom = agg + EPS_RULE * np.where(agg >= 0, 1.0, -1.0)
        s = r_nodes / denom
        r_nodes = (1.0 + layer.eps) * h_in * s + h_in * topo.neighbor_sum(s)
    return Saliency(r_nodes.sum(axis=1), c, "lrp")


# ---------------------------------------------------------------------------
# Entity ranking and overlay
# ---------------------------------------------------------------------------

def top_k_entities(saliency: Saliency, table: EntityTable, k: int) -> list[int]:
    """Entity ids of the k highest scores; ties go to the lower id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(table) != len(saliency.scores):
        raise ValueError("table size does not match saliency length")
    order = np.lexsort((table.ids, -saliency.scores))
    return [int(table.ids[i]) for i in order[: min(k, len(table))]]


def render_overlay(img: Image, centroids: np.ndarray, saliency: Saliency,
                   radius: int = 4) -> Image:
    """Paint each node as a filled disk colored blue (low) to red (high)."""
    out = img.pixels.copy()
    scores = _min_max(saliency.scores)
    rr, cc = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    disk = rr ** 2 + cc ** 2 <= radius ** 2
    for (row, col), t in zip(np.asarray(centroids), scores):
        color = np.array([255 * t, 40, 255 * (1.0 - t)], dtype=np.uint8)
        r0, c0 = int(round(row)), int(round(col))
        for dr, dc in zip(rr[disk], cc[disk]):
            r, c = r0 + dr, c0 + dc
            if 0 <= r < img.height and 0 <= c < img.width:
                out[r, c] = color
    return Image(out)


EXPLAINERS = {
    "gradcam": graph_gradcam,
    "gradcampp": graph_gradcam_pp,
    "gnnexplainer": gnn_explainer,
    "lrp": graph_lrp,
}


def explain(model: GnnModel, g: EntityGraph, method: str,
            class_index: int | None = None, **kwargs) -> Saliency:
    if method not in EXPLAINERS:
        raise ValueError(f"unknown explainer {method!r}; "
                         f"choose from {sorted(EXPLAINERS)}")
    return EXPLAINERS[method](model, g, class_index=class_index, **kwargs)
