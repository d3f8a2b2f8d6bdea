"""Graph classification models: layer stacks, readout, head, checkpoints.

A model is a stack of message-passing layers followed by a mean/sum readout
and an MLP head producing class logits. ``forward(..., keep_tape=True)``
records every intermediate needed for exact reverse-mode gradients and for
the attribution methods; ``backward`` consumes that tape and returns
gradients for all parameters, the input features, and each layer's output
activations.

The hierarchical variant runs a cell-level stack, mean-pools cell embeddings
into their enclosing tissue node, concatenates with the tissue node's own
features, and continues through the tissue model's stack and head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from histograph.graphs import EntityGraph
from histograph.gnn.layers import GinLayer, GraphTopology, Mlp, PnaLayer


@dataclass
class GnnConfig:
    input_dim: int
    layer_type: str = "gin"       # gin | pna
    num_layers: int = 3
    hidden_units: int = 32
    mlp_depth: int = 2            # affine+ReLU blocks inside each GIN layer
    head_hidden: int = 32
    head_depth: int = 2
    readout: str = "mean"         # mean | sum
    num_classes: int = 2
    gin_eps: float = 0.0
    pna_delta: float = 1.0

    def __post_init__(self):
        if self.layer_type not in ("gin", "pna"):
            raise ValueError(f"unknown layer type {self.layer_type!r}")
        if self.readout not in ("mean", "sum"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.num_layers < 1 or self.hidden_units < 1:
            raise ValueError("need num_layers >= 1 and hidden_units >= 1")
        if self.num_classes < 2:
            raise ValueError("need num_classes >= 2")
        if self.input_dim < 1:
            raise ValueError("need input_dim >= 1")


class GnnModel:
    def __init__(self, config: GnnConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.layers = []
        d_in = config.input_dim
        for i in range(config.num_layers):
            if config.layer_type == "gin":
                layer = GinLayer(d_in, config.hidden_units, config.mlp_depth,
                                 config.gin_eps, rng, name=f"layer{i}")
            else:
                layer = PnaLayer(d_in, config.hidden_units, config.pna_delta,
                                 rng, name=f"layer{i}")
            self.layers.append(layer)
            d_in = config.hidden_units
        head_dims = [config.hidden_units] + [config.head_hidden] * (config.head_depth - 1) \
            + [config.num_classes]
        self.head = Mlp(head_dims, rng, final_relu=False, name="head")

    # ------------------------------------------------------------------
    def params(self) -> list[tuple[str, np.ndarray]]:
        out = self.stack_params()
        out.extend(self.head.params())
        return out

    def stack_params(self) -> list[tuple[str, np.ndarray]]:
        """Layer parameters only; the hierarchical path skips the cell head."""
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def embed(self, g: EntityGraph, topo: GraphTopology | None = None):
        """Node embeddings after the full layer stack, with a tape."""
        if g.node_features.shape[1] != self.config.input_dim:
            raise ValueError(
                f"graph features have dim {g.node_features.shape[1]}, "
                f"model expects {self.config.input_dim}")
        topo = topo or GraphTopology(g)
        h = g.node_features
        acts = [h]
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(h, topo)
            acts.append(h)
            caches.append(cache)
        return h, {"topo": topo, "acts": acts, "layer_caches": caches}

    def forward(self, g: EntityGraph, keep_tape: bool = False):
        h, tape = self.embed(g)
        pooled, readout_cache = _readout_forward(h, self.config.readout)
        logits, head_cache = self.head.forward(pooled[None, :])
        logits = logits[0]
        tape.update({"readout": readout_cache, "head": head_cache, "logits": logits})
        if keep_tape:
            return logits, tape
        return logits

    def backward(self, tape: dict, dlogits: np.ndarray):
        """Gradients of a scalar whose logit-gradient is `dlogits`.

        Returns (param_grads dict, d_input_features, d_layer_acts) where
        d_layer_acts[i] is the gradient w.r.t. acts[i] (0 = input features).
        """
        dpooled, head_grads = self.head.backward(dlogits[None, :], tape["head"])
        dh = _readout_backward(dpooled[0], tape["readout"], self.config.readout)
        dacts = [None] * len(tape["acts"])
        dacts[-1] = dh
        topo = tape["topo"]
        grads: dict[str, np.ndarray] = {}
        for name_grad, g_val in zip(self.head.params(), head_grads):
            grads[name_grad[0]] = g_val
        for i in range(len(self.layers) - 1, -1, -1):
            dh, layer_grads = self.layers[i].backward(dh, tape["layer_caches"][i], topo)
            dacts[i] = dh
            for name_grad, g_val in zip(self.layers[i].params(), layer_grads):
                grads[name_grad[0]] = g_val
        return grads, dacts[0], dacts


def _readout_forward(h: np.ndarray, mode: str):
    n = h.shape[0]
    if mode == "mean":
        return h.mean(axis=0), n
    return h.sum(axis=0), n


def _readout_backward(dpooled: np.ndarray, n: int, mode: str) -> np.ndarray:
    if mode == "mean":
        return np.tile(dpooled / n, (n, 1))
    return np.tile(dpooled, (n, 1))


# ---------------------------------------------------------------------------
# Loss and prediction
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """(loss, dloss/dlogits) for softmax cross-entropy against one label."""
    p = softmax(logits)
    loss = -float(np.log(max(p[label], 1e-300)))
    dlogits = p.copy()
    dlogits[label] -= 1.0
    return loss, dlogits


def predict(model: GnnModel, g: EntityGraph) -> tuple[int, np.ndarray]:
    """Class index (ties to the lower index) and softmax probabilities."""
    probs = softmax(model.forward(g))
    return int(np.argmax(probs)), probs


# ---------------------------------------------------------------------------
# Hierarchical cell-to-tissue model
# ---------------------------------------------------------------------------

def hact_forward(cell_model: GnnModel, tissue_model: GnnModel,
                 cell_graph: EntityGraph, tissue_graph: EntityGraph,
                 assignment: np.ndarray, keep_tape: bool = False):
    """Cell stack -> per-tissue mean pool -> concat with tissue features ->
    tissue stack -> readout -> head.

    `assignment[i]` is the tissue node index of cell i; -1 drops the cell.
    Tissue nodes with no assigned cells get a zero pooled block.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    if len(assignment) != cell_graph.num_nodes:
        raise ValueError("assignment length != number of cells")
    if assignment.size and assignment.max() >= tissue_graph.num_nodes:
        raise ValueError("assignment index out of range")
    cell_h, cell_tape = cell_model.embed(cell_graph)
    nt = tissue_graph.num_nodes
    d = cell_h.shape[1]
    pooled = np.zeros((nt, d))
    counts = np.zeros(nt)
    valid = assignment >= 0
    np.add.at(pooled, assignment[valid], cell_h[valid])
    np.add.at(counts, assignment[valid], 1.0)
    safe = np.where(counts > 0, counts, 1.0)
    pooled = pooled / safe[:, None]

    fused = np.concatenate([pooled, tissue_graph.node_features], axis=1)
    fused_graph = EntityGraph(nt, tissue_graph.edges, fused, tissue_graph.centroids)
    tissue_h, tissue_tape = tissue_model.embed(fused_graph)
    pooled_graph, readout_cache = _readout_forward(tissue_h, tissue_model.config.readout)
    logits, head_cache = tissue_model.head.forward(pooled_graph[None, :])
    logits = logits[0]
    if not keep_tape:
        return logits
    tape = {
        "cell": cell_tape, "tissue": tissue_tape, "assignment": assignment,
        "counts": safe, "pool_dim": d, "readout": readout_cache,
        "head": head_cache, "logits": logits,
    }
    return logits, tape


def hact_backward(cell_model: GnnModel, tissue_model: GnnModel, tape: dict,
                  dlogits: np.ndarray):
    """Gradients for both models' parameters plus both feature inputs."""
    dpooled, head_grads = tissue_model.head.backward(dlogits[None, :], tape["head"])
    dh_t = _readout_backward(dpooled[0], tape["readout"], tissue_model.config.readout)
    grads: dict[str, np.ndarray] = {}
    for (name, _), g_val in zip(tissue_model.head.params(), head_grads):
        grads[f"tissue.{name}"] = g_val
    topo_t = tape["tissue"]["topo"]
    for i in range(len(tissue_model.layers) - 1, -1, -1):
        dh_t, layer_grads = tissue_model.layers[i].backward(
            dh_t, tape["tissue"]["layer_caches"][i], topo_t)
        for (name, _), g_val in zip(tissue_model.layers[i].params(), layer_grads):
            grads[f"tissue.{name}"] = g_val
    d = tape["pool_dim"]
    dpool = dh_t[:, :d]
    dtissue_feats = dh_t[:, d:]
    assignment = tape["assignment"]
    valid = assignment >= 0
    dcell_h = np.zeros_like(tape["cell"]["acts"][-1])
    dcell_h[valid] = dpool[assignment[valid]] / tape["counts"][assignment[valid], None]

    topo_c = tape["cell"]["topo"]
    dh_c = dcell_h
    for i in range(len(cell_model.layers) - 1, -1, -1):
        dh_c, layer_grads = cell_model.layers[i].backward(
            dh_c, tape["cell"]["layer_caches"][i], topo_c)
        for (name, _), g_val in zip(cell_model.layers[i].params(), layer_grads):
            grads[f"cell.{name}"] = g_val
    return grads, dh_c, dtissue_feats


def predict_hact(cell_model: GnnModel, tissue_model: GnnModel,
                 cell_graph: EntityGraph, tissue_graph: EntityGraph,
                 assignment: np.ndarray) -> tuple[int, np.ndarray]:
    probs = softmax(hact_forward(cell_model, tissue_model, cell_graph,
                                 tissue_graph, assignment))
    return int(np.argmax(probs)), probs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_to_dict(model: GnnModel) -> dict:
    return {
        "kind": "gnn",
        "config": asdict(model.config),
        "seed": model.seed,
        "params": [
            {"name": name, "shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in model.params()
        ],
    }


def checkpoint_from_dict(doc: dict) -> GnnModel:
    if doc.get("kind") != "gnn":
        raise ValueError(f"not a model checkpoint (kind={doc.get('kind')!r})")
    model = GnnModel(GnnConfig(**doc["config"]), seed=int(doc.get("seed", 0)))
    stored = {p["name"]: p for p in doc["params"]}
    for name, arr in model.params():
        if name not in stored:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        data = np.asarray(stored[name]["data"], dtype=np.float64)
        arr[...] = data.reshape(stored[name]["shape"])
    return model


def save_checkpoint(model: GnnModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_to_dict(model), fh)


def load_checkpoint(path: str) -> GnnModel:
    with open(path, "r", encoding="utf-8") as fh:
        return checkpoint_from_dict(json.load(fh))


def save_hact_checkpoint(cell_model: GnnModel, tissue_model: GnnModel, path: str) -> None:
    doc = {"kind": "hact", "cell": checkpoint_to_dict(cell_model),
           "tissue": checkpoint_to_dict(tissue_model)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_hact_checkpoint(path: str) -> tuple[GnnModel, GnnModel]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "hact":
        raise ValueError(f"not a hierarchical checkpoint (kind={doc.get('kind')!r})")
    return checkpoint_from_dict(doc["cell"]), checkpoint_from_dict(doc["tissue"])
