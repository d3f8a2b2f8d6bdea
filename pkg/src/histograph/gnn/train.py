"""Adam training loop over graph datasets, deterministic per seed."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from histograph.graphs import EntityGraph
from histograph.gnn.model import (
    GnnModel, cross_entropy, hact_backward, hact_forward,
)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


class Adam:
    def __init__(self, params: list[tuple[str, np.ndarray]], cfg: TrainConfig):
        self.cfg = cfg
        self.params = params
        self.m = {name: np.zeros_like(arr) for name, arr in params}
        self.v = {name: np.zeros_like(arr) for name, arr in params}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, arr in self.params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            arr -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def mean_log_degree(graphs: list[EntityGraph]) -> float:
    """Degree normalizer for the multi-aggregator layers: mean log(d + 1)."""
    total, count = 0.0, 0
    for g in graphs:
        deg = np.zeros(g.num_nodes)
        for u, v in g.edges:
            deg[u] += 1
            deg[v] += 1
        total += float(np.sum(np.log(deg + 1.0)))
        count += g.num_nodes
    if count == 0:
        return 1.0
    return max(total / count, 1e-6)


def _accumulate(total: dict, grads: dict, scale: float) -> None:
    for name, g in grads.items():
        if name in total:
            total[name] += scale * g
        else:
            total[name] = scale * g


def train_model(model: GnnModel, dataset: list[tuple[EntityGraph, int]],
                cfg: TrainConfig | None = None) -> list[float]:
    """Adam on mean cross-entropy; returns the per-epoch mean loss trace."""
    if not dataset:
        raise ValueError("dataset is empty")
    if cfg is None:
        cfg = TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.params(), cfg)
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            total_grads: dict[str, np.ndarray] = {}
            for idx in batch:
                g, label = dataset[idx]
                logits, tape = model.forward(g, keep_tape=True)
                loss, dlogits = cross_entropy(logits, label)
                if math.isnan(loss):
                    raise RuntimeError(f"NaN loss on sample {idx}; aborting training")
                epoch_loss += loss
                grads, _, _ = model.backward(tape, dlogits)
                _accumulate(total_grads, grads, 1.0 / len(batch))
            optimizer.step(total_grads)
        trace.append(epoch_loss / len(dataset))
    return trace


def train_hact(cell_model: GnnModel, tissue_model: GnnModel,
               dataset: list[tuple[EntityGraph, EntityGraph, np.ndarray, int]],
               cfg: TrainConfig | None = None) -> list[float]:
    """Joint hierarchical training; dataset rows are (cells, tissue, assignment, label)."""
    if not dataset:
        raise ValueError("dataset is empty")
    if cfg is None:
        cfg = TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    # the cell head never runs in the hierarchical path, so it is not trained
    params = [(f"cell.{n}", a) for n, a in cell_model.stack_params()] \
        + [(f"tissue.{n}", a) for n, a in tissue_model.params()]
    optimizer = Adam(params, cfg)
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            total_grads: dict[str, np.ndarray] = {}
            for idx in batch:
                cg, tg, assignment, label = dataset[idx]
                logits, tape = hact_forward(cell_model, tissue_model, cg, tg,
                                            assignment, keep_tape=True)
                loss, dlogits = cross_entropy(logits, label)
                if math.isnan(loss):
                    raise RuntimeError(f"NaN loss on sample {idx}; aborting training")
                epoch_loss += loss
                grads, _, _ = hact_backward(cell_model, tissue_model, tape, dlogits)
                _accumulate(total_grads, grads, 1.0 / len(batch))
            optimizer.step(total_grads)
        trace.append(epoch_loss / len(dataset))
    return trace
