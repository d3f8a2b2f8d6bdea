"""Message-passing layers and their reverse-mode gradients.

Every layer exposes ``forward(x, topo) -> (out, cache)`` and
``backward(dout, cache, topo) -> (dx, grads)`` where ``grads`` aligns with
``params()``. Caches keep the intermediates that both backprop and the
relevance-propagation explainer need.
"""

from __future__ import annotations

import numpy as np

from histograph.graphs import EntityGraph


class GraphTopology:
    """Directed edge arrays (both orientations) sorted by source, CSR-style."""

    def __init__(self, g: EntityGraph):
        self.num_nodes = g.num_nodes
        if g.num_edges:
            src = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
            dst = np.concatenate([g.edges[:, 1], g.edges[:, 0]])
            order = np.argsort(src, kind="stable")
            self.src = src[order]
            self.dst = dst[order]
        else:
            self.src = np.empty(0, dtype=np.int64)
            self.dst = np.empty(0, dtype=np.int64)
        self.indptr = np.searchsorted(self.src, np.arange(self.num_nodes + 1))
        self.degrees = np.diff(self.indptr)

    def neighbor_sum(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.num_nodes, x.shape[1]), dtype=np.float64)
        if self.src.size:
            np.add.at(out, self.src, x[self.dst])
        return out

    def segment_reduce(self, values: np.ndarray, ufunc) -> np.ndarray:
        """Per-source reduction of edge values; zero rows for isolated nodes."""
        out = np.zeros((self.num_nodes, values.shape[1]), dtype=np.float64)
        nz = self.degrees > 0
        if self.src.size and nz.any():
            starts = self.indptr[:-1][nz]
            out[nz] = ufunc.reduceat(values, starts, axis=0)
        return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Mlp:
    """Affine + ReLU stack; the final ReLU is optional (off for logits)."""

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 final_relu: bool = True, name: str = "mlp"):
        self.name = name
        self.final_relu = final_relu
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for d_in, d_out in zip(dims, dims[1:]):
            self.weights.append(glorot(rng, d_in, d_out))
            self.biases.append(np.zeros(d_out))

    def params(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{self.name}.w{i}", w))
            out.append((f"{self.name}.b{i}", b))
        return out

    def forward(self, x: np.ndarray):
        cache = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = x @ w + b
            cache.append((x, z))
            last = i == len(self.weights) - 1
            x = z if (last and not self.final_relu) else relu(z)
        return x, cache

    def backward(self, dout: np.ndarray, cache):
        grads = [None] * (2 * len(self.weights))
        dx = dout
        for i in range(len(self.weights) - 1, -1, -1):
            x, z = cache[i]
            last = i == len(self.weights) - 1
            dz = dx if (last and not self.final_relu) else dx * (z > 0)
            grads[2 * i] = x.T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            dx = dz @ self.weights[i].T
        return dx, grads


class GinLayer:
    """h'_v = MLP((1 + eps) h_v + sum of neighbor features)."""

    def __init__(self, d_in: int, d_out: int, mlp_depth: int, eps: float,
                 rng: np.random.Generator, name: str):
        self.eps = eps
        dims = [d_in] + [d_out] * max(1, mlp_depth)
        self.mlp = Mlp(dims, rng, final_relu=True, name=f"{name}.mlp")

    def params(self):
        return self.mlp.params()

    def forward(self, x: np.ndarray, topo: GraphTopology):
        agg = (1.0 + self.eps) * x + topo.neighbor_sum(x)
        out, mlp_cache = self.mlp.forward(agg)
        return out, {"x": x, "agg": agg, "mlp": mlp_cache}

    def backward(self, dout: np.ndarray, cache, topo: GraphTopology):
        dagg, grads = self.mlp.backward(dout, cache["mlp"])
        dx = (1.0 + self.eps) * dagg + topo.neighbor_sum(dagg)
        return dx, grads


# block order inside the PNA concatenation, repeated for each aggregator:
# raw, amplified by log(d+1)/delta, attenuated by delta/log(d+1)
PNA_AGGREGATORS = ("mean", "min", "max", "std")
PNA_NUM_BLOCKS = len(PNA_AGGREGATORS) * 3


class PnaLayer:
    """Multi-aggregator layer: {mean,min,max,std} x {1, amplify, attenuate}.

    The twelve scaled aggregate blocks concatenate with the node's own
    features and project through a single affine + ReLU. Isolated nodes
    contribute zero aggregates and zero amplification/attenuation.
    """

    def __init__(self, d_in: int, d_out: int, delta: float,
                 rng: np.random.Generator, name: str):
        if delta <= 0:
            raise ValueError("pna delta must be > 0")
        self.delta = delta
        self.d_in = d_in
        self.w = glorot(rng, d_in * (1 + PNA_NUM_BLOCKS), d_out)
        self.b = np.zeros(d_out)
        self.name = name

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]

    def _scalers(self, topo: GraphTopology):
        deg = topo.degrees.astype(np.float64)
        logd = np.log(deg + 1.0)
        amp = logd / self.delta
        with np.errstate(divide="ignore"):
            att = np.where(deg > 0, self.delta / np.where(logd > 0, logd, 1.0), 0.0)
        return amp, att

    def forward(self, x: np.ndarray, topo: GraphTopology):
        n, d = x.shape
        deg = topo.degrees.astype(np.float64)
        safe_deg = np.where(deg > 0, deg, 1.0)
        vals = x[topo.dst] if topo.src.size else np.empty((0, d))
        total = topo.neighbor_sum(x)
        mean = total / safe_deg[:, None]
        minv = topo.segment_reduce(vals, np.minimum)
        maxv = topo.segment_reduce(vals, np.maximum)
        meansq = topo.neighbor_sum(x * x) / safe_deg[:, None]
        var = np.maximum(meansq - mean * mean, 0.0)
        std = np.sqrt(var)
        amp, att = self._scalers(topo)
        aggs = {"mean": mean, "min": minv, "max": maxv, "std": std}
        blocks = [x]
        for agg_name in PNA_AGGREGATORS:
            a = aggs[agg_name]
            blocks.extend([a, a * amp[:, None], a * att[:, None]])
        concat = np.concatenate(blocks, axis=1)
        z = concat @ self.w + self.b
        out = relu(z)
        cache = {"x": x, "concat": concat, "z": z, "mean": mean, "minv": minv,
                 "maxv": maxv, "std": std, "vals": vals, "amp": amp, "att": att,
                 "safe_deg": safe_deg}
        return out, cache

    def backward(self, dout: np.ndarray, cache, topo: GraphTopology):
        x = cache["x"]
        n, d = x.shape
        dz = dout * (cache["z"] > 0)
        dw = cache["concat"].T @ dz
        db = dz.sum(axis=0)
        dconcat = dz @ self.w.T
        dx = dconcat[:, :d].copy()
        amp, att = cache["amp"], cache["att"]
        safe_deg = cache["safe_deg"]
        # collapse the three scaled copies of each aggregate
        dagg = {}
        for bi, agg_name in enumerate(PNA_AGGREGATORS):
            base = d * (1 + 3 * bi)
            raw = dconcat[:, base : base + d]
            amped = dconcat[:, base + d : base + 2 * d]
            atted = dconcat[:, base + 2 * d : base + 3 * d]
            dagg[agg_name] = raw + amped * amp[:, None] + atted * att[:, None]

        if topo.src.size:
            src, dst = topo.src, topo.dst
            vals = cache["vals"]
            mean, std = cache["mean"], cache["std"]
            # mean: uniform 1/deg share per neighbor
            contrib = dagg["mean"][src] / safe_deg[src, None]
            # min / max: split among the achieving neighbors
            for agg_name, ref in (("min", cache["minv"]), ("max", cache["maxv"])):
                mask = (vals == ref[src]).astype(np.float64)
                counts = np.zeros((n, d))
                np.add.at(counts, src, mask)
                counts = np.where(counts > 0, counts, 1.0)
                contrib = contrib + dagg[agg_name][src] * mask / counts[src]
            # std: (x_u - mean_v) / (deg_v * std_v), zero where std == 0
            safe_std = np.where(std > 1e-12, std, 1.0)
            factor = (std > 1e-12) / (safe_std * safe_deg[:, None])
            contrib = contrib + dagg["std"][src] * (vals - mean[src]) * factor[src]
            np.add.at(dx, dst, contrib)
        return dx, [dw, db]
