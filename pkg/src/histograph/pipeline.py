"""Declarative linear pipelines with content-hash caching.

A pipeline document lists file sources and an ordered series of steps; each
step names a registered operation, its parameters, which prior keys feed it,
and what its outputs are called. Outputs land in the workspace under
``<step>/<key>.<ext>`` with the format chosen by artifact kind (images as
PPM, masks as PGM, label maps and graphs as JSON, tables and features as
CSV).

Caching is content-addressed: a step reruns only when the operation version,
its parameters, or any input's bytes change. Cache hits re-verify the stored
output hashes before reuse, so a stale or tampered workspace degrades to a
rerun instead of wrong results.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from histograph import features as feat
from histograph import graphs as gr
from histograph import nuclei as nuc
from histograph import stain
from histograph import superpixel as sp
from histograph import tissue
from histograph.raster import (
    EntityTable, GrayImage, Image, LabelMap, read_entity_table, read_label_map,
    read_pgm, read_ppm, write_entity_table, write_label_map, write_pgm,
    write_ppm,
)

WORKSPACE_ENV = "HISTOGRAPH_WORKSPACE"


class PipelineError(ValueError):
    """Configuration or validation failure; message names the step."""


class PipelineStepError(RuntimeError):
    def __init__(self, step: str, cause: Exception):
        super().__init__(f"step {step!r} failed: {cause}")
        self.step = step
        self.cause = cause


# ---------------------------------------------------------------------------
# Artifact kinds: (extension, save, load)
# ---------------------------------------------------------------------------

def _save_features(obj, path):
    ids, fm = obj
    feat.write_feature_csv(fm, ids, path)


def _load_features(path):
    return feat.read_feature_csv(path)


def _save_mask(obj: LabelMap, path):
    write_pgm(GrayImage((obj.labels > 0).astype(np.uint8) * 255), path)


def _load_mask(path) -> LabelMap:
    return LabelMap((read_pgm(path).pixels > 0).astype(np.int32))


ARTIFACT_KINDS = {
    "image": ("ppm", write_ppm, read_ppm),
    "gray": ("pgm", write_pgm, read_pgm),
    "mask": ("pgm", _save_mask, _load_mask),
    "labels": ("json", write_label_map, read_label_map),
    "table": ("csv", write_entity_table, read_entity_table),
    "features": ("csv", _save_features, _load_features),
    "graph": ("json", gr.serialize_graph, gr.deserialize_graph),
}


# ---------------------------------------------------------------------------
# Operation registry
# ---------------------------------------------------------------------------

@dataclass
class OpSpec:
    fn: callable
    inputs: list[str]          # argument names steps must wire
    output_kinds: list[str]    # artifact kind per output slot
    version: str = "1"


def _op_normalize(inputs, params):
    reference = None
    if params.get("reference"):
        reference = stain.read_stain_profile(params["reference"])
    out = stain.normalize(
        inputs["image"], method=params.get("method", "macenko"),
        reference=reference, beta=params.get("beta", 0.15),
        alpha=params.get("alpha", 1.0), lam=params.get("lam", 0.1),
        iters=params.get("iters", 50))
    return [out]


def _op_tissue_mask(inputs, params):
    p = tissue.TissueMaskParams(
        sigma=params.get("sigma", 1.0), sigma_growth=params.get("sigma_growth", 2.0),
        stop_threshold=params.get("stop_threshold", 10.0),
        max_iterations=params.get("max_iterations", 5))
    return [tissue.detect_tissue(inputs["image"], p)]


def _op_nuclei(inputs, params):
    p = nuc.NucleiParams(
        min_area=params.get("min_area", 20), max_area=params.get("max_area", 5000),
        sigma=params.get("sigma", 2.0),
        peak_min_distance=params.get("peak_min_distance", 5))
    labels, table = nuc.detect_nuclei(inputs["image"], p)
    return [labels, table]


def _op_superpixel(inputs, params):
    p = sp.SlicParams(
        num_superpixels=params.get("num_superpixels", 400),
        compactness=params.get("compactness", 10.0),
        iterations=params.get("iterations", 10),
        min_size_fraction=params.get("min_size_fraction", 0.25))
    labels = sp.slic(inputs["image"], p)
    threshold = params.get("merge_threshold", 0.0)
    if threshold and threshold > 0:
        labels = sp.merge_superpixels(
            inputs["image"], labels,
            sp.MergeParams(color_threshold=threshold,
                           target_min_regions=params.get("target_min_regions")))
    return [labels]


def _op_features(inputs, params):
    from histograph.raster import entity_table_from_labels
    labels = inputs["labels"]
    table = entity_table_from_labels(labels)
    glcm_params = feat.GlcmParams(
        levels=params.get("glcm_levels", 32),
        offsets=[tuple(o) for o in params.get("glcm_offsets", [(0, 1), (1, 0), (1, 1), (1, -1)])])
    fm = feat.extract_default_features(
        inputs["image"], labels, table, groups=params.get("groups"),
        glcm_params=glcm_params, crowdedness_k=params.get("crowdedness_k", 5))
    return [(table.ids.copy(), fm)]


def _op_knn_graph(inputs, params):
    ids, fm = inputs["features"]
    table = inputs["entities"]
    if not np.array_equal(ids, table.ids):
        raise ValueError("feature ids do not match entity table ids")
    p = gr.KnnParams(k=params.get("k", 5),
                     distance_threshold=params.get("distance_threshold", 50.0))
    return [gr.build_knn_graph(table, fm, p)]


def _op_rag_graph(inputs, params):
    ids, fm = inputs["features"]
    labels = inputs["labels"]
    if not np.array_equal(ids, np.arange(1, labels.num_labels + 1)):
        raise ValueError("feature ids do not match the region labels")
    return [gr.build_rag(labels, fm)]


OPS: dict[str, OpSpec] = {
    "normalize": OpSpec(_op_normalize, ["image"], ["image"]),
    "tissue-mask": OpSpec(_op_tissue_mask, ["image"], ["mask"]),
    "nuclei": OpSpec(_op_nuclei, ["image"], ["labels", "table"]),
    "superpixel": OpSpec(_op_superpixel, ["image"], ["labels"]),
    "features": OpSpec(_op_features, ["image", "labels"], ["features"]),
    "knn-graph": OpSpec(_op_knn_graph, ["entities", "features"], ["graph"]),
    "rag-graph": OpSpec(_op_rag_graph, ["labels", "features"], ["graph"]),
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineStep:
    name: str
    op: str
    params: dict
    inputs: dict[str, str]   # op argument -> pipeline key
    outputs: list[str]


@dataclass
class PipelineConfig:
    steps: list[PipelineStep]
    sources: dict[str, str] = field(default_factory=dict)
    workspace: str | None = None
    cache: bool = True


def parse_pipeline(doc: str | dict) -> PipelineConfig:
    """Validate a pipeline JSON document; errors name the offending step."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    if not isinstance(doc, dict):
        raise PipelineError("pipeline document must be a JSON object")
    sources = {str(k): str(v) for k, v in doc.get("sources", {}).items()}
    steps: list[PipelineStep] = []
    known_keys = set(sources)
    names = set()
    for raw in doc.get("steps", []):
        name = raw.get("name")
        if not name:
            raise PipelineError("every step needs a non-empty name")
        if name in names:
            raise PipelineError(f"step {name!r}: duplicate step name")
        names.add(name)
        op_name = raw.get("op")
        if op_name not in OPS:
            raise PipelineError(f"step {name!r}: unknown op {op_name!r}")
        spec = OPS[op_name]
        inputs = {str(k): str(v) for k, v in raw.get("inputs", {}).items()}
        for arg in spec.inputs:
            if arg not in inputs:
                raise PipelineError(f"step {name!r}: missing input {arg!r}")
        for arg, key in inputs.items():
            if arg not in spec.inputs:
                raise PipelineError(f"step {name!r}: op {op_name!r} takes no input {arg!r}")
            if key not in known_keys:
                raise PipelineError(f"step {name!r}: input {key!r} is neither a "
                                    "source nor a prior output")
        outputs = [str(o) for o in raw.get("outputs", [])]
        if len(outputs) != len(spec.output_kinds):
            raise PipelineError(
                f"step {name!r}: op {op_name!r} produces {len(spec.output_kinds)} "
                f"output(s), got {len(outputs)} name(s)")
        for key in outputs:
            if key in known_keys:
                raise PipelineError(f"step {name!r}: output key {key!r} already defined")
            known_keys.add(key)
        steps.append(PipelineStep(name, op_name, dict(raw.get("params", {})),
                                  inputs, outputs))
    return PipelineConfig(steps=steps, sources=sources,
                          workspace=doc.get("workspace"),
                          cache=bool(doc.get("cache", True)))


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    outputs: dict[str, str]
    steps_run: list[str]
    steps_cached: list[str]


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sniff_source(path: str):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        return read_ppm(path)
    if ext == ".pgm":
        return read_pgm(path)
    if ext == ".json":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if "labels" in doc:
            return read_label_map(path)
        return gr.graph_from_dict(doc)
    if ext == ".csv":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
        if header == ",".join(
                ["id", "centroid_row", "centroid_col", "area",
                 "bbox_r0", "bbox_c0", "bbox_r1", "bbox_c1"]):
            return read_entity_table(path)
        return feat.read_feature_csv(path)
    raise PipelineError(f"cannot infer artifact type of source {path!r}")


def resolve_workspace(explicit: str | None, cfg: PipelineConfig) -> str:
    return explicit or cfg.workspace or os.environ.get(WORKSPACE_ENV) \
        or os.path.join(os.getcwd(), "histograph-workspace")


def run_pipeline(cfg: PipelineConfig, workspace: str | None = None) -> PipelineResult:
    """Execute the steps in order, reusing cached outputs where valid."""
    ws = resolve_workspace(workspace, cfg)
    os.makedirs(ws, exist_ok=True)
    cache_dir = os.path.join(ws, ".cache")
    os.makedirs(cache_dir, exist_ok=True)

    objects: dict[str, object] = {}
    digests: dict[str, str] = {}
    paths: dict[str, str] = {}
    for key, src in cfg.sources.items():
        if not os.path.exists(src):
            raise PipelineError(f"source {key!r}: file not found: {src}")
        objects[key] = _sniff_source(src)
        digests[key] = _sha256(src)
        paths[key] = src

    steps_run, steps_cached = [], []
    for step in cfg.steps:
        spec = OPS[step.op]
        signature = hashlib.sha256(json.dumps({
            "op": step.op,
            "version": spec.version,
            "params": step.params,
            "inputs": {arg: digests[key] for arg, key in sorted(step.inputs.items())},
        }, sort_keys=True).encode()).hexdigest()

        manifest_path = os.path.join(cache_dir, f"{step.name}.json")
        step_dir = os.path.join(ws, step.name)
        if cfg.cache and _cache_hit(manifest_path, signature, ws):
            with open(manifest_path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
            for key, rec in manifest["outputs"].items():
                _, _, load = ARTIFACT_KINDS[rec["kind"]]
                full = os.path.join(ws, rec["path"])
                objects[key] = load(full)
                digests[key] = rec["sha"]
                paths[key] = full
            steps_cached.append(step.name)
            continue

        try:
            inputs = {arg: objects[key] for arg, key in step.inputs.items()}
            results = spec.fn(inputs, step.params)
            os.makedirs(step_dir, exist_ok=True)
            manifest_outputs = {}
            for key, kind, obj in zip(step.outputs, spec.output_kinds, results):
                ext, save, _ = ARTIFACT_KINDS[kind]
                rel = os.path.join(step.name, f"{key}.{ext}")
                full = os.path.join(ws, rel)
                save(obj, full)
                sha = _sha256(full)
                objects[key] = obj
                digests[key] = sha
                paths[key] = full
                manifest_outputs[key] = {"path": rel, "sha": sha, "kind": kind}
            tmp = manifest_path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump({"signature": signature, "outputs": manifest_outputs}, fh)
            os.replace(tmp, manifest_path)
            steps_run.append(step.name)
        except Exception as exc:
            shutil.rmtree(step_dir, ignore_errors=True)
            if os.path.exists(manifest_path):
                os.remove(manifest_path)
            raise PipelineStepError(step.name, exc) from exc

    out_paths = {}
    for step in cfg.steps:
        for key in step.outputs:
            out_paths[key] = paths[key]
    return PipelineResult(out_paths, steps_run, steps_cached)


def _cache_hit(manifest_path: str, signature: str, ws: str) -> bool:
    if not os.path.exists(manifest_path):
        return False
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return False
    if manifest.get("signature") != signature:
        return False
    for rec in manifest.get("outputs", {}).values():
        full = os.path.join(ws, rec["path"])
        if not os.path.exists(full) or _sha256(full) != rec["sha"]:
            return False  # stale or tampered artifact: recompute
    return True
