"""FastAPI application exposing the toolkit operations."""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from histograph import __version__, bench, explain as ex, stain
from histograph import features as feat
from histograph import graphs as gr
from histograph import nuclei as nuc
from histograph import pipeline as pl
from histograph import superpixel as sp
from histograph import tissue
from histograph.gnn import (
    GnnConfig, GnnModel, TrainConfig, checkpoint_from_dict, checkpoint_to_dict,
    mean_log_degree, predict, predict_hact, train_hact, train_model,
)
from histograph.raster import (
    GrayImage, entity_table_from_csv, entity_table_from_labels,
    entity_table_to_csv,
)
from histograph.service import schemas as s
from histograph.synth import synth_tissue_image


def _profile_from_model(model: s.StainProfileModel | None):
    if model is None:
        return None
    return stain.StainProfile(np.asarray(model.stain_matrix, dtype=np.float64).T,
                              np.asarray(model.max_conc, dtype=np.float64))


def _hact_parts(doc: dict):
    from histograph.gnn.model import checkpoint_from_dict as from_dict
    if doc.get("kind") != "hact":
        raise ValueError("checkpoint is not a hierarchical model")
    return from_dict(doc["cell"]), from_dict(doc["tissue"])


def create_app() -> FastAPI:
    app = FastAPI(title="histograph", version=__version__)

    def guard(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/health", response_model=s.MessageResponse)
    def health():
        return s.MessageResponse(message=f"histograph {__version__}")

    @app.post("/synth-image", response_model=s.ImagePayload)
    def synth(req: s.SynthImageRequest):
        return s.ImagePayload.pack(guard(synth_tissue_image, req.side, req.seed))

    @app.post("/normalize", response_model=s.NormalizeResponse)
    def normalize(req: s.NormalizeRequest):
        img = guard(req.image.unpack)
        out = guard(stain.normalize, img, method=req.method,
                    reference=_profile_from_model(req.reference), beta=req.beta,
                    alpha=req.alpha, lam=req.lam, iters=req.iters)
        return s.NormalizeResponse(image=s.ImagePayload.pack(out))

    @app.post("/estimate-profile", response_model=s.StainProfileModel)
    def estimate_profile(req: s.EstimateProfileRequest):
        img = guard(req.image.unpack)
        profile = guard(stain.estimate_profile, img, method=req.method,
                        beta=req.beta, alpha=req.alpha, lam=req.lam, iters=req.iters)
        doc = profile.to_dict()
        return s.StainProfileModel(**doc)

    @app.post("/tissue-mask", response_model=s.TissueMaskResponse)
    def tissue_mask(req: s.TissueMaskRequest):
        img = guard(req.image.unpack)
        params = guard(tissue.TissueMaskParams, sigma=req.sigma,
                       sigma_growth=req.sigma_growth,
                       stop_threshold=req.stop_threshold,
                       max_iterations=req.max_iterations)
        mask = guard(tissue.detect_tissue, img, params)
        gray = GrayImage((mask.labels > 0).astype(np.uint8) * 255)
        return s.TissueMaskResponse(mask=s.GrayPayload.pack(gray))

    @app.post("/nuclei", response_model=s.NucleiResponse)
    def nuclei(req: s.NucleiRequest):
        img = guard(req.image.unpack)
        params = guard(nuc.NucleiParams, min_area=req.min_area, max_area=req.max_area,
                       sigma=req.sigma, peak_min_distance=req.peak_min_distance)
        labels, table = guard(nuc.detect_nuclei, img, params)
        return s.NucleiResponse(labels=s.LabelMapModel.pack(labels),
                                entities_csv=entity_table_to_csv(table))

    @app.post("/superpixel", response_model=s.SuperpixelResponse)
    def superpixel(req: s.SuperpixelRequest):
        img = guard(req.image.unpack)
        params = guard(sp.SlicParams, num_superpixels=req.num_superpixels,
                       compactness=req.compactness, iterations=req.iterations,
                       min_size_fraction=req.min_size_fraction)
        labels = guard(sp.slic, img, params)
        if req.merge_threshold is not None and req.merge_threshold > 0:
            merge = guard(sp.MergeParams, color_threshold=req.merge_threshold,
                          target_min_regions=req.target_min_regions)
            labels = guard(sp.merge_superpixels, img, labels, merge)
        return s.SuperpixelResponse(labels=s.LabelMapModel.pack(labels))

    @app.post("/features", response_model=s.FeaturesResponse)
    def features(req: s.FeaturesRequest):
        img = guard(req.image.unpack)
        labels = guard(req.labels.unpack)
        table = guard(entity_table_from_labels, labels)
        fm = guard(feat.extract_default_features, img, labels, table,
                   groups=req.groups,
                   glcm_params=feat.GlcmParams(levels=req.glcm_levels),
                   crowdedness_k=req.crowdedness_k)
        return s.FeaturesResponse(
            features_csv=feat.feature_csv_text(fm, table.ids))

    @app.post("/build-graph", response_model=s.BuildGraphResponse)
    def build_graph(req: s.BuildGraphRequest):
        ids, fm = guard(feat.feature_csv_from_text, req.features_csv)
        if req.mode == "knn":
            if req.entities_csv is None:
                raise HTTPException(400, "knn mode requires entities_csv")
            table = guard(entity_table_from_csv, req.entities_csv)
            if not np.array_equal(ids, table.ids):
                raise HTTPException(400, "feature ids do not match entity ids")
            params = guard(gr.KnnParams, k=req.k,
                           distance_threshold=req.distance_threshold)
            graph = guard(gr.build_knn_graph, table, fm, params)
        else:
            if req.labels is None:
                raise HTTPException(400, "rag mode requires labels")
            labels = guard(req.labels.unpack)
            if not np.array_equal(ids, np.arange(1, labels.num_labels + 1)):
                raise HTTPException(400, "feature ids do not match region labels")
            graph = guard(gr.build_rag, labels, fm)
        return s.BuildGraphResponse(graph=gr.graph_to_dict(graph))

    @app.post("/train", response_model=s.TrainResponse)
    def train(req: s.TrainRequest):
        if not req.samples:
            raise HTTPException(400, "dataset is empty")
        graphs = [guard(gr.graph_from_dict, sample.graph) for sample in req.samples]
        labels = [sample.label for sample in req.samples]
        num_classes = max(labels) + 1
        tcfg = guard(TrainConfig, **{"seed": req.seed, **req.train_config})
        if req.kind == "gnn":
            overrides = dict(req.gnn_config)
            overrides.setdefault("input_dim", graphs[0].node_features.shape[1])
            overrides.setdefault("num_classes", max(2, num_classes))
            if overrides.get("layer_type") == "pna" and "pna_delta" not in overrides:
                overrides["pna_delta"] = mean_log_degree(graphs)
            model = GnnModel(guard(GnnConfig, **overrides), seed=req.seed)
            trace = guard(train_model, model, list(zip(graphs, labels)), tcfg)
            return s.TrainResponse(checkpoint=checkpoint_to_dict(model), loss_trace=trace)
        # hierarchical: samples carry (cell graph, tissue graph, assignment)
        tissue_graphs, assignments = [], []
        for sample in req.samples:
            if sample.tissue_graph is None or sample.assignment is None:
                raise HTTPException(400, "hact samples need tissue_graph and assignment")
            tissue_graphs.append(guard(gr.graph_from_dict, sample.tissue_graph))
            assignments.append(np.asarray(sample.assignment, dtype=np.int64))
        cell_overrides = dict(req.gnn_config)
        cell_overrides.setdefault("input_dim", graphs[0].node_features.shape[1])
        cell_overrides.setdefault("num_classes", max(2, num_classes))
        if cell_overrides.get("layer_type") == "pna" and "pna_delta" not in cell_overrides:
            cell_overrides["pna_delta"] = mean_log_degree(graphs)
        cell_cfg = guard(GnnConfig, **cell_overrides)
        tissue_overrides = dict(req.tissue_config)
        tissue_overrides.setdefault(
            "input_dim", cell_cfg.hidden_units + tissue_graphs[0].node_features.shape[1])
        tissue_overrides.setdefault("num_classes", max(2, num_classes))
        if tissue_overrides.get("layer_type") == "pna" and "pna_delta" not in tissue_overrides:
            tissue_overrides["pna_delta"] = mean_log_degree(tissue_graphs)
        tissue_cfg = guard(GnnConfig, **tissue_overrides)
        cell_model = GnnModel(cell_cfg, seed=req.seed)
        tissue_model = GnnModel(tissue_cfg, seed=req.seed + 1)
        dataset = list(zip(graphs, tissue_graphs, assignments, labels))
        trace = guard(train_hact, cell_model, tissue_model, dataset, tcfg)
        checkpoint = {"kind": "hact", "cell": checkpoint_to_dict(cell_model),
                      "tissue": checkpoint_to_dict(tissue_model)}
        return s.TrainResponse(checkpoint=checkpoint, loss_trace=trace)

    @app.post("/predict", response_model=s.PredictResponse)
    def predict_endpoint(req: s.PredictRequest):
        graph = guard(gr.graph_from_dict, req.graph)
        if req.checkpoint.get("kind") == "hact":
            if req.tissue_graph is None or req.assignment is None:
                raise HTTPException(400, "hierarchical prediction needs "
                                         "tissue_graph and assignment")
            cell_model, tissue_model = guard(_hact_parts, req.checkpoint)
            tg = guard(gr.graph_from_dict, req.tissue_graph)
            cls, probs = guard(predict_hact, cell_model, tissue_model, graph, tg,
                               np.asarray(req.assignment, dtype=np.int64))
        else:
            model = guard(checkpoint_from_dict, req.checkpoint)
            cls, probs = guard(predict, model, graph)
        return s.PredictResponse(class_index=cls, probabilities=probs.tolist())

    @app.post("/explain", response_model=s.ExplainResponse)
    def explain_endpoint(req: s.ExplainRequest):
        model = guard(checkpoint_from_dict, req.checkpoint)
        graph = guard(gr.graph_from_dict, req.graph)
        kwargs = {}
        if req.method in ("gradcam", "gradcampp"):
            kwargs["layer"] = req.layer
        if req.method == "gnnexplainer":
            kwargs.update(steps=req.steps, lr=req.lr,
                          lambda_sparsity=req.lambda_sparsity,
                          lambda_entropy=req.lambda_entropy, seed=req.seed)
        sal = guard(ex.explain, model, graph, req.method,
                    class_index=req.class_index, **kwargs)
        top = None
        if req.top_k is not None:
            if req.entities_csv is not None:
                table = guard(entity_table_from_csv, req.entities_csv)
            else:
                from histograph.raster import EntityTable
                n = graph.num_nodes
                table = EntityTable(
                    np.arange(1, n + 1), graph.centroids,
                    np.tile([0, 0, 2 ** 30, 2 ** 30], (n, 1)),
                    np.ones(n, dtype=np.int64))
            top = guard(ex.top_k_entities, sal, table, req.top_k)
        overlay = None
        if req.image is not None:
            img = guard(req.image.unpack)
            overlay = s.ImagePayload.pack(
                guard(ex.render_overlay, img, graph.centroids, sal))
        return s.ExplainResponse(saliency=sal.to_dict(), top_entities=top,
                                 overlay=overlay)

    @app.post("/pipeline/run", response_model=s.PipelineRunResponse)
    def pipeline_run(req: s.PipelineRunRequest):
        try:
            cfg = pl.parse_pipeline(req.config)
            result = pl.run_pipeline(cfg, workspace=req.workspace)
        except (pl.PipelineError, pl.PipelineStepError) as exc:
            raise HTTPException(400, str(exc)) from exc
        return s.PipelineRunResponse(outputs=result.outputs,
                                     steps_run=result.steps_run,
                                     steps_cached=result.steps_cached)

    @app.post("/benchmark", response_model=s.BenchmarkResponse)
    def benchmark_endpoint(req: s.BenchmarkRequest):
        report = guard(bench.benchmark, req.sizes, ops=req.ops, reps=req.reps,
                       seed=req.seed)
        rows = [s.BenchRowModel(module=r.module, op=r.op, side=r.side,
                                seconds=r.seconds, repetitions=r.repetitions)
                for r in report.rows]
        return s.BenchmarkResponse(csv=report.csv_text(), rows=rows)

    return app
