"""Acceptance suite: one test per release criterion, at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to get one PASS line per
criterion. Tolerances are pinned here, not configurable.
"""

import importlib.resources as resources
import json
import time

import numpy as np
import pytest

from histograph import stain
from histograph.bench import benchmark, scaling_exponent
from histograph.explain import gnn_explainer, graph_gradcam, graph_gradcam_pp, graph_lrp
from histograph.features import GlcmParams, glcm_features
from histograph.gnn import GnnConfig, GnnModel, TrainConfig, predict, train_model
from histograph.gnn.layers import GraphTopology
from histograph.graphs import KnnParams, build_knn_graph, build_rag
from histograph.nuclei import detect_nuclei
from histograph.raster import (
    Image, LabelMap, entity_table_from_labels, otsu_threshold, write_ppm,
)
from histograph.pipeline import parse_pipeline, run_pipeline
from histograph.superpixel import MergeParams, SlicParams, merge_superpixels, slic
from histograph.synth import synth_tissue_image

from oracles import (
    glcm_features_oracle, knn_edges_oracle, otsu_oracle, rag_edges_oracle,
)
from gnn_utils import (
    GRADCHECK_SEEDS, gin_oracle, gradcheck_instance,
    max_feature_gradcheck_error, max_param_gradcheck_error, permute_graph,
    pna_oracle, random_graph, ring_clique_dataset,
)
from test_explain import planted_dataset
from test_features import single_entity
from test_graphs import table_from_centroids, unit_features
from test_stain import TRUE_STAINS, synth_two_stain_image
from test_superpixel import assert_partition_invariants, two_half_image
from test_tissue_nuclei import disks_image


def report(name: str):
    print(f"\nACCEPTANCE PASS: {name}")


# ---------------------------------------------------------------------------
# Criterion 1: oracle equivalence suite
# ---------------------------------------------------------------------------

def test_oracle_equivalence_suite():
    # Otsu vs exhaustive scan, 1000 seeded histograms, exact
    rng = np.random.default_rng(101)
    for _ in range(1000):
        hist = rng.integers(0, 100, size=256).astype(np.int64)
        if hist.sum() == 0:
            hist[int(rng.integers(0, 256))] = 1
        assert otsu_threshold(hist) == otsu_oracle(hist)

    # thresholded kNN vs O(N^2), 100 seeds, exact edge sets
    for seed in range(100):
        rng = np.random.default_rng(200 + seed)
        n = int(rng.integers(5, 120)) if seed % 10 else 300  # some grid-index runs
        cents = rng.uniform(0, 300, size=(n, 2))
        k = int(rng.integers(1, 7))
        threshold = None if seed % 3 == 0 else float(rng.uniform(20, 120))
        g = build_knn_graph(table_from_centroids(cents), unit_features(n),
                            KnnParams(k=k, distance_threshold=threshold))
        assert set(map(tuple, g.edges.tolist())) == knn_edges_oracle(cents, k, threshold)

    # RAG vs exhaustive pixel scan, 20 fixtures, exact
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        seeds = rng.uniform(0, 64, size=(int(rng.integers(4, 14)), 2))
        rr, cc = np.mgrid[0:64, 0:64]
        d = (rr[None] - seeds[:, 0, None, None]) ** 2 \
            + (cc[None] - seeds[:, 1, None, None]) ** 2
        labels = LabelMap((np.argmin(d, axis=0) + 1).astype(np.int32))
        g = build_rag(labels, unit_features(labels.num_labels))
        expected = {(a - 1, b - 1) for a, b in rag_edges_oracle(labels.labels)}
        assert set(map(tuple, g.edges.tolist())) == expected

    # co-occurrence features vs brute-force pair enumeration, 50 entities
    for seed in range(50):
        rng = np.random.default_rng(400 + seed)
        arr = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
        mask = rng.random((12, 12)) < 0.65
        mask[6, 6] = True
        labels, table = single_entity(mask.astype(np.int32))
        params = GlcmParams(levels=6)
        fm = glcm_features(Image(arr), labels, table, params)
        from histograph.raster import to_gray
        gray = to_gray(Image(arr)).pixels
        expected = glcm_features_oracle(gray, mask, 6, params.offsets, True)
        for j, name in enumerate(fm.names):
            assert fm.values[0, j] == pytest.approx(expected[name], abs=1e-10)

    # GIN / PNA layer forward vs dense oracle, 10 seeds each, < 1e-10
    from gnn_utils import small_model
    for layer_type, oracle in (("gin", gin_oracle), ("pna", pna_oracle)):
        for seed in range(10):
            rng = np.random.default_rng(500 + seed)
            g = random_graph(rng, n=9, d=3)
            model = small_model(layer_type, seed)
            h, _ = model.layers[0].forward(g.node_features, GraphTopology(g))
            assert np.max(np.abs(h - oracle(model.layers[0], g, g.node_features))) < 1e-10

    report("oracle equivalence (otsu x1000, knn x100, rag x20, glcm x50, "
           "gin/pna x10)")


# ---------------------------------------------------------------------------
# Criterion 2: gradient checks
# ---------------------------------------------------------------------------

def test_gradient_checks_both_layer_types():
    start = time.perf_counter()
    for layer_type in ("gin", "pna"):
        for seed in GRADCHECK_SEEDS:
            model, g = gradcheck_instance(layer_type, seed)
            assert max_param_gradcheck_error(model, g, label=1) < 1e-4
            assert max_feature_gradcheck_error(model, g, label=1) < 1e-4
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s"
    report(f"gradient checks (rel err < 1e-4, both layer types, 5 seeds, "
           f"{elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# Criterion 3: stain vector recovery
# ---------------------------------------------------------------------------

def test_stain_recovery_ten_seeds():
    from oracles import angular_error_deg
    for seed in range(10):
        img = synth_two_stain_image(seed)
        est = stain.estimate_stains_macenko(img)
        assert angular_error_deg(est[:, 0], TRUE_STAINS[:, 0]) < 5.0
        assert angular_error_deg(est[:, 1], TRUE_STAINS[:, 1]) < 5.0
    for seed in range(10):
        img = synth_two_stain_image(seed, sparse=True)
        est, trace = stain.estimate_stains_vahadane(img, return_trace=True)
        assert angular_error_deg(est[:, 0], TRUE_STAINS[:, 0]) < 5.0
        assert angular_error_deg(est[:, 1], TRUE_STAINS[:, 1]) < 5.0
        for before, after in zip(trace, trace[1:]):
            assert after <= before + 1e-6
    report("stain recovery < 5 deg on 10 seeds (both estimators); "
           "factorization objective monotone")


# ---------------------------------------------------------------------------
# Criterion 4: normalization idempotence
# ---------------------------------------------------------------------------

def test_normalization_idempotence():
    img = synth_tissue_image(128, seed=11)
    profile = stain.estimate_profile(img, "macenko")
    out = stain.normalize(img, "macenko", reference=profile)
    mae = float(np.mean(np.abs(out.pixels.astype(float) - img.pixels.astype(float))))
    assert mae < 5.0
    report(f"normalization idempotence (MAE {mae:.2f} < 5 gray levels)")


# ---------------------------------------------------------------------------
# Criterion 5: superpixel partition invariants
# ---------------------------------------------------------------------------

def test_superpixel_partition_and_merge():
    fixtures = [
        (Image(np.full((64, 64, 3), 120, dtype=np.uint8)), 4),
        (two_half_image(), 2),
        (two_half_image(), 16),
        (synth_tissue_image(96, seed=3), 25),
    ]
    for img, k in fixtures:
        labels = slic(img, SlicParams(num_superpixels=k))
        assert_partition_invariants(labels, k)
    img = two_half_image()
    over = slic(img, SlicParams(num_superpixels=16))
    merged = merge_superpixels(img, over, MergeParams(color_threshold=10.0))
    assert merged.num_labels == 2
    report("superpixel partition invariants on all fixtures; "
           "two-half fixture merges to 2 regions")


# ---------------------------------------------------------------------------
# Criterion 6: nuclei fixtures
# ---------------------------------------------------------------------------

def test_nuclei_fixture_precision_recall():
    centers = [(r, c) for r in (25, 75, 125) for c in (25, 75, 125)] + [(25, 140)]
    img = disks_image(centers, radius=8)
    _, table = detect_nuclei(img, stains=TRUE_STAINS)
    assert len(table) == 10  # precision = recall = 1.0
    used = set()
    for cent in table.centroids:
        dists = [np.hypot(cent[0] - r, cent[1] - c) for r, c in centers]
        j = int(np.argmin(dists))
        assert dists[j] <= 2.0 and j not in used
        used.add(j)

    overlap = disks_image([(60, 60), (60, 74)], radius=8, side=120)
    _, table2 = detect_nuclei(overlap, stains=TRUE_STAINS)
    assert len(table2) == 2
    report("nuclei fixtures: 10 disks at precision=recall=1.0 (<= 2 px), "
           "overlap pair splits into 2")


# ---------------------------------------------------------------------------
# Criterion 7: training sanity
# ---------------------------------------------------------------------------

def test_training_sanity_separable_dataset():
    start = time.perf_counter()
    rng = np.random.default_rng(71)
    data = ring_clique_dataset(rng, per_class=30)  # 60 graphs
    assert len(data) == 60
    cfg = TrainConfig(learning_rate=0.01, epochs=200, batch_size=8, seed=5)

    model_a = GnnModel(GnnConfig(input_dim=1, num_layers=3, hidden_units=32,
                                 num_classes=2), seed=5)
    trace_a = train_model(model_a, data, cfg)
    accuracy = float(np.mean([predict(model_a, g)[0] == y for g, y in data]))
    assert accuracy == 1.0

    model_b = GnnModel(GnnConfig(input_dim=1, num_layers=3, hidden_units=32,
                                 num_classes=2), seed=5)
    trace_b = train_model(model_b, data, cfg)
    assert trace_a == trace_b
    for (na, pa), (nb, pb) in zip(model_a.params(), model_b.params()):
        assert na == nb and np.array_equal(pa, pb)

    elapsed = time.perf_counter() - start
    assert elapsed < 120.0, f"training sanity took {elapsed:.1f}s"
    report(f"training sanity: 100% train accuracy on 60 separable graphs "
           f"within 200 epochs, deterministic per seed ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# Criterion 8: explainers
# ---------------------------------------------------------------------------

def test_explainer_criteria():
    from gnn_utils import small_model
    # relevance conservation, 10 seeded random models/graphs
    for seed in range(10):
        rng = np.random.default_rng(800 + seed)
        g = random_graph(rng, n=8, d=3)
        model = small_model("gin", seed)
        logits = model.forward(g)
        c = int(np.argmax(logits))
        sal = graph_lrp(model, g, class_index=c)
        y_c = float(logits[c])
        assert abs(float(sal.scores.sum()) - y_c) <= 1e-3 * max(abs(y_c), 1.0)

    # planted-signal ranking for the mask optimizer and relevance propagation
    hits = {"gnnexplainer": 0, "lrp": 0}
    for seed in range(10):
        data = planted_dataset(seed)
        model = GnnModel(GnnConfig(input_dim=4, num_layers=2, hidden_units=8,
                                   num_classes=2), seed=seed)
        train_model(model, [(g, y) for g, y, _ in data], TrainConfig(epochs=60, seed=seed))
        for method in hits:
            marked_scores, unmarked_scores = [], []
            for g, _, marked in data[:5]:
                cls, _ = predict(model, g)
                if method == "lrp":
                    scores = np.abs(graph_lrp(model, g, class_index=cls).scores)
                else:
                    scores = gnn_explainer(model, g, class_index=cls, steps=200,
                                           lr=0.05, lambda_sparsity=0.1,
                                           seed=seed).scores
                sel = np.zeros(g.num_nodes, dtype=bool)
                sel[marked] = True
                marked_scores.append(scores[sel].mean())
                unmarked_scores.append(scores[~sel].mean())
            if np.mean(marked_scores) > np.mean(unmarked_scores):
                hits[method] += 1
    assert hits["gnnexplainer"] >= 9, hits
    assert hits["lrp"] >= 9, hits

    # CAM maps: non-negative, bounded, permutation-equivariant
    rng = np.random.default_rng(888)
    g = random_graph(rng, n=10, d=3)
    model = small_model("gin", 7)
    perm = rng.permutation(10)
    for fn in (graph_gradcam, graph_gradcam_pp):
        sal = fn(model, g, class_index=0)
        assert np.all(sal.scores >= 0.0) and np.all(sal.scores <= 1.0)
        sal_p = fn(model, permute_graph(g, perm), class_index=0)
        assert np.allclose(sal_p.scores[perm], sal.scores, atol=1e-9)

    report(f"explainers: relevance conservation (10 seeds), planted-signal "
           f"ranking {hits['gnnexplainer']}/10 and {hits['lrp']}/10, "
           f"CAM maps non-negative and permutation-equivariant")


# ---------------------------------------------------------------------------
# Criterion 9: benchmark trend reproduction
# ---------------------------------------------------------------------------

def test_benchmark_trends():
    start = time.perf_counter()
    ratio_report = benchmark([1000], ops=["vahadane_normalize", "macenko_normalize"],
                             reps=1, seed=0)
    vahadane = ratio_report.seconds_of("stain", "vahadane_normalize", 1000)
    macenko = ratio_report.seconds_of("stain", "macenko_normalize", 1000)
    ratio = vahadane / macenko
    assert ratio >= 1.5, f"vahadane/macenko ratio {ratio:.2f}"

    scaling_report = benchmark([512, 1024, 2048], ops=["macenko_normalize"],
                               reps=5, seed=0)
    exponent = scaling_exponent(scaling_report, "stain", "macenko_normalize",
                                [512, 1024, 2048])
    assert 0.7 <= exponent <= 1.3, f"scaling exponent {exponent:.3f}"

    elapsed = time.perf_counter() - start
    assert elapsed < 600.0, f"benchmark harness took {elapsed:.0f}s"
    report(f"benchmark trends: slow/fast normalizer ratio {ratio:.1f} >= 1.5, "
           f"scaling exponent {exponent:.2f} in [0.7, 1.3], harness {elapsed:.0f}s "
           f"< 10 min")


# ---------------------------------------------------------------------------
# Criterion 10: pipeline composition and caching
# ---------------------------------------------------------------------------

def test_pipeline_composition_and_cache(tmp_path):
    from histograph import features as feat
    from histograph import graphs as gr
    from histograph import nuclei as nuc

    img = synth_tissue_image(96, seed=7)
    src = tmp_path / "demo.ppm"
    write_ppm(img, str(src))
    ref = resources.files("histograph") / "assets" / "demo_pipeline.json"
    doc = json.loads(ref.read_text())
    doc["sources"]["raw"] = str(src)
    ws = str(tmp_path / "ws")

    first = run_pipeline(parse_pipeline(doc), workspace=ws)
    assert len(first.steps_run) == 5 and not first.steps_cached

    # bit-identical to the manual op sequence
    normalized = stain.normalize(img, "macenko")
    labels, table = nuc.detect_nuclei(normalized, nuc.NucleiParams())
    fm = feat.extract_default_features(normalized, labels, table)
    graph = gr.build_knn_graph(table, fm, gr.KnnParams(k=5, distance_threshold=50.0))
    manual = tmp_path / "manual.json"
    gr.serialize_graph(graph, str(manual))
    with open(first.outputs["cell_graph"], "rb") as fh:
        assert fh.read() == manual.read_bytes()

    second = run_pipeline(parse_pipeline(doc), workspace=ws)
    assert second.steps_run == [] and len(second.steps_cached) == 5

    doc2 = json.loads(json.dumps(doc))
    doc2["steps"][2]["params"]["min_area"] = 60
    third = run_pipeline(parse_pipeline(doc2), workspace=ws)
    assert third.steps_cached == ["normalize", "tissue"]
    assert third.steps_run == ["nuclei", "features", "cell-graph"]

    report("pipeline: bit-identical to manual sequence, cache hit reruns 0 "
           "steps, param change invalidates exactly downstream")
