"""Command-line interface: a thin client of the HTTP service.

Every subcommand reads local files, posts one request to the service, and
writes the response artifacts locally. Without ``--server`` the requests run
against an in-process instance of the app (no daemon needed); with
``--server http://host:port`` the same payloads go to a remote instance.
"""

from __future__ import annotations

import base64
import json
import os

import click
import httpx

from histograph import __version__
from histograph.pipeline import WORKSPACE_ENV

class ServiceClient:
    def __init__(self, server: str | None):
        if server:
            self._client = httpx.Client(base_url=server, timeout=None)
        else:
            # same request/response path as a remote server, no daemon needed
            import warnings
            with warnings.catch_warnings():
                # this environment's starlette warns about its own test client
                warnings.filterwarnings("ignore", message=".*httpx.*")
                from fastapi.testclient import TestClient
            from histograph.service import create_app
            self._client = TestClient(create_app())

    def post(self, path: str, payload: dict) -> dict:
        response = self._client.post(path, json=payload)
        if response.status_code != 200:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise click.ClickException(f"{path}: {detail}")
        return response.json()

def _b64_file(path: str) -> str:
    with open(path, "rb") as fh:
        return base64.b64encode(fh.read()).decode("ascii")

def _write_b64(b64: str, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(base64.b64decode(b64))

def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)

def _dump_json(doc, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))

@click.group()
@click.version_option(__version__)
@click.option("--server", default=None, envvar="HISTOGRAPH_SERVER",
              help="Base URL of a running service; default runs in-process.")
@click.pass_context
def main(ctx, server):
    """Entity-graph analytics for histopathology images."""
    ctx.obj = ServiceClient(server)

@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--method", type=click.Choice(["macenko", "vahadane"]), default="macenko")
@click.option("--reference", type=click.Path(exists=True), default=None,
              help="Stain profile JSON; omit for the built-in reference.")
@click.pass_obj
def normalize(client, in_path, out_path, method, reference):
    """Stain-normalize a PPM image."""
    payload = {"image": {"ppm_b64": _b64_file(in_path)}, "method": method}
    if reference:
        payload["reference"] = _load_json(reference)
    doc = client.post("/normalize", payload)
    _write_b64(doc["image"]["ppm_b64"], out_path)
    click.echo(f"wrote {out_path}")

@main.command("estimate-profile")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--method", type=click.Choice(["macenko", "vahadane"]), default="macenko")
@click.pass_obj
def estimate_profile(client, in_path, out_path, method):
    """Estimate an image's stain profile (matrix + robust max concentrations)."""
    doc = client.post("/estimate-profile",
                      {"image": {"ppm_b64": _b64_file(in_path)}, "method": method})
    _dump_json(doc, out_path)
    click.echo(f"wrote {out_path}")

@main.command("tissue-mask")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--sigma", default=1.0, show_default=True)
@click.option("--stop-threshold", default=10.0, show_default=True)
@click.pass_obj
def tissue_mask(client, in_path, out_path, sigma, stop_threshold):
    """Detect tissue; writes a 0/255 PGM mask."""
    doc = client.post("/tissue-mask", {"image": {"ppm_b64": _b64_file(in_path)},
                                       "sigma": sigma,
                                       "stop_threshold": stop_threshold})
    _write_b64(doc["mask"]["pgm_b64"], out_path)
    click.echo(f"wrote {out_path}")

@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Label map JSON output.")
@click.option("--entities", "entities_path", required=True, type=click.Path(),
              help="Entity table CSV output.")
@click.option("--min-area", default=20, show_default=True)
@click.option("--max-area", default=5000, show_default=True)
@click.option("--sigma", default=2.0, show_default=True)
@click.option("--peak-min-distance", default=5, show_default=True)
@click.pass_obj
def nuclei(client, in_path, out_path, entities_path, min_area, max_area, sigma,
           peak_min_distance):
    """Detect nuclei instances."""
    doc = client.post("/nuclei", {
        "image": {"ppm_b64": _b64_file(in_path)}, "min_area": min_area,
        "max_area": max_area, "sigma": sigma,
        "peak_min_distance": peak_min_distance})
    _dump_json(doc["labels"], out_path)
    with open(entities_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(doc["entities_csv"])
    click.echo(f"wrote {out_path} and {entities_path}")

@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--k", default=400, show_default=True, help="Superpixel count.")
@click.option("--compactness", default=10.0, show_default=True)
@click.option("--merge-threshold", default=None, type=float,
              help="Merge adjacent regions closer than this CIELAB distance.")
@click.pass_obj
def superpixel(client, in_path, out_path, k, compactness, merge_threshold):
    """Oversegment (and optionally merge) tissue regions; writes label JSON."""
    doc = client.post("/superpixel", {
        "image": {"ppm_b64": _b64_file(in_path)}, "num_superpixels": k,
        "compactness": compactness, "merge_threshold": merge_threshold})
    _dump_json(doc["labels"], out_path)
    click.echo(f"wrote {out_path}")

@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--groups", default=None,
              help="Comma-separated subset of morphology,glcm,crowdedness.")
@click.option("--glcm-levels", default=32, show_default=True)
@click.option("--crowdedness-k", default=5, show_default=True)
@click.pass_obj
def features(client, in_path, labels_path, out_path, groups, glcm_levels,
             crowdedness_k):
    """Extract per-entity features; writes a feature CSV."""
    doc = client.post("/features", {
        "image": {"ppm_b64": _b64_file(in_path)},
        "labels": _load_json(labels_path),
        "groups": groups.split(",") if groups else None,
        "glcm_levels": glcm_levels, "crowdedness_k": crowdedness_k})
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(doc["features_csv"])
    click.echo(f"wrote {out_path}")

@main.command("build-graph")
@click.option("--mode", type=click.Choice(["knn", "rag"]), required=True)
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--entities", "entities_path", type=click.Path(exists=True),
              help="Entity CSV (knn mode).")
@click.option("--labels", "labels_path", type=click.Path(exists=True),
              help="Label map JSON (rag mode).")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--k", default=5, show_default=True)
@click.option("--threshold", default=50.0, show_default=True,
              help="Distance threshold in pixels; 0 disables pruning.")
@click.pass_obj
def build_graph(client, mode, features_path, entities_path, labels_path, out_path,
                k, threshold):
    """Build a kNN or region-adjacency entity graph; writes graph JSON."""
    payload = {"mode": mode, "k": k,
               "distance_threshold": threshold if threshold > 0 else None}
    with open(features_path, "r", encoding="utf-8") as fh:
        payload["features_csv"] = fh.read()
    if mode == "knn":
        if not entities_path:
            raise click.ClickException("knn mode needs --entities")
        with open(entities_path, "r", encoding="utf-8") as fh:
            payload["entities_csv"] = fh.read()
    else:
        if not labels_path:
            raise click.ClickException("rag mode needs --labels")
        payload["labels"] = _load_json(labels_path)
    doc = client.post("/build-graph", payload)
    _dump_json(doc["graph"], out_path)
    click.echo(f"wrote {out_path}")

def _load_train_samples(labels_csv: str, kind: str) -> list[dict]:
    import csv as _csv
    samples = []
    base = os.path.dirname(os.path.abspath(labels_csv))
    with open(labels_csv, "r", newline="", encoding="utf-8") as fh:
        rows = list(_csv.reader(fh))
    if not rows or rows[0] != ["graph_path", "label"]:
        raise click.ClickException(
            f"{labels_csv}: expected header 'graph_path,label'")
    for path, label in rows[1:]:
        full = path if os.path.isabs(path) else os.path.join(base, path)
        doc = _load_json(full)
        if kind == "hact":
            for key in ("cell_graph", "tissue_graph", "assignment"):
                if key not in doc:
                    raise click.ClickException(f"{full}: hact sample missing {key!r}")
            samples.append({"graph": doc["cell_graph"],
                            "tissue_graph": doc["tissue_graph"],
                            "assignment": doc["assignment"], "label": int(label)})
        else:
            samples.append({"graph": doc, "label": int(label)})
    return samples

@main.command()
@click.option("--labels-csv", required=True, type=click.Path(exists=True),
              help="CSV with header graph_path,label; paths relative to the CSV.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--kind", type=click.Choice(["gnn", "hact"]), default="gnn")
@click.option("--layer-type", type=click.Choice(["gin", "pna"]), default="gin")
@click.option("--num-layers", default=3, show_default=True)
@click.option("--hidden-units", default=32, show_default=True)
@click.option("--readout", type=click.Choice(["mean", "sum"]), default="mean")
@click.option("--epochs", default=100, show_default=True)
@click.option("--lr", default=0.01, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--trace-out", type=click.Path(), default=None,
              help="Optional JSON file for the per-epoch loss trace.")
@click.pass_obj
def train(client, labels_csv, out_path, kind, layer_type, num_layers, hidden_units,
          readout, epochs, lr, batch_size, seed, trace_out):
    """Train a graph classifier; writes a model checkpoint JSON."""
    samples = _load_train_samples(labels_csv, kind)
    doc = client.post("/train", {
        "kind": kind, "samples": samples,
        "gnn_config": {"layer_type": layer_type, "num_layers": num_layers,
                       "hidden_units": hidden_units, "readout": readout},
        "train_config": {"learning_rate": lr, "epochs": epochs,
                         "batch_size": batch_size, "seed": seed},
        "seed": seed})
    _dump_json(doc["checkpoint"], out_path)
    if trace_out:
        _dump_json(doc["loss_trace"], trace_out)
    click.echo(f"wrote {out_path} (final loss {doc['loss_trace'][-1]:.4f})")

@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--tissue-graph", "tissue_path", type=click.Path(exists=True))
@click.option("--assignment", "assignment_path", type=click.Path(exists=True),
              help="JSON array mapping each cell to a tissue node index.")
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.pass_obj
def predict(client, model_path, graph_path, tissue_path, assignment_path, out_path):
    """Classify a graph; prints (and optionally writes) the prediction JSON."""
    payload = {"checkpoint": _load_json(model_path), "graph": _load_json(graph_path)}
    if tissue_path:
        payload["tissue_graph"] = _load_json(tissue_path)
    if assignment_path:
        payload["assignment"] = _load_json(assignment_path)
    doc = client.post("/predict", payload)
    text = json.dumps(doc, separators=(",", ":"))
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    click.echo(text)

@main.command()
@click.option("--method", required=True,
              type=click.Choice(["gradcam", "gradcampp", "gnnexplainer", "lrp"]))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--class", "class_index", type=int, default=None,
              help="Class to explain; default is the predicted class.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--layer", default="last", show_default=True,
              help="Layer whose activations the gradient maps read.")
@click.option("--steps", default=100, show_default=True)
@click.option("--lr", default=0.01, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--top-k", type=int, default=None,
              help="Also report the k most important entity ids.")
@click.option("--entities", "entities_path", type=click.Path(exists=True),
              help="Entity CSV giving ids for --top-k.")
@click.option("--overlay", "overlay_path", type=click.Path(), default=None,
              help="Render node saliency onto --image and write a PPM here.")
@click.option("--image", "image_path", type=click.Path(exists=True), default=None)
@click.pass_obj
def explain(client, method, model_path, graph_path, class_index, out_path, layer,
            steps, lr, seed, top_k, entities_path, overlay_path, image_path):
    """Attribute a prediction to nodes; writes saliency JSON."""
    payload = {"checkpoint": _load_json(model_path), "graph": _load_json(graph_path),
               "method": method, "class_index": class_index, "steps": steps,
               "lr": lr, "seed": seed, "top_k": top_k,
               "layer": layer if layer == "last" else int(layer)}
    if entities_path:
        with open(entities_path, "r", encoding="utf-8") as fh:
            payload["entities_csv"] = fh.read()
    if overlay_path:
        if not image_path:
            raise click.ClickException("--overlay needs --image")
        payload["image"] = {"ppm_b64": _b64_file(image_path)}
    doc = client.post("/explain", payload)
    _dump_json(doc["saliency"], out_path)
    if doc.get("top_entities") is not None:
        click.echo("top entities: " + ",".join(map(str, doc["top_entities"])))
    if overlay_path and doc.get("overlay"):
        _write_b64(doc["overlay"]["ppm_b64"], overlay_path)
        click.echo(f"wrote {overlay_path}")
    click.echo(f"wrote {out_path}")

@main.group()
def pipeline():
    """Pipeline operations."""

@pipeline.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--workspace", default=None,
              help=f"Artifact directory; ${WORKSPACE_ENV} overrides the config value.")
@click.pass_obj
def pipeline_run(client, config_path, workspace):
    """Run a pipeline JSON document."""
    doc = client.post("/pipeline/run", {"config": _load_json(config_path),
                                        "workspace": workspace})
    click.echo(f"ran {len(doc['steps_run'])} step(s), "
               f"{len(doc['steps_cached'])} cached")
    for key, path in doc["outputs"].items():
        click.echo(f"  {key}: {path}")

@main.command()
@click.option("--sizes", required=True, help="Comma-separated side lengths.")
@click.option("--ops", default=None, help="Comma-separated benchmark op names.")
@click.option("--reps", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def benchmark(client, sizes, ops, reps, seed, out_path):
    """Time core ops on synthetic images; writes a CSV report."""
    doc = client.post("/benchmark", {
        "sizes": [int(s) for s in sizes.split(",")],
        "ops": ops.split(",") if ops else None, "reps": reps, "seed": seed})
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(doc["csv"])
    click.echo(f"wrote {out_path}")

@main.command("synth-image")
@click.option("--side", default=96, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def synth_image(client, side, seed, out_path):
    """Generate a seeded synthetic tissue image (PPM)."""
    doc = client.post("/synth-image", {"side": side, "seed": seed})
    _write_b64(doc["ppm_b64"], out_path)
    click.echo(f"wrote {out_path}")

@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn
    from histograph.service import create_app
    uvicorn.run(create_app(), host=host, port=port)

if __name__ == "__main__":
    main()
