/** Node bindings for the histograph toolkit.
 *
 * Each function drives the toolkit through its command-line interface and
 * file formats, then parses the artifacts into typed arrays. Outputs are
 * byte-identical to running the equivalent CLI chain by hand. Pass
 * `workdir` to keep the intermediate artifacts; otherwise they live in a
 * temporary directory that is removed when the call returns (the in-memory
 * results remain valid).
 */

import { readFile, writeFile } from "node:fs/promises";
import { join } from "node:path";

import { CliOptions, runCli, withWorkdir } from "./cli.js";
import {
  BoundGraph,
  EntityGraphJson,
  Explanation,
  ExplainMethod,
  GraphResult,
  Prediction,
  PredictionJson,
  SaliencyJson,
  bindGraph,
} from "./types.js";

export { HistographCliError, resolveCli } from "./cli.js";
export type {
  BoundGraph,
  EntityGraphJson,
  Explanation,
  ExplainMethod,
  GraphResult,
  Prediction,
  SaliencyJson,
} from "./types.js";
export { bindGraph } from "./types.js";

export interface CellGraphParams extends CliOptions {
  /** nearest-neighbor count for the topology (default 5) */
  k?: number;
  /** prune edges longer than this many pixels (default 50) */
  distanceThreshold?: number;
  minArea?: number;
  maxArea?: number;
  sigma?: number;
  peakMinDistance?: number;
  /** keep artifacts here instead of a throwaway temp directory */
  workdir?: string;
}

export interface TissueGraphParams extends CliOptions {
  numSuperpixels?: number;
  compactness?: number;
  /** CIELAB merge threshold; regions closer than this fuse (default 8) */
  mergeThreshold?: number;
  workdir?: string;
}

async function imageToFile(
  image: string | Uint8Array,
  dir: string,
): Promise<string> {
  if (typeof image === "string") {
    return image;
  }
  const path = join(dir, "input.ppm");
  await writeFile(path, image);
  return path;
}

async function loadGraphResult(paths: {
  graphPath: string;
  featuresPath: string;
  labelsPath: string;
  entitiesPath?: string;
}): Promise<GraphResult> {
  const graphJson = await readFile(paths.graphPath, "utf-8");
  const doc = JSON.parse(graphJson) as EntityGraphJson;
  return { graph: bindGraph(doc), graphJson, ...paths };
}

/** Nuclei detection -> per-entity features -> thresholded kNN topology. */
export async function buildCellGraph(
  image: string | Uint8Array,
  params: CellGraphParams = {},
): Promise<GraphResult> {
  return withWorkdir(params.workdir, async (dir) => {
    const imagePath = await imageToFile(image, dir);
    const labelsPath = join(dir, "nuclei_labels.json");
    const entitiesPath = join(dir, "nuclei_entities.csv");
    const featuresPath = join(dir, "nuclei_features.csv");
    const graphPath = join(dir, "cell_graph.json");
    const nucleiArgs = ["nuclei", "--in", imagePath, "--out", labelsPath,
      "--entities", entitiesPath];
    if (params.minArea !== undefined) nucleiArgs.push("--min-area", String(params.minArea));
    if (params.maxArea !== undefined) nucleiArgs.push("--max-area", String(params.maxArea));
    if (params.sigma !== undefined) nucleiArgs.push("--sigma", String(params.sigma));
    if (params.peakMinDistance !== undefined) {
      nucleiArgs.push("--peak-min-distance", String(params.peakMinDistance));
    }
    await runCli(nucleiArgs, params);
    await runCli(["features", "--in", imagePath, "--labels", labelsPath,
      "--out", featuresPath], params);
    await runCli(["build-graph", "--mode", "knn", "--features", featuresPath,
      "--entities", entitiesPath, "--out", graphPath,
      "--k", String(params.k ?? 5),
      "--threshold", String(params.distanceThreshold ?? 50)], params);
    return loadGraphResult({ graphPath, entitiesPath, featuresPath, labelsPath });
  });
}

/** Superpixel regions -> per-region features -> region-adjacency topology. */
export async function buildTissueGraph(
  image: string | Uint8Array,
  params: TissueGraphParams = {},
): Promise<GraphResult> {
  return withWorkdir(params.workdir, async (dir) => {
    const imagePath = await imageToFile(image, dir);
    const labelsPath = join(dir, "region_labels.json");
    const featuresPath = join(dir, "region_features.csv");
    const graphPath = join(dir, "tissue_graph.json");
    await runCli(["superpixel", "--in", imagePath, "--out", labelsPath,
      "--k", String(params.numSuperpixels ?? 400),
      "--compactness", String(params.compactness ?? 10),
      "--merge-threshold", String(params.mergeThreshold ?? 8)], params);
    await runCli(["features", "--in", imagePath, "--labels", labelsPath,
      "--out", featuresPath, "--groups", "morphology,glcm"], params);
    await runCli(["build-graph", "--mode", "rag", "--features", featuresPath,
      "--labels", labelsPath, "--out", graphPath], params);
    return loadGraphResult({ graphPath, featuresPath, labelsPath });
  });
}

/** Classify a serialized graph with a trained checkpoint. */
export async function predict(
  modelPath: string,
  graph: string | EntityGraphJson,
  options: CliOptions & { workdir?: string } = {},
): Promise<Prediction> {
  return withWorkdir(options.workdir, async (dir) => {
    const graphPath = typeof graph === "string" ? graph : join(dir, "graph.json");
    if (typeof graph !== "string") {
      await writeFile(graphPath, JSON.stringify(graph));
    }
    const outPath = join(dir, "prediction.json");
    await runCli(["predict", "--model", modelPath, "--graph", graphPath,
      "--out", outPath], options);
    const doc = JSON.parse(await readFile(outPath, "utf-8")) as PredictionJson;
    return {
      classIndex: doc.class_index,
      probabilities: Float64Array.from(doc.probabilities),
    };
  });
}

export interface ExplainParams extends CliOptions {
  classIndex?: number;
  /** also rank the k most important entities (needs entitiesPath for real ids) */
  topK?: number;
  entitiesPath?: string;
  steps?: number;
  lr?: number;
  seed?: number;
  workdir?: string;
}

/** Node-level attribution for a prediction; scores come back as a typed array. */
export async function explain(
  modelPath: string,
  graph: string | EntityGraphJson,
  method: ExplainMethod,
  params: ExplainParams = {},
): Promise<Explanation> {
  return withWorkdir(params.workdir, async (dir) => {
    const graphPath = typeof graph === "string" ? graph : join(dir, "graph.json");
    if (typeof graph !== "string") {
      await writeFile(graphPath, JSON.stringify(graph));
    }
    const saliencyPath = join(dir, "saliency.json");
    const args = ["explain", "--method", method, "--model", modelPath,
      "--graph", graphPath, "--out", saliencyPath];
    if (params.classIndex !== undefined) args.push("--class", String(params.classIndex));
    if (params.topK !== undefined) args.push("--top-k", String(params.topK));
    if (params.entitiesPath !== undefined) args.push("--entities", params.entitiesPath);
    if (params.steps !== undefined) args.push("--steps", String(params.steps));
    if (params.lr !== undefined) args.push("--lr", String(params.lr));
    if (params.seed !== undefined) args.push("--seed", String(params.seed));
    const stdout = await runCli(args, params);
    const saliencyJson = await readFile(saliencyPath, "utf-8");
    const doc = JSON.parse(saliencyJson) as SaliencyJson;
    const topLine = stdout.split("\n").find((l) => l.startsWith("top entities:"));
    return {
      scores: Float64Array.from(doc.scores),
      classIndex: doc.class,
      method,
      saliencyJson,
      saliencyPath,
      topEntities: topLine
        ? topLine.slice("top entities:".length).trim().split(",").map(Number)
        : undefined,
    };
  });
}
