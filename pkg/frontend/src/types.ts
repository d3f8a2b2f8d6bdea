/** JSON wire shapes of the toolkit's serialized artifacts. */

export interface EntityGraphJson {
  num_nodes: number;
  edges: [number, number][];
  node_features: number[][];
  centroids: [number, number][];
  feature_names: string[];
}

export interface SaliencyJson {
  scores: number[];
  class: number;
  method: string;
}

export interface PredictionJson {
  class_index: number;
  probabilities: number[];
}

/** Graph view backed by native typed arrays (row-major features). */
export interface BoundGraph {
  numNodes: number;
  numEdges: number;
  /** flattened (u, v) pairs, length 2 * numEdges */
  edges: Uint32Array;
  /** row-major numNodes x featureDim matrix */
  nodeFeatures: Float64Array;
  featureDim: number;
  /** flattened (row, col) pairs, length 2 * numNodes */
  centroids: Float64Array;
  featureNames: string[];
}

export interface GraphResult {
  graph: BoundGraph;
  /** exact bytes of the graph JSON artifact the toolkit produced */
  graphJson: string;
  /** where the artifact files live (inside the working directory) */
  graphPath: string;
  featuresPath: string;
  labelsPath: string;
  /** entity table CSV; produced by the point-entity (cell) pipeline only */
  entitiesPath?: string;
}

export interface Prediction {
  classIndex: number;
  probabilities: Float64Array;
}

export type ExplainMethod = "gradcam" | "gradcampp" | "gnnexplainer" | "lrp";

export interface Explanation {
  scores: Float64Array;
  classIndex: number;
  method: ExplainMethod;
  /** exact bytes of the saliency JSON artifact */
  saliencyJson: string;
  saliencyPath: string;
  topEntities?: number[];
}

export function bindGraph(doc: EntityGraphJson): BoundGraph {
  const featureDim = doc.feature_names.length > 0
    ? doc.feature_names.length
    : (doc.node_features[0]?.length ?? 0);
  const nodeFeatures = new Float64Array(doc.num_nodes * featureDim);
  doc.node_features.forEach((row, i) => nodeFeatures.set(row, i * featureDim));
  const centroids = new Float64Array(doc.num_nodes * 2);
  doc.centroids.forEach((rc, i) => centroids.set(rc, i * 2));
  const edges = new Uint32Array(doc.edges.length * 2);
  doc.edges.forEach(([u, v], i) => {
    edges[2 * i] = u;
    edges[2 * i + 1] = v;
  });
  return {
    numNodes: doc.num_nodes,
    numEdges: doc.edges.length,
    edges,
    nodeFeatures,
    featureDim,
    centroids,
    featureNames: [...doc.feature_names],
  };
}
