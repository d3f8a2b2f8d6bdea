"""Pydantic request/response models for the HTTP service.

Rasters travel as base64-encoded canonical PPM/PGM bytes; label maps,
graphs, profiles, checkpoints, and saliency reuse the toolkit's JSON
schemas as plain objects; tabular artifacts travel as CSV text.
"""

from __future__ import annotations

import base64
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, Field

from histograph.raster import (
    GrayImage, Image, LabelMap, decode_pgm, decode_ppm, encode_pgm, encode_ppm,
)


class ImagePayload(BaseModel):
    ppm_b64: str

    @classmethod
    def pack(cls, img: Image) -> "ImagePayload":
        return cls(ppm_b64=base64.b64encode(encode_ppm(img)).decode("ascii"))

    def unpack(self) -> Image:
        return decode_ppm(base64.b64decode(self.ppm_b64))


class GrayPayload(BaseModel):
    pgm_b64: str

    @classmethod
    def pack(cls, img: GrayImage) -> "GrayPayload":
        return cls(pgm_b64=base64.b64encode(encode_pgm(img)).decode("ascii"))

    def unpack(self) -> GrayImage:
        return decode_pgm(base64.b64decode(self.pgm_b64))


class LabelMapModel(BaseModel):
    height: int
    width: int
    labels: list[int]

    @classmethod
    def pack(cls, labels: LabelMap) -> "LabelMapModel":
        return cls(height=labels.height, width=labels.width,
                   labels=labels.labels.ravel().tolist())

    def unpack(self) -> LabelMap:
        arr = np.asarray(self.labels, dtype=np.int64).reshape(self.height, self.width)
        return LabelMap(arr)


class StainProfileModel(BaseModel):
    stain_matrix: list[list[float]]  # rows are stains: [hematoxylin, eosin]
    max_conc: list[float]


class NormalizeRequest(BaseModel):
    image: ImagePayload
    method: Literal["macenko", "vahadane"] = "macenko"
    reference: StainProfileModel | None = None
    beta: float = 0.15
    alpha: float = 1.0
    lam: float = 0.1
    iters: int = 50


class NormalizeResponse(BaseModel):
    image: ImagePayload


class EstimateProfileRequest(BaseModel):
    image: ImagePayload
    method: Literal["macenko", "vahadane"] = "macenko"
    beta: float = 0.15
    alpha: float = 1.0
    lam: float = 0.1
    iters: int = 50


class TissueMaskRequest(BaseModel):
    image: ImagePayload
    sigma: float = 1.0
    sigma_growth: float = 2.0
    stop_threshold: float = 10.0
    max_iterations: int = 5


class TissueMaskResponse(BaseModel):
    mask: GrayPayload  # 0/255


class NucleiRequest(BaseModel):
    image: ImagePayload
    min_area: int = 20
    max_area: int = 5000
    sigma: float = 2.0
    peak_min_distance: int = 5


class NucleiResponse(BaseModel):
    labels: LabelMapModel
    entities_csv: str


class SuperpixelRequest(BaseModel):
    image: ImagePayload
    num_superpixels: int = 400
    compactness: float = 10.0
    iterations: int = 10
    min_size_fraction: float = 0.25
    merge_threshold: float | None = None
    target_min_regions: int | None = None


class SuperpixelResponse(BaseModel):
    labels: LabelMapModel


class FeaturesRequest(BaseModel):
    image: ImagePayload
    labels: LabelMapModel
    groups: list[str] | None = None
    glcm_levels: int = 32
    crowdedness_k: int = 5


class FeaturesResponse(BaseModel):
    features_csv: str


class BuildGraphRequest(BaseModel):
    mode: Literal["knn", "rag"]
    features_csv: str
    entities_csv: str | None = None   # knn mode
    labels: LabelMapModel | None = None  # rag mode
    k: int = 5
    distance_threshold: float | None = 50.0


class BuildGraphResponse(BaseModel):
    graph: dict[str, Any]


class TrainSample(BaseModel):
    graph: dict[str, Any]
    label: int
    tissue_graph: dict[str, Any] | None = None
    assignment: list[int] | None = None


class TrainRequest(BaseModel):
    kind: Literal["gnn", "hact"] = "gnn"
    samples: list[TrainSample]
    gnn_config: dict[str, Any] = Field(default_factory=dict)
    tissue_config: dict[str, Any] = Field(default_factory=dict)
    train_config: dict[str, Any] = Field(default_factory=dict)
    seed: int = 0


class TrainResponse(BaseModel):
    checkpoint: dict[str, Any]
    loss_trace: list[float]


class PredictRequest(BaseModel):
    checkpoint: dict[str, Any]
    graph: dict[str, Any]
    tissue_graph: dict[str, Any] | None = None
    assignment: list[int] | None = None


class PredictResponse(BaseModel):
    class_index: int
    probabilities: list[float]


class ExplainRequest(BaseModel):
    checkpoint: dict[str, Any]
    graph: dict[str, Any]
    method: Literal["gradcam", "gradcampp", "gnnexplainer", "lrp"]
    class_index: int | None = None
    layer: int | str = "last"
    steps: int = 100
    lr: float = 0.01
    lambda_sparsity: float = 0.05
    lambda_entropy: float = 0.1
    seed: int = 0
    top_k: int | None = None
    entities_csv: str | None = None
    image: ImagePayload | None = None  # when set, an overlay is rendered


class ExplainResponse(BaseModel):
    saliency: dict[str, Any]
    top_entities: list[int] | None = None
    overlay: ImagePayload | None = None


class PipelineRunRequest(BaseModel):
    config: dict[str, Any]
    workspace: str | None = None


class PipelineRunResponse(BaseModel):
    outputs: dict[str, str]
    steps_run: list[str]
    steps_cached: list[str]


class BenchmarkRequest(BaseModel):
    sizes: list[int]
    ops: list[str] | None = None
    reps: int = 3
    seed: int = 0


class BenchRowModel(BaseModel):
    module: str
    op: str
    side: int
    seconds: float
    repetitions: int


class BenchmarkResponse(BaseModel):
    csv: str
    rows: list[BenchRowModel]


class SynthImageRequest(BaseModel):
    side: int = 96
    seed: int = 0


class MessageResponse(BaseModel):
    message: str
