"""Request/response models for the fusion service.

The service is path-oriented: tensors and images stay on disk in the
formats the library defines, requests carry file paths plus parameters,
and responses carry scalars, summaries, and the paths written.
"""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class FuseRequest(BaseModel):
    rgb_path: str
    thermal_path: str
    out_dir: str
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    write_png: bool = False


class FuseResponse(BaseModel):
    width: int
    height: int
    outputs: dict[str, str]
    stage_ms: dict[str, float]
    total_ms: float


class BatchFuseRequest(BaseModel):
    input_dir: str
    out_dir: str
    workers: int = 1
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    write_png: bool = False


class BatchFuseResponse(BaseModel):
    count: int
    workers: int
    seconds: float
    results: list[FuseResponse]


class BoxIn(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    class_id: int = Field(alias="class")
    x0: float
    y0: float
    x1: float
    y1: float


class AnnotationDoc(BaseModel):
    width: int
    height: int
    boxes: list[BoxIn]


class TargetsRequest(BaseModel):
    annotations: AnnotationDoc
    num_classes: int
    out_dir: str
    name: str = "targets"
    lam: float = 0.1
    crop_probs_path: str | None = None


class TargetsResponse(BaseModel):
    outputs: dict[str, str]
    q: list[float]
    n_boxes: int
    q_hat: list[float] | None = None
    q_tilde: list[float] | None = None


class KdRequest(BaseModel):
    manifest_path: str
    d: int | None = None
    reduction: str = "sum"
    bins: int = 50
    hist_lo: float = -1.0
    hist_hi: float = 1.0
    threshold: float = 0.01


class KdLevel(BaseModel):
    index: int
    loss: float
    d: int
    c_in: int
    c_out: int
    near_zero_fraction: float


class KdResponse(BaseModel):
    levels: list[KdLevel]
    total: float
    reduction: str
    histogram_counts: list[int]
    histogram_edges: list[float]
    near_zero_fraction: float
    threshold: float


class BenchRequest(BaseModel):
    rgb_path: str
    thermal_path: str
    iterations: int = 20
    warmup: int = 1
    include_io: bool = False
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03


class BenchResponse(BaseModel):
    width: int
    height: int
    iterations: int
    warmup: int
    include_io: bool
    min_ms: float
    median_ms: float
    p95_ms: float
    pixels_per_second: float
    stage_median_ms: dict[str, float]


class BatchBenchRequest(BaseModel):
    input_dir: str
    workers: int
    baseline_workers: int = 1
    warmup: int = 1
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03


class BatchBenchResponse(BaseModel):
    n_pairs: int
    workers: int
    baseline_workers: int
    seconds: float
    baseline_seconds: float
    pairs_per_second: float
    speedup: float


class StatsRequest(BaseModel):
    weights_path: str
    bins: int = 50
    hist_lo: float = -1.0
    hist_hi: float = 1.0
    threshold: float = 0.01


class StatsResponse(BaseModel):
    c_out: int
    c_in: int
    counts: list[int]
    edges: list[float]
    near_zero_fraction: float
    threshold: float
