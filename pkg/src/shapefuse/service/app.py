"""FastAPI service wrapping the fusion library.

Invalid inputs (bad files, shape mismatches, parameter violations) map to
HTTP 400; anything else is a 500. Batch endpoints fan out over a thread
pool; the numeric kernels release the GIL.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..bench import fuse_pair_timed, run_batch_benchmark, run_benchmark
from ..distill import TeacherHead, loss_core, near_zero_fraction, weight_histogram
from ..errors import InputError
from ..tensor_io import (
    ensure_parent,
    load_image_pair,
    read_tensor,
    save_mask_png,
    write_tensor,
)
from ..weak_labels import (
    build_multilabel,
    da_clip_aggregate,
    parse_annotations,
    rasterize_boxes,
    soft_target,
)
from . import schemas


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


def _read_tensor_file(path: str, what: str) -> np.ndarray:
    _require_file(path, what)
    try:
        return read_tensor(path)
    except OSError as exc:
        raise InputError(f"cannot read {what} {path}: {exc}") from exc


def _load_pair(rgb_path: str, thermal_path: str):
    _require_file(rgb_path, "rgb image")
    _require_file(thermal_path, "thermal image")
    return load_image_pair(rgb_path, thermal_path)


def _fuse_to_files(req: schemas.FuseRequest) -> schemas.FuseResponse:
    pair = _load_pair(req.rgb_path, req.thermal_path)
    result, stages = fuse_pair_timed(pair, window=req.window, k1=req.k1, k2=req.k2)
    stem = Path(req.rgb_path).stem
    out_dir = Path(req.out_dir)
    # Single-channel maps are written with an explicit leading channel axis.
    planned = {
        "gated_rgb": result.gated_rgb,
        "gated_thermal": result.gated_thermal[None, :, :],
        "mask_rgb": result.masks.m_rgb[None, :, :],
        "mask_thermal": result.masks.m_t[None, :, :],
    }
    outputs: dict[str, str] = {}
    for name, tensor in planned.items():
        path = out_dir / f"{stem}.{name}.zten"
        write_tensor(tensor, ensure_parent(path))
        outputs[name] = str(path)
    if req.write_png:
        for name, mask in (("mask_rgb_png", result.masks.m_rgb), ("mask_thermal_png", result.masks.m_t)):
            path = out_dir / f"{stem}.{name[:-4]}.png"
            save_mask_png(mask, ensure_parent(path))
            outputs[name] = str(path)
    stage_ms = {name: seconds * 1e3 for name, seconds in stages.items()}
    return schemas.FuseResponse(
        width=pair.width,
        height=pair.height,
        outputs=outputs,
        stage_ms=stage_ms,
        total_ms=sum(stage_ms.values()),
    )


def find_batch_pairs(input_dir: str) -> list[tuple[Path, Path]]:
    """Pair DIR/rgb/* with DIR/thermal/* by file stem."""
    root = Path(input_dir)
    rgb_dir = root / "rgb"
    thermal_dir = root / "thermal"
    if not rgb_dir.is_dir() or not thermal_dir.is_dir():
        raise InputError(f"batch directory must contain rgb/ and thermal/: {input_dir}")
    thermal_by_stem: dict[str, Path] = {}
    for p in sorted(thermal_dir.iterdir()):
        if p.is_file():
            if p.stem in thermal_by_stem:
                raise InputError(f"duplicate thermal stem {p.stem!r} in {thermal_dir}")
            thermal_by_stem[p.stem] = p
    pairs = []
    for rgb in sorted(rgb_dir.iterdir()):
        if not rgb.is_file():
            continue
        thermal = thermal_by_stem.get(rgb.stem)
        if thermal is None:
            raise InputError(f"no thermal image for {rgb.name} in {thermal_dir}")
        pairs.append((rgb, thermal))
    if not pairs:
        raise InputError(f"no image pairs found under {input_dir}")
    return pairs


def _load_manifest(manifest_path: str) -> list[dict]:
    p = _require_file(manifest_path, "manifest")
    try:
        doc = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot parse manifest {manifest_path}: {exc}") from exc
    levels = doc.get("levels") if isinstance(doc, dict) else None
    if not isinstance(levels, list) or not levels:
        raise InputError("manifest must contain a non-empty 'levels' list")
    base = p.parent
    resolved = []
    for i, level in enumerate(levels):
        if not isinstance(level, dict):
            raise InputError(f"manifest level {i} must be an object")
        entry = {}
        for key in ("x_s", "x_t", "w_t"):
            value = level.get(key)
            if not isinstance(value, str):
                raise InputError(f"manifest level {i} missing path {key!r}")
            # Relative paths resolve against the manifest's directory.
            entry[key] = str(base / value) if not Path(value).is_absolute() else value
        resolved.append(entry)
    return resolved


def create_app() -> FastAPI:
    app = FastAPI(title="shapefuse", version=__version__)

    @app.exception_handler(InputError)
    async def _input_error(request: Request, exc: InputError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/healthz", response_model=schemas.HealthResponse)
    def healthz() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/fuse", response_model=schemas.FuseResponse)
    def fuse(req: schemas.FuseRequest) -> schemas.FuseResponse:
        return _fuse_to_files(req)

    @app.post("/fuse/batch", response_model=schemas.BatchFuseResponse)
    def fuse_batch(req: schemas.BatchFuseRequest) -> schemas.BatchFuseResponse:
        if req.workers < 1:
            raise InputError(f"workers must be >= 1, got {req.workers}")
        pairs = find_batch_pairs(req.input_dir)
        requests = [
            schemas.FuseRequest(
                rgb_path=str(rgb),
                thermal_path=str(thermal),
                out_dir=req.out_dir,
                window=req.window,
                k1=req.k1,
                k2=req.k2,
                write_png=req.write_png,
            )
            for rgb, thermal in pairs
        ]
        t0 = time.perf_counter()
        if req.workers == 1:
            results = [_fuse_to_files(r) for r in requests]
        else:
            with ThreadPoolExecutor(max_workers=req.workers) as pool:
                results = list(pool.map(_fuse_to_files, requests))
        seconds = time.perf_counter() - t0
        return schemas.BatchFuseResponse(
            count=len(results), workers=req.workers, seconds=seconds, results=results
        )

    @app.post("/targets", response_model=schemas.TargetsResponse)
    def targets(req: schemas.TargetsRequest) -> schemas.TargetsResponse:
        doc = req.annotations.model_dump(by_alias=True)
        width, height, boxes = parse_annotations(doc)
        q = build_multilabel(boxes, req.num_classes)
        mask = rasterize_boxes(boxes, req.num_classes, height, width)
        out_dir = Path(req.out_dir)
        outputs: dict[str, str] = {}
        for name, tensor in (("q", q), ("mask", mask)):
            path = out_dir / f"{req.name}.{name}.zten"
            write_tensor(tensor, ensure_parent(path))
            outputs[name] = str(path)
        q_hat_list = None
        q_tilde_list = None
        if req.crop_probs_path is not None:
            probs = _read_tensor_file(req.crop_probs_path, "crop probabilities")
            if probs.ndim != 2 or probs.shape[1] != req.num_classes:
                raise InputError(
                    f"crop probabilities must be (n_crops, {req.num_classes}), got {probs.shape}"
                )
            q_hat = da_clip_aggregate(probs)
            q_tilde = soft_target(q, q_hat, req.lam).astype(np.float32)
            for name, tensor in (("q_hat", q_hat), ("q_tilde", q_tilde)):
                path = out_dir / f"{req.name}.{name}.zten"
                write_tensor(tensor, ensure_parent(path))
                outputs[name] = str(path)
            q_hat_list = [float(v) for v in q_hat]
            q_tilde_list = [float(v) for v in q_tilde]
        return schemas.TargetsResponse(
            outputs=outputs,
            q=[float(v) for v in q],
            n_boxes=len(boxes),
            q_hat=q_hat_list,
            q_tilde=q_tilde_list,
        )

    @app.post("/kd", response_model=schemas.KdResponse)
    def kd(req: schemas.KdRequest) -> schemas.KdResponse:
        levels = _load_manifest(req.manifest_path)
        level_rows = []
        losses = []
        all_weights = []
        for i, entry in enumerate(levels):
            x_s = _read_tensor_file(entry["x_s"], f"level {i} student features")
            x_t = _read_tensor_file(entry["x_t"], f"level {i} teacher features")
            w_t = _read_tensor_file(entry["w_t"], f"level {i} head weights")
            head = TeacherHead(w_t=w_t)
            d = req.d if req.d is not None else (x_s.shape[0] if x_s.ndim == 3 else 0)
            result = loss_core(x_s, x_t, head, d, reduction=req.reduction)
            losses.append(result.loss)
            all_weights.append(head.w_t.ravel())
            level_rows.append(
                schemas.KdLevel(
                    index=i,
                    loss=result.loss,
                    d=d,
                    c_in=head.c_in,
                    c_out=head.c_out,
                    near_zero_fraction=near_zero_fraction(head, req.threshold),
                )
            )
        pooled = TeacherHead(w_t=np.concatenate(all_weights).reshape(1, -1))
        counts, edges = weight_histogram(pooled, req.bins, (req.hist_lo, req.hist_hi))
        return schemas.KdResponse(
            levels=level_rows,
            total=math.fsum(losses),
            reduction=req.reduction,
            histogram_counts=[int(v) for v in counts],
            histogram_edges=[float(v) for v in edges],
            near_zero_fraction=near_zero_fraction(pooled, req.threshold),
            threshold=req.threshold,
        )

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench(req: schemas.BenchRequest) -> schemas.BenchResponse:
        pair = _load_pair(req.rgb_path, req.thermal_path)
        loader = None
        if req.include_io:
            loader = lambda: _load_pair(req.rgb_path, req.thermal_path)  # noqa: E731
        report = run_benchmark(
            pair,
            iterations=req.iterations,
            warmup=req.warmup,
            window=req.window,
            k1=req.k1,
            k2=req.k2,
            loader=loader,
        )
        return schemas.BenchResponse(**report.as_dict())

    @app.post("/bench/batch", response_model=schemas.BatchBenchResponse)
    def bench_batch(req: schemas.BatchBenchRequest) -> schemas.BatchBenchResponse:
        paths = find_batch_pairs(req.input_dir)
        pairs = [load_image_pair(rgb, thermal) for rgb, thermal in paths]
        report = run_batch_benchmark(
            pairs,
            workers=req.workers,
            baseline_workers=req.baseline_workers,
            warmup=req.warmup,
            window=req.window,
            k1=req.k1,
            k2=req.k2,
        )
        return schemas.BatchBenchResponse(**report.as_dict())

    @app.post("/stats", response_model=schemas.StatsResponse)
    def stats(req: schemas.StatsRequest) -> schemas.StatsResponse:
        w = _read_tensor_file(req.weights_path, "head weights")
        if w.ndim != 2:
            raise InputError(f"head weights must be 2-D (C_out, C_in), got {w.shape}")
        head = TeacherHead(w_t=w)
        counts, edges = weight_histogram(head, req.bins, (req.hist_lo, req.hist_hi))
        return schemas.StatsResponse(
            c_out=head.c_out,
            c_in=head.c_in,
            counts=[int(v) for v in counts],
            edges=[float(v) for v in edges],
            near_zero_fraction=near_zero_fraction(head, req.threshold),
            threshold=req.threshold,
        )

    return app
