"""HTTP facade over the tracer, synthesizer, calibrator, and sweep runner.

The CLI talks to this app in-process by default; pointing it at a real
server gives the same contract. Domain validation failures map to 422 and
numerical failures (divergence, rank deficiency) to 500, both with an
``error_kind`` field so clients can pick the right exit code.
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .calibrate import calibrate
from .channel import dataset_from_dict, dataset_to_dict, synthesize_dataset
from .errors import ConfigError, GeometryError, NumericalError
from .harness import (
    aggregate,
    aggregates_to_csv,
    calibration_report,
    experiment_config_from_dict,
    rows_to_csv,
    run_experiment,
)
from .raytracer import DevicePair, pathset_to_dict, scene_from_dict, trace_paths

log = logging.getLogger(__name__)

app = FastAPI(
    title="raycal",
    version=__version__,
    description="Ray-tracing digital-twin calibration service",
)

MAX_THREADS = 32


class TraceRequest(BaseModel):
    scene: dict
    rx: tuple[float, float]
    tx: tuple[float, float]
    max_bounces: int = Field(default=3, ge=0)
    include_los: bool = True
    f_c: float = Field(default=6.0e9, gt=0)


class SynthesizeRequest(BaseModel):
    """Experiment config plus an optional seed override (default: first seed)."""

    config: dict
    seed: int | None = None


class CalibrateRequest(BaseModel):
    config: dict
    dataset: dict
    scheme: str


class RunRequest(BaseModel):
    config: dict
    threads: int = Field(default=1, ge=1, le=MAX_THREADS)


@app.exception_handler(ConfigError)
async def _config_error(request: Request, exc: ConfigError):
    return JSONResponse(
        status_code=422,
        content={"detail": str(exc), "error_kind": "config"},
    )


@app.exception_handler(GeometryError)
async def _geometry_error(request: Request, exc: GeometryError):
    return JSONResponse(
        status_code=422,
        content={"detail": str(exc), "error_kind": "config"},
    )


@app.exception_handler(NumericalError)
async def _numerical_error(request: Request, exc: NumericalError):
    log.warning("numerical failure: %s", exc)
    return JSONResponse(
        status_code=500,
        content={"detail": str(exc), "error_kind": "numerical"},
    )


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/trace")
def trace_endpoint(req: TraceRequest):
    scene = scene_from_dict(req.scene)
    pair = DevicePair(rx=tuple(req.rx), tx=tuple(req.tx))
    pathset = trace_paths(scene, pair, req.max_bounces, req.include_los, f_c=req.f_c)
    return pathset_to_dict(pathset)


@app.post("/synthesize")
def synthesize_endpoint(req: SynthesizeRequest):
    cfg = experiment_config_from_dict(req.config)
    seed = req.seed if req.seed is not None else cfg.seeds[0]
    dataset = synthesize_dataset(
        cfg.scene_truth,
        None,
        cfg.pair,
        cfg.base_radio(),
        cfg.n_obs,
        cfg.mode,
        cfg.snr_db,
        seed,
        level=cfg.level,
        max_bounces=cfg.max_bounces,
        include_los=cfg.include_los,
    )
    return dataset_to_dict(dataset)


@app.post("/calibrate")
def calibrate_endpoint(req: CalibrateRequest):
    cfg = experiment_config_from_dict(req.config)
    dataset = dataset_from_dict(req.dataset)
    result = calibrate(
        req.scheme,
        cfg.scene_dt,
        dataset,
        optim=cfg.optim,
        theta_init=cfg.theta_init,
        max_bounces=cfg.max_bounces,
        include_los=cfg.include_los,
        projection_policy=cfg.projection_policy,
        grid_size=cfg.grid_size,
    )
    seed = int(dataset.provenance.get("seed", -1))
    return calibration_report(result, config_echo=req.config, seed=seed)


@app.post("/experiments/run")
def run_endpoint(req: RunRequest):
    cfg = experiment_config_from_dict(req.config)
    rows = run_experiment(cfg, threads=req.threads)
    return {
        "rows_csv": rows_to_csv(rows),
        "aggregate_csv": aggregates_to_csv(aggregate(rows)),
    }
