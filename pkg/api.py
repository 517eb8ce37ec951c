#!/usr/bin/env python3
"""keyreg REST API

FastAPI interface over the registration orchestrator. Requests carry paths
to local files; responses carry artifact paths and metric values.

Usage:
    uvicorn api:app --host 0.0.0.0 --port 8000

Alternatively, run directly:
    python api.py
"""

import logging
from typing import Any, Dict, List, Literal, Optional, Tuple

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from errors import KeyregError
from keypoints import DetectorConfig
from orchestrator import RegistrationOrchestrator, RunManifest

logger = logging.getLogger(__name__)

VERSION = "1.0.0"

app = FastAPI(
    title="keyreg API",
    description="Resolution-agnostic keypoint registration of medical volumes",
    version=VERSION,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

orchestrator = RegistrationOrchestrator()

# ============================================================================
# Request/Response Models
# ============================================================================

class RegisterResponse(BaseModel):
    run_id: str
    status: str
    artifacts: Dict[str, str]
    report: Optional[Dict[str, Any]] = None
    timings: Dict[str, float] = Field(default_factory=dict)


class WarpRequest(BaseModel):
    moving: str
    fixed: str = Field(..., description="Volume whose grid is the warp target")
    transform: str = Field(..., description="Transform file written by /register")
    out: str
    labels: bool = False
    moving_labels: Optional[str] = None


class KeypointsRequest(BaseModel):
    volume: str
    out: Optional[str] = None
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    activations: Optional[str] = Field(default=None, description="RKMACT1 maps on the volume grid")


class KeypointsResponse(BaseModel):
    points: List[Tuple[float, float, float]]
    confidences: List[float]
    out: Optional[str] = None


class EvalRequest(BaseModel):
    a: str
    b: str
    a_labels: Optional[str] = None
    b_labels: Optional[str] = None
    labels: Optional[List[int]] = None
    hd_percentile: float = Field(default=100.0, gt=0.0, le=100.0)
    out: Optional[str] = None


class PhantomRequest(BaseModel):
    spec: str
    out_dir: str
    translate: Optional[Tuple[float, float, float]] = None
    transform: Optional[str] = None
    mild_tps_mm: Optional[float] = Field(default=None, gt=0.0)
    spacing_m: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    spacing_f: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation_m: Literal["axial", "coronal", "sagittal"] = "axial"
    orientation_f: Literal["axial", "coronal", "sagittal"] = "axial"
    seed: Optional[int] = None
    out_format: Literal["nifti", "raw"] = "nifti"

# ============================================================================
# Error mapping
# ============================================================================

@app.exception_handler(KeyregError)
async def keyreg_error_handler(request: Request, exc: KeyregError):
    """Input errors are 400; solver and detector failures are 422."""
    status = 400 if exc.exit_code == 2 else 422
    logger.warning("%s %s failed: %s", request.method, request.url.path, exc)
    return JSONResponse(
        status_code=status,
        content={"detail": str(exc), "error": type(exc).__name__, "code": exc.exit_code},
    )

# ============================================================================
# Health & Status Endpoints
# ============================================================================

@app.get("/health")
async def health_check():
    """Health check endpoint."""
    return {"ok": True, "service": "keyreg", "version": VERSION}


@app.get("/status")
async def get_status():
    return orchestrator.get_status()

# ============================================================================
# Pipeline Endpoints
# ============================================================================

@app.post("/register", response_model=RegisterResponse)
def register(manifest: RunManifest):
    """Run the full pipeline for one pair."""
    record = orchestrator.register(manifest)
    return RegisterResponse(
        run_id=record.run_id,
        status=record.status,
        artifacts=record.artifacts,
        report=record.report.model_dump(mode="json") if record.report else None,
        timings=record.timings,
    )


@app.get("/runs/{run_id}")
async def get_run(run_id: str):
    record = orchestrator.get_run(run_id)
    if record is None:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return record.to_dict()


@app.post("/warp")
def warp(request: WarpRequest):
    written = orchestrator.warp(
        request.moving, request.fixed, request.transform, request.out, request.labels, request.moving_labels
    )
    return {"ok": True, "written": [str(p) for p in written]}


@app.post("/keypoints", response_model=KeypointsResponse)
def keypoints(request: KeypointsRequest):
    ks = orchestrator.keypoints(request.volume, request.out, request.detector, request.activations)
    return KeypointsResponse(
        points=[tuple(p) for p in ks.points.tolist()],
        confidences=ks.confidences.tolist(),
        out=request.out,
    )


@app.post("/eval")
def evaluate(request: EvalRequest):
    report = orchestrator.evaluate(
        request.a, request.b, request.out, request.a_labels, request.b_labels, request.labels, request.hd_percentile
    )
    return report.model_dump(mode="json")


@app.post("/phantom")
def phantom(request: PhantomRequest):
    artifacts = orchestrator.phantom(
        request.spec,
        request.out_dir,
        translate=request.translate,
        transform_path=request.transform,
        mild_tps_mm=request.mild_tps_mm,
        spacing_m=request.spacing_m,
        spacing_f=request.spacing_f,
        orientation_m=request.orientation_m,
        orientation_f=request.orientation_f,
        seed=request.seed,
        out_format=request.out_format,
    )
    return {"ok": True, "artifacts": artifacts}

# ============================================================================
# Run the server
# ============================================================================

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
