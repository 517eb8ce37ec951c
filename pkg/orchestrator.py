"""Orchestrator Module - keyreg

Runs the registration pipeline end to end and keeps a record of every run.
Shared by the CLI and the REST API:

    load -> z-score -> detect (or read keypoints) -> match -> [refine]
         -> solve -> warp -> metrics -> write artifacts
"""

from __future__ import annotations

import logging
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, model_validator

from errors import DimMismatch, UnsupportedTransform
from keypoints import DetectorConfig, center_of_mass, detect_keypoints, match_keypoints, zscore_normalize
from metrics import MetricReport, evaluate_pair, format_report
from objective import RefinementConfig, SimilarityConfig, refine_keypoints
from phantom import make_pair, mild_tps, read_spec, translation
from solvers import KeypointSet, TpsTransform
from volio import (
    is_nifti,
    load_volume,
    read_activation_stack,
    read_keypoints,
    read_transform,
    save_volume,
    write_keypoints,
    write_transform,
)
from warp import Volume, WorldTransform, registration_transform, warp_to_fixed_grid
from worker_pool import WorkerPool

logger = logging.getLogger(__name__)

Kind = Literal["rigid", "affine", "tps"]


class RunManifest(BaseModel):
    """Everything one registration run needs; validated before any work starts."""

    moving: str
    fixed: str
    moving_labels: Optional[str] = None
    fixed_labels: Optional[str] = None
    transform: Kind = "affine"
    lam: Optional[float] = Field(default=None, ge=0.0)
    weighted: bool = True
    moving_keypoints: Optional[str] = None
    fixed_keypoints: Optional[str] = None
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    terms: Optional[Dict[Literal["mse", "ssim", "dice"], float]] = None
    refine: bool = False
    refinement: RefinementConfig = Field(default_factory=RefinementConfig)
    hd_percentile: float = Field(default=100.0, gt=0.0, le=100.0)
    out_dir: str = "."
    out_format: Literal["nifti", "raw"] = "nifti"
    seed: int = 0

    @model_validator(mode="after")
    def _lambda_iff_tps(self) -> "RunManifest":
        if self.transform == "tps" and self.lam is None:
            raise ValueError("transform 'tps' requires lam")
        if self.transform != "tps" and self.lam is not None:
            raise ValueError(f"lam is only meaningful for tps, not {self.transform}")
        if (self.moving_keypoints is None) != (self.fixed_keypoints is None):
            raise ValueError("moving_keypoints and fixed_keypoints must be given together")
        return self

    def similarity(self, with_labels: bool) -> SimilarityConfig:
        kwargs: Dict[str, Any] = {"transform": self.transform, "tps_lambda": self.lam, "weighted": self.weighted}
        if self.terms:
            kwargs["terms"] = self.terms
        cfg = SimilarityConfig(**kwargs)
        return cfg if with_labels else cfg.without_labels()


@dataclass
class RunRecord:
    run_id: str
    manifest: RunManifest
    status: str = "running"
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    completed_at: Optional[str] = None
    timings: Dict[str, float] = field(default_factory=dict)
    report: Optional[MetricReport] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    transform: Optional[WorldTransform] = None
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "status": self.status,
            "created_at": self.created_at,
            "completed_at": self.completed_at,
            "timings": self.timings,
            "report": self.report.model_dump(mode="json") if self.report else None,
            "artifacts": self.artifacts,
            "error": self.error,
        }


class _Timer:
    def __init__(self, record: RunRecord, stage: str):
        self.record = record
        self.stage = stage

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.record.timings[self.stage] = time.perf_counter() - self.start
        return False


def _volume_name(stem: str, out_format: str) -> str:
    return f"{stem}.nii.gz" if out_format == "nifti" else f"{stem}.rkm.txt"


class RegistrationOrchestrator:
    """Runs pipeline commands and tracks registration runs (active and completed)."""

    def __init__(self, threads: Optional[int] = None, pool: Optional[WorkerPool] = None):
        self.pool = pool if pool is not None else WorkerPool(threads)
        self.active_runs: Dict[str, RunRecord] = {}
        self.completed_runs: Dict[str, RunRecord] = {}

    # ------------------------------------------------------------------
    # register
    # ------------------------------------------------------------------

    def _keypoint_pair(self, manifest: RunManifest, moving: Volume, fixed: Volume) -> Tuple[KeypointSet, KeypointSet]:
        if manifest.moving_keypoints is not None:
            km = read_keypoints(manifest.moving_keypoints)
            kf = read_keypoints(manifest.fixed_keypoints)
            if len(km) != len(kf):
                raise DimMismatch(f"keypoint files hold {len(km)} moving and {len(kf)} fixed points")
            return km, kf
        km = detect_keypoints(zscore_normalize(moving), manifest.detector, self.pool)
        kf = detect_keypoints(zscore_normalize(fixed), manifest.detector, self.pool)
        return km, match_keypoints(km, kf)

    def register(self, manifest: RunManifest) -> RunRecord:
        """Full pipeline for one pair. Failures are recorded, then re-raised."""
        record = RunRecord(run_id=str(uuid.uuid4()), manifest=manifest)
        self.active_runs[record.run_id] = record
        logger.info("run %s: %s -> %s (%s)", record.run_id, manifest.moving, manifest.fixed, manifest.transform)
        try:
            self._register(record)
            record.status = "completed"
        except Exception as exc:
            record.status = "failed"
            record.error = str(exc)
            raise
        finally:
            record.completed_at = datetime.now(timezone.utc).isoformat()
            self.completed_runs[record.run_id] = self.active_runs.pop(record.run_id)
        return record

    def _register(self, record: RunRecord) -> None:
        m = record.manifest
        out_dir = Path(m.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        with _Timer(record, "load"):
            moving = load_volume(m.moving, m.moving_labels)
            fixed = load_volume(m.fixed, m.fixed_labels)
        with _Timer(record, "keypoints"):
            km, kf = self._keypoint_pair(m, moving, fixed)

        if m.refine:
            has_labels = moving.labels is not None and fixed.labels is not None
            scfg = m.similarity(has_labels)
            rcfg = m.refinement.model_copy(update={"rng_seed": m.seed})
            with _Timer(record, "refine"):
                result = refine_keypoints(moving, fixed, km, kf, scfg, rcfg, self.pool)
            km, kf = result.moving, result.fixed
            logger.info("refinement: %d accepted steps, objective %.6f", result.accepted_steps, result.objective)

        with _Timer(record, "solve"):
            t = registration_transform(m.transform, km, kf, m.lam, m.weighted)
        with _Timer(record, "warp"):
            warped = warp_to_fixed_grid(moving, fixed, t, pool=self.pool)
        with _Timer(record, "metrics"):
            report = evaluate_pair(warped, fixed, hd_percentile=m.hd_percentile)

        with _Timer(record, "write"):
            artifacts = {
                "transform": write_transform(t, out_dir / "transform.txt"),
                "report": out_dir / "report.txt",
                "moving_keypoints": write_keypoints(km, out_dir / "moving_keypoints.txt"),
                "fixed_keypoints": write_keypoints(kf, out_dir / "fixed_keypoints.txt"),
            }
            (out_dir / "report.txt").write_text(format_report(report), encoding="utf-8")
            written = save_volume(warped, out_dir / _volume_name("warped", m.out_format))
            artifacts["warped"] = written[0]
            if warped.labels is not None:
                artifacts["warped_labels"] = written[1] if is_nifti(written[0]) else written[2]
        record.transform = t
        record.report = report
        record.artifacts = {k: str(v) for k, v in artifacts.items()}

    # ------------------------------------------------------------------
    # single-step commands
    # ------------------------------------------------------------------

    def warp(
        self,
        moving_path: str,
        fixed_path: str,
        transform_path: str,
        out_path: str,
        labels: bool = False,
        moving_labels: Optional[str] = None,
    ) -> List[Path]:
        t = read_transform(transform_path)
        moving = load_volume(moving_path, moving_labels)
        fixed = load_volume(fixed_path)
        mode = "labels" if labels else "intensity"
        warped = warp_to_fixed_grid(moving, fixed, t, mode=mode, pool=self.pool)
        return save_volume(warped, out_path)

    def keypoints(
        self,
        volume_path: str,
        out_path: Optional[str] = None,
        detector: Optional[DetectorConfig] = None,
        activations_path: Optional[str] = None,
    ) -> KeypointSet:
        """Detect keypoints, or reduce externally produced activation maps with the CoM layer."""
        vol = load_volume(volume_path)
        detector = detector or DetectorConfig()
        if activations_path is None:
            ks = detect_keypoints(zscore_normalize(vol), detector, self.pool)
        else:
            stack = read_activation_stack(activations_path, vol.affine)
            if stack.dims != vol.dims:
                raise DimMismatch(f"activation maps are {stack.dims} but {volume_path} is {vol.dims}")
            ks = center_of_mass(stack, detector.min_activation_mass, pool=self.pool)
        if out_path is not None:
            write_keypoints(ks, out_path)
        return ks

    def evaluate(
        self,
        a_path: str,
        b_path: str,
        out_path: Optional[str] = None,
        a_labels: Optional[str] = None,
        b_labels: Optional[str] = None,
        labels: Optional[Sequence[int]] = None,
        hd_percentile: float = 100.0,
    ) -> MetricReport:
        a = load_volume(a_path, a_labels)
        b = load_volume(b_path, b_labels)
        report = evaluate_pair(a, b, labels=labels, hd_percentile=hd_percentile)
        if out_path is not None:
            Path(out_path).write_text(format_report(report), encoding="utf-8")
        return report

    def phantom(
        self,
        spec_path: str,
        out_dir: str,
        translate: Optional[Sequence[float]] = None,
        transform_path: Optional[str] = None,
        mild_tps_mm: Optional[float] = None,
        spacing_m: Sequence[float] = (1.0, 1.0, 1.0),
        spacing_f: Sequence[float] = (1.0, 1.0, 1.0),
        orientation_m: str = "axial",
        orientation_f: str = "axial",
        seed: Optional[int] = None,
        out_format: str = "nifti",
    ) -> Dict[str, str]:
        """Render a ground-truth pair and write volumes, keypoints and transform."""
        spec = read_spec(spec_path)
        if seed is not None:
            spec = spec.model_copy(update={"rng_seed": seed})
        if transform_path is not None:
            g = read_transform(transform_path)
            if isinstance(g, TpsTransform):
                raise UnsupportedTransform(
                    f"{transform_path}: a phantom ground truth must be affine or rigid (moving -> fixed), not tps"
                )
        elif mild_tps_mm is not None:
            g = mild_tps(spec, mild_tps_mm, seed=spec.rng_seed)
        else:
            g = translation(translate if translate is not None else (0.0, 0.0, 0.0))

        truth = make_pair(spec, g, spacing_m, spacing_f, orientation_f, orientation_m, pool=self.pool)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        artifacts: Dict[str, Path] = {}
        for stem, vol in (("moving", truth.moving), ("fixed", truth.fixed)):
            written = save_volume(vol, out / _volume_name(stem, out_format))
            artifacts[stem] = written[0]
            artifacts[f"{stem}_labels"] = written[1] if is_nifti(written[0]) else written[2]
        artifacts["moving_keypoints"] = write_keypoints(truth.moving_keypoints, out / "moving_keypoints.txt")
        artifacts["fixed_keypoints"] = write_keypoints(truth.fixed_keypoints, out / "fixed_keypoints.txt")
        if not isinstance(g, TpsTransform):
            # TPS ground truths map moving -> fixed, the reverse of the warp-ready TPS file convention
            artifacts["ground_truth"] = write_transform(g, out / "ground_truth.txt")
        return {k: str(v) for k, v in artifacts.items()}

    # ------------------------------------------------------------------
    # status
    # ------------------------------------------------------------------

    def get_run(self, run_id: str) -> Optional[RunRecord]:
        return self.active_runs.get(run_id) or self.completed_runs.get(run_id)

    def get_status(self) -> Dict[str, Any]:
        return {
            "active_runs": len(self.active_runs),
            "completed_runs": len(self.completed_runs),
            "pool": self.pool.get_pool_status(),
        }
