"""Experiment manifests.

A manifest is a JSON document; every key is optional and unknown keys are
rejected. Defaults reproduce the reference setup: a 640x480 camera with
f = 800 px, a 0.15 m marker disk, 400 poses on four shells and 4 px noise.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .geometry import Intrinsics
from .optimizer import OptimizerConfig
from .pose_est import METHODS, RefinerConfig
from .simulation import NoiseModel, PoseDistributionConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CameraSection(_Strict):
    fx: float = Field(800.0, gt=0)
    fy: float = Field(800.0, gt=0)
    cx: float = 320.0
    cy: float = 240.0
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)

    def build(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


class OptimizerSection(_Strict):
    alpha0: Optional[float] = Field(None, gt=0, description="initial step in meters; default 1e-3 * r")
    eta_up: float = Field(1.05, gt=1)
    eta_down: float = Field(0.5, gt=0, lt=1)
    max_iter: int = Field(500, ge=1)
    rel_tol: float = Field(1e-8, gt=0)
    fd_step: Optional[float] = Field(None, gt=0, description="finite-difference step in meters; default 1e-6 * r")
    gradient: str = Field("fd", pattern="^(fd|exact)$")
    handle_coalescence: bool = Field(True, description="min-norm direction where extreme singular values can coalesce")


class PosesSection(_Strict):
    radii: list[float] = [0.5, 0.75, 1.0, 1.25]
    poses_per_radius: int = Field(100, ge=1)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hemisphere_only: bool = True
    min_elevation_deg: float = Field(20.0, ge=0, lt=90)


class NoiseSection(_Strict):
    sigma_px: float = Field(4.0, ge=0)


class RefinerSection(_Strict):
    max_iter: int = Field(100, gt=0)
    gradient_tol: float = Field(1e-10, gt=0)
    param_tol: float = Field(1e-12, gt=0)
    damping_init: float = Field(1e-3, gt=0)


class ExperimentConfig(_Strict):
    camera: CameraSection = CameraSection()
    bound_radius: float = Field(0.15, gt=0)
    optimizer: OptimizerSection = OptimizerSection()
    poses: PosesSection = PosesSection()
    noise: NoiseSection = NoiseSection()
    refiner: RefinerSection = RefinerSection()
    methods: list[str] = ["dlt-decomp", "mre-lm"]
    n: int = Field(4, description="point count for `optimize`")
    n_values: list[int] = [4, 5, 6, 7, 8]
    runs: int = Field(1000, ge=1)
    inits_per_pose: int = Field(100, ge=1)
    max_poses: Optional[int] = Field(None, ge=1, description="evenly strided pose subset for `sweep`")
    eval_every: int = Field(1, ge=1)
    fronto_parallel_distance: float = Field(0.75, gt=0)
    base_seed: int = Field(0, ge=0)
    jobs: int = Field(1, ge=1)
    output_dir: str = "results"

    @field_validator("n")
    @classmethod
    def _n_min(cls, v: int) -> int:
        if v < 4:
            raise ValueError("n must be ≥ 4")
        return v

    @field_validator("n_values")
    @classmethod
    def _n_values_min(cls, v: list[int]) -> list[int]:
        if not v or min(v) < 4:
            raise ValueError("n must be ≥ 4")
        return v

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v: list[str]) -> list[str]:
        unknown = [m for m in v if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown pose methods: {unknown}")
        return v

    def intrinsics(self) -> Intrinsics:
        return self.camera.build()

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(radius=self.bound_radius, **self.optimizer.model_dump())

    def pose_config(self) -> PoseDistributionConfig:
        p = self.poses
        return PoseDistributionConfig(
            radii=tuple(p.radii),
            poses_per_radius=p.poses_per_radius,
            look_at=tuple(p.look_at),
            hemisphere_only=p.hemisphere_only,
            min_elevation_deg=p.min_elevation_deg,
        )

    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.noise.sigma_px)

    def refiner_config(self) -> RefinerConfig:
        return RefinerConfig(**self.refiner.model_dump())

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Read a manifest (or start from defaults) and apply top-level overrides."""
    data = {}
    if path is not None:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError("config document must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(data)
