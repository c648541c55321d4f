"""Pydantic request/response models for the scoring service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str
    monitor_loaded: bool


class LoadMonitorRequest(BaseModel):
    path: str = Field(description="Path to a monitor.json on the server host")


class MonitorInfo(BaseModel):
    layer: str
    q: float
    variant: str
    variant_params: dict
    gamma: float
    fusion: str
    bank_size: int
    metrics: list[str]


class ScoreRequest(BaseModel):
    features: list[list[float]] = Field(
        description="Raw pooled feature rows at the monitor's layer"
    )


class ScoreResponse(BaseModel):
    confidence: list[float]


class EvaluateRequest(BaseModel):
    confidence: list[float]
    quality: dict[str, list[float]] = Field(
        description="Metric name -> per-sample quality, higher is safer"
    )


class MetricHrpModel(BaseModel):
    auc_f: float
    auc_random: float
    auc_oracle: float
    hrp: float | None


class EvaluateResponse(BaseModel):
    n: int
    mean_hrp: float | None
    per_metric: dict[str, MetricHrpModel]
    warnings: list[str]
