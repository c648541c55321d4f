"""FastAPI service wrapping the core scoring and evaluation routines.

The service holds one fitted monitor at a time (loaded at startup or via
POST /monitor/load) and scores raw feature rows sent by clients; evaluation
is stateless.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__, hrpeval, scorer
from ..errors import ValidationError
from ..tensorstore import QualityTable
from .schemas import (EvaluateRequest, EvaluateResponse, HealthResponse,
                      LoadMonitorRequest, MetricHrpModel, MonitorInfo,
                      ScoreRequest, ScoreResponse)


def _monitor_info(monitor: scorer.Monitor) -> MonitorInfo:
    cfg = monitor.config
    return MonitorInfo(
        layer=cfg.layer, q=cfg.q, variant=cfg.variant,
        variant_params=cfg.variant_params, gamma=cfg.gamma, fusion=cfg.fusion,
        bank_size=monitor.bank.size, metrics=cfg.metrics,
    )


def create_app(monitor_path=None) -> FastAPI:
    app = FastAPI(
        title="halluscope",
        description="Feature-based hallucination confidence scoring and "
                    "rejection-preference evaluation",
        version=__version__,
    )
    state = {"monitor": scorer.load_monitor(monitor_path) if monitor_path else None}

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(version=__version__,
                              monitor_loaded=state["monitor"] is not None)

    @app.post("/monitor/load", response_model=MonitorInfo)
    def load_monitor(req: LoadMonitorRequest):
        try:
            state["monitor"] = scorer.load_monitor(req.path)
        except (ValidationError, OSError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return _monitor_info(state["monitor"])

    @app.get("/monitor", response_model=MonitorInfo)
    def monitor_info():
        if state["monitor"] is None:
            raise HTTPException(status_code=404, detail="no monitor loaded")
        return _monitor_info(state["monitor"])

    @app.post("/score", response_model=ScoreResponse)
    def score(req: ScoreRequest):
        if state["monitor"] is None:
            raise HTTPException(status_code=409, detail="no monitor loaded")
        if not req.features:
            raise HTTPException(status_code=422, detail="empty feature batch")
        try:
            features = np.asarray(req.features, dtype=np.float64)
            conf = state["monitor"].score_features(features)
        except (ValidationError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return ScoreResponse(confidence=[float(c) for c in conf])

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest):
        n = len(req.confidence)
        ids = [f"s{i}" for i in range(n)]
        try:
            table = QualityTable(
                sample_ids=ids,
                metrics={k: np.asarray(v, dtype=np.float64)
                         for k, v in req.quality.items()},
            )
            report = hrpeval.hrp(np.asarray(req.confidence, dtype=np.float64),
                                 table)
        except (ValidationError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return EvaluateResponse(
            n=report.n, mean_hrp=report.mean_hrp,
            per_metric={
                name: MetricHrpModel(auc_f=m.auc_f, auc_random=m.auc_random,
                                     auc_oracle=m.auc_oracle, hrp=m.hrp)
                for name, m in report.per_metric.items()
            },
            warnings=report.warnings,
        )

    return app
