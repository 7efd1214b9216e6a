"""HTTP/JSON service exposing what-if scenario runs over a loaded system.

The snapshot and fitted model are loaded at boot and never mutated by
requests; every run is a pure function of (system, model, request), cached
in memory under a deterministic run id so identical requests return
identical responses. Numbers always match what the CLI would produce for
the same inputs and seeds.
"""

from __future__ import annotations

import hashlib
import json
import queue
import threading
import uuid
from typing import Any

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel, Field

from .data import SystemSnapshot
from .estimator import FittedModel
from .pipeline import (
    format_percent_change,
    model_to_dict,
    run_scenario,
    system_summary,
    to_jsonable,
)
from .predictor import AugmentationPolicy, ScenarioSpec


class AugmentationOverrides(BaseModel):
    max_new_per_origin: int | None = Field(default=None, ge=0)
    distance_cutoff_km: float | None = Field(default=None, gt=0)
    restrict_to_congested_feeders: bool | None = None


class ScenarioRequest(BaseModel):
    label: str = "adhoc"
    cost_reduction: float = Field(default=0.0, ge=0.0)
    slot_scale: float | dict[str, float] = 1.0
    seeds: list[int] | None = None
    seed_count: int = Field(default=100, ge=1)
    augmentation: AugmentationOverrides | None = None
    reference_run_id: str | None = None
    top_n: int = Field(default=10, ge=1)

    def scenario(self) -> ScenarioSpec:
        seeds = tuple(self.seeds) if self.seeds else tuple(range(self.seed_count))
        spec = ScenarioSpec(
            label=self.label,
            cost_reduction=self.cost_reduction,
            slot_scale=self.slot_scale,
            seeds=seeds,
        )
        spec.check()
        return spec

    def policy(self, base: AugmentationPolicy) -> AugmentationPolicy:
        if self.augmentation is None:
            return base
        o = self.augmentation
        return AugmentationPolicy(
            max_new_per_origin=(
                o.max_new_per_origin if o.max_new_per_origin is not None else base.max_new_per_origin
            ),
            distance_cutoff_km=(
                o.distance_cutoff_km if o.distance_cutoff_km is not None else base.distance_cutoff_km
            ),
            restrict_to_congested_feeders=(
                o.restrict_to_congested_feeders
                if o.restrict_to_congested_feeders is not None
                else base.restrict_to_congested_feeders
            ),
        )


class SummaryRow(BaseModel):
    label: str
    cost_reduction: float
    predicted_mean: float
    sd: float
    observed_total: float
    delta_from_observed: str
    delta_from_reference: str | None = None
    marginal_decongestion_mean: float
    hypothetical_share: float


class DestinationEntry(BaseModel):
    dest_id: str
    phi: float
    observed_b: float
    slots: float
    y_mean: float
    y_sd: float
    y_p2_5: float
    y_p97_5: float
    d_total_mean: float
    d_marg_mean: float
    existing_share: float
    classification: str


class ScenarioResponse(BaseModel):
    run_id: str
    summary: SummaryRow
    top_destinations: list[DestinationEntry]
    classification_counts: dict[str, int]
    system: dict[str, Any]


def _run_id_for(request: ScenarioRequest, model_fingerprint: str) -> str:
    payload = json.dumps(
        request.model_dump(exclude={"top_n", "reference_run_id"}), sort_keys=True
    )
    return hashlib.sha256((payload + model_fingerprint).encode()).hexdigest()[:16]


def _top_destinations(report: dict, top_n: int) -> list[DestinationEntry]:
    per_dest = report["allocation"]["per_destination"]
    decomposition = report["decomposition"]["per_destination"]
    entries = []
    for dest_id, stats in per_dest.items():
        split = decomposition[dest_id]
        y_mean = stats["Y"]["mean"]
        existing_share = split["existing_share"]
        entries.append(
            DestinationEntry(
                dest_id=dest_id,
                phi=stats["phi"],
                observed_b=stats["observed_b"],
                slots=stats["slots"],
                y_mean=y_mean,
                y_sd=stats["Y"]["sd"],
                y_p2_5=stats["Y"]["p2.5"],
                y_p97_5=stats["Y"]["p97.5"],
                d_total_mean=stats["D_total"]["mean"],
                d_marg_mean=stats["D_marg"]["mean"],
                existing_share=existing_share,
                classification=stats["classification"],
            )
        )
    entries.sort(key=lambda e: (-e.d_marg_mean, e.dest_id))
    return entries[:top_n]


def _response_from_report(
    report: dict, request: ScenarioRequest, run_id: str, reference_mean: float | None
) -> ScenarioResponse:
    system = report["allocation"]["system"]
    observed_total = report["observed_total"]
    mean = system["Y"]["mean"]
    summary = SummaryRow(
        label=request.label,
        cost_reduction=request.cost_reduction,
        predicted_mean=mean,
        sd=system["Y"]["sd"],
        observed_total=observed_total,
        delta_from_observed=format_percent_change(mean, observed_total),
        delta_from_reference=(
            format_percent_change(mean, reference_mean) if reference_mean else None
        ),
        marginal_decongestion_mean=system["D_marg"]["mean"],
        hypothetical_share=report["decomposition"]["system"]["D_marg"]["hypothetical_share"],
    )
    return ScenarioResponse(
        run_id=run_id,
        summary=summary,
        top_destinations=_top_destinations(report, request.top_n),
        classification_counts=report["allocation"]["classification_counts"],
        system={
            "Y": system["Y"],
            "D_total": report["allocation"]["system"]["D_total"],
            "D_marg": report["allocation"]["system"]["D_marg"],
            "decomposition": report["decomposition"]["system"],
        },
    )


def create_app(
    snapshot: SystemSnapshot | None = None,
    model: FittedModel | None = None,
    policy: AugmentationPolicy | None = None,
) -> FastAPI:
    app = FastAPI(title="gravflow", version="1.0")
    state = {
        "snapshot": snapshot,
        "model": model,
        "policy": policy or AugmentationPolicy(),
        "runs": {},       # run_id -> full report dict
        "responses": {},  # run_id -> ScenarioResponse dict
    }
    app.state.gravflow = state
    lock = threading.Lock()

    @app.exception_handler(RequestValidationError)
    async def invalid_request(_request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "invalid request", "detail": exc.errors()})

    @app.exception_handler(Exception)
    async def internal_error(_request: Request, exc: Exception):
        correlation_id = str(uuid.uuid4())
        return JSONResponse(
            status_code=500,
            content={"error": "internal error", "correlation_id": correlation_id, "type": type(exc).__name__},
        )

    def _require_snapshot() -> SystemSnapshot | JSONResponse:
        if state["snapshot"] is None:
            return JSONResponse(status_code=409, content={"error": "no snapshot loaded"})
        return state["snapshot"]

    @app.get("/v1/system")
    def get_system():
        snap = _require_snapshot()
        if isinstance(snap, JSONResponse):
            return snap
        return to_jsonable(system_summary(snap))

    @app.get("/v1/model")
    def get_model():
        if state["model"] is None:
            return JSONResponse(status_code=409, content={"error": "no model loaded"})
        return to_jsonable(model_to_dict(state["model"]))

    @app.get("/v1/runs/{run_id}")
    def get_run(run_id: str):
        report = state["runs"].get(run_id)
        if report is None:
            return JSONResponse(status_code=404, content={"error": f"unknown run '{run_id}'"})
        return to_jsonable(report)

    def _execute(request: ScenarioRequest, on_seed=None) -> tuple[str, dict]:
        snap = state["snapshot"]
        fit = state["model"]
        fingerprint = hashlib.sha256(
            json.dumps(to_jsonable(fit.coefficients), sort_keys=True).encode()
        ).hexdigest()[:16]
        run_id = _run_id_for(request, fingerprint)
        cached = state["runs"].get(run_id)
        if cached is not None and on_seed is None:
            return run_id, cached
        report = run_scenario(
            snap,
            fit,
            request.scenario(),
            request.policy(state["policy"]),
            on_seed=on_seed,
        )
        report["run_id"] = run_id
        with lock:
            state["runs"][run_id] = report
        return run_id, report

    @app.post("/v1/scenarios/run")
    def post_run(request: ScenarioRequest, stream: bool = False):
        if state["snapshot"] is None or state["model"] is None:
            return JSONResponse(status_code=409, content={"error": "no snapshot/model loaded"})
        reference_mean = None
        if request.reference_run_id:
            ref = state["runs"].get(request.reference_run_id)
            if ref is None:
                return JSONResponse(
                    status_code=400,
                    content={"error": f"unknown reference run '{request.reference_run_id}'"},
                )
            reference_mean = ref["allocation"]["system"]["Y"]["mean"]

        if not stream:
            run_id, report = _execute(request)
            response = _response_from_report(report, request, run_id, reference_mean)
            with lock:
                state["responses"][run_id] = response.model_dump()
            return to_jsonable(response.model_dump())

        # chunked NDJSON: one progress line per completed seed, then the result
        total = len(request.seeds) if request.seeds else request.seed_count
        events: queue.Queue = queue.Queue()

        def on_seed(seed, _pairs, _accepted):
            events.put(("progress", seed))

        def worker():
            try:
                run_id, report = _execute(request, on_seed=on_seed)
                response = _response_from_report(report, request, run_id, reference_mean)
                with lock:
                    state["responses"][run_id] = response.model_dump()
                events.put(("result", to_jsonable(response.model_dump())))
            except Exception as exc:  # surfaced as an error line, stream stays valid
                events.put(("error", str(exc)))

        threading.Thread(target=worker, daemon=True).start()

        def lines():
            completed = 0
            while True:
                kind, payload = events.get()
                if kind == "progress":
                    completed += 1
                    yield json.dumps({"progress": {"completed": completed, "total": total}}) + "\n"
                elif kind == "result":
                    yield json.dumps({"result": payload}) + "\n"
                    return
                else:
                    yield json.dumps({"error": payload}) + "\n"
                    return

        return StreamingResponse(lines(), media_type="application/x-ndjson")

    return app
