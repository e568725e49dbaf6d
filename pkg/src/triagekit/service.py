"""HTTP layer: request handling, model fan-out, insights, feedback, retrain.

The controller collects incident data, fans out to the registry, merges per
family, and returns the top-5 recommendation. A request fails with 503 only
when not a single model responded; an empty team list with responding models
is a valid 200 (every model abstained). Validation errors are 400, unknown
ids 404, duplicate feedback 409.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from collections import OrderedDict
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .artifacts import FAMILY_INDEX, FAMILY_SI, current_artifact_path, load_artifact
from .corpus import load_corpus
from .ensemble import Recommendation, apply_rules, load_rules, merge_outputs
from .incident import Incident
from .pipeline import TrainingConfig, TriageSystem, retrain
from .registry import ModelRegistry
from .textprep import extract_key_phrases, incident_token_stream

logger = logging.getLogger(__name__)

REQUEST_RETENTION = 10_000
INSIGHT_NEIGHBORS = 25
INSIGHT_KEYWORDS = 5


class DraftRequest(BaseModel):
    title: str
    summary: str = ""
    severity: int = 4
    incident_type: str = "LSI"
    source_name: str = ""
    originating_service_id: str = ""
    occurring_device_name: str = ""
    raising_dc: str = ""
    keywords: list = []


class RecommendRequest(BaseModel):
    incident_id: str


class FeedbackRequest(BaseModel):
    request_id: str
    chosen_team: str
    accepted: bool = True


class RouteRequest(BaseModel):
    incident_id: str


class FailRequest(BaseModel):
    failed: bool = True


class RetrainRequest(BaseModel):
    corpus_path: str = ""
    seed: int = None


class ServiceState:
    def __init__(self, system: TriageSystem, registry: ModelRegistry, corpus,
                 config: TrainingConfig, serving_root=None, corpus_path=None,
                 rules_dir=None, log_dir=None, fault_injection=False):
        self.system = system
        self.registry = registry
        self.corpus = corpus
        self.config = config
        self.serving_root = Path(serving_root) if serving_root else None
        self.corpus_path = corpus_path
        self.rules_dir = Path(rules_dir) if rules_dir else None
        log_dir = Path(log_dir) if log_dir else None
        self.feedback_log = log_dir / "feedback.jsonl" if log_dir else None
        self.audit_log = log_dir / "audit.jsonl" if log_dir else None
        self.fault_injection = fault_injection
        self.requests = OrderedDict()
        self._log_lock = threading.Lock()

    def remember_request(self, request_id, incident, rec: Recommendation):
        self.requests[request_id] = {
            "incident": incident,
            "teams_shown": rec.team_ids(),
            "feedback": None,
        }
        while len(self.requests) > REQUEST_RETENTION:
            self.requests.popitem(last=False)

    def append_log(self, path, record) -> None:
        if path is None:
            return
        with self._log_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True))
                fh.write("\n")


def _recommend_incident(state: ServiceState, incident) -> Recommendation:
    request_id = "req-" + uuid.uuid4().hex
    fanout = state.registry.collect_outputs(incident)
    if fanout.responded == 0:
        raise HTTPException(
            status_code=503,
            detail=f"all {fanout.total} models failed to return a recommendation",
        )
    grouped = {}
    for output in fanout.outputs:
        family = state.registry.entries[output.model_id].family \
            if output.model_id in state.registry.entries \
            else state.system.bundle.family_of.get(output.model_id, output.model_id)
        grouped.setdefault(family, []).append(output)
    from .ensemble import merge_family

    family_outputs = [
        merge_family(members, family) for family, members in sorted(grouped.items())
    ]
    inputs = [o for o in family_outputs if not o.is_empty()]
    if inputs:
        rec = merge_outputs(inputs, n=5, request_id=request_id,
                            models_responded=fanout.responded, models_total=fanout.total)
    else:
        rec = Recommendation(teams=[], request_id=request_id,
                             models_responded=fanout.responded, models_total=fanout.total)
    state.remember_request(request_id, incident, rec)
    return rec


def create_app(bundle=None, corpus=None, config: TrainingConfig = None,
               serving_root=None, corpus_path=None, rules_dir=None, log_dir=None,
               enable_fault_injection: bool = False, static_dir=None) -> FastAPI:
    """Build the service; test builds pass enable_fault_injection=True."""
    if bundle is None:
        if serving_root is None:
            raise ValueError("need a bundle or a serving_root with a current artifact")
        current = current_artifact_path(serving_root)
        if current is None:
            raise ValueError(f"no current artifact under {serving_root}")
        bundle = load_artifact(current)
    if corpus is None and corpus_path is not None:
        corpus = load_corpus(corpus_path)
    config = config or TrainingConfig()

    system = TriageSystem(bundle)
    registry = ModelRegistry.from_system(system)
    state = ServiceState(system, registry, corpus, config, serving_root=serving_root,
                         corpus_path=corpus_path, rules_dir=rules_dir, log_dir=log_dir,
                         fault_injection=enable_fault_injection)

    app = FastAPI(title="incident triage recommender")
    app.state.service = state

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc.errors())})

    @app.get("/health")
    def health():
        counts = state.registry.counts()
        return {
            "status": "ok" if counts["enabled"] - counts["failed"] > 0 else "degraded",
            "models_total": counts["total"],
            "models_enabled": counts["enabled"],
            "models_failed": counts["failed"],
            "artifact": state.registry.manifest_version,
        }

    @app.post("/recommend")
    def recommend(body: RecommendRequest):
        incident = state.corpus.by_id(body.incident_id) if state.corpus else None
        if incident is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown incident {body.incident_id!r}")
        rec = _recommend_incident(state, incident)
        return rec.to_record()

    @app.post("/recommend/draft")
    def recommend_draft(body: DraftRequest):
        if not body.title.strip():
            raise HTTPException(status_code=400, detail="title must be non-empty")
        incident = Incident(
            id="draft-" + uuid.uuid4().hex,
            created_at=time.time(),
            severity=body.severity if body.severity in (0, 1, 2, 3, 4) else 4,
            incident_type=body.incident_type if body.incident_type in ("LSI", "CRI") else "LSI",
            title=body.title,
            summary=body.summary,
            source_name=body.source_name,
            originating_service_id=body.originating_service_id,
            occurring_device_name=body.occurring_device_name,
            raising_dc=body.raising_dc,
            keywords=[str(k) for k in body.keywords],
            owning_team="",
            routing_path=[],
            status="active",
        )
        rec = _recommend_incident(state, incident)
        return rec.to_record()

    @app.get("/insights")
    def insights(request_id: str = Query(...), team: str = Query(...)):
        entry = state.requests.get(request_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown request {request_id!r}")
        if team not in entry["teams_shown"]:
            raise HTTPException(
                status_code=400,
                detail=f"team {team!r} was not part of recommendation {request_id!r}",
            )
        return _team_insights(state, entry["incident"], team)

    @app.post("/feedback")
    def feedback(body: FeedbackRequest):
        entry = state.requests.get(body.request_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown request {body.request_id!r}")
        if entry["feedback"] is not None:
            raise HTTPException(status_code=409,
                                detail=f"feedback for {body.request_id!r} already recorded")
        off_list = body.chosen_team not in entry["teams_shown"]
        record = {
            "request_id": body.request_id,
            "teams_shown": entry["teams_shown"],
            "chosen_team": body.chosen_team,
            "accepted": body.accepted and not off_list,
            "off_list": off_list,
            "timestamp": time.time(),
        }
        entry["feedback"] = record
        state.append_log(state.feedback_log, record)
        return {"recorded": True, "off_list": off_list}

    @app.post("/route/{team_id}")
    def route(team_id: str, body: RouteRequest):
        incident = state.corpus.by_id(body.incident_id) if state.corpus else None
        if incident is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown incident {body.incident_id!r}")
        rules = []
        rules_file = state.rules_dir / f"{team_id}.json" if state.rules_dir else None
        if rules_file is not None and rules_file.exists():
            rules = load_rules(rules_file)
        else:
            logger.warning("no rules file for team %s; ml-only fallback", team_id)
        rec = _recommend_incident(state, incident)
        team, provenance = apply_rules(rules, incident, rec)
        state.append_log(state.audit_log, {
            "team_workflow": team_id,
            "incident_id": incident.id,
            "decision": team,
            "provenance": provenance,
            "request_id": rec.request_id,
            "timestamp": time.time(),
        })
        return {"team": team, "provenance": provenance, "request_id": rec.request_id}

    @app.post("/admin/retrain")
    def admin_retrain(body: RetrainRequest):
        corpus_path = body.corpus_path or state.corpus_path
        if not corpus_path or state.serving_root is None:
            raise HTTPException(status_code=400,
                                detail="retrain needs a corpus path and a serving root")
        config = state.config
        if body.seed is not None:
            import dataclasses as _dc

            config = _dc.replace(config, seed=body.seed)
        result = retrain(corpus_path, config, state.serving_root)
        if result.promoted:
            new_bundle = load_artifact(current_artifact_path(state.serving_root))
            state.system = TriageSystem(new_bundle)
            state.registry = ModelRegistry.from_system(state.system)
            state.corpus = load_corpus(corpus_path)
        return {
            "promoted": result.promoted,
            "artifact_dir": result.artifact_dir,
            "reason": result.reason,
        }

    @app.post("/admin/models/{model_id}/fail")
    def admin_fail(model_id: str, body: FailRequest):
        if not state.fault_injection:
            raise HTTPException(status_code=404, detail="fault injection not enabled")
        try:
            state.registry.inject_failure(model_id, body.failed)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown model {model_id!r}")
        return {"model_id": model_id, "failed": body.failed}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")

    return app


def _team_insights(state: ServiceState, incident, team) -> dict:
    """Similar-incident evidence for one recommended team."""
    bundle = state.system.bundle
    si_models = [m for m, f in bundle.family_of.items() if f == FAMILY_SI]
    if not si_models:
        return {"team": team, "similar_count": 0, "unique_oces": 0, "keywords": []}
    si = bundle.models[si_models[0]]
    stream = incident_token_stream(incident)
    neighbors = [
        (cid, jac) for cid, jac in si.neighbors_of(stream, k=INSIGHT_NEIGHBORS)
        if si.team_of_.get(cid) == team and cid != incident.id
    ]
    oces = set()
    streams = []
    for cid, _ in neighbors:
        src = state.corpus.by_id(cid) if state.corpus else None
        if src is not None:
            if src.mitigating_oce:
                oces.add(src.mitigating_oce)
            streams.append(incident_token_stream(src))
    idf = {}
    missing_idf = 1.0
    index_models = [m for m, f in bundle.family_of.items() if f == FAMILY_INDEX]
    if index_models:
        index = bundle.models[index_models[0]]
        idf = index.idf_ or {}
        missing_idf = index.default_idf_ or 1.0
    from .textprep import TokenStream

    combined = TokenStream(
        sentences=[s for st in streams for s in st.sentences] or list(stream.sentences)
    )
    keywords = extract_key_phrases(combined, idf, k=INSIGHT_KEYWORDS,
                                   missing_idf=missing_idf) if streams else []
    return {
        "team": team,
        "similar_count": len(neighbors),
        "unique_oces": len(oces),
        "keywords": keywords,
    }
