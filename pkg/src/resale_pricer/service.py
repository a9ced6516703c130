"""HTTP surface: POST /v1/price, GET /v1/healthz, GET /v1/index/info.

Abstention is a valid business outcome and returns 200 like a priced answer;
only status=error maps to 5xx. The service reads immutable index snapshots
through the pipeline's holder, so a background refresher can swap in a new
snapshot at any time without disturbing in-flight requests.
"""

from __future__ import annotations

import logging
from datetime import datetime, timezone

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .catalog import listing_from_record
from .errors import ValidationError
from .pricer import Pipeline, STATUS_ERROR
from .vecindex import IndexRefresher

logger = logging.getLogger(__name__)


def create_app(pipeline: Pipeline, refresher: IndexRefresher | None = None) -> FastAPI:
    app = FastAPI(title="resale-pricer", version="0.1.0")

    @app.get("/v1/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/v1/index/info")
    def index_info():
        snapshot = pipeline.holder.current
        if snapshot is None:
            return {"available": False, "size": 0}
        age_s = (datetime.now(timezone.utc) - snapshot.built_at).total_seconds()
        return {
            "available": True,
            "size": len(snapshot),
            "dimension": snapshot.dimension,
            "built_at": snapshot.built_at.isoformat(),
            "age_seconds": age_s,
            "graph": snapshot.graph_params.to_dict() if snapshot.graph_params else None,
        }

    @app.post("/v1/price")
    async def price(request: Request):
        body = await request.json()
        try:
            query = listing_from_record(body, require_price=False)
        except (ValidationError, ValueError, TypeError) as exc:
            return JSONResponse(status_code=422, content={"error": str(exc)})
        suggestion = pipeline.suggest_price(query)
        payload = suggestion.to_dict(include_latency=True)
        payload["query_id"] = query.id
        if suggestion.status == STATUS_ERROR:
            return JSONResponse(status_code=500, content=payload)
        return JSONResponse(status_code=200, content=payload)

    if refresher is not None:
        @app.on_event("startup")
        def _start_refresher():
            refresher.start()

        @app.on_event("shutdown")
        def _stop_refresher():
            refresher.stop()

    return app
