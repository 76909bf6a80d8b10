"""Stateless reward service for GRPO trainers.

    POST /v1/reward   {"trace": {...}, "response": str, "answer": str,
                       "lambda_v"?: float, "lambda_f"?: float}
    GET  /healthz

Responses to /v1/reward carry the exact bytes ``visreflect score`` prints.
"""

from __future__ import annotations

import json
import logging
import math

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from .config import RewardConfig
from .errors import DEGENERATE_ERRORS, RewardInputError, TraceValidationError
from .rewards import score_rollout
from .trace import trace_from_dict

log = logging.getLogger(__name__)


class BadRequest(Exception):
    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


def _number(body: dict, key: str, default: float) -> float:
    if key not in body or body[key] is None:
        return default
    v = body[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise BadRequest(key, "must be a finite number")
    return float(v)


def parse_reward_body(raw: bytes, defaults: RewardConfig):
    try:
        body = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise BadRequest("<body>", f"malformed JSON: {exc}") from None
    if not isinstance(body, dict):
        raise BadRequest("<body>", "expected a JSON object")
    for key in ("trace", "response", "answer"):
        if key not in body:
            raise BadRequest(key, "missing required field")
    if not isinstance(body["response"], str):
        raise BadRequest("response", "must be a string")
    if not isinstance(body["answer"], str) or not body["answer"].strip():
        raise BadRequest("answer", "must be a non-empty string")
    try:
        trace = trace_from_dict(body["trace"])
    except TraceValidationError as exc:
        raise BadRequest(f"trace.{exc.field}", exc.constraint) from None
    return (
        trace,
        body["response"],
        body["answer"],
        _number(body, "lambda_v", defaults.lambda_v),
        _number(body, "lambda_f", defaults.lambda_f),
    )


def create_app(reward: RewardConfig | None = None) -> FastAPI:
    reward = reward or RewardConfig()
    app = FastAPI(title="visreflect reward service")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/v1/reward")
    async def score(request: Request):
        raw = await request.body()
        try:
            trace, response, answer, lambda_v, lambda_f = parse_reward_body(raw, reward)
            breakdown = score_rollout(response, answer, trace, lambda_v, lambda_f, cap=reward.cap)
        except BadRequest as exc:
            return JSONResponse({"error": "BadRequest", "field": exc.field, "detail": str(exc)}, status_code=400)
        except DEGENERATE_ERRORS as exc:
            return JSONResponse({"error": type(exc).__name__, "detail": str(exc)}, status_code=422)
        except RewardInputError as exc:
            return JSONResponse({"error": "BadRequest", "field": "<body>", "detail": str(exc)}, status_code=400)
        except Exception:
            log.exception("reward scoring failed")
            return JSONResponse({"error": "InternalError"}, status_code=500)
        return Response(breakdown.to_json(), media_type="application/json")

    return app


def serve(host: str, port: int, reward: RewardConfig | None = None) -> None:
    import uvicorn

    uvicorn.run(create_app(reward), host=host, port=port, log_level="info")
