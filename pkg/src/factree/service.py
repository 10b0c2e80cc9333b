"""HTTP facade for recommendations, explanations, and interview sessions.

The model is loaded once and shared read-only; interview sessions live in
an in-memory TTL store, so a restart forgets them (demo-grade by design).
Every error body has the shape {"error": code, "message": text}.
"""
from __future__ import annotations

import threading
import time
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .ingest import Dataset
from .recommend import (
    ANSWERS,
    Explanation,
    InterviewSession,
    RecommendError,
    explain,
    interview_answer,
    interview_recommend,
    interview_start,
    recommend_topk,
)
from .train import FacTModel


def _http_error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"error": code, "message": message})


class SessionStore:
    """Interview sessions keyed by unguessable ids, with TTL and a capacity cap.

    All mutation happens under one lock, which serializes concurrent
    answers to the same session.
    """

    def __init__(self, ttl_seconds: float = 1800.0, capacity: int = 1000):
        if ttl_seconds <= 0 or capacity < 1:
            raise ValueError("ttl_seconds must be > 0 and capacity >= 1")
        self.ttl = ttl_seconds
        self.capacity = capacity
        self._lock = threading.Lock()
        self._sessions: dict[str, InterviewSession] = {}
        self._last_access: dict[str, float] = {}

    def _evict_expired(self, now: float) -> None:
        dead = [sid for sid, at in self._last_access.items() if now - at > self.ttl]
        for sid in dead:
            del self._sessions[sid]
            del self._last_access[sid]

    def put(self, session: InterviewSession) -> None:
        with self._lock:
            now = time.monotonic()
            self._evict_expired(now)
            while len(self._sessions) >= self.capacity:
                oldest = min(self._last_access, key=self._last_access.get)
                del self._sessions[oldest]
                del self._last_access[oldest]
            self._sessions[session.session_id] = session
            self._last_access[session.session_id] = now

    def get(self, session_id: str) -> InterviewSession:
        with self._lock:
            now = time.monotonic()
            self._evict_expired(now)
            session = self._sessions.get(session_id)
            if session is None:
                raise _http_error(404, "session_not_found", "unknown or expired session")
            self._last_access[session_id] = now
            return session

    def answer(self, session_id: str, answer: str, step: int | None) -> InterviewSession:
        """Apply one answer atomically; a stale step loses with 409."""
        with self._lock:
            now = time.monotonic()
            self._evict_expired(now)
            session = self._sessions.get(session_id)
            if session is None:
                raise _http_error(404, "session_not_found", "unknown or expired session")
            self._last_access[session_id] = now
            if session.finished:
                raise _http_error(409, "session_finished", "session already finished")
            if step is not None and step != len(session.log):
                raise _http_error(
                    409,
                    "stale_step",
                    f"expected step {len(session.log)}, got {step}",
                )
            if answer not in ANSWERS:
                raise _http_error(
                    400, "bad_answer", f"answer must be one of {', '.join(ANSWERS)}"
                )
            return interview_answer(session, answer)

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)


class AnswerBody(BaseModel):
    answer: str
    step: Optional[int] = None


def _tree_question_depth(tree) -> int:
    return max(node.depth for node in tree.leaves())


def _session_payload(session: InterviewSession, max_questions: int) -> dict:
    return {
        "session_id": session.session_id,
        "finished": session.finished,
        "answered": len(session.log),
        "max_questions": max_questions,
        "question": session.question(),
        "history": [{"feature": f, "answer": a} for f, a in session.log],
    }


def _explained_item(scored, expl: Explanation) -> dict:
    return {
        "item": scored.item_id,
        "score": scored.score,
        "explanation": expl.rendered,
        "features": expl.feature_names(),
    }


def create_app(
    model: FacTModel,
    dataset: Dataset | None = None,
    ui_dir: str | None = None,
    session_ttl: float = 1800.0,
    session_capacity: int = 1000,
) -> FastAPI:
    """Build the API around one immutable model.

    When a dataset is supplied, known-user recommendations exclude items
    the user already rated. ui_dir, if given, is mounted at /ui.
    """
    app = FastAPI(title="factree", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    store = SessionStore(session_ttl, session_capacity)
    max_questions = _tree_question_depth(model.user_tree)

    @app.exception_handler(HTTPException)
    async def on_http_error(_request: Request, exc: HTTPException):
        detail = exc.detail
        if not isinstance(detail, dict) or "error" not in detail:
            detail = {"error": "error", "message": str(exc.detail)}
        return JSONResponse(status_code=exc.status_code, content=detail)

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(_request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"error": "bad_request", "message": str(exc.errors()[:1])},
        )

    def check_k(k: int) -> int:
        if k < 1:
            raise _http_error(400, "bad_k", "k must be >= 1")
        return k

    @app.post("/api/sessions", status_code=201)
    def start_session():
        session = interview_start(model)
        store.put(session)
        return _session_payload(session, max_questions)

    @app.get("/api/sessions/{session_id}")
    def get_session(session_id: str):
        return _session_payload(store.get(session_id), max_questions)

    @app.post("/api/sessions/{session_id}/answer")
    def post_answer(session_id: str, body: AnswerBody):
        session = store.answer(session_id, body.answer, body.step)
        return _session_payload(session, max_questions)

    @app.get("/api/sessions/{session_id}/recommendations")
    def session_recommendations(session_id: str, k: int = 5):
        check_k(k)
        session = store.get(session_id)
        if not session.finished:
            raise _http_error(
                409, "session_active", "answer the remaining questions first"
            )
        results = interview_recommend(session, k)
        return {
            "session_id": session_id,
            "items": [_explained_item(s, e) for s, e in results],
        }

    @app.get("/api/users/{user_id}/recommendations")
    def user_recommendations(user_id: str, k: int = 5):
        check_k(k)
        try:
            items = recommend_topk(
                model, user_id, k, exclude_seen=dataset is not None, dataset=dataset
            )
        except RecommendError as exc:
            raise _http_error(
                404,
                "unknown_user",
                f"{exc}; start an interview via POST /api/sessions",
            ) from None
        out = []
        for scored in items:
            expl = explain(model, user_id, scored.item_id)
            out.append(_explained_item(scored, expl))
        return {"user": user_id, "items": out}

    @app.get("/api/explanations")
    def get_explanation(user: str, item: str):
        try:
            expl = explain(model, user, item)
        except RecommendError as exc:
            raise _http_error(404, "unknown_entity", str(exc)) from None
        return {
            "user": user,
            "item": item,
            "explanation": expl.rendered,
            "features": expl.feature_names(),
        }

    @app.get("/api/health")
    def health():
        return {
            "status": "ok",
            "users": len(model.user_ids),
            "items": len(model.item_ids),
            "features": len(model.feature_vocab),
            "d": model.d,
            "max_questions": max_questions,
            "user_tree_depth": max_questions,
            "item_tree_depth": _tree_question_depth(model.item_tree),
            "version": model.version,
            "sessions": len(store),
        }

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve(
    model_path: str,
    host: str = "127.0.0.1",
    port: int = 8410,
    data_path: str | None = None,
    ui_dir: str | None = None,
) -> None:
    """Load a model file and run the API with uvicorn (blocking)."""
    import uvicorn

    from .ingest import parse_dataset
    from .train import load_model

    model = load_model(model_path)
    dataset = parse_dataset(data_path) if data_path else None
    app = create_app(model, dataset=dataset, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
