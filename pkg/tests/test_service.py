"""HTTP API: session lifecycle, concurrency guards, error shape, payloads."""
from __future__ import annotations

import time

import pytest
from fastapi.testclient import TestClient

from factree.recommend import explain, interview_start
from factree.service import SessionStore, create_app


@pytest.fixture(scope="module")
def client(trained_model, planted_ds):
    app = create_app(trained_model, dataset=planted_ds)
    with TestClient(app) as c:
        yield c


@pytest.fixture(scope="module")
def vocab(trained_model):
    return set(trained_model.feature_vocab)


def start(client):
    resp = client.post("/api/sessions")
    assert resp.status_code == 201
    return resp.json()


def finish(client, session, answer="unknown"):
    while not session["finished"]:
        resp = client.post(
            f"/api/sessions/{session['session_id']}/answer",
            json={"answer": answer, "step": session["answered"]},
        )
        assert resp.status_code == 200
        session = resp.json()
    return session


class TestHealth:
    def test_payload(self, client, trained_model):
        resp = client.get("/api/health")
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "ok"
        assert body["users"] == len(trained_model.user_ids)
        assert body["items"] == len(trained_model.item_ids)
        assert body["features"] == len(trained_model.feature_vocab)
        assert body["d"] == trained_model.d
        want_depth = max(n.depth for n in trained_model.user_tree.leaves())
        assert body["max_questions"] == want_depth
        assert body["user_tree_depth"] == want_depth
        assert isinstance(body["sessions"], int)

    def test_cors_header(self, client):
        resp = client.get("/api/health", headers={"Origin": "http://example.test"})
        assert resp.headers.get("access-control-allow-origin") == "*"


class TestSessionFlow:
    def test_create_session_payload(self, client):
        session = start(client)
        assert len(session["session_id"]) == 32
        assert session["answered"] == 0
        assert session["history"] == []
        assert session["finished"] is False
        assert session["question"]["prompt"].startswith("How do you like this ")
        assert session["max_questions"] >= 1

    def test_session_ids_are_distinct(self, client):
        assert start(client)["session_id"] != start(client)["session_id"]

    def test_full_interview_and_recommendations(self, client, vocab):
        session = finish(client, start(client), answer="like")
        assert session["question"] is None
        assert session["answered"] == len(session["history"])
        assert all(h["answer"] == "like" for h in session["history"])
        sid = session["session_id"]
        resp = client.get(f"/api/sessions/{sid}/recommendations", params={"k": 3})
        assert resp.status_code == 200
        body = resp.json()
        assert body["session_id"] == sid
        assert len(body["items"]) == 3
        for item in body["items"]:
            assert set(item) == {"item", "score", "explanation", "features"}
            assert set(item["features"]) <= vocab
            assert item["explanation"]
        scores = [it["score"] for it in body["items"]]
        assert scores == sorted(scores, reverse=True)

    def test_get_recommendations_is_repeatable(self, client):
        session = finish(client, start(client))
        sid = session["session_id"]
        a = client.get(f"/api/sessions/{sid}/recommendations", params={"k": 4})
        b = client.get(f"/api/sessions/{sid}/recommendations", params={"k": 4})
        assert a.json() == b.json()

    def test_get_session_reflects_progress(self, client):
        session = start(client)
        sid = session["session_id"]
        client.post(f"/api/sessions/{sid}/answer", json={"answer": "dislike"})
        got = client.get(f"/api/sessions/{sid}").json()
        assert got["answered"] == 1
        assert got["history"][0]["answer"] == "dislike"

    def test_answer_without_step_is_accepted(self, client):
        session = start(client)
        resp = client.post(
            f"/api/sessions/{session['session_id']}/answer", json={"answer": "unknown"}
        )
        assert resp.status_code == 200
        assert resp.json()["answered"] == 1


class TestSessionErrors:
    def test_unknown_session_404(self, client):
        for resp in (
            client.get("/api/sessions/deadbeef"),
            client.get("/api/sessions/deadbeef/recommendations"),
            client.post("/api/sessions/deadbeef/answer", json={"answer": "like"}),
        ):
            assert resp.status_code == 404
            assert resp.json()["error"] == "session_not_found"

    def test_answer_after_finish_409(self, client):
        session = finish(client, start(client))
        resp = client.post(
            f"/api/sessions/{session['session_id']}/answer", json={"answer": "like"}
        )
        assert resp.status_code == 409
        assert resp.json()["error"] == "session_finished"

    def test_stale_step_409(self, client):
        session = start(client)
        sid = session["session_id"]
        first = client.post(f"/api/sessions/{sid}/answer", json={"answer": "like", "step": 0})
        assert first.status_code == 200
        second = client.post(f"/api/sessions/{sid}/answer", json={"answer": "like", "step": 0})
        assert second.status_code == 409
        body = second.json()
        assert body["error"] == "stale_step"
        assert "expected step 1" in body["message"]

    def test_bad_answer_400(self, client):
        session = start(client)
        resp = client.post(
            f"/api/sessions/{session['session_id']}/answer", json={"answer": "maybe"}
        )
        assert resp.status_code == 400
        assert resp.json()["error"] == "bad_answer"

    def test_missing_answer_field_400(self, client):
        session = start(client)
        resp = client.post(f"/api/sessions/{session['session_id']}/answer", json={})
        assert resp.status_code == 400
        assert resp.json()["error"] == "bad_request"

    def test_recommendations_before_finish_409(self, client):
        session = start(client)
        resp = client.get(f"/api/sessions/{session['session_id']}/recommendations")
        assert resp.status_code == 409
        assert resp.json()["error"] == "session_active"

    def test_bad_k_400(self, client):
        session = finish(client, start(client))
        resp = client.get(
            f"/api/sessions/{session['session_id']}/recommendations", params={"k": 0}
        )
        assert resp.status_code == 400
        assert resp.json()["error"] == "bad_k"

    def test_error_bodies_have_uniform_shape(self, client):
        responses = [
            client.get("/api/sessions/missing"),
            client.get("/api/users/ghost/recommendations"),
            client.get("/api/explanations", params={"user": "ghost", "item": "i00"}),
        ]
        for resp in responses:
            assert resp.status_code >= 400
            assert set(resp.json()) == {"error", "message"}


class TestUserEndpoints:
    def test_known_user_recommendations(self, client, trained_model, planted_ds, vocab):
        uid = trained_model.user_ids[0]
        resp = client.get(f"/api/users/{uid}/recommendations", params={"k": 5})
        assert resp.status_code == 200
        body = resp.json()
        assert body["user"] == uid
        assert len(body["items"]) == 5
        seen_ids = {
            trained_model.item_ids[r.item_id]
            for r in planted_ds.reviews
            if r.user_id == 0
        }
        for item in body["items"]:
            assert item["item"] not in seen_ids
            assert set(item["features"]) <= vocab

    def test_unknown_user_404_points_to_interview(self, client):
        resp = client.get("/api/users/ghost/recommendations")
        assert resp.status_code == 404
        body = resp.json()
        assert body["error"] == "unknown_user"
        assert "POST /api/sessions" in body["message"]

    def test_explanations_endpoint_matches_library(self, client, trained_model):
        uid, iid = trained_model.user_ids[2], trained_model.item_ids[3]
        resp = client.get("/api/explanations", params={"user": uid, "item": iid})
        assert resp.status_code == 200
        body = resp.json()
        want = explain(trained_model, uid, iid)
        assert body["explanation"] == want.rendered
        assert body["features"] == want.feature_names()

    def test_explanations_unknown_entity_404(self, client, trained_model):
        resp = client.get(
            "/api/explanations",
            params={"user": trained_model.user_ids[0], "item": "nope"},
        )
        assert resp.status_code == 404
        assert resp.json()["error"] == "unknown_entity"


class TestSessionStore:
    def test_validation(self):
        with pytest.raises(ValueError):
            SessionStore(ttl_seconds=0)
        with pytest.raises(ValueError):
            SessionStore(capacity=0)

    def test_ttl_expiry(self, trained_model):
        store = SessionStore(ttl_seconds=0.05, capacity=10)
        session = interview_start(trained_model)
        store.put(session)
        assert len(store) == 1
        time.sleep(0.08)
        with pytest.raises(Exception) as err:
            store.get(session.session_id)
        assert getattr(err.value, "status_code", None) == 404

    def test_capacity_evicts_oldest(self, trained_model):
        store = SessionStore(ttl_seconds=60, capacity=2)
        sessions = [interview_start(trained_model) for _ in range(3)]
        for i, s in enumerate(sessions):
            store.put(s)
            time.sleep(0.01)
        assert len(store) == 2
        with pytest.raises(Exception):
            store.get(sessions[0].session_id)
        assert store.get(sessions[2].session_id) is sessions[2]

    def test_answer_is_atomic_under_contention(self, trained_model):
        import threading

        store = SessionStore()
        session = interview_start(trained_model)
        if session.finished:
            pytest.skip("tree has no questions")
        store.put(session)
        outcomes = []

        def try_answer():
            try:
                store.answer(session.session_id, "like", step=0)
                outcomes.append("ok")
            except Exception as exc:
                outcomes.append(getattr(exc, "status_code", "err"))

        threads = [threading.Thread(target=try_answer) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert outcomes.count("ok") == 1
        assert outcomes.count(409) == 3
