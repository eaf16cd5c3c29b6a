"""HTTP JSON API hosting trained checkpoints and live acquisition sessions.

Endpoints: GET /health, GET /models, POST /models/{id}/sessions,
GET /sessions/{sid}, GET /sessions/{sid}/recommendation,
POST /sessions/{sid}/observe, GET /sessions/{sid}/curve.

Each session tracks one case: the client reveals feature values one at a
time and the service ranks the remaining candidates by estimated
information about the target, using the session's own observed set.
Sessions live in memory, snapshot to JSON on every mutation, and resume
from the snapshot directory on restart.  Every payload carries
``schema_version``.  After shutdown begins, session endpoints answer 410.
"""

from __future__ import annotations

import logging
import threading
import uuid
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .data import (CATEGORICAL, CONTINUOUS_KINDS, DataError, ORDINAL,
                   schema_to_json)
from .model import canonical_json
from .saia import estimate_reward

log = logging.getLogger(__name__)

PAYLOAD_VERSION = 1


def parse_raw_value(col, value) -> float:
    """Client-supplied raw value -> normalized cell; DataError names the field."""
    if col.kind == CATEGORICAL:
        if not isinstance(value, str) or value not in col.class_labels:
            raise DataError(f"column {col.name!r}: unknown class label {value!r}")
        return float(col.class_labels.index(value))
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DataError(f"column {col.name!r}: expected a number, got {value!r}")
    if col.kind == ORDINAL:
        if float(value) != int(value) or not 0 <= int(value) < col.level_count:
            raise DataError(f"column {col.name!r}: level {value!r} outside "
                            f"[0, {col.level_count})")
        return float(int(value))
    raw = float(value)
    if not col.min - 1e-9 <= raw <= col.max + 1e-9:
        raise DataError(f"column {col.name!r}: value {raw} outside "
                        f"[{col.min}, {col.max}]")
    return float(col.normalize(raw))


class Session:
    """One live acquisition case; mutations serialize on the session lock."""

    def __init__(self, sid: str, model_id: str, model, seed: int,
                 outer_samples: int, inner_samples: int,
                 prediction_draws: int):
        self.id = sid
        self.model_id = model_id
        self.model = model
        self.seed = int(seed)
        self.outer_samples = outer_samples
        self.inner_samples = inner_samples
        self.prediction_draws = prediction_draws
        d = len(model.schema)
        self.x = np.zeros(d)
        self.mask = np.zeros(d, dtype=bool)
        self.observed = {}      # feature name -> raw value as received
        self.history = []       # append-only, one entry per API observation
        self.curve = []         # predictive summary per step, step 0 first
        self.lock = threading.Lock()
        self._names = [c.name for c in model.schema]
        self._last_ranking = None   # (step, recommended, ranking)

    # ------------------------------------------------------------ state

    @property
    def target(self) -> int:
        return self.model.target

    @property
    def step(self) -> int:
        return len(self.history)

    def candidate_indices(self) -> list:
        return [d for d in range(len(self._names))
                if d != self.target and not self.mask[d]]

    def seal(self):
        """Compute the step-0 prediction once initial observations are set."""
        self.curve.append(self._predict())

    def _predict(self) -> dict:
        model, col = self.model, self.model.schema[self.target]
        point, draws = model.predict_target(
            self.x[None], self.mask[None],
            mc_samples=self.prediction_draws, master_seed=self.seed)
        if col.kind in CONTINUOUS_KINDS:
            lo, hi = np.quantile(np.clip(draws[0], 0.0, 1.0), [0.1, 0.9])
            return {
                "kind": col.kind,
                "mean": float(col.denormalize(float(np.clip(point[0], 0, 1)))),
                "interval": [float(col.denormalize(min(lo, hi))),
                             float(col.denormalize(max(lo, hi)))],
                "spread": float(np.std(draws[0]) * col.span),
            }
        counts = np.bincount(np.rint(draws[0]).astype(np.int64),
                             minlength=col.class_count)
        probs = counts / counts.sum()
        labels = (col.class_labels if col.kind == CATEGORICAL
                  else [str(v) for v in range(col.level_count)])
        return {
            "kind": col.kind,
            "class_probabilities": {lab: float(p)
                                    for lab, p in zip(labels, probs)},
            "point": labels[int(np.argmax(probs))],
        }

    def reward_seed(self) -> int:
        return int(np.random.SeedSequence(
            [self.seed, 37, self.step]).generate_state(1)[0])

    # ----------------------------------------------------------- actions

    def add_observation(self, name: str, value, initial: bool = False):
        if name not in self._names:
            raise DataError(f"unknown feature {name!r}")
        idx = self._names.index(name)
        if idx == self.target or self.mask[idx]:
            detail = "the prediction target" if idx == self.target \
                else "already observed"
            raise Conflict(f"feature {name!r} is not a candidate: {detail}")
        cell = parse_raw_value(self.model.schema[idx], value)
        self.x[idx] = cell
        self.mask[idx] = True
        self.observed[name] = value
        if not initial:
            prediction = self._predict()
            entry = {"step": self.step + 1, "feature": name, "value": value,
                     "prediction": prediction}
            if self._last_ranking and self._last_ranking[0] == self.step:
                entry["recommended"] = self._last_ranking[1]
                entry["reward_ranking"] = self._last_ranking[2]
            self.history.append(entry)
            self.curve.append(prediction)

    def recommendation_doc(self) -> dict:
        cands = self.candidate_indices()
        doc = {"schema_version": PAYLOAD_VERSION, "session": self.id,
               "step": self.step, "prediction": self.curve[-1]}
        if not cands:
            doc["status"] = "complete"
            return doc
        seed = self.reward_seed()
        rewards = [estimate_reward(self.model, self.x[None], self.mask[None],
                                   c, outer_samples=self.outer_samples,
                                   inner_samples=self.inner_samples,
                                   seed=seed).reward
                   for c in cands]
        order = np.argsort(-np.asarray(rewards), kind="stable")
        ranking = [{"feature": self._names[cands[i]], "index": cands[i],
                    "reward": float(rewards[i])} for i in order]
        self._last_ranking = (self.step, ranking[0]["feature"], ranking)
        doc.update(status="active", reward_seed=seed,
                   recommended=ranking[0]["feature"], ranking=ranking)
        return doc

    # ------------------------------------------------------------- docs

    def state_doc(self) -> dict:
        return {
            "schema_version": PAYLOAD_VERSION,
            "id": self.id,
            "model_id": self.model_id,
            "target": self._names[self.target],
            "seed": self.seed,
            "step": self.step,
            "status": "active" if self.candidate_indices() else "complete",
            "observed": dict(self.observed),
            "candidates": [self._names[d] for d in self.candidate_indices()],
            "history": list(self.history),
            "prediction": self.curve[-1],
        }

    def curve_doc(self) -> dict:
        return {"schema_version": PAYLOAD_VERSION, "session": self.id,
                "steps": [{"step": i, "prediction": p}
                          for i, p in enumerate(self.curve)]}

    def snapshot_doc(self) -> dict:
        return {
            "schema_version": PAYLOAD_VERSION,
            "id": self.id,
            "model_id": self.model_id,
            "seed": self.seed,
            "observations": [[n, v] for n, v in self.observed.items()],
            "history": list(self.history),
            "curve": list(self.curve),
        }


class Conflict(Exception):
    """Observation of a feature that is not currently a candidate."""


class SessionStore:
    """All live sessions plus the shared read-only models."""

    def __init__(self, models: dict, state_dir=None, *, outer_samples: int,
                 inner_samples: int, prediction_draws: int):
        self.models = models
        self.state_dir = Path(state_dir) if state_dir else None
        self.samples = (outer_samples, inner_samples, prediction_draws)
        self.sessions = {}
        self.lock = threading.Lock()
        self.closed = False
        if self.state_dir:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            self._resume()

    def model_or_404(self, model_id: str):
        model = self.models.get(model_id)
        if model is None:
            raise HTTPException(404, f"unknown model {model_id!r}")
        return model

    def session_or_404(self, sid: str) -> Session:
        if self.closed:
            raise HTTPException(410, "service shut down; session closed")
        with self.lock:
            session = self.sessions.get(sid)
        if session is None:
            raise HTTPException(404, f"unknown session {sid!r}")
        return session

    def create(self, model_id: str, model, observations: dict,
               seed: int) -> Session:
        sid = uuid.uuid4().hex[:12]
        session = Session(sid, model_id, model, seed, *self.samples)
        for name, value in (observations or {}).items():
            session.add_observation(name, value, initial=True)
        session.seal()
        with self.lock:
            self.sessions[sid] = session
        self.persist(session)
        return session

    def persist(self, session: Session):
        if self.state_dir is None:
            return
        path = self.state_dir / f"session_{session.id}.json"
        path.write_text(canonical_json(session.snapshot_doc()),
                        encoding="utf-8")

    def _resume(self):
        import json
        for path in sorted(self.state_dir.glob("session_*.json")):
            try:
                doc = json.loads(path.read_text(encoding="utf-8"))
                model = self.models.get(doc["model_id"])
                if model is None:
                    log.warning("skipping %s: model %r not served",
                                path.name, doc["model_id"])
                    continue
                session = Session(doc["id"], doc["model_id"], model,
                                  doc["seed"], *self.samples)
                for name, value in doc["observations"]:
                    session.add_observation(name, value, initial=True)
                session.history = list(doc["history"])
                session.curve = list(doc["curve"])
                self.sessions[session.id] = session
            except (KeyError, ValueError, DataError, Conflict) as exc:
                log.warning("skipping unreadable snapshot %s: %s",
                            path.name, exc)

    def close(self):
        with self.lock:
            self.closed = True


class CreateSessionBody(BaseModel):
    observations: dict = {}
    seed: int = 0


class ObserveBody(BaseModel):
    feature: str
    value: Any


def build_app(models: dict, state_dir=None, *, outer_samples: int = 10,
              inner_samples: int = 10, prediction_draws: int = 30) -> FastAPI:
    """Assemble the service around already-loaded models (id -> model)."""
    store = SessionStore(models, state_dir, outer_samples=outer_samples,
                         inner_samples=inner_samples,
                         prediction_draws=prediction_draws)

    @asynccontextmanager
    async def lifespan(app):
        yield
        store.close()

    app = FastAPI(title="acquisition service", lifespan=lifespan)
    app.state.store = store

    @app.get("/health")
    def health():
        return {"schema_version": PAYLOAD_VERSION, "status": "ok",
                "models": len(models)}

    @app.get("/models")
    def list_models():
        out = []
        for mid, model in sorted(models.items()):
            doc = schema_to_json(model.schema)
            out.append({
                "id": mid,
                "target": model.schema[model.target].name,
                "model_kind": "two_stage" if hasattr(model, "dependency")
                              else "flat",
                "columns": doc["columns"],
            })
        return {"schema_version": PAYLOAD_VERSION, "models": out}

    @app.post("/models/{model_id}/sessions", status_code=201)
    def create_session(model_id: str, body: CreateSessionBody):
        if store.closed:
            raise HTTPException(410, "service shut down")
        model = store.model_or_404(model_id)
        try:
            session = store.create(model_id, model, body.observations,
                                   body.seed)
        except (DataError, Conflict) as exc:
            raise HTTPException(422, str(exc))
        return session.state_doc()

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        session = store.session_or_404(sid)
        with session.lock:
            return session.state_doc()

    @app.get("/sessions/{sid}/recommendation")
    def get_recommendation(sid: str):
        session = store.session_or_404(sid)
        with session.lock:
            return session.recommendation_doc()

    @app.post("/sessions/{sid}/observe")
    def observe(sid: str, body: ObserveBody):
        session = store.session_or_404(sid)
        with session.lock:
            try:
                session.add_observation(body.feature, body.value)
            except Conflict as exc:
                raise HTTPException(409, str(exc))
            except DataError as exc:
                raise HTTPException(422, str(exc))
            store.persist(session)
            return session.state_doc()

    @app.get("/sessions/{sid}/curve")
    def get_curve(sid: str):
        session = store.session_or_404(sid)
        with session.lock:
            return session.curve_doc()

    return app
