"""Inference service: persistent urgency-ordered case queue with review workflow."""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, File, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response

from . import models
from .dataset import LabelTaxonomy
from .explain import grad_cam, overlay, segment_grid, shapley_attribution, to_pixel_map
from .pipeline import ImageDecodeError, load_and_resize

DEFAULT_SEVERITY = {
    "acral_lentiginous_melanoma": 1.0,
    "blue_finger": 0.8,
    "clubbing": 0.6,
    "onychogryphosis": 0.4,
    "pitting": 0.3,
    "healthy_nail": 0.0,
}

EXPLANATION_METHODS = ("gradcam", "shapley")


class ServiceError(Exception):
    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


class UnknownCaseError(ServiceError):
    def __init__(self, case_id: str):
        super().__init__(f"unknown case {case_id!r}", status=404)


class AlreadyReviewedError(ServiceError):
    def __init__(self, case_id: str):
        super().__init__(f"case {case_id!r} is already reviewed", status=409)


class NoActiveModelError(ServiceError):
    def __init__(self):
        super().__init__("no active model; POST /models/{id}/activate first", status=503)


@dataclass(frozen=True)
class SeverityWeights:
    weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SEVERITY))

    def __post_init__(self):
        for name, w in self.weights.items():
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"severity weight for {name} must be in [0,1], got {w}")
        if self.weights.get("healthy_nail", 0.0) != 0.0:
            raise ValueError("healthy_nail severity must be 0")

    def __getitem__(self, category: str) -> float:
        return self.weights[category]


def priority_score(prediction: dict, weights: SeverityWeights) -> float:
    """severity weight of the argmax category times its probability."""
    return weights[prediction["category"]] * float(max(prediction["probs"]))


@dataclass
class Review:
    decision: str  # confirm | override
    override_category: Optional[str] = None
    note: str = ""
    reviewed_at: float = 0.0


@dataclass
class Case:
    case_id: str
    image_ref: str
    submitted_at: float
    prediction: dict  # {category, probs}
    priority_score: float
    status: str = "pending"  # pending | reviewed
    review: Optional[Review] = None

    def to_json(self) -> dict:
        doc = asdict(self)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Case":
        review = Review(**doc["review"]) if doc.get("review") else None
        return cls(
            case_id=doc["case_id"],
            image_ref=doc["image_ref"],
            submitted_at=doc["submitted_at"],
            prediction=doc["prediction"],
            priority_score=doc["priority_score"],
            status=doc["status"],
            review=review,
        )


class CaseStore:
    """Append-only JSONL event log + content-addressed image directory.

    Every mutation passes through a single lock and is appended to the log;
    a restart replays the log into identical in-memory state.
    """

    def __init__(self, root: str | Path, weights: SeverityWeights | None = None):
        self.root = Path(root)
        self.images_dir = self.root / "images"
        self.log_path = self.root / "events.jsonl"
        self.images_dir.mkdir(parents=True, exist_ok=True)
        self.weights = weights or SeverityWeights()
        self._lock = threading.Lock()
        self._cases: dict[str, Case] = {}
        self._seq = 0
        self._replay()

    def _replay(self) -> None:
        if not self.log_path.exists():
            return
        with open(self.log_path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                self._apply(event)

    def _apply(self, event: dict) -> Case:
        kind = event["event"]
        if kind == "case_submitted":
            case = Case.from_json(event["case"])
            self._cases[case.case_id] = case
            num = int(case.case_id.split("-")[1])
            self._seq = max(self._seq, num)
            return case
        if kind == "case_reviewed":
            case = self._cases[event["case_id"]]
            case.status = "reviewed"
            case.review = Review(**event["review"])
            return case
        raise ServiceError(f"unknown event kind {kind!r} in log", status=500)

    def _commit(self, event: dict) -> Case:
        case = self._apply(event)
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()
        return case

    def store_image(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self.images_dir / f"{digest}.bin"
        if not path.exists():
            path.write_bytes(data)
        return digest

    def image_bytes(self, image_ref: str) -> bytes:
        path = self.images_dir / f"{image_ref}.bin"
        if not path.exists():
            raise ServiceError(f"missing stored image {image_ref}", status=500)
        return path.read_bytes()

    def submit(self, image_bytes: bytes, classifier: models.Classifier) -> Case:
        """Store, predict, score, persist; raises ImageDecodeError on bad bytes."""
        img = load_and_resize(image_bytes, source_id="upload")
        _, probs = classifier.forward(img.pixels[None])
        probs_row = probs[0]
        category = classifier.taxonomy.name(int(probs_row.argmax()))
        prediction = {"category": category, "probs": [float(p) for p in probs_row]}
        with self._lock:
            self._seq += 1
            case = Case(
                case_id=f"case-{self._seq:06d}",
                image_ref=self.store_image(image_bytes),
                submitted_at=time.time(),
                prediction=prediction,
                priority_score=priority_score(prediction, self.weights),
            )
            return self._commit({"event": "case_submitted", "case": case.to_json()})

    def get(self, case_id: str) -> Case:
        case = self._cases.get(case_id)
        if case is None:
            raise UnknownCaseError(case_id)
        return case

    def pending_queue(self) -> list[Case]:
        """Pending cases: priority desc, submitted_at asc, case_id asc."""
        pending = [c for c in self._cases.values() if c.status == "pending"]
        return sorted(pending, key=lambda c: (-c.priority_score, c.submitted_at, c.case_id))

    def review(
        self,
        case_id: str,
        decision: str,
        override_category: str | None = None,
        note: str = "",
        taxonomy: LabelTaxonomy | None = None,
    ) -> Case:
        if decision not in ("confirm", "override"):
            raise ServiceError(f"decision must be confirm or override, got {decision!r}", status=422)
        if decision == "override":
            if not override_category:
                raise ServiceError("override requires override_category", status=422)
            try:
                (taxonomy or LabelTaxonomy()).index(override_category)
            except KeyError:
                raise ServiceError(f"unknown override_category {override_category!r}", status=422)
        with self._lock:
            case = self.get(case_id)
            if case.status == "reviewed":
                raise AlreadyReviewedError(case_id)
            review = Review(
                decision=decision,
                override_category=override_category if decision == "override" else None,
                note=note,
                reviewed_at=time.time(),
            )
            return self._commit(
                {"event": "case_reviewed", "case_id": case_id, "review": asdict(review)}
            )


class InferenceService:
    """Binds a case store, a checkpoint registry, and the explanation cache."""

    def __init__(self, store: CaseStore, models_dir: str | Path, taxonomy: LabelTaxonomy | None = None):
        self.store = store
        self.models_dir = Path(models_dir)
        self.models_dir.mkdir(parents=True, exist_ok=True)
        self.taxonomy = taxonomy or LabelTaxonomy()
        self.cache_dir = store.root / "explanations"
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.active_model_id: str | None = None
        self.classifier: models.Classifier | None = None
        self._explain_lock = threading.Lock()

    def list_models(self) -> list[dict]:
        out = []
        for sub in sorted(self.models_dir.iterdir()):
            if (sub / models.METADATA_FILE).exists():
                meta = json.loads((sub / models.METADATA_FILE).read_text())
                out.append(
                    {
                        "id": sub.name,
                        "backbone": meta.get("backbone_id"),
                        "active": sub.name == self.active_model_id,
                    }
                )
        return out

    def activate(self, model_id: str) -> str:
        path = self.models_dir / model_id
        if not (path / models.METADATA_FILE).exists():
            raise ServiceError(f"unknown model {model_id!r}", status=404)
        self.classifier = models.load(path, taxonomy=self.taxonomy)
        self.active_model_id = model_id
        return model_id

    def require_classifier(self) -> models.Classifier:
        if self.classifier is None:
            raise NoActiveModelError()
        return self.classifier

    def submit_case(self, image_bytes: bytes) -> Case:
        classifier = self.require_classifier()
        try:
            return self.store.submit(image_bytes, classifier)
        except ImageDecodeError as exc:
            raise ServiceError(str(exc), status=422) from exc

    def explanation(self, case_id: str, method: str, target: str | None = None) -> bytes:
        """Serialized explanation payload, cached per (case, method, target)."""
        if method not in EXPLANATION_METHODS:
            raise ServiceError(
                f"unknown method {method!r}; expected one of {EXPLANATION_METHODS}", status=422
            )
        case = self.store.get(case_id)
        target_name = target or case.prediction["category"]
        try:
            target_idx = self.taxonomy.index(target_name)
        except KeyError:
            raise ServiceError(f"unknown target category {target_name!r}", status=422)

        key = f"{case_id}_{method}_{self.taxonomy.name(target_idx)}.json"
        cached = self.cache_dir / key
        if cached.exists():
            return cached.read_bytes()

        with self._explain_lock:
            if cached.exists():
                return cached.read_bytes()
            classifier = self.require_classifier()
            img = load_and_resize(self.store.image_bytes(case.image_ref), source_id=case_id)
            if method == "gradcam":
                attribution = grad_cam(classifier, img, target_idx)
                doc = {
                    "case_id": case_id,
                    "method": method,
                    "target": target_name,
                    "values": attribution.to_json()["values"],
                }
            else:
                seg = segment_grid((4, 4))
                result = shapley_attribution(
                    classifier, img, seg, target_idx, mode="sampled", n_samples=64, sample_seed=0
                )
                attribution = to_pixel_map(result, seg, target_idx)
                doc = {
                    "case_id": case_id,
                    "method": method,
                    "target": target_name,
                    "phi": [float(p) for p in result.phi],
                    "base_value": result.base_value,
                    "full_value": result.full_value,
                    "segments": {"grid": [4, 4], "n_segments": seg.n_segments},
                }
            doc["overlay_png_base64"] = base64.b64encode(overlay(img, attribution)).decode()
            payload = json.dumps(doc, sort_keys=True).encode()
            tmp = cached.with_suffix(".tmp")
            tmp.write_bytes(payload)
            os.replace(tmp, cached)  # atomic cache write
            return payload


def create_app(service: InferenceService):
    """FastAPI application exposing the fixed HTTP+JSON surface."""
    app = FastAPI(title="nailguard inference service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    token = os.environ.get("NAILGUARD_TOKEN", "")

    @app.middleware("http")
    async def check_token(request: Request, call_next):
        if token and request.url.path != "/health" and request.method != "OPTIONS":
            header = request.headers.get("authorization", "")
            if header != f"Bearer {token}":
                return JSONResponse({"detail": "invalid or missing bearer token"}, status_code=401)
        return await call_next(request)

    @app.exception_handler(ServiceError)
    async def service_error_handler(_request, exc: ServiceError):
        return JSONResponse({"detail": str(exc)}, status_code=exc.status)

    def case_payload(case: Case) -> dict:
        return case.to_json()

    @app.get("/health")
    def health():
        return {"status": "ok", "active_model": service.active_model_id}

    @app.get("/models")
    def list_models():
        return service.list_models()

    @app.post("/models/{model_id}/activate")
    def activate(model_id: str):
        service.activate(model_id)
        return {"active_model": model_id}

    @app.post("/cases", status_code=201)
    async def submit_case(file: UploadFile = File(...)):
        data = await file.read()
        case = service.submit_case(data)
        return {
            "case_id": case.case_id,
            "prediction": case.prediction,
            "priority": case.priority_score,
        }

    @app.get("/cases")
    def list_cases(status: str | None = None):
        if status == "pending":
            cases = service.store.pending_queue()
        elif status in (None, "all"):
            cases = sorted(service.store._cases.values(), key=lambda c: c.case_id)
        elif status == "reviewed":
            cases = sorted(
                (c for c in service.store._cases.values() if c.status == "reviewed"),
                key=lambda c: c.case_id,
            )
        else:
            raise ServiceError(f"unknown status filter {status!r}", status=422)
        return [case_payload(c) for c in cases]

    @app.get("/cases/{case_id}")
    def get_case(case_id: str):
        return case_payload(service.store.get(case_id))

    @app.get("/cases/{case_id}/image")
    def get_case_image(case_id: str):
        case = service.store.get(case_id)
        return Response(content=service.store.image_bytes(case.image_ref), media_type="application/octet-stream")

    @app.get("/cases/{case_id}/explanation")
    def get_explanation(case_id: str, method: str = "gradcam", target: str | None = None):
        payload = service.explanation(case_id, method, target)
        return Response(content=payload, media_type="application/json")

    @app.post("/cases/{case_id}/review")
    def review_case(case_id: str, body: dict):
        case = service.store.review(
            case_id,
            decision=body.get("decision", ""),
            override_category=body.get("override_category"),
            note=body.get("note", ""),
            taxonomy=service.taxonomy,
        )
        return case_payload(case)

    return app
