"""HTTP service for browsing samples, editing annotations, and reviewing
uncertainty-filtered predictions.

The service is the single writer for annotation files under its dataset
root and never modifies image files. Errors carry machine-readable codes:
{"error": {"code": ..., "message": ...}}.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .data import AnnotationRecord, load_dataset, update_annotation
from .errors import (DataError, DegenerateVertebraError, ParseError,
                     ValidationError, VhskitError)
from .geometry import EF_EPSILON, calc_vhs, classify, distance
from .model import KeypointRegressor, load_snapshot
from .pseudo import mc_predict
from .rng import derive_seed


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse({"error": {"code": code, "message": message}}, status_code=status)


def _parse_points(payload) -> np.ndarray:
    points = payload.get("points") if isinstance(payload, dict) else None
    if not isinstance(points, list) or len(points) != 6:
        raise ValidationError("body needs a points field with exactly 6 [x, y] pairs")
    out = np.empty((6, 2), dtype=np.float64)
    for i, pair in enumerate(points):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ValidationError(f"points[{i}] is not an [x, y] pair")
        try:
            out[i, 0] = float(pair[0])
            out[i, 1] = float(pair[1])
        except (TypeError, ValueError):
            raise ValidationError(f"points[{i}] has a non-numeric coordinate") from None
    if not np.all(np.isfinite(out)):
        raise ValidationError("points must be finite")
    return out


def _score_payload(points: np.ndarray) -> dict:
    if distance(points[4], points[5]) <= EF_EPSILON:
        raise DegenerateVertebraError("vertebral axis EF is degenerate")
    vhs = calc_vhs(points)
    return {"vhs": vhs, "class": int(classify(vhs))}


def create_app(dataset_root: Path | str, *, snapshot_path: Path | str | None = None,
               tau: float = 0.005, k_passes: int = 20, seed: int = 0,
               run_dir: Path | str | None = None) -> FastAPI:
    """Build the app around one dataset and, optionally, one snapshot."""
    root = Path(dataset_root)
    dataset = load_dataset(root)
    model: KeypointRegressor | None = None
    if snapshot_path is not None:
        model = KeypointRegressor.from_snapshot(load_snapshot(snapshot_path))

    app = FastAPI(title="vhskit", docs_url=None, redoc_url=None)
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    prediction_cache: dict[str, object] = {}

    @app.get("/samples")
    def list_samples(split: str | None = None):
        samples = dataset.by_split(split) if split else list(dataset)
        return {"samples": [
            {"id": s.id, "split": s.split, "width": s.width, "height": s.height,
             "provenance": s.provenance, "has_annotation": s.annotation is not None}
            for s in samples]}

    @app.get("/samples/{sample_id}/image")
    def sample_image(sample_id: str):
        try:
            payload = dataset.image_bytes(sample_id)
        except DataError as exc:
            return _error(404, "not_found", str(exc))
        return Response(content=payload, media_type="image/png")

    @app.get("/samples/{sample_id}/annotation")
    def get_annotation(sample_id: str):
        try:
            sample = dataset.get(sample_id)
        except DataError as exc:
            return _error(404, "not_found", str(exc))
        record = sample.annotation
        if record is None:
            return _error(404, "not_found", f"sample {sample_id} has no annotation")
        body = {
            "sample_id": record.sample_id,
            "points": record.points.tolist(),
            "vhs": record.vhs,
            "annotator": record.annotator,
            "timestamp": record.timestamp,
            "provenance": record.provenance,
        }
        if record.vhs is not None:
            body["class"] = int(classify(record.vhs))
        return body

    @app.put("/samples/{sample_id}/annotation")
    async def put_annotation(sample_id: str, request: Request):
        try:
            sample = dataset.get(sample_id)
        except DataError as exc:
            return _error(404, "not_found", str(exc))
        try:
            payload = await request.json()
        except json.JSONDecodeError as exc:
            return _error(422, "parse_error", f"request body is not valid JSON: {exc}")
        try:
            points = _parse_points(payload)
            score = _score_payload(points)
            annotator = str(payload.get("annotator", "ui"))
            record = AnnotationRecord(
                sample_id=sample_id, points=points, vhs=score["vhs"],
                annotator=annotator, timestamp=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                provenance="human")
            stored = update_annotation(root, record)
        except DegenerateVertebraError as exc:
            return _error(422, "degenerate_geometry", str(exc))
        except (ValidationError, ParseError) as exc:
            return _error(422, "validation_error", str(exc))
        sample.annotation = stored
        return score

    @app.post("/vhs")
    async def score_points(request: Request):
        try:
            payload = await request.json()
        except json.JSONDecodeError as exc:
            return _error(422, "parse_error", f"request body is not valid JSON: {exc}")
        try:
            return _score_payload(_parse_points(payload))
        except DegenerateVertebraError as exc:
            return _error(422, "degenerate_geometry", str(exc))
        except ValidationError as exc:
            return _error(422, "validation_error", str(exc))

    @app.get("/predictions/{sample_id}")
    def prediction(sample_id: str, tau: float | None = None):
        if model is None:
            return _error(503, "no_model", "no snapshot loaded; start the server with one")
        threshold = app.state.tau if tau is None else tau
        if not math.isfinite(threshold) or threshold < 0:
            return _error(422, "validation_error", "tau must be a finite non-negative number")
        stats = prediction_cache.get(sample_id)
        if stats is None:
            try:
                image = dataset.get_image(sample_id, size=model.config.input_size)
            except DataError as exc:
                return _error(404, "not_found", str(exc))
            stats = mc_predict(model, image, k_passes, derive_seed(seed, "mc", sample_id))
            prediction_cache[sample_id] = stats
        mu = stats.mu.reshape(6, 2)
        response = {
            "id": sample_id,
            "mu": mu.tolist(),
            "sigma": stats.sigma.reshape(6, 2).tolist(),
            "max_sigma": stats.max_sigma,
            "tau": threshold,
            "confident": bool(stats.max_sigma < threshold),
            "k_passes": k_passes,
        }
        if distance(mu[4], mu[5]) > EF_EPSILON:
            vhs = calc_vhs(mu)
            response["vhs"] = vhs
            response["class"] = int(classify(vhs))
        else:
            response["vhs"] = None
            response["class"] = None
        return response

    @app.get("/pseudo/rounds")
    def pseudo_rounds():
        if run_dir is None:
            return {"rounds": []}
        path = Path(run_dir) / "rounds.jsonl"
        if not path.exists():
            return {"rounds": []}
        rounds = []
        for line in path.read_text("utf-8").splitlines():
            if line.strip():
                rounds.append(json.loads(line))
        return {"rounds": rounds}

    @app.exception_handler(VhskitError)
    async def vhskit_error(_request, exc: VhskitError):
        return _error(400, "bad_request", str(exc))

    app.state.tau = tau
    app.state.dataset = dataset
    return app
