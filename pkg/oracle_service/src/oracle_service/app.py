"""FastAPI app exposing a victim checkpoint as a black-box loss oracle.

Wire contract:

* ``POST /loss`` with ``{"task": "classification", "image": <b64>, "label": int}``
  returns ``{"loss": float, "predicted": int}``; with
  ``{"task": "identification", "image": <b64>, "ref_image": <b64>}`` returns
  ``{"loss": float, "cosine": float}``. Images are base64-encoded
  little-endian float32 arrays in H*W*C order matching ``/metadata``.
* ``GET /metadata`` returns ``{"input_dims", "num_classes" | "embed_dim",
  "model_tag"}``.

Malformed requests get a 400 with a reason; model evaluation failures a
500. The service keeps no state between requests and returns the loss
only (no logits) unless constructed with ``debug=True``.
"""

from __future__ import annotations

import base64
import binascii

import numpy as np
from fastapi import FastAPI, HTTPException, Request

from .model import VictimModel


class BadRequest(HTTPException):
    def __init__(self, reason: str):
        super().__init__(status_code=400, detail=reason)


def _decode_image(field: str, payload: dict, dims) -> np.ndarray:
    blob = payload.get(field)
    if not isinstance(blob, str):
        raise BadRequest(f"missing or non-string field {field!r}")
    try:
        raw = base64.b64decode(blob, validate=True)
    except (binascii.Error, ValueError):
        raise BadRequest(f"field {field!r} is not valid base64")
    if len(raw) % 4:
        raise BadRequest(f"field {field!r} payload is not float32-aligned")
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(dims))
    if arr.size != expected:
        raise BadRequest(
            f"field {field!r} holds {arr.size} float32 values, expected {expected}"
        )
    return arr.reshape(dims).astype(np.float64)


def create_app(model: VictimModel, debug: bool = False) -> FastAPI:
    app = FastAPI(title="loss-oracle", docs_url=None, redoc_url=None)

    @app.get("/metadata")
    def metadata():
        meta = {"input_dims": list(model.input_dims), "model_tag": model.tag}
        if model.kind == "classifier":
            meta["num_classes"] = model.num_classes
        else:
            meta["embed_dim"] = model.embed_dim
        return meta

    @app.post("/loss")
    async def loss(request: Request):
        try:
            payload = await request.json()
        except Exception:
            raise BadRequest("body is not valid JSON")
        if not isinstance(payload, dict):
            raise BadRequest("body must be a JSON object")
        task = payload.get("task")
        if task not in ("classification", "identification"):
            raise BadRequest(f"unknown task {task!r}")

        image = _decode_image("image", payload, model.input_dims)
        try:
            if task == "classification":
                label = payload.get("label")
                if not isinstance(label, int) or isinstance(label, bool):
                    raise BadRequest("field 'label' must be an integer")
                if model.kind != "classifier":
                    raise BadRequest("model does not support classification")
                if not 0 <= label < model.num_classes:
                    raise BadRequest(f"label {label} outside [0, {model.num_classes})")
                value, predicted = model.classification_loss(image, label)
                body = {"loss": value, "predicted": predicted}
                if debug:
                    body["logits"] = model.logits(image).tolist()
                return body
            if model.kind != "embedder":
                raise BadRequest("model does not support identification")
            ref = _decode_image("ref_image", payload, model.input_dims)
            value, cosine = model.identification_loss(image, ref)
            return {"loss": value, "cosine": cosine}
        except HTTPException:
            raise
        except Exception as exc:  # model failure
            raise HTTPException(status_code=500, detail=f"model evaluation failed: {exc}")

    return app
