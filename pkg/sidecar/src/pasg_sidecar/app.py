"""Segmentation sidecar service.

Wire protocol (authoritative copy lives with the pipeline's provider):
POST /segment with a multipart image and a ``granularity`` form field;
response ``{"masks": [<base64 PNG>...], "areas": [ints]}``. GET /healthz
answers ``{"ok": true}``. Unknown granularities are 422, malformed bodies
400, and the real-model mode answers 503 until weights are loaded.
"""
from __future__ import annotations

import base64
import io
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Form, UploadFile
from fastapi.responses import JSONResponse
from PIL import Image

from . import fake_model

DEFAULT_GRANULARITY_MAP = {1: "coarse", 2: "medium", 3: "fine"}


@dataclass
class SidecarConfig:
    host: str = "127.0.0.1"
    port: int = 8732
    mode: str = "fake"  # fake | real
    granularity_map: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_GRANULARITY_MAP))

    def __post_init__(self):
        if self.mode not in ("fake", "real"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.granularity_map = {int(k): str(v) for k, v in self.granularity_map.items()}
        ordinals = sorted(self.granularity_map)
        if not ordinals or ordinals[0] < 1:
            raise ValueError("granularity ordinals must start at 1")

    @classmethod
    def from_file(cls, path: Path) -> "SidecarConfig":
        doc = json.loads(Path(path).read_text())
        return cls(
            host=doc.get("host", "127.0.0.1"),
            port=int(doc.get("port", 8732)),
            mode=doc.get("mode", "fake"),
            granularity_map={int(k): v for k, v in doc.get("granularity_map", DEFAULT_GRANULARITY_MAP).items()},
        )


def _encode_mask(mask: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(config: SidecarConfig | None = None) -> FastAPI:
    config = config or SidecarConfig()
    app = FastAPI(title="segmentation sidecar")
    app.state.config = config
    app.state.model = None  # real-mode weights are loaded out of band
    app.state.infer_lock = threading.Lock()  # one inference at a time on the real model

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.post("/segment")
    async def segment(image: UploadFile = File(...), granularity: str = Form(...)):
        try:
            gamma = int(granularity)
        except ValueError:
            return JSONResponse(status_code=400, content={"error": f"granularity must be an integer, got {granularity!r}"})
        if gamma not in config.granularity_map:
            return JSONResponse(status_code=422, content={"error": f"unknown granularity {gamma}"})
        raw = await image.read()
        try:
            arr = np.asarray(Image.open(io.BytesIO(raw)))
        except Exception as exc:
            return JSONResponse(status_code=400, content={"error": f"undecodable image: {exc}"})

        if config.mode == "fake":
            masks = fake_model.segment(arr, gamma)
        else:
            if app.state.model is None:
                return JSONResponse(status_code=503, content={"error": "model loading"})
            with app.state.infer_lock:
                masks = app.state.model(arr, config.granularity_map[gamma])
        return {
            "masks": [_encode_mask(m) for m in masks],
            "areas": [int(m.sum()) for m in masks],
        }

    return app
