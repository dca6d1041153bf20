"""Multi-granularity segmentation behind one interface.

Three providers: procedural (synthesizes from the image, for tests and
the offline demo), file (pre-exported mask directories), and remote (HTTP
client speaking the sidecar wire protocol). The whole primary pipeline
runs offline with the first two.
"""
from __future__ import annotations

import io
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .errors import (
    CorruptFile,
    DimensionMismatch,
    ProviderUnavailable,
    UnknownGranularity,
)
from .masks import BinaryMask, label_components

FOREGROUND_THRESHOLD = 128

# Wire protocol, shared with the sidecar service.
SEGMENT_RESULT_SCHEMA = {
    "type": "object",
    "required": ["masks", "areas"],
    "properties": {
        "masks": {"type": "array", "items": {"type": "string"}},
        "areas": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
    "additionalProperties": False,
}


@dataclass(frozen=True)
class GranularityLevel:
    ordinal: int
    provider_param: str = ""

    def __post_init__(self):
        if self.ordinal < 1:
            raise ValueError("granularity ordinal must be >= 1")


@dataclass
class SegmentationRequest:
    view_key: str
    gamma: int
    expected_size: tuple[int, int]  # (h, w)
    image: np.ndarray | None = None  # (H, W) or (H, W, 3) uint8


@dataclass
class SegmentationResult:
    masks: list[BinaryMask]
    areas: list[int]

    def __post_init__(self):
        if len(self.masks) != len(self.areas):
            raise DimensionMismatch("mask/area count mismatch")


def _check_dims(result: SegmentationResult, expected: tuple[int, int]):
    for m in result.masks:
        if (m.height, m.width) != expected:
            raise DimensionMismatch(
                f"segment is {m.width}x{m.height}, request expects "
                f"{expected[1]}x{expected[0]}"
            )
    return result


def _to_gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr


def fake_model_segments(image: np.ndarray, gamma: int) -> list[np.ndarray]:
    """Deterministic stand-in segmentation.

    Level 1: 8-connected components of the thresholded image, largest first.
    Level 2+: foreground split by the fixed image quadrants (TL, TR, BL,
    BR), empty cells dropped.
    """
    gray = _to_gray(image)
    fg = gray >= FOREGROUND_THRESHOLD
    if not fg.any():
        return []
    if gamma <= 1:
        labels = label_components(BinaryMask(fg))
        order = sorted(
            range(1, int(labels.max()) + 1),
            key=lambda lab: (-int((labels == lab).sum()), int(np.argmax(labels == lab))),
        )
        return [labels == lab for lab in order]
    h, w = fg.shape
    h2, w2 = h // 2, w // 2
    cells = (
        (slice(0, h2), slice(0, w2)),
        (slice(0, h2), slice(w2, w)),
        (slice(h2, h), slice(0, w2)),
        (slice(h2, h), slice(w2, w)),
    )
    out = []
    for rs, cs in cells:
        cell = np.zeros_like(fg)
        cell[rs, cs] = fg[rs, cs]
        if cell.any():
            out.append(cell)
    return out


class ProceduralSegProvider:
    """Synthesizes segments from the request image; fully offline."""

    def __init__(self, levels: tuple[int, ...] = (1, 2, 3)):
        self.levels = tuple(levels)

    def segment(self, request: SegmentationRequest) -> SegmentationResult:
        if request.gamma not in self.levels:
            raise UnknownGranularity(f"gamma {request.gamma} not in {self.levels}")
        if request.image is None:
            raise CorruptFile("procedural provider needs the view image")
        segments = fake_model_segments(request.image, request.gamma)
        masks = [BinaryMask(s) for s in segments]
        result = SegmentationResult(masks=masks, areas=[m.area for m in masks])
        return _check_dims(result, request.expected_size)


class FileSegProvider:
    """Consumes pre-exported masks: ``<root>/<view_key>/gamma_<g>/seg_*.png``."""

    def __init__(self, root: Path, levels: tuple[int, ...] = (1, 2, 3)):
        self.root = Path(root)
        self.levels = tuple(levels)

    def segment(self, request: SegmentationRequest) -> SegmentationResult:
        if request.gamma not in self.levels:
            raise UnknownGranularity(f"gamma {request.gamma} not in {self.levels}")
        view_dir = self.root / request.view_key
        if not view_dir.is_dir():
            raise CorruptFile(f"no exported masks for view {request.view_key!r}")
        gamma_dir = view_dir / f"gamma_{request.gamma}"
        if not gamma_dir.is_dir():
            raise UnknownGranularity(f"missing {gamma_dir}")
        masks = []
        for path in sorted(gamma_dir.glob("seg_*.png")):
            try:
                arr = np.asarray(Image.open(path).convert("L"))
            except Exception as exc:
                raise CorruptFile(f"{path}: {exc}") from exc
            masks.append(BinaryMask(arr >= FOREGROUND_THRESHOLD))
        result = SegmentationResult(masks=masks, areas=[m.area for m in masks])
        return _check_dims(result, request.expected_size)


def encode_mask_png(mask: BinaryMask) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.where(mask.data, 255, 0).astype(np.uint8), mode="L").save(
        buf, format="PNG"
    )
    return buf.getvalue()


def encode_image_png(image: np.ndarray) -> bytes:
    arr = np.asarray(image).astype(np.uint8)
    mode = "RGB" if arr.ndim == 3 else "L"
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


class RemoteSegProvider:
    """HTTP client for the segmentation sidecar.

    POST /segment with multipart image bytes and a granularity field;
    the response is decoded verbatim, dimension bugs surface as errors
    rather than being repaired here.
    """

    def __init__(
        self,
        endpoint: str,
        levels: tuple[int, ...] = (1, 2, 3),
        max_in_flight: int = 4,
        max_retries: int = 3,
        base_delay: float = 1.0,
        timeout: float = 60.0,
        sleeper=time.sleep,
        session=None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.levels = tuple(levels)
        self.max_retries = max_retries
        self.base_delay = base_delay
        self.timeout = timeout
        self._sleeper = sleeper
        self._gate = threading.Semaphore(max_in_flight)
        self._session = session or requests.Session()

    def healthy(self) -> bool:
        try:
            resp = self._session.get(f"{self.endpoint}/healthz", timeout=self.timeout)
        except requests.RequestException:
            return False
        return resp.status_code == 200 and resp.json().get("ok") is True

    def _post(self, png_bytes: bytes, gamma: int):
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleeper(self.base_delay * (2 ** (attempt - 1)))
            try:
                with self._gate:
                    resp = self._session.post(
                        f"{self.endpoint}/segment",
                        files={"image": ("view.png", png_bytes, "image/png")},
                        data={"granularity": str(gamma)},
                        timeout=self.timeout,
                    )
            except requests.RequestException as exc:
                last = exc
                continue
            if resp.status_code == 422:
                raise UnknownGranularity(f"sidecar rejected gamma {gamma}")
            if resp.status_code == 429 or resp.status_code >= 500:
                last = ProviderUnavailable(f"status {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ProviderUnavailable(f"sidecar returned {resp.status_code}: {resp.text}")
            return resp
        raise ProviderUnavailable(f"segment retries exhausted ({last})")

    def segment(self, request: SegmentationRequest) -> SegmentationResult:
        if request.gamma not in self.levels:
            raise UnknownGranularity(f"gamma {request.gamma} not in {self.levels}")
        if request.image is None:
            raise CorruptFile("remote provider needs the view image")
        resp = self._post(encode_image_png(request.image), request.gamma)
        try:
            doc = resp.json()
            raw_masks = doc["masks"]
            areas = [int(a) for a in doc["areas"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderUnavailable(f"malformed sidecar response: {exc}") from exc
        import base64

        masks = []
        for b64 in raw_masks:
            try:
                arr = np.asarray(Image.open(io.BytesIO(base64.b64decode(b64))).convert("L"))
            except Exception as exc:
                raise CorruptFile(f"undecodable mask in response: {exc}") from exc
            masks.append(BinaryMask(arr >= FOREGROUND_THRESHOLD))
        result = SegmentationResult(masks=masks, areas=areas)
        return _check_dims(result, request.expected_size)
