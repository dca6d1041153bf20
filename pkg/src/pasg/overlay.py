"""Indexed keypoint overlays with the standardized axis colors."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .lifting import AXIS_COLORS, Keypoint3D, OrthoCamera, PrincipalFrame, project_to_view

MARKER_RADIUS = 4
MARKER_FILL = (255, 214, 0)
MARKER_OUTLINE = (0, 0, 0)
LABEL_FILL = (255, 255, 255)
LABEL_BACK = (0, 0, 0)
AXIS_FRACTION = 0.2  # axis segment length as a fraction of image width
AXIS_WIDTH = 2


def _font():
    return ImageFont.load_default()


def render_overlay(
    rgb: np.ndarray | None,
    keypoints: list[Keypoint3D],
    frame: PrincipalFrame,
    cam: OrthoCamera,
    size: tuple[int, int] | None = None,
) -> Image.Image:
    """Draw indexed markers and the red/green/blue frame axes.

    Off-screen projections are skipped. Identical inputs give identical
    pixels, so saved overlays are byte-stable.
    """
    if rgb is not None:
        img = Image.fromarray(np.asarray(rgb).astype(np.uint8), mode="RGB")
    else:
        if size is None:
            raise ValueError("need either an RGB image or an explicit size")
        img = Image.new("RGB", (size[1], size[0]), (0, 0, 0))
    draw = ImageDraw.Draw(img)
    w, h = img.size
    seg_len = AXIS_FRACTION * w

    ox, oy = project_to_view(frame.origin, cam)
    for name, axis in (("x", frame.x_axis), ("y", frame.y_axis), ("z", frame.z_axis)):
        tx, ty = project_to_view(frame.origin + axis, cam)
        dx, dy = tx - ox, ty - oy
        norm = float(np.hypot(dx, dy))
        if norm < 1e-9:
            continue  # axis points along the camera; nothing to draw
        ex = ox + dx / norm * seg_len
        ey = oy + dy / norm * seg_len
        draw.line([(ox, oy), (ex, ey)], fill=AXIS_COLORS[name], width=AXIS_WIDTH)

    font = _font()
    for kp in keypoints:
        px, py = project_to_view(kp.pos, cam)
        if not (0 <= px < w and 0 <= py < h):
            continue
        draw.ellipse(
            [px - MARKER_RADIUS, py - MARKER_RADIUS, px + MARKER_RADIUS, py + MARKER_RADIUS],
            fill=MARKER_FILL,
            outline=MARKER_OUTLINE,
        )
        label = str(kp.index)
        tx = min(max(px + MARKER_RADIUS + 1, 0), w - 8 * len(label))
        ty = min(max(py - MARKER_RADIUS - 9, 0), h - 10)
        bbox = draw.textbbox((tx, ty), label, font=font)
        draw.rectangle(bbox, fill=LABEL_BACK)
        draw.text((tx, ty), label, fill=LABEL_FILL, font=font)
    return img


def overlay_png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_overlay(img: Image.Image, path: Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
