"""Deterministic offline aligner for the mock provider mode.

Stands in for a vision-language model by reading the persisted geometry
next to the overlay images it is shown, then answering both prompt kinds
with fixed templates and indices derived from that geometry. The whole
pipeline becomes demonstrable end to end with no network or weights.
"""
from __future__ import annotations

import json
import re
from pathlib import Path

from .aligner import load_template

_SLOT_MARKER = "Semantic annotations to map:"
_TYPE_RE = re.compile(r"\{Type:\s*([A-Za-z]+)\s*,")

IDENTIFY_TEMPLATE = '''Object analysis: the image shows a single rigid object with a stable base.

Possible Uses
- "pick and place the {obj}"

Task Stages
- "pick and place the {obj}":
  - 2 stages: "grasp the {obj}", "place the {obj}"

key_primitives = [
    {{Type: Main, Pos: [x, y, z], Orientation: [dx, dy, dz], Stage: "Place the {obj}", Description: "Body center reference for pose alignment"}},
    {{Type: Grasp, Pos: [x, y, z], Orientation: [dx, dy, dz], Stage: "Grasp the {obj}", Description: "Protruding region suited for a secure hold"}},
    {{Type: Anchor, Pos: [x, y, z], Orientation: [dx, dy, dz], Stage: "Place the {obj}", Description: "Base contact point for placement"}},
]
'''


class TemplateMockAligner:
    """Answers identify prompts with a canned decomposition and alignment
    prompts with indices read from the object's geometry.json."""

    def __init__(self):
        self._annotate_head = load_template("annotate_prompt.txt").splitlines()[0]

    @staticmethod
    def _geometry_for(images: list) -> dict:
        if not images:
            raise ValueError("mock aligner needs overlay images to locate geometry")
        geo_path = Path(str(images[0])).parent / "geometry.json"
        return json.loads(geo_path.read_text())

    @staticmethod
    def _object_name(images: list) -> str:
        if not images:
            return "object"
        return Path(str(images[0])).parent.name or "object"

    def send(self, prompt: str, images: list, timeout: float) -> str:
        if prompt.splitlines()[0] == self._annotate_head:
            return IDENTIFY_TEMPLATE.format(obj=self._object_name(images))
        return self._alignment_response(
            self._geometry_for(images), prompt, self._object_name(images)
        )

    @staticmethod
    def _requested_classes(prompt: str) -> set[str]:
        slot = prompt.split(_SLOT_MARKER, 1)
        block = slot[1] if len(slot) == 2 else prompt
        return set(_TYPE_RE.findall(block))

    def _alignment_response(self, geometry: dict, prompt: str, obj: str) -> str:
        kps = geometry["keypoints"]
        if not kps:
            return "{}"
        requested = self._requested_classes(prompt)
        by_index = sorted(kps, key=lambda k: k["index"])
        centroids = [k for k in by_index if k["source"] == "centroid"]
        main = centroids[0] if centroids else by_index[0]
        rest = [k for k in by_index if k["index"] != main["index"]]
        # Grasp: highest point away from the center; anchor: lowest point.
        grasp = max(rest, key=lambda k: k["pos"][2], default=main)
        anchor = min(rest, key=lambda k: k["pos"][2], default=main)
        ori_from = main["index"] if main["index"] != grasp["index"] else anchor["index"]
        doc = {}
        if "Main" in requested:
            doc["Main"] = [{
                "Stage": f"Place the {obj}", "pos_ID": main["index"], "pos_Probability": 0.95,
                "ori_ID": [0, 0, 1], "ori_Probability": 0.95,
                "Pos": "[x, y, z]", "Orientation": "[dx, dy, dz]",
                "Description": "Body center reference for pose alignment",
            }]
        if "Anchor" in requested:
            doc["Anchor"] = [{
                "Stage": f"Place the {obj}", "pos_ID": anchor["index"], "pos_Probability": 0.9,
                "ori_ID": [0, 0, -1], "ori_Probability": 0.9,
                "Pos": "[x, y, z]", "Orientation": "[dx, dy, dz]",
                "Description": "Base contact point for placement",
            }]
        if "Grasp" in requested:
            entry = {
                "Stage": f"Grasp the {obj}", "pos_ID": grasp["index"], "pos_Probability": 0.85,
                "Pos": "[x, y, z]", "Orientation": "[dx, dy, dz]",
                "Description": "Protruding region suited for a secure hold",
            }
            if ori_from != grasp["index"]:
                entry["ori_ID"] = [ori_from, grasp["index"]]
                entry["ori_Probability"] = 0.8
            else:
                entry["ori_ID"] = [0, 0, 1]
                entry["ori_Probability"] = 0.8
            doc["Grasp"] = [entry]
        return json.dumps(doc, ensure_ascii=False)
