"""Scene description layer: an oracle detector over simulator state, and
a loader for detections produced by an external detector.

The oracle reports every cube and both boxes with optional Gaussian
position noise and per-object dropout, standing in for a real detector's
error modes.  Scene files use the JSON shape::

    {"detections": [{"id": ..., "label": ..., "color": ...,
                     "position": [x, y, z], "confidence": ...}]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from poel.sim import BOX_A, BOX_B, SimState, Vec3, World


class SceneFormatError(ValueError):
    """A scene file is malformed; the message names the offending field."""


@dataclass(frozen=True)
class Detection:
    id: str
    label: str  # "cube" or "box"
    color: str
    position: Vec3
    confidence: float


@dataclass(frozen=True)
class SceneDescription:
    detections: tuple[Detection, ...] = ()
    timestamp: int = 0

    def ids(self) -> tuple[str, ...]:
        return tuple(d.id for d in self.detections)

    def find(self, detection_id: str) -> Detection | None:
        for d in self.detections:
            if d.id == detection_id:
                return d
        return None


@dataclass(frozen=True)
class DetectorConfig:
    position_sigma: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.position_sigma < 0:
            raise ValueError("position_sigma must be >= 0")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must be in [0, 1]")


BOX_COLOR = "gray"


def detect_oracle(
    state: SimState,
    world: World,
    config: DetectorConfig,
    rng: np.random.Generator,
) -> SceneDescription:
    """Detect all cubes and boxes from ground truth.

    Each entry survives dropout independently; surviving positions get
    i.i.d. Gaussian noise per axis.  Oracle confidence is fixed at 1.0.
    """
    truth: list[tuple[str, str, str, Vec3]] = [
        (o.id, "cube", o.color, o.position) for o in state.objects
    ]
    for box_id in (BOX_A, BOX_B):
        truth.append((box_id, "box", BOX_COLOR, world.box_center(box_id)))

    detections = []
    for det_id, label, color, pos in truth:
        if rng.random() < config.dropout:
            continue
        noise = rng.normal(0.0, config.position_sigma, size=3)
        noisy = Vec3(pos.x + noise[0], pos.y + noise[1], pos.z + noise[2])
        detections.append(Detection(det_id, label, color, noisy, 1.0))
    return SceneDescription(tuple(detections), timestamp=state.step_index)


_DETECTION_KEYS = {"id", "label", "color", "position", "confidence"}


def load_scene(path) -> SceneDescription:
    """Parse and validate an externally produced scene file."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"not valid JSON: {exc}") from exc

    if not isinstance(raw, dict):
        raise SceneFormatError("top level: expected an object")
    unknown = set(raw) - {"detections", "timestamp"}
    if unknown:
        raise SceneFormatError(f"unknown top-level field '{sorted(unknown)[0]}'")
    entries = raw.get("detections")
    if not isinstance(entries, list):
        raise SceneFormatError("detections: expected a list")
    timestamp = raw.get("timestamp", 0)
    if not isinstance(timestamp, int):
        raise SceneFormatError("timestamp: expected an integer")

    detections = []
    seen = set()
    for i, entry in enumerate(entries):
        where = f"detections[{i}]"
        if not isinstance(entry, dict):
            raise SceneFormatError(f"{where}: expected an object")
        unknown = set(entry) - _DETECTION_KEYS
        if unknown:
            raise SceneFormatError(f"{where}.{sorted(unknown)[0]}: unknown field")
        missing = _DETECTION_KEYS - set(entry)
        if missing:
            raise SceneFormatError(f"{where}.{sorted(missing)[0]}: missing field")
        for key in ("id", "label", "color"):
            if not isinstance(entry[key], str):
                raise SceneFormatError(f"{where}.{key}: expected a string")
        pos = entry["position"]
        if (
            not isinstance(pos, list)
            or len(pos) != 3
            or not all(isinstance(v, (int, float)) for v in pos)
        ):
            raise SceneFormatError(f"{where}.position: expected [x, y, z]")
        if not all(math.isfinite(v) for v in pos):
            raise SceneFormatError(f"{where}.position: must be finite")
        conf = entry["confidence"]
        if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            raise SceneFormatError(f"{where}.confidence: must be in [0, 1]")
        if entry["id"] in seen:
            raise SceneFormatError(f"{where}.id: duplicate id '{entry['id']}'")
        seen.add(entry["id"])
        detections.append(
            Detection(
                entry["id"],
                entry["label"],
                entry["color"],
                Vec3(float(pos[0]), float(pos[1]), float(pos[2])),
                float(conf),
            )
        )
    return SceneDescription(tuple(detections), timestamp=timestamp)
