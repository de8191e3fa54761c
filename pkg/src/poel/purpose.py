"""Purpose resolution: natural-language purpose -> relevant object ids.

Two backends share one output type: a deterministic color/label token
matcher, and a pluggable HTTP endpoint (structured or chat-completion
wire format) that falls back to the rule path on any failure.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

import requests

from .perception import SceneDescription

ENDPOINT_ENV_VAR = "POEL_LLM_ENDPOINT"

SOURCE_RULE = "rule"
SOURCE_LLM = "llm"
SOURCE_LLM_FALLBACK = "llm-fallback-rule"

MODE_STRUCTURED = "structured"
MODE_CHAT = "chat-completion"


class ResolutionError(ValueError):
    """No backend could produce a non-empty set of in-scene object ids."""


@dataclass(frozen=True)
class PurposeText:
    raw: str

    def __post_init__(self):
        if not self.raw.strip():
            raise ValueError("purpose text is empty")


@dataclass(frozen=True)
class ResolvedPurpose:
    purpose: PurposeText
    relevant_ids: frozenset[str]
    source: str

    def __post_init__(self):
        if not self.relevant_ids:
            raise ValueError("relevant_ids must be non-empty")
        if self.source not in (SOURCE_RULE, SOURCE_LLM, SOURCE_LLM_FALLBACK):
            raise ValueError(f"unknown source {self.source!r}")

    def sorted_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.relevant_ids))


@dataclass(frozen=True)
class LlmEndpointConfig:
    url: str
    mode: str = MODE_STRUCTURED
    timeout: float = 10.0
    max_retries: int = 2

    def __post_init__(self):
        if self.mode not in (MODE_STRUCTURED, MODE_CHAT):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


# ---- rule backend ----------------------------------------------------------


def resolve_rule_based(purpose: PurposeText, scene: SceneDescription) -> ResolvedPurpose:
    """Match objects whose color or label token appears in the purpose."""
    if not scene.detections:
        raise ResolutionError("scene is empty")
    tokens = set(re.findall(r"[a-z]+", purpose.raw.lower()))
    matched = frozenset(
        d.id for d in scene.detections
        if d.color.lower() in tokens or d.label.lower() in tokens
    )
    if not matched:
        raise ResolutionError(
            f"no scene object matches purpose {purpose.raw!r}"
        )
    return ResolvedPurpose(purpose=purpose, relevant_ids=matched, source=SOURCE_RULE)


# ---- LLM backend -----------------------------------------------------------


def build_prompt(purpose: PurposeText, scene: SceneDescription) -> str:
    lines = [
        "You assist a tabletop robot. The user's purpose is:",
        purpose.raw,
        "",
        "Objects in the scene:",
    ]
    for d in scene.detections:
        lines.append(f"- id={d.id} label={d.label} color={d.color}")
    lines.append("")
    lines.append(
        "Answer with only a JSON array of the ids of the objects relevant "
        "to the purpose, e.g. [\"obj-1\"]."
    )
    return "\n".join(lines)


def _first_json_array(text: str) -> list | None:
    decoder = json.JSONDecoder()
    for start in (m.start() for m in re.finditer(r"\[", text)):
        try:
            value, _ = decoder.raw_decode(text, start)
        except ValueError:
            continue
        if isinstance(value, list):
            return value
    return None


def _extract_chat_reply(body: dict | str) -> str:
    # Accept both OpenAI-shaped {"choices":[{"message":{"content":..}}]}
    # and bare {"reply": ...} / plain-text bodies.
    if isinstance(body, str):
        return body
    choices = body.get("choices")
    if isinstance(choices, list) and choices:
        message = choices[0].get("message", {})
        if isinstance(message, dict) and isinstance(message.get("content"), str):
            return message["content"]
    reply = body.get("reply")
    if isinstance(reply, str):
        return reply
    return json.dumps(body)


def _query_endpoint(
    purpose: PurposeText, scene: SceneDescription, cfg: LlmEndpointConfig, url: str
) -> list:
    """One request/parse attempt; raises on any wire or format problem."""
    if cfg.mode == MODE_STRUCTURED:
        payload = {
            "purpose": purpose.raw,
            "objects": [
                {"id": d.id, "label": d.label, "color": d.color}
                for d in scene.detections
            ],
        }
        response = requests.post(url, json=payload, timeout=cfg.timeout)
        response.raise_for_status()
        ids = response.json().get("relevant_ids")
        if not isinstance(ids, list):
            raise ValueError("response lacks a relevant_ids array")
        return ids
    payload = {
        "messages": [{"role": "user", "content": build_prompt(purpose, scene)}]
    }
    response = requests.post(url, json=payload, timeout=cfg.timeout)
    response.raise_for_status()
    try:
        body = response.json()
    except ValueError:
        body = response.text
    ids = _first_json_array(_extract_chat_reply(body))
    if ids is None:
        raise ValueError("no JSON array found in chat reply")
    return ids


def resolve_llm(
    purpose: PurposeText, scene: SceneDescription, cfg: LlmEndpointConfig
) -> ResolvedPurpose:
    """Resolve via the endpoint; any failure after retries falls back to rules."""
    url = os.environ.get(ENDPOINT_ENV_VAR, cfg.url)
    scene_ids = set(scene.ids())
    for _ in range(cfg.max_retries + 1):
        try:
            raw_ids = _query_endpoint(purpose, scene, cfg, url)
        except (requests.RequestException, ValueError):
            continue
        if not raw_ids:
            continue
        if not all(isinstance(i, str) for i in raw_ids):
            continue
        ids = frozenset(raw_ids)
        if not ids <= scene_ids:
            continue
        return ResolvedPurpose(purpose=purpose, relevant_ids=ids, source=SOURCE_LLM)
    fallback = resolve_rule_based(purpose, scene)  # raises if rules fail too
    return ResolvedPurpose(
        purpose=purpose,
        relevant_ids=fallback.relevant_ids,
        source=SOURCE_LLM_FALLBACK,
    )
