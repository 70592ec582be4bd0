"""Semantic planning: task text -> expert weight simplex.

A pluggable backend produces a raw text reply scoring each expert; the reply
is parsed (JSON first, regex fallback) and normalized with a softmax.  The
mock backend scores experts by keyword overlap with the task text and is fully
deterministic; the http backend speaks the ubiquitous chat-completion wire
format and is replayed from fixtures in tests.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass

import numpy as np

from .core import BackendUnavailable, InvalidInput, ParseFailure, Simplex, softmax
from .experts import ExpertLibrary

log = logging.getLogger(__name__)

API_KEY_ENV = "SEMANTIC_API_KEY"

_STOPWORDS = frozenset(
    "the a an to and of it at by in on is be for with then still any out".split()
)


@dataclass(frozen=True)
class TaskDescription:
    text: str
    task_id: str

    def __post_init__(self):
        if not self.text:
            raise InvalidInput("task text must be non-empty")


@dataclass(frozen=True)
class PlannerResponse:
    raw_text: str
    per_expert_scores: np.ndarray


@dataclass(frozen=True)
class SemanticPlannerConfig:
    backend: str = "mock"
    temperature: float = 0.3
    endpoint_url: str | None = None
    model_name: str | None = None
    max_retries: int = 2

    def __post_init__(self):
        if self.backend not in ("mock", "http"):
            raise InvalidInput(f"unknown semantic backend {self.backend!r}")
        if self.temperature < 0:
            raise InvalidInput("temperature must be >= 0")
        if self.backend == "http" and not self.endpoint_url:
            raise InvalidInput("http backend requires endpoint_url")


def build_prompt(task: TaskDescription, library: ExpertLibrary) -> str:
    """Deterministic scoring prompt listing every expert id and description."""
    lines = [
        "You control a robot through a fixed library of expert skills.",
        f"Task: {task.text}",
        "Available experts:",
    ]
    for d in library.descriptors:
        lines.append(f"- {d.id}: {d.description}")
    lines.append(
        "Reply with a single JSON object mapping each expert id to a numeric "
        "relevance score, e.g. "
        + json.dumps({d.id: 0 for d in library.descriptors}, sort_keys=False)
        + ". Higher means more relevant. No other text."
    )
    return "\n".join(lines)


def _tokens(text: str) -> set:
    return {t for t in re.findall(r"[a-z0-9]+", text.lower()) if t not in _STOPWORDS}


def mock_scores(task: TaskDescription, library: ExpertLibrary) -> np.ndarray:
    """Keyword-overlap scores: shared content words between task and expert."""
    task_tokens = _tokens(task.text)
    return np.array(
        [len(task_tokens & _tokens(f"{d.id} {d.description}")) for d in library.descriptors],
        dtype=np.float64,
    )


def parse_response(raw: str, library: ExpertLibrary) -> PlannerResponse:
    """Extract one score per expert id from a backend reply.

    Primary path parses the first JSON object in the text; fallback scans for
    `id: number` / `id = number` pairs.  Missing ids score 0.  If no id can be
    recovered at all the reply is unusable and ParseFailure is raised.
    """
    if not raw:
        raise ParseFailure("empty reply")
    found: dict[str, float] = {}
    match = re.search(r"\{.*?\}", raw, re.DOTALL)
    if match:
        try:
            obj = json.loads(match.group(0))
            if isinstance(obj, dict):
                for d in library.descriptors:
                    if d.id in obj and isinstance(obj[d.id], (int, float)):
                        found[d.id] = float(obj[d.id])
        except json.JSONDecodeError:
            pass
    if not found:
        for d in library.descriptors:
            m = re.search(
                rf"\b{re.escape(d.id)}\b\s*[:=]\s*(-?\d+(?:\.\d+)?)", raw, re.IGNORECASE
            )
            if m:
                found[d.id] = float(m.group(1))
    if not found:
        raise ParseFailure(f"no expert score recoverable from reply: {raw[:200]!r}")
    scores = np.array([found.get(d.id, 0.0) for d in library.descriptors])
    if not np.all(np.isfinite(scores)):
        raise ParseFailure("non-finite score in reply")
    return PlannerResponse(raw_text=raw, per_expert_scores=scores)


def _default_transport(payload: dict, cfg: SemanticPlannerConfig) -> dict:
    import requests

    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(API_KEY_ENV)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    resp = requests.post(cfg.endpoint_url, json=payload, headers=headers, timeout=30)
    resp.raise_for_status()
    return resp.json()


def _query_backend(prompt, task, library, cfg, transport) -> str:
    if cfg.backend == "mock":
        scores = mock_scores(task, library)
        return json.dumps(dict(zip(library.ids, scores.tolist())))
    payload = {
        "model": cfg.model_name or "default",
        "temperature": cfg.temperature,
        "messages": [{"role": "user", "content": prompt}],
    }
    send = transport or (lambda p: _default_transport(p, cfg))
    last_err = None
    for _ in range(cfg.max_retries + 1):
        try:
            reply = send(payload)
            return reply["choices"][0]["message"]["content"]
        except Exception as err:  # transport or malformed envelope; retry
            last_err = err
    raise BackendUnavailable(f"http backend failed after {cfg.max_retries + 1} attempts: {last_err}")


def plan(
    task: TaskDescription,
    library: ExpertLibrary,
    cfg: SemanticPlannerConfig,
    transport=None,
) -> Simplex:
    """Map a task description to softmax-normalized expert weights.

    Parse failures are retried up to max_retries; if every attempt fails the
    planner degrades to uniform weights with a logged warning.  Transport
    failures on the http backend raise BackendUnavailable.
    """
    prompt = build_prompt(task, library)
    for _ in range(cfg.max_retries + 1):
        raw = _query_backend(prompt, task, library, cfg, transport)
        try:
            resp = parse_response(raw, library)
        except ParseFailure:
            continue
        return softmax(resp.per_expert_scores)
    log.warning("semantic planner could not parse any reply for task %r; using uniform weights", task.task_id)
    return Simplex.uniform(library.K)
