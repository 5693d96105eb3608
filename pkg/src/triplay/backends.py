"""Pluggable generation and embedding backends plus role prompt templates.

All three agent roles and the judge share one backend interface; the role is
purely a prompt-level distinction. Remote backends speak JSON-over-HTTP chat
completions; scripted backends are pure functions of (seed, request) so tests
and the synthetic world stay deterministic.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    MalformedResponse,
    MissingSlot,
    RateLimited,
    ReplayMiss,
    Transport,
)

logger = logging.getLogger(__name__)

SEARCHER_TEMPLATE = """\
You are an AI Data Engineer. Your task is to generate a unique and concise image retrieval query.

Target Category: {category}
Focus on: {sample_query}

Diversity Requirements:
Vary the Subject: Do not use common examples. Explore different specific objects within the focus area.

Output Format:
<type>{category}</type>
<query>[Concise description emphasizing structure and key markers based on the focus keywords]</query>

Example (Reference only, DO NOT COPY):
<type>{category}</type>
<query>{sample_query}</query>"""

QUESTIONER_TEMPLATE = """\
You are an Expert Visual Reasoning Specialist. Your task is to analyze the image, identify core constraints, and generate a high-quality reasoning question that requires multi-step derivation.

Requirements:
- The Analysis Phase must contain:
  - Visible Elements: List specific labels, numbers, objects, and spatial markers.
  - Constraints: Identify explicit or implicit rules (e.g., parallel lines, gravity, total percentages in a chart).
  - Step-by-Step Solution: Solve your intended question entirely using only the image data to ensure it is mathematically/logically sound.
- No Simple Description: Do NOT ask questions that can be answered by simple object identification, color naming, or simple counting.
- Logical Depth: The question must require interpreting intent, calculating based on visual cues, spatial transformations, or inferring cause-and-effect.

Question Type:
1. short_answer: Requires a short phrase based on logical inference.
2. numeric_value: Requires a calculation or estimation. Provide only the pure number.

Output Format:
<think>A</think>
<type>X</type>
<question>Y</question>
<answer>Z</answer>

Strict Rules:
- A must be the analysis phase.
- X must be one of: short_answer or numeric_value.
- Z must be the minimal correct value (phrase or number).
- Do not add any extra text, labels, or explanations.

Examples of Reasoning-based Questions:

<think>Visible Elements: A balanced scale shows 3 circles on the left and 2 squares on the right. Constraints: Balanced means equal total weight. Step-by-Step Solution: 3c = 2s => s = 1.5c, so a square is heavier than a circle.</think>
<type>short_answer</type>
<question>Which is heavier: one square or one circle?</question>
<answer>square</answer>

<think>Visible Elements: A triangle with base labeled y, left side labeled 12, right side labeled x, base angles labeled 30 degrees (left) and 60 degrees (right), and a right-angle marker at the top indicating 90 degrees. Constraints: A 30-60-90 triangle has side ratios 1:√3:2 (opposite 30, 60, 90 respectively). Step-by-Step Solution: The side 12 is opposite 60 degrees, so 12 = √3k => k = 12/√3 = 4√3. The hypotenuse is y = 2k = 8√3.</think>
<type>numeric_value</type>
<question>Find y.</question>
<answer>8√3</answer>"""

SOLVER_TEMPLATE = """\
Please reason step by step carefully based on the question: {question} and the image.
After completing your reasoning, you MUST output the final, clean, and concise answer strictly inside \\boxed{{}}.
The final answer MUST appear inside \\boxed{{}}, and nowhere else.
If there is no boxed answer, your response is considered incorrect."""

JUDGE_SYSTEM_MESSAGE = (
    "You are an answer evaluation assistant. Your task is to judge whether two "
    "answers are substantially equivalent. When evaluating, you should ignore "
    "superficial differences such as format, spaces, punctuation, case, etc., "
    "and focus on whether they are consistent in core content, logical meaning "
    "and information expression. The judgment criteria should be lenient and "
    "inclusive, as long as the expressed meaning is basically the same, it is "
    "considered equivalent."
)

JUDGE_TEMPLATE = (
    'Given the question {question}, please judge whether the following two '
    'answers express the same meaning. Please only answer "correct" or '
    '"incorrect". Correct answer: {ground_truth_answer}. Answer to be judged: '
    '{predicted_answer}. Judgment result (only answer "correct" or '
    '"incorrect"). You don\'t need to reason, just answer "correct" or '
    '"incorrect". Don\'t say anything else. Only answer "correct" or '
    '"incorrect" directly without thinking.'
)

_ROLE_TEXT = {
    "searcher": SEARCHER_TEMPLATE,
    "questioner": QUESTIONER_TEMPLATE,
    "solver": SOLVER_TEMPLATE,
    "judge": JUDGE_TEMPLATE,
}

_ROLE_SLOTS = {
    "searcher": ("category", "sample_query"),
    "questioner": (),
    "solver": ("question",),
    "judge": ("question", "ground_truth_answer", "predicted_answer"),
}


@dataclass(frozen=True)
class PromptTemplate:
    role: str
    category: str | None = None
    sample_query: str | None = None

    def __post_init__(self):
        if self.role not in _ROLE_TEXT:
            raise ConfigError(f"unknown prompt role {self.role!r}")


def render_prompt(template: PromptTemplate, slots: dict | None = None) -> str:
    """Substitute slot values into the role template; byte-stable across runs."""
    merged: dict[str, str] = {}
    if template.category is not None:
        merged["category"] = template.category
    if template.sample_query is not None:
        merged["sample_query"] = template.sample_query
    merged.update(slots or {})
    required = _ROLE_SLOTS[template.role]
    missing = [name for name in required if merged.get(name) is None]
    if missing:
        raise MissingSlot(
            f"role {template.role!r} is missing slot(s): {', '.join(missing)}"
        )
    return _ROLE_TEXT[template.role].format(**{k: merged[k] for k in required})


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    image_ref: str | None = None
    n: int = 1
    temperature: float = 1.0
    max_tokens: int = 2048
    system: str | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"sample count must be >= 1, got {self.n}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")


def request_fingerprint(request: GenerationRequest, extra: str = "") -> str:
    payload = json.dumps(
        {
            "prompt": request.prompt,
            "image_ref": request.image_ref,
            "n": request.n,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "system": request.system,
            "extra": extra,
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def generate(backend, request: GenerationRequest) -> list[str]:
    """Run one generation call and enforce the exactly-n-completions contract."""
    completions = backend.generate(request)
    if len(completions) < request.n:
        raise MalformedResponse(
            f"backend returned {len(completions)} completions, expected {request.n}"
        )
    return completions[: request.n]


def embed_text(backend, text: str) -> np.ndarray:
    vec = np.asarray(backend.embed(text), dtype=np.float64)
    if vec.ndim != 1:
        raise MalformedResponse(f"embedding must be a vector, got shape {vec.shape}")
    return vec


class ScriptedBackend:
    """Deterministic stand-in: completions are a pure function of (seed, request)."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def generate(self, request: GenerationRequest) -> list[str]:
        return [
            f"scripted:{request_fingerprint(request, extra=f'{self.seed}:{i}')[:16]}"
            for i in range(request.n)
        ]


class ScriptedEmbeddingBackend:
    """Hash-seeded unit vector per text; identical text gives identical output."""

    def __init__(self, dimension: int, seed: int = 0):
        self.dimension = dimension
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        vec = rng.normal(size=self.dimension)
        return vec / np.linalg.norm(vec)


@dataclass
class HttpBackendConfig:
    endpoint: str = ""
    model: str = ""
    auth_env: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5
    in_flight: int = 4
    embedding_endpoint: str = ""
    embedding_model: str = ""


def _requests_transport(url: str, payload: dict, headers: dict, timeout: float):
    import requests

    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise Transport(f"request to {url} failed: {exc}") from exc
    return resp.status_code, resp.text


def _post_with_retry(transport, url, payload, headers, config, sleep) -> dict:
    attempts = max(1, config.max_retries + 1)
    last: Exception | None = None
    for attempt in range(attempts):
        if attempt:
            sleep(config.backoff_base * (2 ** (attempt - 1)))
        try:
            status, text = transport(url, payload, headers, config.timeout)
        except Transport as exc:
            last = exc
            continue
        if status == 429:
            last = RateLimited(f"{url} returned 429")
            continue
        if status >= 500:
            last = Transport(f"{url} returned {status}")
            continue
        if status != 200:
            raise Transport(f"{url} returned {status}: {text[:200]}")
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedResponse(f"{url} returned non-JSON body") from exc
    raise last if last is not None else Transport(f"no response from {url}")


def _image_content(image_ref: str) -> dict:
    if image_ref.startswith(("http://", "https://", "data:")):
        url = image_ref
    else:
        data = Path(image_ref).read_bytes()
        url = "data:image/png;base64," + base64.b64encode(data).decode("ascii")
    return {"type": "image_url", "image_url": {"url": url}}


class HttpChatBackend:
    """JSON-over-HTTP chat-completion client with exponential-backoff retry."""

    def __init__(self, config: HttpBackendConfig, transport=None, sleep=time.sleep):
        if not config.endpoint or not config.model:
            raise ConfigError("remote backend requires endpoint and model")
        self.config = config
        self._transport = transport or _requests_transport
        self._sleep = sleep

    def _headers(self) -> dict:
        import os

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.auth_env, "") if self.config.auth_env else ""
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def generate(self, request: GenerationRequest) -> list[str]:
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        if request.image_ref:
            content = [
                {"type": "text", "text": request.prompt},
                _image_content(request.image_ref),
            ]
        else:
            content = request.prompt
        messages.append({"role": "user", "content": content})
        payload = {
            "model": self.config.model,
            "messages": messages,
            "n": request.n,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        body = _post_with_retry(
            self._transport,
            self.config.endpoint,
            payload,
            self._headers(),
            self.config,
            self._sleep,
        )
        choices = body.get("choices")
        if not isinstance(choices, list) or len(choices) < request.n:
            raise MalformedResponse(
                f"expected {request.n} choices, got {choices if choices is None else len(choices)}"
            )
        out = []
        for choice in choices[: request.n]:
            try:
                out.append(choice["message"]["content"])
            except (TypeError, KeyError) as exc:
                raise MalformedResponse("choice missing message content") from exc
        return out


class HttpEmbeddingBackend:
    """JSON-over-HTTP embedding client sharing the chat client's retry policy."""

    def __init__(self, config: HttpBackendConfig, transport=None, sleep=time.sleep):
        if not config.embedding_endpoint or not config.embedding_model:
            raise ConfigError(
                "remote embedding backend requires embedding_endpoint and embedding_model"
            )
        self.config = config
        self._transport = transport or _requests_transport
        self._sleep = sleep
        self.dimension: int | None = None

    def embed(self, text: str) -> np.ndarray:
        payload = {"model": self.config.embedding_model, "input": text}
        headers = {"Content-Type": "application/json"}
        body = _post_with_retry(
            self._transport,
            self.config.embedding_endpoint,
            payload,
            headers,
            self.config,
            self._sleep,
        )
        try:
            vec = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (TypeError, KeyError, IndexError) as exc:
            raise MalformedResponse("embedding response missing data[0].embedding") from exc
        self.dimension = int(vec.shape[0])
        return vec


class RecordingBackend:
    """Wraps a generative backend and journals every completion to disk.

    Safe under concurrent generate() calls; repeated identical requests are
    disambiguated by an ordinal, so replay is exact as long as identical
    requests are not issued concurrently with each other.
    """

    def __init__(self, inner, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self._counts: dict[str, int] = {}
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> list[str]:
        completions = self.inner.generate(request)
        fp = request_fingerprint(request)
        with self._lock:
            ordinal = self._counts.get(fp, 0)
            self._counts[fp] = ordinal + 1
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {
                            "fingerprint": fp,
                            "ordinal": ordinal,
                            "completions": completions,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        return completions


class ReplayBackend:
    """Serves completions recorded by RecordingBackend, keyed by request."""

    def __init__(self, path: str | Path):
        self._store: dict[tuple[str, int], list[str]] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                self._store[(row["fingerprint"], row["ordinal"])] = row["completions"]
        self._counts: dict[str, int] = {}
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> list[str]:
        fp = request_fingerprint(request)
        with self._lock:
            ordinal = self._counts.get(fp, 0)
            self._counts[fp] = ordinal + 1
        try:
            return self._store[(fp, ordinal)]
        except KeyError:
            raise ReplayMiss(f"no recorded completions for request {fp[:12]}...")
