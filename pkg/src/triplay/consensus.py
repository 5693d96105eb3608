"""Answer extraction, normalization, equivalence judging, and majority voting."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Protocol

from .backends import (
    JUDGE_SYSTEM_MESSAGE,
    GenerationRequest,
    PromptTemplate,
    render_prompt,
)
from .errors import EmptyAnswers, JudgeFailure, MalformedResponse, Transport

logger = logging.getLogger(__name__)

_BOX = "\\boxed{"

KNOWN_TAGS = ("think", "type", "query", "question", "answer")


def extract_boxed(text: str) -> str | None:
    """Content of the last balanced \\boxed{...}, respecting nested braces."""
    result = None
    start = text.find(_BOX)
    while start != -1:
        depth = 1
        i = start + len(_BOX)
        while i < len(text) and depth > 0:
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
            i += 1
        if depth == 0:
            result = text[start + len(_BOX) : i - 1]
        start = text.find(_BOX, start + 1)
    return result


def extract_tagged(text: str, tag: str) -> str | None:
    """Trimmed content between the first <tag> and its closing </tag>, if any."""
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    start = text.find(open_tag)
    if start == -1:
        return None
    end = text.find(close_tag, start + len(open_tag))
    if end == -1:
        return None
    return text[start + len(open_tag) : end].strip()


_THOUSANDS_RE = re.compile(r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$")
_NUMBER_RE = re.compile(r"^[+-]?\d+(\.\d+)?$")


def normalize_answer(s: str) -> str:
    """Canonical answer form: collapsed whitespace, lowercase, no trailing
    periods; numeric strings lose thousands separators, a leading "+", and
    trailing fractional zeros."""
    out = " ".join(s.split()).lower().rstrip(".")
    if _THOUSANDS_RE.match(out):
        out = out.replace(",", "")
    if _NUMBER_RE.match(out):
        out = out.lstrip("+")
        if "." in out:
            out = out.rstrip("0").rstrip(".")
    return out


class AnswerJudge(Protocol):
    def equivalent(self, a: str, b: str) -> bool: ...


@dataclass(frozen=True)
class ExactNormalizedJudge:
    """Offline judge: equivalence is equality of normalized strings."""

    def equivalent(self, a: str, b: str) -> bool:
        return normalize_answer(a) == normalize_answer(b)


def _parse_verdict(reply: str) -> bool | None:
    tokens = reply.strip().split()
    if not tokens:
        return None
    head = re.sub(r"[^a-z]", "", tokens[0].lower())
    if head == "correct":
        return True
    if head == "incorrect":
        return False
    return None


def remote_judge(backend, question: str, gold: str, pred: str, retries: int = 3) -> bool:
    """One equivalence verdict from a generative backend.

    Renders the judge template, requests a single completion, and parses the
    leading correct/incorrect token, retrying on transport errors and on
    unparsable replies.
    """
    prompt = render_prompt(
        PromptTemplate(role="judge"),
        {"question": question, "ground_truth_answer": gold, "predicted_answer": pred},
    )
    request = GenerationRequest(
        prompt=prompt, system=JUDGE_SYSTEM_MESSAGE, n=1, temperature=0.0, max_tokens=16
    )
    last_error: Exception | None = None
    for attempt in range(max(1, retries)):
        try:
            reply = backend.generate(request)[0]
        except Transport as exc:
            last_error = exc
            continue
        verdict = _parse_verdict(reply)
        if verdict is None:
            logger.warning("unparsable judge reply (attempt %d): %.80r", attempt, reply)
            last_error = MalformedResponse(f"judge replied {reply!r}")
            continue
        return verdict
    raise JudgeFailure(f"judge failed after {retries} attempt(s)") from last_error


class RemoteJudge:
    """LLM-backed judge, made symmetric by querying both orders and OR-ing.

    Exact normalized equality short-circuits, which also makes the relation
    reflexive without a network call.
    """

    def __init__(self, backend, question: str = "", retries: int = 3):
        self.backend = backend
        self.question = question
        self.retries = retries

    def equivalent(self, a: str, b: str) -> bool:
        if normalize_answer(a) == normalize_answer(b):
            return True
        return remote_judge(
            self.backend, self.question, a, b, retries=self.retries
        ) or remote_judge(self.backend, self.question, b, a, retries=self.retries)


@dataclass(frozen=True)
class ConsensusResult:
    """Majority-vote outcome: label, class sizes (descending), top share."""

    label: str
    class_sizes: tuple[int, ...]
    score: float


def majority_vote(answers: list[str], judge: AnswerJudge) -> ConsensusResult:
    """Group answers into equivalence classes (union-find closure over the
    pairwise judge) and pick the largest class.

    The label is the lexicographically smallest normalized member of the
    winning class; ties between equal-size classes go to the smaller label.
    """
    if not answers:
        raise EmptyAnswers("majority vote needs at least one answer")
    k = len(answers)
    parent = list(range(k))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(k):
        for j in range(i + 1, k):
            ri, rj = find(i), find(j)
            if ri == rj:
                continue
            if judge.equivalent(answers[i], answers[j]):
                parent[max(ri, rj)] = min(ri, rj)

    classes: dict[int, list[int]] = {}
    for i in range(k):
        classes.setdefault(find(i), []).append(i)
    ranked = sorted(
        (
            (-len(members), min(normalize_answer(answers[m]) for m in members))
            for members in classes.values()
        ),
    )
    top_size = -ranked[0][0]
    label = ranked[0][1]
    sizes = tuple(sorted((len(m) for m in classes.values()), reverse=True))
    return ConsensusResult(label=label, class_sizes=sizes, score=top_size / k)
