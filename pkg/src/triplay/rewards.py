"""Reward formulas for the three agent roles and the difficulty window."""

from __future__ import annotations

from dataclasses import dataclass
from statistics import fmean

from .consensus import AnswerJudge, ExactNormalizedJudge, majority_vote
from .errors import EmptyAnswers, EmptyProbes, InvalidWindow, OutOfRange


@dataclass(frozen=True)
class ProbeResult:
    """Answers from m solver rollouts on one task, with the voted consensus."""

    answers: tuple[str, ...]
    consensus: str
    accuracy: float
    m: int


def probe_from_answers(answers: list[str], judge: AnswerJudge | None = None) -> ProbeResult:
    """Vote over rollout answers and measure agreement with the winner."""
    judge = judge if judge is not None else ExactNormalizedJudge()
    vote = majority_vote(answers, judge)
    acc = sum(judge.equivalent(a, vote.label) for a in answers) / len(answers)
    return ProbeResult(
        answers=tuple(answers), consensus=vote.label, accuracy=acc, m=len(answers)
    )


def empirical_accuracy(probe: ProbeResult, judge: AnswerJudge | None = None) -> float:
    """Fraction of the probe's answers equivalent to its consensus label."""
    if probe.m < 1 or not probe.answers:
        raise EmptyAnswers("probe has no answers")
    judge = judge if judge is not None else ExactNormalizedJudge()
    return sum(judge.equivalent(a, probe.consensus) for a in probe.answers) / probe.m


def challenge_reward(acc: float) -> float:
    """1 - 2|acc - 1/2|: peaks at maximum uncertainty, zero at both endpoints."""
    if not 0.0 <= acc <= 1.0:
        raise OutOfRange(f"accuracy {acc} outside [0, 1]")
    return 1.0 - 2.0 * abs(acc - 0.5)


@dataclass(frozen=True)
class RewardRecord:
    challenge: float
    penalty: float
    final: float
    role: str  # "searcher" | "questioner" | "solver"


def searcher_reward(probes: list[ProbeResult], penalty: float) -> RewardRecord:
    """Mean challenge reward over the probe questions, minus the repetition
    penalty, clamped at zero."""
    if not probes:
        raise EmptyProbes("searcher reward needs at least one probe")
    challenge = fmean(challenge_reward(p.accuracy) for p in probes)
    return RewardRecord(
        challenge=challenge,
        penalty=penalty,
        final=max(0.0, challenge - penalty),
        role="searcher",
    )


def questioner_reward(acc: float, text_penalty: float) -> RewardRecord:
    challenge = challenge_reward(acc)
    return RewardRecord(
        challenge=challenge,
        penalty=text_penalty,
        final=max(0.0, challenge - text_penalty),
        role="questioner",
    )


def solver_reward(answer: str, pseudo_label: str, judge: AnswerJudge) -> int:
    """1 iff the judge deems the answer equivalent to the pseudo-label."""
    if not pseudo_label:
        raise ValueError("pseudo-label must be nonempty")
    return int(judge.equivalent(answer, pseudo_label))


def difficulty_filter(acc: float, tau_low: float, tau_high: float) -> bool:
    """True iff accuracy falls strictly inside the open window (tau_low, tau_high)."""
    if not (0.0 <= tau_low < tau_high <= 1.0):
        raise InvalidWindow(f"invalid window ({tau_low}, {tau_high})")
    return tau_low < acc < tau_high
