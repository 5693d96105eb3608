"""Group-relative advantages, the token-level clipped objective, and a toy
softmax policy used to validate the full optimization path at desk scale.

Advantages normalize each reward against its group (or domain) peers using the
population standard deviation plus a small guard; zero-variance groups yield
exactly zero advantages. The clipped objective averages per-token terms within
each response, then averages over responses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateDistribution,
    DomainTooSmall,
    GroupTooSmall,
    LengthMismatch,
)

STD_EPSILON = 1e-8


@dataclass
class GrpoConfig:
    eps_low: float = 0.2
    eps_high: float = 0.2
    std_epsilon: float = STD_EPSILON

    def __post_init__(self):
        if not (0.0 < self.eps_low < 1.0 and 0.0 < self.eps_high < 1.0):
            raise ConfigError(
                f"clip range must satisfy 0 < eps < 1, got "
                f"eps_low={self.eps_low}, eps_high={self.eps_high}"
            )


@dataclass
class Response:
    """One sampled completion with per-token log-probs under both policies."""

    tokens: list
    logp_new: list[float]
    logp_old: list[float]
    reward: float
    advantage: float | None = None

    def __post_init__(self):
        if len(self.logp_new) != len(self.logp_old):
            raise LengthMismatch(
                f"logp_new has {len(self.logp_new)} tokens, "
                f"logp_old has {len(self.logp_old)}"
            )


@dataclass
class ResponseGroup:
    responses: list[Response]
    domain: str | None = None


def group_advantages(rewards, std_epsilon: float = STD_EPSILON) -> list[float]:
    """(r - mean) / (population std + guard); all zeros when variance is zero."""
    arr = np.asarray(list(rewards), dtype=np.float64)
    if arr.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {arr.size}")
    # Identical rewards carry no signal; test equality directly so the rule
    # holds even when float rounding leaves np.std() marginally above zero.
    if np.all(arr == arr[0]):
        return [0.0] * arr.size
    return [float(x) for x in (arr - arr.mean()) / (arr.std() + std_epsilon)]


def domain_advantages(
    groups: list[tuple[float, str]], std_epsilon: float = STD_EPSILON
) -> list[float]:
    """group_advantages applied independently within each domain, preserving order."""
    by_domain: dict[str, list[int]] = {}
    for idx, (_, domain) in enumerate(groups):
        by_domain.setdefault(domain, []).append(idx)
    out = [0.0] * len(groups)
    for domain, indices in by_domain.items():
        if len(indices) < 2:
            raise DomainTooSmall(domain, len(indices))
        values = group_advantages(
            [groups[i][0] for i in indices], std_epsilon=std_epsilon
        )
        for i, value in zip(indices, values):
            out[i] = value
    return out


def token_ratios(logp_new, logp_old) -> list[float]:
    new = np.asarray(logp_new, dtype=np.float64)
    old = np.asarray(logp_old, dtype=np.float64)
    if new.shape != old.shape:
        raise LengthMismatch(f"token counts differ: {new.shape} vs {old.shape}")
    return [float(x) for x in np.exp(new - old)]


def _clipped_terms(ratios: np.ndarray, advantage: float, cfg: GrpoConfig) -> np.ndarray:
    clipped = np.clip(ratios, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high)
    return np.minimum(ratios * advantage, clipped * advantage)


def clipped_objective(
    group: ResponseGroup, cfg: GrpoConfig, advantages: list[float] | None = None
) -> float:
    """Objective value to maximize: token-mean of the clipped terms within each
    response, then mean over the group's responses.

    Advantages attached to the responses (or passed explicitly) take
    precedence; otherwise they are computed from the group's rewards.
    """
    responses = group.responses
    if advantages is None:
        if all(r.advantage is not None for r in responses):
            advantages = [r.advantage for r in responses]
        else:
            advantages = group_advantages(
                [r.reward for r in responses], std_epsilon=cfg.std_epsilon
            )
    if len(advantages) != len(responses):
        raise LengthMismatch(
            f"{len(advantages)} advantages for {len(responses)} responses"
        )
    per_response = []
    for resp, adv in zip(responses, advantages):
        ratios = np.asarray(token_ratios(resp.logp_new, resp.logp_old))
        terms = _clipped_terms(ratios, adv, cfg)
        per_response.append(float(terms.mean()) if terms.size else 0.0)
    return float(np.mean(per_response))


@dataclass
class ToyPolicy:
    """Softmax policy over a finite action set; each action is one token."""

    logits: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")

    def log_probabilities(self) -> np.ndarray:
        z = self.logits / self.temperature
        z = z - z.max()
        return z - np.log(np.exp(z).sum())

    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_probabilities())


def sample_actions(policy: ToyPolicy, group_size: int, rng: np.random.Generator) -> np.ndarray:
    probs = policy.probabilities()
    if np.any(probs == 0.0):
        raise DegenerateDistribution("an action probability underflowed to zero")
    return rng.choice(len(probs), size=group_size, p=probs)


def toy_objective(
    logits,
    temperature: float,
    actions,
    logp_old,
    advantages,
    cfg: GrpoConfig,
) -> float:
    """Clipped objective for single-token responses as a function of the logits."""
    policy = ToyPolicy(np.asarray(logits, dtype=np.float64), temperature)
    logp = policy.log_probabilities()
    ratios = np.exp(logp[np.asarray(actions)] - np.asarray(logp_old, dtype=np.float64))
    terms = _clipped_terms(ratios, np.asarray(advantages, dtype=np.float64), cfg)
    return float(terms.mean())


def toy_objective_gradient(
    logits,
    temperature: float,
    actions,
    logp_old,
    advantages,
    cfg: GrpoConfig,
) -> np.ndarray:
    """Analytic gradient of toy_objective with respect to the logits.

    Each min(ratio * A, clip(ratio) * A) term is piecewise linear in the
    ratio: its slope is A on the active branch and 0 where the clip saturates
    the min (ratio above 1+eps_high for A > 0, below 1-eps_low for A < 0).
    """
    logits = np.asarray(logits, dtype=np.float64)
    actions = np.asarray(actions)
    advantages = np.asarray(advantages, dtype=np.float64)
    policy = ToyPolicy(logits, temperature)
    probs = policy.probabilities()
    logp = policy.log_probabilities()
    ratios = np.exp(logp[actions] - np.asarray(logp_old, dtype=np.float64))
    lo, hi = 1.0 - cfg.eps_low, 1.0 + cfg.eps_high
    slopes = np.where(
        advantages > 0,
        np.where(ratios <= hi, advantages, 0.0),
        np.where(ratios >= lo, advantages, 0.0),
    )
    grad = np.zeros_like(logits)
    coeff = slopes * ratios / temperature
    for a, c in zip(actions, coeff):
        grad[a] += c
    grad -= coeff.sum() * probs
    return grad / len(actions)


def toy_policy_update(
    policy: ToyPolicy,
    actions,
    logp_old,
    advantages,
    cfg: GrpoConfig,
    learning_rate: float,
) -> ToyPolicy:
    """One gradient-ascent step on the clipped objective; returns a new policy."""
    grad = toy_objective_gradient(
        policy.logits, policy.temperature, actions, logp_old, advantages, cfg
    )
    return ToyPolicy(policy.logits + learning_rate * grad, policy.temperature)


def toy_policy_step(
    policy: ToyPolicy,
    sampler: np.random.Generator,
    reward_fn,
    cfg: GrpoConfig,
    learning_rate: float,
    group_size: int = 8,
) -> ToyPolicy:
    """Sample a group from the frozen policy, score it, and ascend the objective.

    reward_fn receives the list of sampled action indices and returns one
    reward per action; zero-variance groups leave the logits unchanged.
    """
    actions = sample_actions(policy, group_size, sampler)
    logp_old = policy.log_probabilities()[actions]
    rewards = reward_fn(list(int(a) for a in actions))
    advantages = group_advantages(rewards, std_epsilon=cfg.std_epsilon)
    return toy_policy_update(policy, actions, logp_old, advantages, cfg, learning_rate)


def gradient_check(
    trials: int = 100, seed: int = 0, h: float = 1e-5, cfg: GrpoConfig | None = None
) -> float:
    """Max relative error between the analytic gradient and central finite
    differences over random configurations, including clip-active ones.

    Configurations whose ratios land within 1e-3 of a clip boundary are
    redrawn: the objective is only piecewise differentiable, so finite
    differences are meaningful strictly inside a branch.
    """
    cfg = cfg or GrpoConfig()
    rng = np.random.default_rng(seed)
    lo, hi = 1.0 - cfg.eps_low, 1.0 + cfg.eps_high
    worst = 0.0
    produced = 0
    while produced < trials:
        n_actions = int(rng.integers(2, 7))
        group = int(rng.integers(2, 9))
        temperature = float(rng.uniform(0.7, 1.5))
        old_logits = rng.normal(size=n_actions)
        new_logits = old_logits + rng.normal(scale=0.4, size=n_actions)
        old_policy = ToyPolicy(old_logits, temperature)
        actions = rng.integers(0, n_actions, size=group)
        logp_old = old_policy.log_probabilities()[actions]
        rewards = rng.normal(size=group)
        advantages = np.asarray(group_advantages(rewards))
        new_policy = ToyPolicy(new_logits, temperature)
        ratios = np.exp(new_policy.log_probabilities()[actions] - logp_old)
        if np.any(np.abs(ratios - lo) < 1e-3) or np.any(np.abs(ratios - hi) < 1e-3):
            continue
        produced += 1
        analytic = toy_objective_gradient(
            new_logits, temperature, actions, logp_old, advantages, cfg
        )
        numeric = np.zeros_like(analytic)
        for k in range(n_actions):
            bump = np.zeros(n_actions)
            bump[k] = h
            up = toy_objective(
                new_logits + bump, temperature, actions, logp_old, advantages, cfg
            )
            down = toy_objective(
                new_logits - bump, temperature, actions, logp_old, advantages, cfg
            )
            numeric[k] = (up - down) / (2 * h)
        scale = max(1e-6, float(np.abs(numeric).max()))
        worst = max(worst, float(np.abs(analytic - numeric).max()) / scale)
    return worst


@dataclass
class BatchRecord:
    """One exported training-batch row for an external trainer."""

    prompt_id: str
    domain: str
    tokens: list
    reward: float
    advantage: float
    extra: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        row = {
            "prompt_id": self.prompt_id,
            "domain": self.domain,
            "tokens": self.tokens,
            "reward": self.reward,
            "advantage": self.advantage,
        }
        row.update(self.extra)
        return row


def write_training_batch(records: list[BatchRecord], path: str | Path) -> None:
    """Append newline-delimited JSON rows consumable by an external trainer."""
    path = Path(path)
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_row(), sort_keys=True) + "\n")
