"""Deterministic offline stand-in environment: a synthetic image corpus whose
embeddings encode (category, difficulty), a parametric solver whose success
probability follows a logistic skill-vs-difficulty law, and query templates
that let a toy search policy target difficulty bands through real retrieval.

Everything is seeded, so the full optimization loop can be validated at desk
scale with analytic ground truth.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .consensus import ExactNormalizedJudge, extract_boxed
from .diversity import DiversityBatch, repetition_penalty
from .errors import ConfigError
from .grpo import (
    GrpoConfig,
    ToyPolicy,
    group_advantages,
    sample_actions,
    toy_policy_update,
)
from .embedding_index import EmbeddingIndex, ImageRecord, IndexManifest
from .rewards import probe_from_answers, searcher_reward

# Angular frequencies of the difficulty curve. Several incommensurate
# frequencies keep nearby difficulties close in embedding space while pushing
# adjacent retrieval bands past the visual clustering threshold.
FREQUENCIES = (2.0, 5.0, 9.0, 16.0)

# Distinct (adjective, noun) word pairs per difficulty band; templates of the
# same category share only the category token and "view", which keeps their
# pairwise text distance above the default clustering threshold.
_BAND_TERMS = (
    ("sparse", "outline"),
    ("faint", "sketch"),
    ("pale", "overview"),
    ("simple", "layout"),
    ("plain", "arrangement"),
    ("tidy", "composition"),
    ("busy", "pattern"),
    ("layered", "structure"),
    ("dense", "lattice"),
    ("tangled", "network"),
    ("intricate", "mosaic"),
    ("crowded", "montage"),
    ("elaborate", "labyrinth"),
    ("ornate", "tapestry"),
    ("chaotic", "jumble"),
    ("saturated", "collage"),
)

# Question phrasings for the toy questioner. The marker token shifts the
# effective difficulty the solver experiences, so question choice genuinely
# modulates uncertainty.
QUESTION_FORMS = (
    ("glance", -0.35, "At a glance, which headline value does the figure report?"),
    ("skim", -0.25, "Skim the figure: what leading quantity is displayed?"),
    ("plainly", -0.15, "Read plainly, what primary value does the figure give?"),
    ("directly", -0.05, "State directly the measurement encoded by the figure."),
    ("carefully", 0.05, "Inspect carefully: what quantity does the figure yield?"),
    ("derive", 0.15, "Derive the implied value from the relationships in the figure."),
    ("untangle", 0.25, "Untangle the intricate dependencies and compute the resulting value."),
    ("exhaustive", 0.35, "Perform an exhaustive multi-step analysis and report the final value."),
)

_WORD_RE = re.compile(r"[a-z]+")


def question_delta(question: str) -> float:
    """Difficulty shift encoded by the question's marker word (0.0 if none)."""
    tokens = set(_WORD_RE.findall(question.lower()))
    for marker, delta, _ in QUESTION_FORMS:
        if marker in tokens:
            return delta
    return 0.0


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@dataclass
class SyntheticImage:
    record: ImageRecord
    difficulty: float
    answer: str


@dataclass
class SyntheticSolver:
    """Parametric solver: correct with probability logistic((skill - difficulty) / T)."""

    skill: float = 0.5
    noise_temperature: float = 0.15


def solve_probability(solver: SyntheticSolver, difficulty: float) -> float:
    return logistic((solver.skill - difficulty) / solver.noise_temperature)


def canonical_answer(image_id: str) -> str:
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    return str(11 + int.from_bytes(digest[:4], "big") % 89)


def _difficulty_curve(dim: int, blocks: int, block_offset: int, difficulty: float) -> np.ndarray:
    vec = np.zeros(dim)
    for b in range(blocks):
        freq = FREQUENCIES[b % len(FREQUENCIES)] * (1 + b // len(FREQUENCIES))
        angle = freq * difficulty
        vec[block_offset + 2 * b] = math.cos(angle)
        vec[block_offset + 2 * b + 1] = math.sin(angle)
    return vec / math.sqrt(blocks)


def category_direction(
    categories: list[str], category: str, difficulty: float, dim: int
) -> np.ndarray:
    """Unit vector encoding (category, difficulty); categories occupy disjoint
    coordinate blocks, so cross-category cosine similarity is exactly zero."""
    blocks = dim // (2 * len(categories))
    if blocks < 1:
        raise ConfigError(
            f"dim {dim} cannot host {len(categories)} categories (need >= 2 dims each)"
        )
    offset = categories.index(category) * 2 * blocks
    return _difficulty_curve(dim, blocks, offset, difficulty)


def gen_corpus(
    seed: int, count: int, dim: int, categories: list[str], noise: float = 0.02
) -> list[SyntheticImage]:
    """Seeded corpus: uniform difficulties, embeddings on the category's
    difficulty curve plus small noise, renormalized to unit length."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if dim < 4:
        raise ConfigError(f"dim must be >= 4, got {dim}")
    rng = np.random.default_rng(seed)
    images = []
    for i in range(count):
        category = categories[i % len(categories)]
        difficulty = float(rng.uniform())
        vec = category_direction(categories, category, difficulty, dim)
        vec = vec + noise * rng.normal(size=dim)
        vec = vec / np.linalg.norm(vec)
        image_id = f"{category}-{i:06d}"
        record = ImageRecord(
            id=image_id,
            embedding=vec,
            category=category,
            uri=f"synth://{image_id}",
            source="synthetic",
            meta={"difficulty": difficulty, "answer": canonical_answer(image_id)},
        )
        images.append(
            SyntheticImage(
                record=record, difficulty=difficulty, answer=canonical_answer(image_id)
            )
        )
    return images


@dataclass(frozen=True)
class QueryTemplate:
    index: int
    category: str
    band: int
    difficulty: float
    text: str
    embedding: np.ndarray = field(repr=False)


class SyntheticWorld:
    """Immutable world: corpus, flat index, and the query-template table."""

    def __init__(
        self,
        images: list[SyntheticImage],
        categories: list[str],
        dim: int,
        bands_per_category: int = 16,
    ):
        self.images = images
        self.categories = list(categories)
        self.dim = dim
        self.bands = bands_per_category
        manifest = IndexManifest(
            dimension=dim, records=[img.record for img in images]
        )
        self.index = EmbeddingIndex(manifest)
        self._by_id = {img.record.id: img for img in images}
        self.templates: list[QueryTemplate] = []
        for category in self.categories:
            for band in range(bands_per_category):
                adj, noun = _BAND_TERMS[band % len(_BAND_TERMS)]
                suffix = "" if band < len(_BAND_TERMS) else f" {band // len(_BAND_TERMS)}"
                difficulty = (band + 0.5) / bands_per_category
                text = f"{adj} {category} {noun} view{suffix}"
                self.templates.append(
                    QueryTemplate(
                        index=len(self.templates),
                        category=category,
                        band=band,
                        difficulty=difficulty,
                        text=text,
                        embedding=category_direction(
                            self.categories, category, difficulty, dim
                        ),
                    )
                )
        self._by_text = {t.text: t for t in self.templates}

    @classmethod
    def generate(
        cls,
        seed: int,
        count: int,
        dim: int,
        categories: list[str],
        bands_per_category: int = 16,
        noise: float = 0.02,
    ) -> "SyntheticWorld":
        images = gen_corpus(seed, count, dim, list(categories), noise=noise)
        return cls(images, list(categories), dim, bands_per_category)

    @classmethod
    def from_manifest(
        cls, manifest: IndexManifest, bands_per_category: int = 16
    ) -> "SyntheticWorld":
        """Rebuild a world from a manifest whose meta rows carry the latents."""
        images = []
        categories: list[str] = []
        for rec in manifest.records:
            if rec.category not in categories:
                categories.append(rec.category)
            images.append(
                SyntheticImage(
                    record=rec,
                    difficulty=float(rec.meta.get("difficulty", 0.5)),
                    answer=str(rec.meta.get("answer", canonical_answer(rec.id))),
                )
            )
        return cls(images, sorted(categories), manifest.dimension, bands_per_category)

    def image(self, image_id: str) -> SyntheticImage:
        return self._by_id[image_id]

    def template_indices(self, category: str) -> list[int]:
        return [t.index for t in self.templates if t.category == category]

    def embed_query(self, text: str) -> np.ndarray:
        """Template texts map to their band direction; unknown text falls back
        to a hash-seeded unit vector so the pipeline never stalls."""
        template = self._by_text.get(text.strip())
        if template is not None:
            return template.embedding
        digest = hashlib.sha256(text.strip().encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        vec = rng.normal(size=self.dim)
        return vec / np.linalg.norm(vec)


class WorldQueryEmbedder:
    """Embedding-backend adapter over SyntheticWorld.embed_query."""

    def __init__(self, world: SyntheticWorld):
        self._world = world
        self.dimension = world.dim

    def embed(self, text: str) -> np.ndarray:
        return self._world.embed_query(text)


def synthetic_solve(
    solver: SyntheticSolver,
    image: SyntheticImage,
    rng: np.random.Generator,
    delta: float = 0.0,
) -> str:
    """One boxed rollout answer: the canonical answer with probability p, else
    a seeded distractor from the same answer pool."""
    p = solve_probability(solver, image.difficulty + delta)
    if rng.random() < p:
        answer = image.answer
    else:
        while True:
            answer = str(int(rng.integers(11, 100)))
            if answer != image.answer:
                break
    return f"Reading the figure, the value resolves to \\boxed{{{answer}}}."


def _stage_rng(seed: int, step: int) -> np.random.Generator:
    digest = hashlib.sha256(f"stage1:{seed}:{step}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def probe_image(
    world: SyntheticWorld,
    solver: SyntheticSolver,
    image: SyntheticImage,
    m_rollouts: int,
    rng: np.random.Generator,
):
    """m neutral-probe rollouts -> voted ProbeResult over the boxed answers."""
    judge = ExactNormalizedJudge()
    raw = [synthetic_solve(solver, image, rng) for _ in range(m_rollouts)]
    answers = [extract_boxed(text) or "" for text in raw]
    return probe_from_answers(answers, judge)


def simulate_stage1(
    world: SyntheticWorld,
    solver: SyntheticSolver,
    policy: ToyPolicy,
    steps: int,
    group_size: int = 8,
    m_rollouts: int = 10,
    tau_txt: float = 0.5,
    tau_vis: float = 0.1,
    learning_rate: float = 0.35,
    seed: int = 0,
    update: bool = True,
    grpo_cfg: GrpoConfig | None = None,
) -> list[dict]:
    """Run the search-probe-reward loop over the world's query templates and
    return per-step stats: mean challenge reward, mean repetition penalty, and
    mean |accuracy - 1/2| of the probed samples.

    The policy's logits are updated in place (one masked sub-policy per
    category) unless update is False, which gives the untrained baseline.
    """
    cfg = grpo_cfg or GrpoConfig()
    stats: list[dict] = []
    for step in range(steps):
        rng = _stage_rng(seed, step)
        challenges: list[float] = []
        penalties: list[float] = []
        gaps: list[float] = []
        for category in world.categories:
            indices = world.template_indices(category)
            sub = ToyPolicy(policy.logits[indices], policy.temperature)
            actions = sample_actions(sub, group_size, rng)
            logp_old = sub.log_probabilities()[actions]
            templates = [world.templates[indices[a]] for a in actions]
            images = []
            probes = []
            for template in templates:
                record, _ = world.index.retrieve(template.embedding, 1)[0]
                image = world.image(record.id)
                images.append(image)
                probes.append(probe_image(world, solver, image, m_rollouts, rng))
            batch = DiversityBatch(
                items=[
                    (t.text, img.record.embedding)
                    for t, img in zip(templates, images)
                ]
            )
            batch_penalties = repetition_penalty(batch, tau_txt, tau_vis)
            records = [
                searcher_reward([probe], penalty)
                for probe, penalty in zip(probes, batch_penalties)
            ]
            finals = [rec.final for rec in records]
            advantages = group_advantages(finals, std_epsilon=cfg.std_epsilon)
            if update and any(advantages):
                updated = toy_policy_update(
                    sub, actions, logp_old, advantages, cfg, learning_rate
                )
                policy.logits[indices] = updated.logits
            challenges.extend(rec.challenge for rec in records)
            penalties.extend(batch_penalties)
            gaps.extend(abs(p.accuracy - 0.5) for p in probes)
        stats.append(
            {
                "step": step,
                "challenge_mean": float(np.mean(challenges)),
                "penalty_mean": float(np.mean(penalties)),
                "acc_gap_mean": float(np.mean(gaps)),
            }
        )
    return stats


def selected_difficulties(
    world: SyntheticWorld,
    policy: ToyPolicy,
    samples: int,
    rng: np.random.Generator,
) -> list[float]:
    """Difficulties of top-1 retrieved images for template draws from the policy."""
    out = []
    per_category = samples // len(world.categories)
    for category in world.categories:
        indices = world.template_indices(category)
        sub = ToyPolicy(policy.logits[indices], policy.temperature)
        actions = sample_actions(sub, per_category, rng)
        for a in actions:
            template = world.templates[indices[a]]
            record, _ = world.index.retrieve(template.embedding, 1)[0]
            out.append(world.image(record.id).difficulty)
    return out


def ks_statistic_uniform(values: list[float]) -> float:
    """Kolmogorov-Smirnov statistic of a sample against Uniform[0, 1]."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    upper = np.arange(1, n + 1) / n - v
    lower = v - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))
