"""Three-stage iteration engine: searcher optimization and active-set
construction, questioner optimization, training-set construction with
majority-vote pseudo-labels and difficulty filtering, and solver batches.

Runs are journaled at stage boundaries and every stage derives its RNG from
(seed, cycle, stage), so a killed run resumes to byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends import (
    GenerationRequest,
    HttpChatBackend,
    HttpEmbeddingBackend,
    PromptTemplate,
    embed_text,
    generate,
    render_prompt,
)
from .config import (
    RunConfig,
    config_to_dict,
    resolve_run_dir,
    validate_config,
)
from .consensus import (
    ExactNormalizedJudge,
    RemoteJudge,
    extract_boxed,
    extract_tagged,
    majority_vote,
)
from .diversity import DiversityBatch, repetition_penalty, text_repetition_penalty
from .embedding_index import EmbeddingIndex, ImageRecord, load_manifest
from .errors import DimensionMismatch, EmptyIndex, JudgeFailure
from .grpo import (
    BatchRecord,
    GrpoConfig,
    ToyPolicy,
    domain_advantages,
    group_advantages,
    sample_actions,
    toy_policy_update,
    write_training_batch,
)
from .rewards import (
    RewardRecord,
    difficulty_filter,
    probe_from_answers,
    questioner_reward,
    searcher_reward,
    solver_reward,
)
from .synthetic_world import (
    QUESTION_FORMS,
    SyntheticSolver,
    SyntheticWorld,
    WorldQueryEmbedder,
    question_delta,
    synthetic_solve,
)

logger = logging.getLogger(__name__)

VALID_QUESTION_TYPES = ("short_answer", "numeric_value")


@dataclass
class Sample:
    """One raw agent completion, with toy-policy bookkeeping when applicable."""

    text: str
    action: int | None = None
    logp_old: float | None = None


@dataclass
class CurriculumItem:
    image_id: str
    question: str
    question_type: str
    pseudo_label: str
    consensus_score: float
    accuracy: float

    def to_row(self) -> dict:
        return {
            "image_id": self.image_id,
            "question": self.question,
            "question_type": self.question_type,
            "pseudo_label": self.pseudo_label,
            "consensus_score": self.consensus_score,
            "accuracy": self.accuracy,
        }

    @classmethod
    def from_row(cls, row: dict) -> "CurriculumItem":
        return cls(
            image_id=row["image_id"],
            question=row["question"],
            question_type=row["question_type"],
            pseudo_label=row["pseudo_label"],
            consensus_score=row["consensus_score"],
            accuracy=row["accuracy"],
        )


# ---------------------------------------------------------------------------
# Role adapters


class SyntheticSearcherRole:
    """Toy query policy over the world's templates, masked per domain."""

    def __init__(self, world: SyntheticWorld, grpo_cfg: GrpoConfig, learning_rate: float):
        self.world = world
        self.cfg = grpo_cfg
        self.learning_rate = learning_rate
        self.policy = ToyPolicy(np.zeros(len(world.templates)))

    def sample(self, category: str, g: int, rng: np.random.Generator) -> list[Sample]:
        indices = self.world.template_indices(category)
        sub = ToyPolicy(self.policy.logits[indices], self.policy.temperature)
        actions = sample_actions(sub, g, rng)
        logp = sub.log_probabilities()
        out = []
        for a in actions:
            template = self.world.templates[indices[a]]
            text = f"<type>{category}</type>\n<query>{template.text}</query>"
            out.append(Sample(text=text, action=int(a), logp_old=float(logp[a])))
        return out

    def apply(self, category: str, samples: list[Sample], advantages: list[float]) -> None:
        if not any(advantages):
            return
        indices = self.world.template_indices(category)
        sub = ToyPolicy(self.policy.logits[indices], self.policy.temperature)
        actions = np.asarray([s.action for s in samples])
        logp_old = np.asarray([s.logp_old for s in samples])
        updated = toy_policy_update(
            sub, actions, logp_old, advantages, self.cfg, self.learning_rate
        )
        self.policy.logits[indices] = updated.logits

    def snapshot(self) -> dict:
        return {"logits": [float(x) for x in self.policy.logits]}

    def restore(self, state: dict) -> None:
        self.policy = ToyPolicy(np.asarray(state["logits"]), self.policy.temperature)


class SyntheticQuestionerRole:
    """Toy question policy over the fixed phrasing forms."""

    def __init__(self, world: SyntheticWorld, grpo_cfg: GrpoConfig, learning_rate: float):
        self.world = world
        self.cfg = grpo_cfg
        self.learning_rate = learning_rate
        self.policy = ToyPolicy(np.zeros(len(QUESTION_FORMS)))

    def _render(self, image_id: str, form_index: int) -> str:
        _, _, question = QUESTION_FORMS[form_index]
        image = self.world.image(image_id)
        analysis = (
            f"Visible Elements: encoded panel {image_id}. Constraints: one canonical "
            f"quantity is recoverable. Step-by-Step Solution: the panel resolves to "
            f"{image.answer}."
        )
        return (
            f"<think>{analysis}</think>\n<type>numeric_value</type>\n"
            f"<question>{question}</question>\n<answer>{image.answer}</answer>"
        )

    def sample(self, image: ImageRecord, g: int, rng: np.random.Generator) -> list[Sample]:
        actions = sample_actions(self.policy, g, rng)
        logp = self.policy.log_probabilities()
        return [
            Sample(
                text=self._render(image.id, int(a)),
                action=int(a),
                logp_old=float(logp[a]),
            )
            for a in actions
        ]

    def probe(self, image: ImageRecord, rng: np.random.Generator) -> Sample:
        return self.sample(image, 1, rng)[0]

    def apply(self, samples: list[Sample], advantages: list[float]) -> None:
        if not any(advantages):
            return
        actions = np.asarray([s.action for s in samples])
        logp_old = np.asarray([s.logp_old for s in samples])
        self.policy = toy_policy_update(
            self.policy, actions, logp_old, advantages, self.cfg, self.learning_rate
        )

    def snapshot(self) -> dict:
        return {"logits": [float(x) for x in self.policy.logits]}

    def restore(self, state: dict) -> None:
        self.policy = ToyPolicy(np.asarray(state["logits"]), self.policy.temperature)


class SyntheticSolverRole:
    """Parametric solver whose skill drifts up with the training signal."""

    def __init__(self, world: SyntheticWorld, solver: SyntheticSolver, gain: float):
        self.world = world
        self.solver = solver
        self.gain = gain
        self._initial_skill = solver.skill

    def solve(self, image: ImageRecord, question: str, n: int, rng: np.random.Generator) -> list[str]:
        synth = self.world.image(image.id)
        delta = question_delta(question)
        return [synthetic_solve(self.solver, synth, rng, delta=delta) for _ in range(n)]

    def apply(self, mean_reward: float) -> None:
        self.solver.skill += self.gain * mean_reward

    def snapshot(self) -> dict:
        return {"skill": self.solver.skill}

    def restore(self, state: dict) -> None:
        self.solver.skill = float(state["skill"])

    def reset(self) -> None:
        self.solver.skill = self._initial_skill


class RemoteSearcherRole:
    """Query sampling through a chat backend; batches are exported, not applied."""

    def __init__(self, backend, exemplars: dict[str, str], temperature: float = 1.0):
        self.backend = backend
        self.exemplars = exemplars
        self.temperature = temperature

    def sample(self, category: str, g: int, rng: np.random.Generator) -> list[Sample]:
        prompt = render_prompt(
            PromptTemplate(
                role="searcher",
                category=category,
                sample_query=self.exemplars[category],
            )
        )
        out: list[Sample] = []
        remaining = g
        while remaining > 0:
            n = min(remaining, 16)
            request = GenerationRequest(prompt=prompt, n=n, temperature=self.temperature)
            out.extend(Sample(text=t) for t in generate(self.backend, request))
            remaining -= n
        return out

    def apply(self, category: str, samples: list[Sample], advantages: list[float]) -> None:
        pass

    def snapshot(self) -> dict:
        return {}

    def restore(self, state: dict) -> None:
        pass


class RemoteQuestionerRole:
    def __init__(self, backend, temperature: float = 1.0):
        self.backend = backend
        self.temperature = temperature

    def _request(self, image: ImageRecord, n: int) -> GenerationRequest:
        return GenerationRequest(
            prompt=render_prompt(PromptTemplate(role="questioner")),
            image_ref=image.uri or None,
            n=n,
            temperature=self.temperature,
        )

    def sample(self, image: ImageRecord, g: int, rng: np.random.Generator) -> list[Sample]:
        return [Sample(text=t) for t in generate(self.backend, self._request(image, g))]

    def probe(self, image: ImageRecord, rng: np.random.Generator) -> Sample:
        return self.sample(image, 1, rng)[0]

    def apply(self, samples: list[Sample], advantages: list[float]) -> None:
        pass

    def snapshot(self) -> dict:
        return {}

    def restore(self, state: dict) -> None:
        pass


class RemoteSolverRole:
    def __init__(self, backend, temperature: float = 1.0):
        self.backend = backend
        self.temperature = temperature

    def solve(self, image: ImageRecord, question: str, n: int, rng: np.random.Generator) -> list[str]:
        request = GenerationRequest(
            prompt=render_prompt(PromptTemplate(role="solver"), {"question": question}),
            image_ref=image.uri or None,
            n=n,
            temperature=self.temperature,
        )
        return generate(self.backend, request)

    def apply(self, mean_reward: float) -> None:
        pass

    def snapshot(self) -> dict:
        return {}

    def restore(self, state: dict) -> None:
        pass

    def reset(self) -> None:
        pass


# ---------------------------------------------------------------------------
# Engine


def stage_seed(seed: int, cycle: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{cycle}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _map_ordered(fn, items, workers: int) -> list:
    """Apply fn to items, results in input order; fans out when workers > 1."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class Stage1Result:
    rows: list[dict]
    records: list[RewardRecord]
    batches: list[BatchRecord]


@dataclass
class Stage2Result:
    rows: list[dict]
    records: list[RewardRecord]
    batches: list[BatchRecord]


@dataclass
class Stage3Result:
    rows: list[dict]
    batches: list[BatchRecord]


class Engine:
    """Binds the three agent roles, the index, and the judge to one config."""

    def __init__(
        self,
        cfg: RunConfig,
        index: EmbeddingIndex,
        searcher,
        questioner,
        solver,
        embedder,
        judge_backend=None,
        world: SyntheticWorld | None = None,
    ):
        self.cfg = cfg
        self.index = index
        self.searcher = searcher
        self.questioner = questioner
        self.solver = solver
        self.embedder = embedder
        self.judge_backend = judge_backend
        self.world = world
        declared = getattr(embedder, "dimension", None)
        if declared is not None and declared != index.dimension:
            raise DimensionMismatch(
                f"embedding backend dimension {declared} != index dimension {index.dimension}"
            )

    def judge_for(self, question: str):
        if self.cfg.judge.kind == "remote":
            return RemoteJudge(
                self.judge_backend, question=question, retries=self.cfg.judge.retries
            )
        return ExactNormalizedJudge()

    def _probe_accuracy(self, image: ImageRecord, rng: np.random.Generator):
        """One probe question on the image, m solver rollouts, voted accuracy."""
        it = self.cfg.iteration
        probes = []
        for _ in range(it.probe_questions_per_image):
            probe_sample = self.questioner.probe(image, rng)
            question = extract_tagged(probe_sample.text, "question")
            if question is None:
                logger.warning("probe question unparsable for image %s", image.id)
                continue
            raw = self.solver.solve(image, question, it.probe_rollouts, rng)
            answers = [extract_boxed(text) or "" for text in raw]
            probes.append(probe_from_answers(answers, self.judge_for(question)))
        return probes

    def stage1_step(self, step: int, rng: np.random.Generator) -> Stage1Result:
        """One searcher optimization step across every domain."""
        it = self.cfg.iteration
        rows: list[dict] = []
        reward_records: list[RewardRecord] = []
        batches: list[BatchRecord] = []
        per_domain: list[dict] = []
        for domain in it.domains:
            samples = self.searcher.sample(domain.category, it.group_size, rng)
            parsed = [extract_tagged(s.text, "query") for s in samples]
            kept = []  # (position, query, image, probes)
            for pos, query in enumerate(parsed):
                if not query:
                    logger.warning(
                        "stage1 step %d domain %s: query tag missing, reward 0",
                        step,
                        domain.category,
                    )
                    continue
                embedding = embed_text(self.embedder, query)
                record, score = self.index.retrieve(embedding, 1)[0]
                probes = self._probe_accuracy(record, rng)
                if not probes:
                    continue
                kept.append((pos, query, record, probes))
            penalties = [0.0] * len(kept)
            if kept:
                batch = DiversityBatch(
                    items=[(q, rec.embedding) for _, q, rec, _ in kept]
                )
                penalties = repetition_penalty(batch, it.tau_txt, it.tau_vis)
            records = [RewardRecord(0.0, 0.0, 0.0, "searcher")] * len(samples)
            row_data: list[dict] = [
                {
                    "step": step,
                    "domain": domain.category,
                    "query": None,
                    "image_id": None,
                    "acc": None,
                    "r_chal": 0.0,
                    "p_rep": 0.0,
                    "r_final": 0.0,
                }
                for _ in samples
            ]
            for (pos, query, record, probes), penalty in zip(kept, penalties):
                rec = searcher_reward(probes, penalty)
                records[pos] = rec
                row_data[pos].update(
                    {
                        "query": query,
                        "image_id": record.id,
                        "acc": float(np.mean([p.accuracy for p in probes])),
                        "r_chal": rec.challenge,
                        "p_rep": rec.penalty,
                        "r_final": rec.final,
                    }
                )
            per_domain.append(
                {
                    "domain": domain.category,
                    "samples": samples,
                    "records": records,
                    "rows": row_data,
                }
            )
        flat = [
            (rec.final, entry["domain"])
            for entry in per_domain
            for rec in entry["records"]
        ]
        advantages = domain_advantages(flat, std_epsilon=self.cfg.grpo.std_epsilon)
        cursor = 0
        for entry in per_domain:
            g = len(entry["samples"])
            domain_adv = advantages[cursor : cursor + g]
            cursor += g
            self.searcher.apply(entry["domain"], entry["samples"], domain_adv)
            for i, (sample, rec, adv) in enumerate(
                zip(entry["samples"], entry["records"], domain_adv)
            ):
                batches.append(
                    BatchRecord(
                        prompt_id=f"stage1:s{step}:{entry['domain']}:{i}",
                        domain=entry["domain"],
                        tokens=[sample.text] if sample.action is None else [sample.action],
                        reward=rec.final,
                        advantage=adv,
                    )
                )
            reward_records.extend(entry["records"])
            rows.extend(entry["rows"])
        return Stage1Result(rows=rows, records=reward_records, batches=batches)

    def build_active_dataset(self, rng: np.random.Generator) -> list[dict]:
        """Sample queries from the searcher, retrieve top-k per query, dedup by id."""
        it = self.cfg.iteration
        rows: list[dict] = []
        seen: set[str] = set()
        quota = it.queries_per_iteration // len(it.domains)
        extra = it.queries_per_iteration - quota * len(it.domains)
        for d_idx, domain in enumerate(it.domains):
            count = quota + (1 if d_idx < extra else 0)
            if count == 0:
                continue
            samples = self.searcher.sample(domain.category, count, rng)
            queries = []
            for s in samples:
                q = extract_tagged(s.text, "query")
                if q:
                    queries.append(q)
                else:
                    logger.warning("build_active: dropping unparsable query")
            if not queries:
                continue
            embeddings = [embed_text(self.embedder, q) for q in queries]
            results = self.index.retrieve_batch(embeddings, it.top_k)
            for query, ranked in zip(queries, results):
                for rank, (record, score) in enumerate(ranked, start=1):
                    if record.id in seen:
                        continue
                    seen.add(record.id)
                    rows.append(
                        {
                            "image_id": record.id,
                            "query": query,
                            "rank": rank,
                            "score": score,
                        }
                    )
        return rows

    def build_random_active(self, count: int, rng: np.random.Generator) -> list[dict]:
        """Uniform-sampling baseline with the same row shape as build_active_dataset."""
        records = self.index.records
        picks = rng.choice(len(records), size=min(count, len(records)), replace=False)
        return [
            {"image_id": records[i].id, "query": "", "rank": 1, "score": 0.0}
            for i in sorted(int(i) for i in picks)
        ]

    def stage2_step(
        self, step: int, d_active: list[dict], rng: np.random.Generator
    ) -> Stage2Result:
        """One questioner optimization step over a few active images."""
        it = self.cfg.iteration
        if not d_active:
            raise EmptyIndex("stage2 requires a nonempty active dataset")
        rows: list[dict] = []
        reward_records: list[RewardRecord] = []
        batches: list[BatchRecord] = []
        n_images = min(it.stage2_images_per_step, len(d_active))
        picks = rng.choice(len(d_active), size=n_images, replace=False)
        for pick in picks:
            image_id = d_active[int(pick)]["image_id"]
            image = self.index.get(image_id)
            samples = self.questioner.sample(image, it.group_size, rng)
            parsed: list[tuple[str, str] | None] = []
            for s in samples:
                question = extract_tagged(s.text, "question")
                qtype = extract_tagged(s.text, "type")
                answer = extract_tagged(s.text, "answer")
                if not question or not answer or qtype not in VALID_QUESTION_TYPES:
                    logger.warning(
                        "stage2 step %d image %s: malformed question output, reward 0",
                        step,
                        image_id,
                    )
                    parsed.append(None)
                else:
                    parsed.append((question, qtype))
            kept = [(i, p[0]) for i, p in enumerate(parsed) if p is not None]
            penalties = (
                text_repetition_penalty([q for _, q in kept], it.tau_txt)
                if kept
                else []
            )
            records = [RewardRecord(0.0, 0.0, 0.0, "questioner")] * len(samples)
            accuracies: list[float | None] = [None] * len(samples)
            for (pos, question), penalty in zip(kept, penalties):
                raw = self.solver.solve(image, question, it.probe_rollouts, rng)
                answers = [extract_boxed(text) or "" for text in raw]
                probe = probe_from_answers(answers, self.judge_for(question))
                records[pos] = questioner_reward(probe.accuracy, penalty)
                accuracies[pos] = probe.accuracy
            finals = [rec.final for rec in records]
            advantages = group_advantages(finals, std_epsilon=self.cfg.grpo.std_epsilon)
            self.questioner.apply(samples, advantages)
            for i, (sample, rec, adv) in enumerate(zip(samples, records, advantages)):
                question = parsed[i][0] if parsed[i] else None
                rows.append(
                    {
                        "step": step,
                        "image_id": image_id,
                        "question": question,
                        "acc": accuracies[i],
                        "r_chal": rec.challenge,
                        "p_rep": rec.penalty,
                        "r_final": rec.final,
                    }
                )
                batches.append(
                    BatchRecord(
                        prompt_id=f"stage2:s{step}:{image_id}:{i}",
                        domain=image.category,
                        tokens=[sample.text] if sample.action is None else [sample.action],
                        reward=rec.final,
                        advantage=adv,
                    )
                )
            reward_records.extend(records)
        return Stage2Result(rows=rows, records=reward_records, batches=batches)

    def _rollout_workers(self) -> int:
        # Synthetic roles consume the shared RNG, so they must stay serial;
        # remote roles are stateless per request and may fan out.
        if self.cfg.mode == "remote":
            return max(1, self.cfg.backend.in_flight)
        return 1

    def build_training_set(
        self, d_active: list[dict], rng: np.random.Generator
    ) -> tuple[list[CurriculumItem], list[CurriculumItem]]:
        """One question per active image; K rollouts; majority-vote pseudo-label;
        difficulty-window filter selects the starred subset."""
        it = self.cfg.iteration

        def harvest(row: dict):
            image = self.index.get(row["image_id"])
            sample = self.questioner.sample(image, 1, rng)[0]
            question = extract_tagged(sample.text, "question")
            qtype = extract_tagged(sample.text, "type")
            if not question or qtype not in VALID_QUESTION_TYPES:
                return image.id, None, None, None
            raw = self.solver.solve(image, question, it.vote_trajectories, rng)
            return image.id, question, qtype, raw

        d_train: list[CurriculumItem] = []
        d_star: list[CurriculumItem] = []
        for image_id, question, qtype, raw in _map_ordered(
            harvest, d_active, self._rollout_workers()
        ):
            if raw is None:
                logger.warning("build_training: dropping %s (malformed question)", image_id)
                continue
            answers = [extract_boxed(text) or "" for text in raw]
            judge = self.judge_for(question)
            try:
                vote = majority_vote(answers, judge)
            except JudgeFailure as exc:
                logger.warning("build_training: vote aborted for %s: %s", image_id, exc)
                continue
            if not vote.label:
                logger.warning("build_training: dropping %s (empty consensus)", image_id)
                continue
            accuracy = sum(judge.equivalent(a, vote.label) for a in answers) / len(answers)
            item = CurriculumItem(
                image_id=image_id,
                question=question,
                question_type=qtype,
                pseudo_label=vote.label,
                consensus_score=vote.score,
                accuracy=accuracy,
            )
            d_train.append(item)
            if difficulty_filter(accuracy, it.tau_low, it.tau_high):
                d_star.append(item)
        return d_train, d_star

    def stage3_step(
        self, step: int, d_train_star: list[CurriculumItem], rng: np.random.Generator
    ) -> Stage3Result:
        """One solver optimization step: G rollouts per item, binary rewards."""
        it = self.cfg.iteration
        rows: list[dict] = []
        batches: list[BatchRecord] = []
        if not d_train_star:
            return Stage3Result(rows=rows, batches=batches)
        n_items = min(it.stage3_items_per_step, len(d_train_star))
        picks = rng.choice(len(d_train_star), size=n_items, replace=False)
        all_rewards: list[int] = []
        for pick in picks:
            item = d_train_star[int(pick)]
            image = self.index.get(item.image_id)
            raw = self.solver.solve(image, item.question, it.group_size, rng)
            judge = self.judge_for(item.question)
            rewards = []
            for text in raw:
                boxed = extract_boxed(text)
                if boxed is None:
                    rewards.append(0)
                else:
                    rewards.append(solver_reward(boxed, item.pseudo_label, judge))
            advantages = group_advantages(rewards, std_epsilon=self.cfg.grpo.std_epsilon)
            for i, (text, reward, adv) in enumerate(zip(raw, rewards, advantages)):
                batches.append(
                    BatchRecord(
                        prompt_id=f"stage3:s{step}:{item.image_id}:{i}",
                        domain=image.category,
                        tokens=[text],
                        reward=float(reward),
                        advantage=adv,
                    )
                )
            rows.append(
                {
                    "step": step,
                    "image_id": item.image_id,
                    "mean_reward": float(np.mean(rewards)),
                }
            )
            all_rewards.extend(rewards)
        if all_rewards:
            self.solver.apply(float(np.mean(all_rewards)))
        return Stage3Result(rows=rows, batches=batches)

    def snapshot(self) -> dict:
        return {
            "searcher": self.searcher.snapshot(),
            "questioner": self.questioner.snapshot(),
            "solver": self.solver.snapshot(),
        }

    def restore(self, state: dict) -> None:
        self.searcher.restore(state["searcher"])
        self.questioner.restore(state["questioner"])
        self.solver.restore(state["solver"])

    def reset_agents(self) -> None:
        if hasattr(self.searcher, "policy"):
            self.searcher.policy = ToyPolicy(
                np.zeros_like(self.searcher.policy.logits),
                self.searcher.policy.temperature,
            )
        if hasattr(self.questioner, "policy"):
            self.questioner.policy = ToyPolicy(
                np.zeros_like(self.questioner.policy.logits),
                self.questioner.policy.temperature,
            )
        if hasattr(self.solver, "reset"):
            self.solver.reset()


def build_engine(cfg: RunConfig) -> Engine:
    cfg = validate_config(cfg)
    if cfg.mode == "synthetic":
        categories = [d.category for d in cfg.iteration.domains]
        world = SyntheticWorld.generate(
            seed=cfg.seed,
            count=cfg.world.count,
            dim=cfg.world.dim,
            categories=categories,
            bands_per_category=cfg.world.bands_per_category,
            noise=cfg.world.noise,
        )
        solver = SyntheticSolver(
            skill=cfg.world.solver_skill,
            noise_temperature=cfg.world.solver_noise_temperature,
        )
        return Engine(
            cfg,
            index=world.index,
            searcher=SyntheticSearcherRole(world, cfg.grpo, cfg.iteration.searcher_lr),
            questioner=SyntheticQuestionerRole(world, cfg.grpo, cfg.iteration.questioner_lr),
            solver=SyntheticSolverRole(world, solver, cfg.iteration.solver_gain),
            embedder=WorldQueryEmbedder(world),
            world=world,
        )
    manifest = load_manifest(cfg.manifest_path)
    index = EmbeddingIndex(manifest)
    backend = HttpChatBackend(cfg.backend)
    embedder = HttpEmbeddingBackend(cfg.backend)
    exemplars = {d.category: d.exemplar for d in cfg.iteration.domains}
    return Engine(
        cfg,
        index=index,
        searcher=RemoteSearcherRole(backend, exemplars),
        questioner=RemoteQuestionerRole(backend),
        solver=RemoteSolverRole(backend),
        embedder=embedder,
        judge_backend=backend if cfg.judge.kind == "remote" else None,
    )


# ---------------------------------------------------------------------------
# Persistence


def write_jsonl(path: Path, rows: list[dict]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _read_optional(path: Path) -> list[dict]:
    return read_jsonl(path) if path.exists() else []


class Journal:
    """Single-writer journal of completed stages; enables exact resume."""

    def __init__(self, path: Path):
        self.path = path
        self.entries: list[dict] = []
        if path.exists():
            self.entries = json.loads(path.read_text())["entries"]

    def done(self, key: str) -> bool:
        return any(e["key"] == key and e["status"] == "done" for e in self.entries)

    def mark(self, key: str, artifacts: list[str]) -> None:
        self.entries.append({"key": key, "status": "done", "artifacts": artifacts})
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"entries": self.entries}, indent=2))
        tmp.replace(self.path)


def _write_batches(path: Path, batches: list[BatchRecord]) -> None:
    if path.exists():
        path.unlink()
    write_training_batch(batches, path)


def run(cfg: RunConfig, stop_after: str | None = None) -> dict:
    """Execute cycles x (stage1 -> build_active -> stage2 -> build_training ->
    stage3), journaling at stage boundaries; reruns resume from the journal.

    stop_after names a journal key like "cycle1:stage2" and makes the run
    return after committing that stage, which simulates a kill between stages.
    """
    cfg = validate_config(cfg)
    run_dir = resolve_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)
    )
    journal = Journal(run_dir / "journal.json")
    state_path = run_dir / "state" / "latest.json"
    state_path.parent.mkdir(exist_ok=True)
    engine = build_engine(cfg)
    if journal.entries and state_path.exists():
        engine.restore(json.loads(state_path.read_text()))

    def commit(key: str, artifacts: list[str]) -> None:
        state_path.write_text(json.dumps(engine.snapshot(), sort_keys=True))
        journal.mark(key, artifacts)

    it = cfg.iteration
    for cycle in range(1, it.cycles + 1):
        cycle_dir = run_dir / f"cycle{cycle}"
        cycle_dir.mkdir(exist_ok=True)
        if it.reinit_each_cycle and cycle > 1 and not journal.done(f"cycle{cycle}:stage1"):
            engine.reset_agents()

        key = f"cycle{cycle}:stage1"
        if not journal.done(key):
            rng = np.random.default_rng(stage_seed(cfg.seed, cycle, "stage1"))
            rows: list[dict] = []
            batches: list[BatchRecord] = []
            for step in range(it.searcher_steps):
                result = engine.stage1_step(step, rng)
                rows.extend(result.rows)
                batches.extend(result.batches)
            write_jsonl(cycle_dir / "queries.jsonl", rows)
            _write_batches(cycle_dir / "searcher_batches.jsonl", batches)
            commit(key, ["queries.jsonl", "searcher_batches.jsonl"])
        if stop_after == key:
            return {"run_dir": str(run_dir), "stopped_after": key}

        key = f"cycle{cycle}:build_active"
        if not journal.done(key):
            rng = np.random.default_rng(stage_seed(cfg.seed, cycle, "build_active"))
            d_active = engine.build_active_dataset(rng)
            write_jsonl(cycle_dir / "d_active.jsonl", d_active)
            commit(key, ["d_active.jsonl"])
        d_active = read_jsonl(cycle_dir / "d_active.jsonl")
        if stop_after == key:
            return {"run_dir": str(run_dir), "stopped_after": key}

        key = f"cycle{cycle}:stage2"
        if not journal.done(key):
            rng = np.random.default_rng(stage_seed(cfg.seed, cycle, "stage2"))
            rows = []
            batches = []
            for step in range(it.questioner_steps):
                result = engine.stage2_step(step, d_active, rng)
                rows.extend(result.rows)
                batches.extend(result.batches)
            write_jsonl(cycle_dir / "questions.jsonl", rows)
            _write_batches(cycle_dir / "questioner_batches.jsonl", batches)
            commit(key, ["questions.jsonl", "questioner_batches.jsonl"])
        if stop_after == key:
            return {"run_dir": str(run_dir), "stopped_after": key}

        key = f"cycle{cycle}:build_training"
        if not journal.done(key):
            rng = np.random.default_rng(stage_seed(cfg.seed, cycle, "build_training"))
            d_train, d_star = engine.build_training_set(d_active, rng)
            write_jsonl(cycle_dir / "d_train.jsonl", [i.to_row() for i in d_train])
            write_jsonl(cycle_dir / "d_train_star.jsonl", [i.to_row() for i in d_star])
            commit(key, ["d_train.jsonl", "d_train_star.jsonl"])
        d_star_items = [
            CurriculumItem.from_row(r) for r in read_jsonl(cycle_dir / "d_train_star.jsonl")
        ]
        if stop_after == key:
            return {"run_dir": str(run_dir), "stopped_after": key}

        key = f"cycle{cycle}:stage3"
        if not journal.done(key):
            rng = np.random.default_rng(stage_seed(cfg.seed, cycle, "stage3"))
            rows = []
            batches = []
            for step in range(it.solver_steps):
                result = engine.stage3_step(step, d_star_items, rng)
                rows.extend(result.rows)
                batches.extend(result.batches)
            write_jsonl(cycle_dir / "solver_steps.jsonl", rows)
            _write_batches(cycle_dir / "solver_batches.jsonl", batches)
            commit(key, ["solver_steps.jsonl", "solver_batches.jsonl"])
        if stop_after == key:
            return {"run_dir": str(run_dir), "stopped_after": key}

    report = compute_stats(cfg, run_dir)
    stats_path = run_dir / "stats.json"
    stats_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return {
        "run_dir": str(run_dir),
        "stats_path": str(stats_path),
        "cycles": it.cycles,
        "dataset_sizes": {
            cycle_block["cycle"]: cycle_block["dataset_sizes"]
            for cycle_block in report["cycles"]
        },
    }


# ---------------------------------------------------------------------------
# Statistics


def consensus_histogram(items: list[dict], k: int) -> dict:
    """K+1 bins over consensus scores {0/K ... K/K}; counts sum to the item count."""
    counts = [0] * (k + 1)
    for item in items:
        bin_index = int(round(item["consensus_score"] * k))
        counts[min(max(bin_index, 0), k)] += 1
    return {
        "k": k,
        "bins": [f"{i}/{k}" for i in range(k + 1)],
        "counts": counts,
        "total": len(items),
    }


def category_distribution(index: EmbeddingIndex, d_active: list[dict]) -> dict:
    shares: dict[str, float] = {}
    if not d_active:
        return shares
    for row in d_active:
        category = index.get(row["image_id"]).category
        shares[category] = shares.get(category, 0.0) + 1.0
    total = sum(shares.values())
    return {cat: count / total for cat, count in sorted(shares.items())}


def _series(rows: list[dict], fields_: tuple[str, ...]) -> list[dict]:
    by_step: dict[int, list[dict]] = {}
    for row in rows:
        by_step.setdefault(row["step"], []).append(row)
    out = []
    for step in sorted(by_step):
        entry: dict = {"step": step}
        for name in fields_:
            values = [r[name] for r in by_step[step] if r.get(name) is not None]
            entry[name] = float(np.mean(values)) if values else None
        out.append(entry)
    return out


def compute_stats(cfg: RunConfig, run_dir: str | Path) -> dict:
    """Machine-readable report: per-cycle consensus histogram, category shares
    over the active set, and reward time series for all three stages."""
    run_dir = Path(run_dir)
    engine = build_engine(cfg)
    cycles = []
    for cycle in range(1, cfg.iteration.cycles + 1):
        cycle_dir = run_dir / f"cycle{cycle}"
        if not cycle_dir.exists():
            continue
        d_active = _read_optional(cycle_dir / "d_active.jsonl")
        d_train = _read_optional(cycle_dir / "d_train.jsonl")
        d_star = _read_optional(cycle_dir / "d_train_star.jsonl")
        queries = _read_optional(cycle_dir / "queries.jsonl")
        questions = _read_optional(cycle_dir / "questions.jsonl")
        solver_rows = _read_optional(cycle_dir / "solver_steps.jsonl")
        cycles.append(
            {
                "cycle": cycle,
                "consensus_histogram": consensus_histogram(
                    d_train, cfg.iteration.vote_trajectories
                ),
                "category_distribution": category_distribution(engine.index, d_active),
                "reward_series": {
                    "searcher": _series(queries, ("r_chal", "p_rep", "r_final")),
                    "questioner": _series(questions, ("r_chal", "p_rep", "r_final")),
                    "solver": _series(solver_rows, ("mean_reward",)),
                },
                "dataset_sizes": {
                    "d_active": len(d_active),
                    "d_train": len(d_train),
                    "d_train_star": len(d_star),
                },
            }
        )
    return {"cycles": cycles}
