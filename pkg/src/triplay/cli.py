"""Command-line surface: index operations, synthetic-world generation, the
full self-play loop, dataset utilities, the gradient self-check, and reports.

Config precedence: values from --config are overridden by explicit flags.
Auth tokens are read from the environment variable named in the backend
config, never from flags or files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import orchestrator
from .config import load_config
from .embedding_index import EmbeddingIndex, IndexManifest, load_manifest, save_manifest
from .errors import EngineError
from .grpo import gradient_check
from .rewards import difficulty_filter
from .synthetic_world import SyntheticWorld

GRADIENT_TOLERANCE = 1e-4


def _add_run_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="run seed (flag wins over config)")
    parser.add_argument("--synthetic", action="store_true", help="use the synthetic world")
    parser.add_argument("--run-dir", help="run directory (default: runs/<hash>-seed<seed>)")
    parser.add_argument("--cycles", type=int, help="number of full cycles")
    parser.add_argument("--group-size", type=int, help="GRPO group size G")
    parser.add_argument("--probe-rollouts", type=int, help="solver rollouts m per probe")
    parser.add_argument("--vote-trajectories", type=int, help="trajectories K for majority vote")
    parser.add_argument("--queries", type=int, help="queries sampled when building the active set")
    parser.add_argument("--top-k", type=int, help="images retrieved per query")
    parser.add_argument("--searcher-steps", type=int, help="stage-1 optimization steps per cycle")
    parser.add_argument("--questioner-steps", type=int, help="stage-2 optimization steps per cycle")
    parser.add_argument("--solver-steps", type=int, help="stage-3 optimization steps per cycle")
    parser.add_argument("--tau-txt", type=float, help="text clustering threshold")
    parser.add_argument("--tau-vis", type=float, help="visual clustering threshold")
    parser.add_argument("--tau-low", type=float, help="difficulty window lower bound")
    parser.add_argument("--tau-high", type=float, help="difficulty window upper bound")
    parser.add_argument("--world-count", type=int, help="synthetic corpus size")
    parser.add_argument("--world-dim", type=int, help="synthetic embedding dimension")
    parser.add_argument("--stop-after", help="journal key to stop after (testing aid)")


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    iteration: dict = {}
    world: dict = {}
    mapping = {
        "cycles": "cycles",
        "group_size": "group_size",
        "probe_rollouts": "probe_rollouts",
        "vote_trajectories": "vote_trajectories",
        "queries": "queries_per_iteration",
        "top_k": "top_k",
        "searcher_steps": "searcher_steps",
        "questioner_steps": "questioner_steps",
        "solver_steps": "solver_steps",
        "tau_txt": "tau_txt",
        "tau_vis": "tau_vis",
        "tau_low": "tau_low",
        "tau_high": "tau_high",
    }
    for arg_name, key in mapping.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            iteration[key] = value
    for arg_name, key in (("world_count", "count"), ("world_dim", "dim")):
        value = getattr(args, arg_name, None)
        if value is not None:
            world[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.synthetic:
        overrides["mode"] = "synthetic"
    if args.run_dir:
        overrides["run_dir"] = args.run_dir
    if iteration:
        overrides["iteration"] = iteration
    if world:
        overrides["world"] = world
    return overrides


def _cmd_index_build(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    index = EmbeddingIndex(manifest)
    if args.out:
        save_manifest(manifest, args.out)
    print(
        json.dumps(
            {
                "dimension": manifest.dimension,
                "count": len(index),
                "checksum": manifest.checksum,
            }
        )
    )
    return 0


def _load_queries(path: str) -> list[np.ndarray]:
    text = Path(path).read_text(encoding="utf-8").strip()
    queries = []
    for line in text.splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if isinstance(row, dict):
            row = row["embedding"]
        queries.append(np.asarray(row, dtype=np.float64))
    return queries


def _cmd_index_search(args: argparse.Namespace) -> int:
    index = EmbeddingIndex(load_manifest(args.manifest))
    queries = _load_queries(args.query_file)
    results = index.retrieve_batch(queries, args.k)
    for q_idx, ranked in enumerate(results):
        for rank, (record, score) in enumerate(ranked, start=1):
            print(
                json.dumps(
                    {"query_index": q_idx, "rank": rank, "id": record.id, "score": score}
                )
            )
    return 0


def _cmd_synth_gen(args: argparse.Namespace) -> int:
    categories = [c.strip() for c in args.categories.split(",") if c.strip()]
    world = SyntheticWorld.generate(
        seed=args.seed,
        count=args.count,
        dim=args.dim,
        categories=categories,
        bands_per_category=args.bands,
    )
    manifest = IndexManifest(
        dimension=args.dim, records=[img.record for img in world.images]
    )
    save_manifest(manifest, args.out)
    print(json.dumps({"out": args.out, "count": args.count, "dimension": args.dim}))
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _overrides_from_args(args))
    report = orchestrator.run(cfg, stop_after=args.stop_after)
    print(json.dumps(report))
    return 0


def _cmd_dataset_build(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _overrides_from_args(args))
    engine = orchestrator.build_engine(cfg)
    d_active = orchestrator.read_jsonl(args.d_active)
    rng = np.random.default_rng(cfg.seed)
    d_train, d_star = engine.build_training_set(d_active, rng)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    orchestrator.write_jsonl(out_dir / "d_train.jsonl", [i.to_row() for i in d_train])
    orchestrator.write_jsonl(
        out_dir / "d_train_star.jsonl", [i.to_row() for i in d_star]
    )
    print(json.dumps({"d_train": len(d_train), "d_train_star": len(d_star)}))
    return 0


def _cmd_dataset_filter(args: argparse.Namespace) -> int:
    rows = orchestrator.read_jsonl(args.input)
    kept = [r for r in rows if difficulty_filter(r["accuracy"], args.low, args.high)]
    orchestrator.write_jsonl(Path(args.output), kept)
    print(json.dumps({"input": len(rows), "kept": len(kept)}))
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / "config.json")
    report = orchestrator.compute_stats(cfg, run_dir)
    out = Path(args.out) if args.out else run_dir / "stats.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(str(out))
    return 0


def _cmd_grpo_check(args: argparse.Namespace) -> int:
    error = gradient_check(trials=args.trials, seed=args.seed)
    print(json.dumps({"max_relative_error": error, "tolerance": GRADIENT_TOLERANCE}))
    return 0 if error < GRADIENT_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triplay",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    index = sub.add_parser("index", help="vector index operations")
    index_sub = index.add_subparsers(dest="index_command", required=True)
    build = index_sub.add_parser("build", help="load, validate, and summarize a manifest")
    build.add_argument("--manifest", required=True)
    build.add_argument("--out", help="write the canonicalized manifest here")
    build.set_defaults(func=_cmd_index_build)
    search = index_sub.add_parser("search", help="top-k cosine search")
    search.add_argument("--manifest", required=True)
    search.add_argument("--query-file", required=True, help="JSONL of embeddings")
    search.add_argument("--k", type=int, required=True)
    search.set_defaults(func=_cmd_index_search)

    synth = sub.add_parser("synth", help="synthetic world utilities")
    synth_sub = synth.add_subparsers(dest="synth_command", required=True)
    gen = synth_sub.add_parser("gen", help="write a synthetic corpus manifest")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, default=10000)
    gen.add_argument("--dim", type=int, default=32)
    gen.add_argument("--categories", default="charts,diagrams,maps,photos")
    gen.add_argument("--bands", type=int, default=16)
    gen.set_defaults(func=_cmd_synth_gen)

    run_p = sub.add_parser("run", help="execute the full three-stage loop")
    _add_run_overrides(run_p)
    run_p.set_defaults(func=_cmd_run)

    dataset = sub.add_parser("dataset", help="dataset utilities")
    dataset_sub = dataset.add_subparsers(dest="dataset_command", required=True)
    dbuild = dataset_sub.add_parser("build", help="build training sets from an active set")
    _add_run_overrides(dbuild)
    dbuild.add_argument("--d-active", required=True, help="d_active.jsonl path")
    dbuild.add_argument("--out-dir", required=True)
    dbuild.set_defaults(func=_cmd_dataset_build)
    dfilter = dataset_sub.add_parser("filter", help="apply the difficulty window")
    dfilter.add_argument("--input", required=True)
    dfilter.add_argument("--output", required=True)
    dfilter.add_argument("--low", type=float, default=0.3)
    dfilter.add_argument("--high", type=float, default=0.8)
    dfilter.set_defaults(func=_cmd_dataset_filter)
    dstats = dataset_sub.add_parser("stats", help="emit the stats report for a run dir")
    dstats.add_argument("--run-dir", required=True)
    dstats.add_argument("--out")
    dstats.set_defaults(func=_cmd_stats)

    check = sub.add_parser("grpo", help="optimization self-checks")
    check_sub = check.add_subparsers(dest="grpo_command", required=True)
    gcheck = check_sub.add_parser(
        "check", help="analytic vs finite-difference gradient validation"
    )
    gcheck.add_argument("--trials", type=int, default=100)
    gcheck.add_argument("--seed", type=int, default=0)
    gcheck.set_defaults(func=_cmd_grpo_check)

    report = sub.add_parser("report", help="emit the stats report for a run dir")
    report.add_argument("--run-dir", required=True)
    report.add_argument("--out")
    report.set_defaults(func=_cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error[FileNotFoundError]: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
