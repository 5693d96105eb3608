import json
from pathlib import Path

import pytest

from triplay.cli import main
from triplay.orchestrator import read_jsonl


def run_cli(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture()
def manifest(tmp_path, capsys):
    path = tmp_path / "corpus.jsonl"
    code, _, _ = run_cli(
        capsys,
        [
            "synth",
            "gen",
            "--out",
            str(path),
            "--seed",
            "3",
            "--count",
            "200",
            "--dim",
            "16",
            "--categories",
            "charts,diagrams",
            "--bands",
            "8",
        ],
    )
    assert code == 0
    return path


class TestIndexCommands:
    def test_build_summary(self, manifest, capsys):
        code, out, _ = run_cli(capsys, ["index", "build", "--manifest", str(manifest)])
        assert code == 0
        summary = json.loads(out)
        assert summary["count"] == 200
        assert summary["dimension"] == 16
        assert len(summary["checksum"]) == 64

    def test_search(self, manifest, tmp_path, capsys):
        rows = read_jsonl(manifest)[1:]
        query_file = tmp_path / "queries.jsonl"
        query_file.write_text(json.dumps(rows[0]["embedding"]) + "\n")
        code, out, _ = run_cli(
            capsys,
            ["index", "search", "--manifest", str(manifest), "--query-file", str(query_file), "--k", "3"],
        )
        assert code == 0
        results = [json.loads(line) for line in out.splitlines()]
        assert len(results) == 3
        assert results[0]["id"] == rows[0]["id"]
        assert results[0]["rank"] == 1
        scores = [r["score"] for r in results]
        assert scores == sorted(scores, reverse=True)

    def test_search_accepts_embedding_objects(self, manifest, tmp_path, capsys):
        rows = read_jsonl(manifest)[1:]
        query_file = tmp_path / "queries.jsonl"
        query_file.write_text(json.dumps({"embedding": rows[5]["embedding"]}) + "\n")
        code, out, _ = run_cli(
            capsys,
            ["index", "search", "--manifest", str(manifest), "--query-file", str(query_file), "--k", "1"],
        )
        assert code == 0
        assert json.loads(out.splitlines()[0])["id"] == rows[5]["id"]

    def test_missing_manifest_exits_one(self, tmp_path, capsys):
        code, _, err = run_cli(
            capsys, ["index", "build", "--manifest", str(tmp_path / "nope.jsonl")]
        )
        assert code == 1
        assert "error[" in err


class TestSynthGen:
    def test_seed_reproducible(self, tmp_path, capsys):
        args = lambda out: [
            "synth", "gen", "--out", out, "--seed", "5", "--count", "50",
            "--dim", "16", "--categories", "charts,diagrams", "--bands", "4",
        ]
        assert run_cli(capsys, args(str(tmp_path / "a.jsonl")))[0] == 0
        assert run_cli(capsys, args(str(tmp_path / "b.jsonl")))[0] == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


RUN_ARGS = [
    "--synthetic",
    "--seed",
    "3",
    "--cycles",
    "1",
    "--queries",
    "40",
    "--searcher-steps",
    "2",
    "--questioner-steps",
    "2",
    "--solver-steps",
    "2",
    "--world-count",
    "400",
]


class TestRunCommand:
    def test_full_loop(self, tmp_path, capsys):
        run_dir = tmp_path / "run"
        code, out, _ = run_cli(
            capsys, ["run", "--run-dir", str(run_dir)] + RUN_ARGS
        )
        assert code == 0
        report = json.loads(out)
        assert Path(report["stats_path"]).exists()
        for name in ("queries", "d_active", "d_train", "d_train_star"):
            assert (run_dir / "cycle1" / f"{name}.jsonl").exists()

    def test_seed_bit_reproducible(self, tmp_path, capsys):
        code_a, _, _ = run_cli(capsys, ["run", "--run-dir", str(tmp_path / "a")] + RUN_ARGS)
        code_b, _, _ = run_cli(capsys, ["run", "--run-dir", str(tmp_path / "b")] + RUN_ARGS)
        assert code_a == code_b == 0
        a = (tmp_path / "a" / "cycle1" / "d_train.jsonl").read_bytes()
        b = (tmp_path / "b" / "cycle1" / "d_train.jsonl").read_bytes()
        assert a == b

    def test_config_file_with_flag_override(self, tmp_path, capsys):
        config = {
            "mode": "synthetic",
            "seed": 11,
            "world": {"count": 400, "dim": 32},
            "iteration": {
                "cycles": 1,
                "queries_per_iteration": 30,
                "searcher_steps": 1,
                "questioner_steps": 1,
                "solver_steps": 1,
                "group_size": 4,
            },
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))
        run_dir = tmp_path / "run"
        code, out, _ = run_cli(
            capsys,
            ["run", "--config", str(config_path), "--run-dir", str(run_dir), "--seed", "12"],
        )
        assert code == 0
        saved = json.loads((run_dir / "config.json").read_text())
        assert saved["seed"] == 12  # flag wins
        assert saved["iteration"]["group_size"] == 4  # file value kept

    def test_inverted_window_rejected(self, tmp_path, capsys):
        code, _, err = run_cli(
            capsys,
            ["run", "--run-dir", str(tmp_path / "r"), "--synthetic", "--tau-low", "0.9"],
        )
        assert code == 1
        assert "error[ConfigError]" in err
        assert "tau_low" in err

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"mode": "synthetic", "bogus": 1}))
        code, _, err = run_cli(capsys, ["run", "--config", str(config_path)])
        assert code == 1
        assert "bogus" in err


class TestDatasetCommands:
    @pytest.fixture()
    def finished_run(self, tmp_path, capsys):
        run_dir = tmp_path / "run"
        code, _, _ = run_cli(capsys, ["run", "--run-dir", str(run_dir)] + RUN_ARGS)
        assert code == 0
        return run_dir

    def test_filter(self, tmp_path, capsys):
        rows = [
            {"image_id": "a", "question": "q", "question_type": "numeric_value",
             "pseudo_label": "1", "consensus_score": 0.5, "accuracy": 0.5},
            {"image_id": "b", "question": "q", "question_type": "numeric_value",
             "pseudo_label": "1", "consensus_score": 0.9, "accuracy": 0.9},
            {"image_id": "c", "question": "q", "question_type": "numeric_value",
             "pseudo_label": "1", "consensus_score": 0.3, "accuracy": 0.3},
        ]
        src = tmp_path / "d_train.jsonl"
        src.write_text("".join(json.dumps(r) + "\n" for r in rows))
        dst = tmp_path / "d_train_star.jsonl"
        code, out, _ = run_cli(
            capsys,
            ["dataset", "filter", "--input", str(src), "--output", str(dst),
             "--low", "0.3", "--high", "0.8"],
        )
        assert code == 0
        kept = read_jsonl(dst)
        assert [r["image_id"] for r in kept] == ["a"]
        assert json.loads(out) == {"input": 3, "kept": 1}

    def test_stats_and_report(self, finished_run, tmp_path, capsys):
        out_path = tmp_path / "report.json"
        code, out, _ = run_cli(
            capsys,
            ["dataset", "stats", "--run-dir", str(finished_run), "--out", str(out_path)],
        )
        assert code == 0
        report = json.loads(out_path.read_text())
        assert report["cycles"][0]["consensus_histogram"]["total"] >= 1

        code2, out2, _ = run_cli(capsys, ["report", "--run-dir", str(finished_run)])
        assert code2 == 0
        assert Path(out2.strip()).exists()

    def test_dataset_build(self, finished_run, tmp_path, capsys):
        d_active = finished_run / "cycle1" / "d_active.jsonl"
        out_dir = tmp_path / "built"
        code, out, _ = run_cli(
            capsys,
            ["dataset", "build", "--d-active", str(d_active), "--out-dir", str(out_dir)]
            + RUN_ARGS,
        )
        assert code == 0
        counts = json.loads(out)
        assert counts["d_train_star"] <= counts["d_train"]
        rows = read_jsonl(out_dir / "d_train_star.jsonl")
        for row in rows:
            assert 0.3 < row["accuracy"] < 0.8


class TestGrpoCheck:
    def test_passes_tolerance(self, capsys):
        code, out, _ = run_cli(capsys, ["grpo", "check", "--trials", "40"])
        assert code == 0
        payload = json.loads(out)
        assert payload["max_relative_error"] < 1e-4


class TestUsage:
    def test_no_command_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_flag_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--frobnicate"])
        assert exc.value.code == 2

    def test_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for name in ("index", "synth", "run", "dataset", "grpo", "report"):
            assert name in out
