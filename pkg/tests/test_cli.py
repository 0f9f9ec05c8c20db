import json

import pytest

from vqaharness.backends import BackendRequest, ScriptedBackend, preset
from vqaharness.cli import load_config, main
from vqaharness.datasets import CONVERT_PROMPT

from conftest import CONVERSION_CASES, record_store, write_fixture_dataset, write_fixture_pool


def write_config(path, dataset, out_dir, extra=""):
    path.write_text(
        f"""
[dataset]
path = "{dataset}"
format = "canonical"

[experiment]
template = "qa"
setting = "standard"
sample_limit = 6
run_name = "cli-run"
output_dir = "{out_dir}"

[backend]
kind = "scripted"
{extra}
""",
        encoding="utf-8",
    )
    return path


@pytest.fixture
def cli_env(tmp_path):
    dataset = tmp_path / "data.jsonl"
    write_fixture_dataset(dataset, n=10)
    config = write_config(tmp_path / "config.toml", dataset, tmp_path / "out")
    return config, tmp_path


class TestRunCommand:
    def test_run_succeeds(self, cli_env, capsys):
        config, tmp_path = cli_env
        code = main(["run", "--config", str(config)])
        out = capsys.readouterr().out
        assert code == 0
        assert "mean score" in out
        assert (tmp_path / "out" / "cli-run" / "results.jsonl").exists()
        assert (tmp_path / "out" / "cli-run" / "report.json").exists()

    def test_flag_overrides(self, cli_env):
        config, tmp_path = cli_env
        code = main(["run", "--config", str(config), "--sample-limit", "3", "--run-name", "tiny"])
        assert code == 0
        results = (tmp_path / "out" / "tiny" / "results.jsonl").read_text().strip().splitlines()
        assert len(results) == 3

    def test_sample_errors_exit_code_2(self, cli_env, tmp_path):
        config, base = cli_env
        empty_store = tmp_path / "empty_store.jsonl"
        empty_store.write_text("")
        config.write_text(
            config.read_text().replace(
                'kind = "scripted"',
                f'kind = "scripted"\nreplay_mode = "replay"\nreplay_store = "{empty_store}"',
            )
        )
        code = main(["run", "--config", str(config), "--run-name", "misses"])
        assert code == 2

    def test_fatal_config_error_exit_code_1(self, cli_env, capsys):
        config, _ = cli_env
        code = main(["run", "--config", str(config), "--setting", "nonsense"])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_env_interpolation(self, tmp_path, monkeypatch):
        dataset = tmp_path / "data.jsonl"
        write_fixture_dataset(dataset, n=2)
        monkeypatch.setenv("CLI_TEST_DATASET", str(dataset))
        config = tmp_path / "config.toml"
        config.write_text(
            f"""
[dataset]
path = "${{CLI_TEST_DATASET}}"
format = "canonical"

[experiment]
run_name = "env-run"
output_dir = "{tmp_path / 'out'}"

[backend]
kind = "scripted"
""",
            encoding="utf-8",
        )
        doc = load_config(str(config))
        assert doc["dataset"]["path"] == str(dataset)
        assert main(["run", "--config", str(config)]) == 0


class TestScoreCommand:
    def test_rescore_with_parse_toggle(self, cli_env, tmp_path):
        config, base = cli_env
        assert main(["run", "--config", str(config)]) == 0
        results = base / "out" / "cli-run" / "results.jsonl"
        code = main([
            "score", "--config", str(config), "--results", str(results),
            "--run-name", "rescored", "--llm-parse",
        ])
        assert code == 0
        assert (base / "out" / "rescored" / "results.jsonl").exists()


class TestConvertCommand:
    def test_converts_via_replay(self, tmp_path, capsys):
        samples = [
            {"id": f"w{i}", "image_0": f"a{i}.png", "image_1": f"b{i}.png",
             "caption_0": CONVERSION_CASES[i][0], "caption_1": CONVERSION_CASES[i + 1][0]}
            for i in range(3)
        ]
        dataset = tmp_path / "wg.jsonl"
        dataset.write_text("\n".join(json.dumps(s) for s in samples) + "\n")

        script = {CONVERT_PROMPT + s: q for s, q in CONVERSION_CASES}
        store = record_store(
            tmp_path, "convert_store.jsonl", ScriptedBackend(script=script),
            [BackendRequest(prompt=p, gen=preset("convert"), purpose="convert") for p in script],
        )
        config = tmp_path / "config.toml"
        config.write_text(
            f"""
[dataset]
path = "{dataset}"
format = "winoground"

[experiment]
output_dir = "{tmp_path / 'out'}"

[backend]
kind = "scripted"
replay_mode = "replay"
replay_store = "{store}"
""",
            encoding="utf-8",
        )
        out = tmp_path / "converted.jsonl"
        review = tmp_path / "review.tsv"
        code = main([
            "convert-winoground", "--config", str(config),
            "--out", str(out), "--review", str(review),
        ])
        assert code == 0
        converted = [json.loads(line) for line in out.read_text().splitlines()]
        assert converted[0]["converted"][0] == CONVERSION_CASES[0][1]
        assert review.read_text().startswith("statement\tconverted_question\tvalid")


class TestEmbedPoolCommand:
    def test_fills_missing_embeddings(self, tmp_path):
        pool = tmp_path / "pool.jsonl"
        write_fixture_pool(pool, n=5)
        assert main(["embed-pool", "--pool", str(pool), "--dim", "8"]) == 0
        rows = [json.loads(line) for line in pool.read_text().splitlines()]
        assert all(len(row["embedding"]) == 8 for row in rows)


class TestReportAndCompare:
    def test_report_prints_summary(self, cli_env, capsys):
        config, base = cli_env
        main(["run", "--config", str(config)])
        capsys.readouterr()
        code = main(["report", "--report", str(base / "out" / "cli-run" / "report.json")])
        out = capsys.readouterr().out
        assert code == 0
        assert "mean score" in out

    def test_results_summary(self, cli_env, capsys):
        config, base = cli_env
        main(["run", "--config", str(config)])
        capsys.readouterr()
        code = main(["report", "--results", str(base / "out" / "cli-run" / "results.jsonl")])
        assert code == 0
        assert "samples: 6" in capsys.readouterr().out

    def test_compare_self_is_zero(self, cli_env, capsys):
        config, base = cli_env
        main(["run", "--config", str(config)])
        report = base / "out" / "cli-run" / "report.json"
        capsys.readouterr()
        code = main(["compare", "--a", str(report), "--b", str(report)])
        out = capsys.readouterr().out
        assert code == 0
        assert "+0.0000" in out

    def test_compare_mismatch_fails(self, cli_env, tmp_path, capsys):
        config, base = cli_env
        main(["run", "--config", str(config)])
        other_dataset = tmp_path / "other.jsonl"
        write_fixture_dataset(other_dataset, n=4)
        other_config = write_config(tmp_path / "other.toml", other_dataset, tmp_path / "out2")
        main(["run", "--config", str(other_config)])
        code = main([
            "compare",
            "--a", str(base / "out" / "cli-run" / "report.json"),
            "--b", str(tmp_path / "out2" / "cli-run" / "report.json"),
        ])
        assert code == 1
