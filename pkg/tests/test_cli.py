"""Command line: schema validation, tiny end-to-end runs, output files."""

import json
import subprocess
import sys

import pytest

import iclsim.cli as cli
from iclsim import training as tr
from iclsim.cli import ConfigError, _parse_seeds, main, validate_config


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def tiny_meta_config(out, seeds=(0,)):
    # 1 layer, 1 epoch, 8 tasks: seconds, not minutes
    return {
        "family": "category",
        "n_layers": 1,
        "epochs": 1,
        "n_tasks": 8,
        "batch_size": 8,
        "n_validation": 2,
        "n_test": 1,
        "seeds": list(seeds),
        "out": str(out),
    }


STATS_TABLE = {
    "context_learning_compositional": [
        {"rotation": "rule_like", "curriculum": "blocked", "successes": 480, "failures": 0},
        {"rotation": "rule_like", "curriculum": "interleaved", "successes": 112, "failures": 368},
        {"rotation": "rotated", "curriculum": "blocked", "successes": 2, "failures": 478},
        {"rotation": "rotated", "curriculum": "interleaved", "successes": 1, "failures": 479},
    ]
}


@pytest.fixture(scope="module")
def meta_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("meta")
    cfg = write_config(root / "cfg.json", tiny_meta_config(root / "out"))
    assert main(["metalearn", "--config", cfg]) == 0
    return root / "out"


@pytest.fixture(scope="module")
def finetune_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ft")
    cfg = write_config(root / "cfg.json", {
        "family": "category",
        "rotations": [tr.RULE_LIKE],
        "curricula": [tr.INTERLEAVED],
        "seeds": [0],
        "n_tasks": 1,
        "n_blocks": 2,
        "steps_per_block": 2,
        "out": str(root / "out"),
    })
    assert main(["finetune", "--config", cfg]) == 0
    return root / "out"


# ---------------------------------------------------------------- validation

def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        validate_config("stats", {"tables": {}, "out": "x", "bogus": 1})


def test_missing_required_key_rejected():
    with pytest.raises(ConfigError, match="missing required key 'out'"):
        validate_config("stats", {"tables": {}})


def test_wrong_type_rejected():
    with pytest.raises(ConfigError, match="key 'seeds' must be list"):
        validate_config("metalearn", {"family": "category", "seeds": "0", "out": "x"})


def test_all_problems_reported_at_once():
    with pytest.raises(ConfigError) as err:
        validate_config("report", {"bogus": 1})
    assert "unknown key 'bogus'" in str(err.value)
    assert "missing required key 'runs'" in str(err.value)
    assert "missing required key 'out'" in str(err.value)


def test_parse_seeds():
    assert _parse_seeds("0,1,2") == [0, 1, 2]
    assert _parse_seeds("0-3") == [0, 1, 2, 3]
    assert _parse_seeds("5, 7-9, 12") == [5, 7, 8, 9, 12]
    assert _parse_seeds("-3") == [-3]


def test_main_exit_2_on_unknown_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"tables": {}, "out": str(tmp_path), "bogus": 1})
    assert main(["stats", "--config", cfg]) == 2
    assert "unknown key 'bogus'" in capsys.readouterr().err


def test_main_exit_2_on_missing_file(tmp_path, capsys):
    assert main(["stats", "--config", str(tmp_path / "absent.json")]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_main_exit_2_on_bad_json(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    assert main(["stats", "--config", str(path)]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_main_seeds_flag_needs_seeded_command(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"tables": STATS_TABLE, "out": str(tmp_path / "o")})
    assert main(["stats", "--config", cfg, "--seeds", "0"]) == 2
    assert "--seeds does not apply" in capsys.readouterr().err


# ---------------------------------------------------------------- metalearn

def test_metalearn_writes_summary_and_run_dirs(meta_dir):
    summary = json.loads((meta_dir / "summary.json").read_text())
    assert set(summary["seeds"]) == {"0"}
    entry = summary["seeds"]["0"]
    assert entry["epochs_done"] == 1
    assert entry["included"] is False  # one epoch of a tiny model stays at chance
    assert entry["validation_successes"] + entry["validation_failures"] == 2 * 32
    assert (meta_dir / "seed00" / "manifest.json").exists()
    assert (meta_dir / "seed00" / "model.dupx").exists()


def test_metalearn_resume_is_idempotent(meta_dir, tmp_path):
    before = (meta_dir / "summary.json").read_bytes()
    cfg = write_config(tmp_path / "c.json", tiny_meta_config(meta_dir))
    assert main(["metalearn", "--config", cfg, "--resume"]) == 0
    assert (meta_dir / "summary.json").read_bytes() == before


def test_metalearn_worker_pool_and_seed_ranges(tmp_path):
    cfg = write_config(tmp_path / "c.json", tiny_meta_config(tmp_path / "out"))
    assert main(["metalearn", "--config", cfg, "--seeds", "0-1", "--workers", "2"]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert set(summary["seeds"]) == {"0", "1"}


# ---------------------------------------------------------------- fewshot

def test_fewshot_outputs(meta_dir, tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path / "c.json", {
        "family": "category",
        "model_dirs": [str(meta_dir / "seed00")],
        "rotations": [tr.RULE_LIKE],
        "curricula": [tr.BLOCKED, tr.INTERLEAVED],
        "n_tasks": 2,
        "out": str(out),
    })
    assert main(["fewshot", "--config", cfg]) == 0
    lines = (out / "fewshot.csv").read_text().strip().splitlines()
    assert lines[0] == "seed,rotation,curriculum,successes,failures,accuracy,included"
    assert len(lines) == 3
    payload = json.loads((out / "fewshot.json").read_text())
    assert [row["curriculum"] for row in payload] == [tr.BLOCKED, tr.INTERLEAVED]
    for row in payload:
        assert row["successes"] + row["failures"] == 2 * 32
        assert row["model_dir"] == str(meta_dir / "seed00")
        assert row["included"] is False


def test_fewshot_rejects_family_mismatch(meta_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {
        "family": "compositional",
        "model_dirs": [str(meta_dir / "seed00")],
        "rotations": [tr.RULE_LIKE],
        "curricula": [tr.BLOCKED],
        "n_tasks": 1,
        "out": str(tmp_path / "out"),
    })
    assert main(["fewshot", "--config", cfg]) == 2
    assert "holds a category model" in capsys.readouterr().err


# ---------------------------------------------------------------- finetune

def test_finetune_writes_cells_and_run_dirs(finetune_dir):
    lines = (finetune_dir / "cells.csv").read_text().strip().splitlines()
    assert len(lines) == 2
    cells = json.loads((finetune_dir / "cells.json").read_text())
    assert len(cells) == 1
    cell = cells[0]
    assert cell["rotation"] == tr.RULE_LIKE
    assert cell["train"][0] + cell["train"][1] == 32
    assert cell["test"][0] + cell["test"][1] == 32
    (run_dir,) = cell["run_dirs"]
    assert tr.finetune_run_complete(run_dir)


def test_finetune_resume_reuses_runs(finetune_dir, tmp_path):
    before = (finetune_dir / "cells.csv").read_bytes()
    cfg = write_config(tmp_path / "c.json", {
        "family": "category",
        "rotations": [tr.RULE_LIKE],
        "curricula": [tr.INTERLEAVED],
        "seeds": [0],
        "n_tasks": 1,
        "n_blocks": 2,
        "steps_per_block": 2,
        "out": str(finetune_dir),
    })
    assert main(["finetune", "--config", cfg, "--resume"]) == 0
    assert (finetune_dir / "cells.csv").read_bytes() == before


# ---------------------------------------------------------------- report

def test_report_aggregates_finetune_runs(finetune_dir, tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path / "c.json", {
        "runs": [str(finetune_dir / "*" / "seed*")],
        "out": str(out),
    })
    assert main(["report", "--config", cfg]) == 0
    lines = (out / "report.csv").read_text().strip().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith(f"{tr.RULE_LIKE},{tr.INTERLEAVED},{tr.INTERLEAVED},")
    assert lines[1].endswith(",1")  # one run in the cell
    bundle = json.loads((out / "report.json").read_text())
    assert bundle["seeds"] == [0]
    assert len(bundle["rows"]) == 1
    assert len(bundle["rows"][0]["run_dirs"]) == 1
    assert bundle["stats"] is None  # a single cell is not a full 2x2

    first = (out / "report.csv").read_bytes(), (out / "report.json").read_bytes()
    assert main(["report", "--config", cfg]) == 0
    assert ((out / "report.csv").read_bytes(), (out / "report.json").read_bytes()) == first


def test_report_with_no_matching_runs_fails(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {
        "runs": [str(tmp_path / "nowhere" / "*")],
        "out": str(tmp_path / "out"),
    })
    assert main(["report", "--config", cfg]) == 2
    assert "no complete run directories" in capsys.readouterr().err


# ---------------------------------------------------------------- stats

def test_stats_outputs(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path / "c.json", {"tables": STATS_TABLE, "out": str(out)})
    assert main(["stats", "--config", cfg]) == 0
    stats = json.loads((out / "stats.json").read_text())
    entry = stats["context_learning_compositional"]
    assert set(entry["effects"]) == {"rotation", "curriculum", "rotation:curriculum"}
    assert entry["effects"]["curriculum"]["p"] < 1e-6
    assert "rule_like" in entry["simple_effects"]
    text = (out / "stats.txt").read_text()
    assert "curriculum within rule_like" in text


def test_out_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"tables": STATS_TABLE, "out": str(tmp_path / "a")})
    assert main(["stats", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "stats.json").exists()
    assert not (tmp_path / "a").exists()


# ---------------------------------------------------------------- llm

def test_llm_mock_then_replay(tmp_path):
    fixtures = tmp_path / "fixtures.jsonl"
    base = {
        "model": "mock-model",
        "rotations": [tr.RULE_LIKE],
        "curricula": [tr.BLOCKED, tr.INTERLEAVED],
        "n_tasks": 2,
        "fixtures": str(fixtures),
    }
    mock_cfg = write_config(tmp_path / "mock.json",
                            dict(base, mode="mock", out=str(tmp_path / "mock_out")))
    assert main(["llm", "--config", mock_cfg]) == 0
    report = (tmp_path / "mock_out" / "report.txt").read_text()
    assert "100.00%" in report
    tallies = json.loads((tmp_path / "mock_out" / "tallies.json").read_text())
    assert [t["successes"] for t in tallies] == [2 * 16 * 5] * 2
    assert all(t["failures"] == 0 and t["excluded"] == 0 for t in tallies)

    replay_cfg = write_config(tmp_path / "replay.json",
                              dict(base, mode="replay", out=str(tmp_path / "replay_out")))
    assert main(["llm", "--config", replay_cfg]) == 0
    assert ((tmp_path / "replay_out" / "tallies.json").read_bytes()
            == (tmp_path / "mock_out" / "tallies.json").read_bytes())


def test_llm_replay_requires_fixtures(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {
        "model": "m", "mode": "replay",
        "rotations": [tr.RULE_LIKE], "curricula": [tr.BLOCKED],
        "n_tasks": 1, "out": str(tmp_path / "out"),
    })
    assert main(["llm", "--config", cfg]) == 2
    assert "replay mode needs a fixtures path" in capsys.readouterr().err


def test_llm_unknown_mode_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {
        "model": "m", "mode": "bogus",
        "rotations": [tr.RULE_LIKE], "curricula": [tr.BLOCKED],
        "n_tasks": 1, "out": str(tmp_path / "out"),
    })
    assert main(["llm", "--config", cfg]) == 2
    assert "unknown llm mode" in capsys.readouterr().err


# ---------------------------------------------------------------- sweep

def test_sweep_outputs(meta_dir, tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path / "c.json", {
        "family": "category",
        "model_dir": str(meta_dir / "seed00"),
        "kind": "example_mask",
        "grid": [0.0, 1.0],
        "n_tasks": 1,
        "finetune": {"n_blocks": 2, "steps_per_block": 2},
        "out": str(out),
    })
    assert main(["sweep", "--config", cfg]) == 0
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "grid_value,task_index,few_shot,cumulative_loss,steps_to_criterion,retention"
    assert len(lines) == 1 + 2  # two grid points, one task each
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["grid_means"]) == {"few_shot", "cumulative_loss",
                                           "steps_to_criterion", "retention"}
    assert all(len(v) == 2 for v in manifest["grid_means"].values())
    for rho in manifest["trends"].values():
        assert -1.0 <= rho <= 1.0


# ---------------------------------------------------------------- shipped configs

CONFIG_COMMANDS = {
    "category_iwl": "finetune",
    "category_iwl_report": "report",
    "category_meta": "metalearn",
    "category_meta_finetune": "finetune",
    "category_meta_finetune_report": "report",
    "category_meta_interleaved": "metalearn",
    "category_fewshot": "fewshot",
    "compositional_iwl": "finetune",
    "compositional_iwl_report": "report",
    "compositional_meta": "metalearn",
    "compositional_meta_finetune": "finetune",
    "compositional_meta_finetune_report": "report",
    "compositional_meta_small": "metalearn",
    "compositional_fewshot": "fewshot",
    "llm_live": "llm",
    "llm_mock": "llm",
    "llm_replay": "llm",
    "stats_reference_counts": "stats",
    "sweep_example_mask": "sweep",
    "sweep_value_noise": "sweep",
}


def test_every_shipped_config_validates():
    from importlib.resources import files

    root = files("iclsim") / "configs"
    names = {p.name[:-5] for p in root.iterdir() if p.name.endswith(".json")}
    assert names == set(CONFIG_COMMANDS)
    for name, command in CONFIG_COMMANDS.items():
        cfg = json.loads((root / f"{name}.json").read_text())
        validate_config(command, cfg)


def test_shipped_stats_config_runs(tmp_path):
    from importlib.resources import files

    cfg_path = files("iclsim") / "configs" / "stats_reference_counts.json"
    assert main(["stats", "--config", str(cfg_path), "--out", str(tmp_path / "out")]) == 0
    stats = json.loads((tmp_path / "out" / "stats.json").read_text())
    assert len(stats) == 6
    for entry in stats.values():
        assert set(entry["effects"]) == {"rotation", "curriculum", "rotation:curriculum"}


# ---------------------------------------------------------------- entry point

def test_console_script_smoke(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"tables": STATS_TABLE, "out": str(tmp_path / "out")})
    proc = subprocess.run(
        [sys.executable, "-m", "iclsim.cli", "stats", "--config", cfg],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "curriculum" in proc.stdout
