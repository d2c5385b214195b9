"""Config-driven command line: every experiment cell behind one entry point.

Each subcommand reads a JSON config, validates it against a strict schema
(unknown keys are errors), runs the corresponding pipeline and writes
machine-readable outputs: run directories, CSV tables, JSON summaries.
"""

from __future__ import annotations

import argparse
import glob
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import training as tr
from .glm import ConditionCount, curriculum_rotation_analysis, simple_effect
from .llm import (
    CompletionClient,
    CompletionConfig,
    condition_answer_key,
    condition_report,
    oracle_transport,
    run_condition,
)
from .model import AttentionIntervention
from .training import metrics_csv, write_run_dir


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- validation

_NUM = (int, float)
_OPT_INT = (int, type(None))

_SCHEMAS: dict[str, dict[str, tuple[tuple, bool]]] = {
    "metalearn": {
        "family": ((str,), True),
        "rotation": ((str,), False),
        "curriculum": ((str,), False),
        "epochs": ((int,), False),
        "lr": (_NUM, False),
        "batch_size": ((int,), False),
        "n_tasks": ((int,), False),
        "n_validation": ((int,), False),
        "n_test": ((int,), False),
        "inclusion_threshold": (_NUM, False),
        "n_layers": (_OPT_INT, False),
        "seeds": ((list,), True),
        "out": ((str,), True),
    },
    "fewshot": {
        "family": ((str,), True),
        "model_dirs": ((list,), True),
        "rotations": ((list,), True),
        "curricula": ((list,), True),
        "n_tasks": ((int,), True),
        "query_set": ((str,), False),
        "eval_seed": ((int,), False),
        "exclude_meta_tasks": ((bool,), False),
        "out": ((str,), True),
    },
    "finetune": {
        "family": ((str,), True),
        "rotations": ((list,), True),
        "curricula": ((list,), True),
        "seeds": ((list,), True),
        "n_tasks": ((int,), True),
        "model_root": ((str, type(None)), False),
        "require_included": ((bool,), False),
        "n_blocks": ((int,), False),
        "steps_per_block": ((int,), False),
        "lr": (_NUM, False),
        "context_curriculum": ((str, type(None)), False),
        "step_curriculum": ((str, type(None)), False),
        "intervention": ((dict, type(None)), False),
        "out": ((str,), True),
    },
    "sweep": {
        "family": ((str,), True),
        "model_dir": ((str,), True),
        "kind": ((str,), True),
        "grid": ((list,), True),
        "n_tasks": ((int,), True),
        "tasks_rotation": ((str,), False),
        "tasks_curriculum": ((str,), False),
        "seed": ((int,), False),
        "exclude_meta_tasks": ((bool,), False),
        "finetune": ((dict,), False),
        "out": ((str,), True),
    },
    "llm": {
        "model": ((str,), True),
        "mode": ((str,), True),
        "endpoint": ((str,), False),
        "temperature": (_NUM, False),
        "max_tokens": ((int,), False),
        "runs": ((int,), False),
        "max_in_flight": ((int,), False),
        "api_key_env": ((str,), False),
        "rotations": ((list,), True),
        "curricula": ((list,), True),
        "n_tasks": ((int,), True),
        "seed": ((int,), False),
        "fixtures": ((str, type(None)), False),
        "out": ((str,), True),
    },
    "stats": {
        "tables": ((dict,), True),
        "out": ((str,), True),
    },
    "report": {
        "runs": ((list,), True),
        "out": ((str,), True),
    },
}

_FINETUNE_OVERRIDE_KEYS = ("n_blocks", "steps_per_block", "lr")


def validate_config(command: str, config: dict) -> dict:
    schema = _SCHEMAS[command]
    problems = []
    for key in config:
        if key not in schema:
            problems.append(f"unknown key {key!r} (allowed: {', '.join(sorted(schema))})")
    for key, (types, required) in schema.items():
        if key not in config:
            if required:
                problems.append(f"missing required key {key!r}")
            continue
        if not isinstance(config[key], tuple(types)):
            names = "/".join(t.__name__ for t in types)
            problems.append(f"key {key!r} must be {names}, got {type(config[key]).__name__}")
    if problems:
        raise ConfigError(f"invalid {command} config: " + "; ".join(problems))
    return config


def _parse_seeds(text: str) -> list[int]:
    """Seed list syntax: "0,1,2" and ranges "0-9", mixable."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


# ---------------------------------------------------------------- metalearn

def _metalearn_job(args):
    cfg, seed, out_dir, resume, verbose = args
    _, report = tr.metalearn(cfg, seed, out_dir=out_dir, resume=resume, verbose=verbose)
    v = report.validation
    return seed, {
        "included": report.included,
        "aborted": report.aborted,
        "epochs_done": report.epochs_done,
        "validation_successes": v.successes if v else None,
        "validation_failures": v.failures if v else None,
        "validation_accuracy": v.accuracy if v else None,
    }


def cmd_metalearn(config: dict, workers: int, resume: bool, verbose: bool) -> int:
    seeds = [int(s) for s in config["seeds"]]
    out = Path(config["out"])
    overrides = {
        k: config[k]
        for k in ("rotation", "curriculum", "epochs", "lr", "batch_size", "n_tasks",
                  "n_validation", "n_test", "inclusion_threshold", "n_layers")
        if k in config
    }
    cfg = tr.meta_config(config["family"], **overrides)
    jobs = [(cfg, s, out / f"seed{s:02d}", resume, verbose) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(_metalearn_job, jobs))
    else:
        results = dict(_metalearn_job(j) for j in jobs)
    summary = {"config": asdict(cfg), "config_hash": cfg.hash(), "seeds": {}}
    for seed in seeds:
        summary["seeds"][str(seed)] = results[seed]
        r = results[seed]
        print(f"seed {seed}: included={r['included']} "
              f"validation={r['validation_accuracy']}", flush=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------- fewshot

def cmd_fewshot(config: dict, workers: int, resume: bool, verbose: bool) -> int:
    out = Path(config["out"])
    query_set = config.get("query_set", "heldout")
    eval_seed = config.get("eval_seed", 0)
    exclude = config.get("exclude_meta_tasks", True)
    rows = []
    provenance = []
    for model_dir in config["model_dirs"]:
        model, mcfg, report = tr.load_meta_model(model_dir)
        if mcfg.family != config["family"]:
            raise ConfigError(f"{model_dir} holds a {mcfg.family} model")
        run_seed = json.loads((Path(model_dir) / "manifest.json").read_text())["seed"]
        keys = tr.meta_task_keys(mcfg, run_seed) if exclude else None
        for rotation in config["rotations"]:
            for curriculum in config["curricula"]:
                tasks = tr.build_eval_tasks(
                    config["family"], config["n_tasks"], rotation, curriculum,
                    seed=tr.derive_seed(run_seed, "fewshot", rotation, curriculum, eval_seed),
                    exclude_keys=keys,
                )
                tally = tr.few_shot_eval(
                    model, config["family"], tasks, curriculum, query_set,
                    seed=tr.derive_seed(run_seed, "fewshot_eval", rotation, curriculum, eval_seed),
                )
                rows.append([
                    run_seed, rotation, curriculum, tally.successes, tally.failures,
                    tally.accuracy, bool(report.get("included")),
                ])
                provenance.append(str(model_dir))
                if verbose:
                    print(f"seed {run_seed} {rotation}/{curriculum}: "
                          f"{tally.successes}/{tally.total}", flush=True)
    out.mkdir(parents=True, exist_ok=True)
    header = ["seed", "rotation", "curriculum", "successes", "failures", "accuracy", "included"]
    (out / "fewshot.csv").write_bytes(metrics_csv(header, rows))
    payload = [dict(zip(header + ["model_dir"], row + [src]))
               for row, src in zip(rows, provenance)]
    (out / "fewshot.json").write_text(json.dumps(payload, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------- finetune

def cmd_finetune(config: dict, workers: int, resume: bool, verbose: bool) -> int:
    family = config["family"]
    out = Path(config["out"])
    seeds = [int(s) for s in config["seeds"]]
    model_root = config.get("model_root")
    overrides = {k: config[k] for k in _FINETUNE_OVERRIDE_KEYS if k in config}
    if config.get("intervention"):
        overrides["intervention"] = AttentionIntervention(**config["intervention"])

    model_for_seed = None
    exclude_for_seed = None
    if model_root:
        root = Path(model_root)

        def model_for_seed(seed):
            model, _, _ = tr.load_meta_model(root / f"seed{seed:02d}")
            return model

        def exclude_for_seed(seed):
            _, mcfg, _ = tr.load_meta_model(root / f"seed{seed:02d}")
            return tr.meta_task_keys(mcfg, seed)

        if config.get("require_included", False):
            kept = []
            for seed in seeds:
                _, _, report = tr.load_meta_model(root / f"seed{seed:02d}")
                if report.get("included"):
                    kept.append(seed)
                elif verbose:
                    print(f"seed {seed}: excluded (below inclusion threshold)", flush=True)
            seeds = kept
            if not seeds:
                raise ConfigError("no seeds pass the inclusion threshold")

    rows = []
    cells_json = []
    for rotation in config["rotations"]:
        for curriculum in config["curricula"]:
            ctx = config.get("context_curriculum") or curriculum
            step = config.get("step_curriculum") or curriculum
            cell_dir = out / f"{rotation}-{ctx}x{step}"
            result = tr.run_finetune_cell(
                family, rotation, curriculum, seeds, config["n_tasks"],
                model_for_seed=model_for_seed,
                exclude_keys_for_seed=exclude_for_seed,
                out_root=cell_dir,
                context_curriculum=ctx,
                step_curriculum=step,
                resume=resume,
                verbose=verbose,
                **overrides,
            )
            train, test = result.train_tally(), result.test_tally()
            rows.append([
                rotation, ctx, step,
                train.successes, train.failures, train.accuracy,
                test.successes, test.failures, test.accuracy,
            ])
            cells_json.append({
                "rotation": rotation,
                "context_curriculum": ctx,
                "step_curriculum": step,
                "train": [train.successes, train.failures],
                "test": [test.successes, test.failures],
                "n_runs": len(result.runs),
                "run_dirs": [
                    str(cell_dir / f"seed{r.seed:02d}-task{r.task_index:02d}")
                    for r in result.runs
                ],
            })
            if verbose:
                print(f"cell {rotation}/{ctx}x{step}: train {train.successes}/{train.total} "
                      f"test {test.successes}/{test.total}", flush=True)
    out.mkdir(parents=True, exist_ok=True)
    header = ["rotation", "context_curriculum", "step_curriculum",
              "train_successes", "train_failures", "train_accuracy",
              "test_successes", "test_failures", "test_accuracy"]
    (out / "cells.csv").write_bytes(metrics_csv(header, rows))
    (out / "cells.json").write_text(json.dumps(cells_json, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------- sweep

def cmd_sweep(config: dict, workers: int, resume: bool, verbose: bool) -> int:
    from .glm import spearman

    family = config["family"]
    out = Path(config["out"])
    model, mcfg, _ = tr.load_meta_model(config["model_dir"])
    if mcfg.family != family:
        raise ConfigError(f"{config['model_dir']} holds a {mcfg.family} model")
    seed = config.get("seed", 0)
    run_seed = json.loads((Path(config["model_dir"]) / "manifest.json").read_text())["seed"]
    keys = tr.meta_task_keys(mcfg, run_seed) if config.get("exclude_meta_tasks", True) else None
    rotation = config.get("tasks_rotation", tr.RULE_LIKE)
    curriculum = config.get("tasks_curriculum", tr.INTERLEAVED)
    tasks = tr.build_eval_tasks(
        family, config["n_tasks"], rotation, curriculum,
        seed=tr.derive_seed(seed, "sweep_tasks", config["kind"]),
        exclude_keys=keys,
    )
    points = tr.tradeoff_sweep(
        model, family, tasks, kind=config["kind"], grid=tuple(config["grid"]),
        seed=seed, verbose=verbose, **config.get("finetune", {}),
    )
    grid = [p.value for p in points]
    means = {
        name: [p.mean(name) for p in points]
        for name in ("few_shot", "cumulative_loss", "steps_to_criterion", "retention")
    }
    trends = {name: spearman(grid, vals) for name, vals in means.items()}
    write_run_dir(
        out, {"sweep": config}, seed,
        ["grid_value", "task_index", "few_shot", "cumulative_loss",
         "steps_to_criterion", "retention"],
        tr.sweep_rows(points),
        extra={"grid_means": means, "trends": trends},
    )
    for name, rho in trends.items():
        print(f"{name}: spearman vs grid = {rho:+.3f}", flush=True)
    return 0


# ---------------------------------------------------------------- llm

def cmd_llm(config: dict, workers: int, resume: bool, verbose: bool) -> int:
    out = Path(config["out"])
    mode = config["mode"]
    if mode not in ("live", "replay", "mock"):
        raise ConfigError(f"unknown llm mode {mode!r}")
    cfg_kw = {k: config[k] for k in ("endpoint", "temperature", "max_tokens", "runs",
                                     "max_in_flight", "api_key_env") if k in config}
    cfg = CompletionConfig(model=config["model"], **cfg_kw)
    seed = config.get("seed", 0)
    fixtures = config.get("fixtures")
    n_tasks = config["n_tasks"]
    conditions = [(r, c) for r in config["rotations"] for c in config["curricula"]]
    if mode == "mock":
        answers = {}
        for rotation, curriculum in conditions:
            answers.update(condition_answer_key(rotation, curriculum, n_tasks, seed))
        client = CompletionClient(cfg, transport=oracle_transport(answers),
                                  fixture_path=fixtures)
    elif mode == "replay":
        if not fixtures:
            raise ConfigError("replay mode needs a fixtures path")
        client = CompletionClient(cfg, replay=True, fixture_path=fixtures)
    else:
        client = CompletionClient(cfg, fixture_path=fixtures)
    results = [
        run_condition(client, rotation, curriculum, n_tasks, seed=seed, verbose=verbose)
        for rotation, curriculum in conditions
    ]
    out.mkdir(parents=True, exist_ok=True)
    report = condition_report(results)
    (out / "report.txt").write_text(report)
    tallies = [
        {
            "model": r.model, "rotation": r.rotation, "curriculum": r.curriculum,
            "successes": r.successes, "failures": r.failures, "excluded": r.excluded,
        }
        for r in results
    ]
    (out / "tallies.json").write_text(json.dumps(tallies, indent=2) + "\n")
    print(report, end="", flush=True)
    return 0


# ---------------------------------------------------------------- stats

def cmd_stats(config: dict, workers: int, resume: bool, verbose: bool) -> int:
    out = Path(config["out"])
    results = {}
    lines = []
    for name, cells in config["tables"].items():
        counts = [ConditionCount(c["rotation"], c["curriculum"],
                                 int(c["successes"]), int(c["failures"])) for c in cells]
        tests = curriculum_rotation_analysis(counts)
        entry = {"effects": {k: {"chi2": t.chi2, "df": t.df, "p": t.p}
                             for k, t in tests.items()},
                 "simple_effects": {}}
        lines.append(f"{name}:")
        for k, t in tests.items():
            lines.append(f"  {k}: chi2={t.chi2:.2f} df={t.df} p={t.p:.3g}")
        by_rot: dict[str, dict[str, ConditionCount]] = {}
        for c in counts:
            by_rot.setdefault(c.rotation, {})[c.curriculum] = c
        for rotation, by_cur in sorted(by_rot.items()):
            if len(by_cur) == 2:
                a, b = (by_cur[k] for k in sorted(by_cur))
                t = simple_effect(a, b, name=f"curriculum within {rotation}")
                entry["simple_effects"][rotation] = {"chi2": t.chi2, "df": t.df, "p": t.p}
                lines.append(f"  {t.name}: chi2={t.chi2:.2f} df={t.df} p={t.p:.3g}")
        results[name] = entry
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    (out / "stats.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines), flush=True)
    return 0


# ---------------------------------------------------------------- report

def cmd_report(config: dict, workers: int, resume: bool, verbose: bool) -> int:
    out = Path(config["out"])
    run_dirs = []
    for pattern in config["runs"]:
        run_dirs.extend(Path(p) for p in sorted(glob.glob(pattern)))
    groups: dict[tuple, dict] = {}
    seeds = set()
    for run_dir in run_dirs:
        manifest_path = run_dir / "manifest.json"
        if not manifest_path.exists():
            continue
        manifest = json.loads(manifest_path.read_text())
        if "final_train" not in manifest:
            continue
        cfg = manifest["config"]
        key = (manifest["rotation"], cfg["context_curriculum"], cfg["step_curriculum"])
        g = groups.setdefault(key, {"train": [0, 0], "test": [0, 0], "dirs": []})
        g["train"][0] += manifest["final_train"][0]
        g["train"][1] += manifest["final_train"][1]
        g["test"][0] += manifest["final_test"][0]
        g["test"][1] += manifest["final_test"][1]
        g["dirs"].append(str(run_dir))
        seeds.add(manifest.get("cell_seed", manifest["seed"]))
    if not groups:
        raise ConfigError("no complete run directories matched the patterns")
    rows = []
    rows_json = []
    for key in sorted(groups):
        g = groups[key]
        tr_s, tr_f = g["train"]
        te_s, te_f = g["test"]
        rows.append([
            *key, tr_s, tr_f, tr_s / (tr_s + tr_f), te_s, te_f, te_s / (te_s + te_f),
            len(g["dirs"]),
        ])
        rows_json.append({
            "rotation": key[0], "context_curriculum": key[1], "step_curriculum": key[2],
            "train": [tr_s, tr_f], "test": [te_s, te_f], "run_dirs": g["dirs"],
        })
    stats = None
    congruent = {k: g for k, g in groups.items() if k[1] == k[2]}
    if len(congruent) == 4 and len({k[0] for k in congruent}) == 2:
        counts = [
            ConditionCount(k[0], k[1], g["train"][0], g["train"][1])
            for k, g in sorted(congruent.items())
        ]
        tests = curriculum_rotation_analysis(counts)
        stats = {k: {"chi2": t.chi2, "df": t.df, "p": t.p} for k, t in tests.items()}
    out.mkdir(parents=True, exist_ok=True)
    header = ["rotation", "context_curriculum", "step_curriculum",
              "train_successes", "train_failures", "train_accuracy",
              "test_successes", "test_failures", "test_accuracy", "n_runs"]
    (out / "report.csv").write_bytes(metrics_csv(header, rows))
    bundle = {
        "rows": rows_json,
        "stats": stats,
        "seeds": sorted(seeds),
        "config": config,
    }
    (out / "report.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")
    for row in rows:
        print(",".join(str(v) for v in row), flush=True)
    return 0


# ---------------------------------------------------------------- entry point

_COMMANDS = {
    "metalearn": cmd_metalearn,
    "fewshot": cmd_fewshot,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "llm": cmd_llm,
    "stats": cmd_stats,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="iclsim",
        description="Curriculum effects in small transformers: training, evaluation, stats.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to a JSON config")
    parser.add_argument("--out", help="override the config's output directory")
    parser.add_argument("--seeds", help="override seeds, e.g. 0,1,2 or 0-9")
    parser.add_argument("--workers", type=int, default=1, help="parallel cells")
    parser.add_argument("--resume", action="store_true",
                        help="continue from existing checkpoints and run dirs")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    try:
        config = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        print(f"cannot read config {args.config}: {e}", file=sys.stderr)
        return 2
    if args.out:
        config["out"] = args.out
    if args.seeds:
        if "seeds" in _SCHEMAS[args.command]:
            config["seeds"] = _parse_seeds(args.seeds)
        else:
            print(f"--seeds does not apply to {args.command}", file=sys.stderr)
            return 2
    try:
        validate_config(args.command, config)
        return _COMMANDS[args.command](config, args.workers, args.resume, args.verbose)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
