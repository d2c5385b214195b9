"""Hosted-LLM evaluation on the compositional task.

Builds english-word prompts from task curricula ("red bear : 3 0 ; ..."),
sends them to a completions endpoint (or replays a recorded fixture), parses
the first two integers of each completion as a grid location, and tallies
per-condition accuracy into the same success/failure tables the simulated
experiments produce.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import compositional as comp
from .episodes import ENGLISH_ANIMALS, ENGLISH_COLORS
from .glm import ConditionCount, curriculum_rotation_analysis, simple_effect
from .rng import SplitRng

_INT_RE = re.compile(r"-?\d+")


# ---------------------------------------------------------------- prompts

@dataclass(frozen=True)
class PromptSpec:
    """Study pairs in presentation order plus the unanswered query cue."""

    study: tuple[tuple[str, str, tuple[int, int]], ...]
    query: tuple[str, str]
    separator: str = " ; "
    template: str = "plain"

    def __post_init__(self):
        if len(self.study) != 9:
            raise ValueError("a prompt presents exactly 9 study examples")
        if self.template != "plain":
            raise ValueError(f"unknown prompt template {self.template!r}")


def build_prompt(spec: PromptSpec) -> str:
    """Deterministic text: study examples then the query, colon left hanging."""
    parts = [f"{c} {a} : {x} {y}" for c, a, (x, y) in spec.study]
    parts.append(f"{spec.query[0]} {spec.query[1]} :")
    return spec.separator.join(parts)


def prompt_for_query(task: comp.CompTask, query: tuple[int, int]) -> str:
    """Prompt for one test cue of a task, study order from the task's curriculum."""
    study = tuple(
        (ENGLISH_COLORS[c], ENGLISH_ANIMALS[a], comp.location_of(task.spec, c, a))
        for c, a in task.curr.study
    )
    q = (ENGLISH_COLORS[query[0]], ENGLISH_ANIMALS[query[1]])
    return build_prompt(PromptSpec(study=study, query=q))


def parse_location(text: str) -> tuple[int, int] | None:
    """First two integers in the text, or None when fewer are present."""
    found = _INT_RE.findall(text)
    if len(found) < 2:
        return None
    return int(found[0]), int(found[1])


# ---------------------------------------------------------------- completion client

@dataclass(frozen=True)
class CompletionConfig:
    """Endpoint and sampling settings for one evaluated model."""

    endpoint: str = "http://localhost:8000/v1/completions"
    model: str = "llm"
    temperature: float = 0.1
    max_tokens: int = 7
    runs: int = 5
    timeout: float = 30.0
    max_in_flight: int = 4
    max_retries: int = 5
    backoff: float = 1.0
    api_key_env: str = "LLM_API_KEY"

    def __post_init__(self):
        if self.temperature < 0.0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens < 2:
            raise ValueError("need at least two generated tokens for a location")
        if self.runs < 1 or self.max_in_flight < 1 or self.max_retries < 1:
            raise ValueError("runs, max_in_flight and max_retries must be positive")


class TransportError(Exception):
    """All retries failed; the query is excluded from tallies, not marked wrong."""


def request_key(model: str, prompt: str, run: int) -> str:
    payload = json.dumps({"model": model, "prompt": prompt, "run": run}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:32]


def http_transport(cfg: CompletionConfig, prompt: str) -> str:
    """POST the common JSON completions shape and return the completion text."""
    import requests

    headers = {"Content-Type": "application/json"}
    key = os.environ.get(cfg.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    body = {
        "model": cfg.model,
        "prompt": prompt,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
    }
    resp = requests.post(cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout)
    resp.raise_for_status()
    return resp.json()["choices"][0]["text"]


class CompletionClient:
    """Completion calls with retry, fixture logging and offline replay.

    Live mode sends each request through the transport (HTTP by default) with
    exponential backoff, and appends every completion to the fixture log.
    Replay mode answers from the fixture alone and never touches the network.
    """

    def __init__(
        self,
        cfg: CompletionConfig,
        transport=None,
        fixture_path: str | Path | None = None,
        replay: bool = False,
    ):
        self.cfg = cfg
        self.transport = transport or http_transport
        self.fixture_path = Path(fixture_path) if fixture_path else None
        self.replay = replay
        self._fixture: dict[str, str] = {}
        if replay:
            if self.fixture_path is None:
                raise ValueError("replay mode needs a fixture path")
            self._fixture = load_fixture(self.fixture_path)

    def query(self, prompt: str, run: int) -> str:
        """Stripped completion text for one prompt; raises TransportError when
        the endpoint stays unreachable (live) or the fixture lacks the entry
        (replay)."""
        key = request_key(self.cfg.model, prompt, run)
        if self.replay:
            if key not in self._fixture:
                raise TransportError(f"fixture has no entry for request {key}")
            return self._fixture[key].strip()
        delay = self.cfg.backoff
        for attempt in range(self.cfg.max_retries):
            try:
                text = self.transport(self.cfg, prompt)
                break
            except Exception as e:
                if attempt + 1 == self.cfg.max_retries:
                    raise TransportError(str(e)) from e
                time.sleep(delay)
                delay *= 2.0
        if self.fixture_path is not None:
            append_fixture(self.fixture_path, key, prompt, text, self.cfg.model, run)
        return text.strip()


def append_fixture(path: str | Path, key: str, prompt: str, completion: str, model: str, run: int) -> None:
    record = {
        "key": key,
        "model": model,
        "run": run,
        "prompt": prompt,
        "completion": completion,
        "timestamp": time.time(),
    }
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def load_fixture(path: str | Path) -> dict[str, str]:
    """Fixture JSONL as a request-key -> completion map (last write wins)."""
    out: dict[str, str] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out[rec["key"]] = rec["completion"]
    return out


def oracle_transport(answer_for_prompt: dict[str, str]):
    """Transport that always returns the true location; for tests and dry runs."""

    def transport(cfg: CompletionConfig, prompt: str) -> str:
        return answer_for_prompt[prompt]

    return transport


def condition_answer_key(rotation: str, curriculum: str, n_tasks: int, seed: int = 0) -> dict[str, str]:
    """True completions for every prompt a condition will issue."""
    answers: dict[str, str] = {}
    for task in _condition_tasks(rotation, curriculum, n_tasks, seed):
        for cue in comp.all_cues():
            x, y = comp.location_of(task.spec, *cue)
            answers[prompt_for_query(task, cue)] = f"{x} {y}"
    return answers


# ---------------------------------------------------------------- condition runs

@dataclass(frozen=True)
class LlmRunRecord:
    """One completion attempt on one test cue."""

    rotation: str
    curriculum: str
    task_index: int
    query: tuple[int, int]
    run: int
    key: str
    completion: str | None        # None when the transport failed
    parsed: tuple[int, int] | None
    correct: bool                 # False on parse failure; meaningless when excluded

    @property
    def excluded(self) -> bool:
        return self.completion is None


@dataclass
class ConditionResult:
    """All completions of one model x rotation x curriculum cell."""

    model: str
    rotation: str
    curriculum: str
    records: list[LlmRunRecord] = field(default_factory=list)

    @property
    def successes(self) -> int:
        return sum(1 for r in self.records if not r.excluded and r.correct)

    @property
    def failures(self) -> int:
        return sum(1 for r in self.records if not r.excluded and not r.correct)

    @property
    def excluded(self) -> int:
        return sum(1 for r in self.records if r.excluded)

    @property
    def accuracy(self) -> float:
        n = self.successes + self.failures
        return self.successes / n if n else 0.0

    def count(self) -> ConditionCount:
        return ConditionCount(self.rotation, self.curriculum, self.successes, self.failures)


def _condition_tasks(rotation: str, curriculum: str, n_tasks: int, seed: int) -> list[comp.CompTask]:
    base = SplitRng(seed, ("llm_tasks", rotation, curriculum))
    tasks = []
    keys: set = set()
    for i in range(n_tasks):
        task = comp.build_task(base.split(i), rotation, curriculum, exclude_keys=keys)
        keys.add(comp.task_key(task.spec))
        tasks.append(task)
    return tasks


def run_condition(
    client: CompletionClient,
    rotation: str,
    curriculum: str,
    n_tasks: int,
    seed: int = 0,
    verbose: bool = False,
) -> ConditionResult:
    """Query every test cue of every task, cfg.runs times each.

    Requests go out with bounded concurrency; records keep task, cue and run
    order, so tallies and reports are deterministic for a given fixture.
    """
    cfg = client.cfg
    tasks = _condition_tasks(rotation, curriculum, n_tasks, seed)
    jobs = []
    for ti, task in enumerate(tasks):
        for cue in task.curr.test:
            prompt = prompt_for_query(task, cue)
            answer = comp.location_of(task.spec, *cue)
            for run in range(cfg.runs):
                jobs.append((ti, cue, run, prompt, answer))

    def attempt(job):
        ti, cue, run, prompt, answer = job
        key = request_key(cfg.model, prompt, run)
        try:
            completion = client.query(prompt, run)
        except TransportError:
            return LlmRunRecord(rotation, curriculum, ti, cue, run, key, None, None, False)
        parsed = parse_location(completion)
        return LlmRunRecord(
            rotation, curriculum, ti, cue, run, key, completion, parsed,
            correct=parsed == answer,
        )

    result = ConditionResult(model=cfg.model, rotation=rotation, curriculum=curriculum)
    if client.replay or cfg.max_in_flight == 1:
        result.records = [attempt(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            result.records = list(pool.map(attempt, jobs))
    if verbose:
        print(
            f"{cfg.model} {rotation}/{curriculum}: {result.successes}/"
            f"{result.successes + result.failures} correct, {result.excluded} excluded",
            flush=True,
        )
    return result


# ---------------------------------------------------------------- reporting

def condition_report(results: list[ConditionResult]) -> str:
    """Accuracy table plus factorial stats per model, one row per condition."""
    lines = ["model | rotation | curriculum | correct | incorrect | accuracy"]
    lines.append("----- | -------- | ---------- | ------- | --------- | --------")
    for r in results:
        lines.append(
            f"{r.model} | {r.rotation} | {r.curriculum} | {r.successes} | "
            f"{r.failures} | {100.0 * r.accuracy:.2f}%"
        )
    excluded = sum(r.excluded for r in results)
    if excluded:
        lines.append(f"excluded by transport errors: {excluded}")
    by_model: dict[str, list[ConditionResult]] = {}
    for r in results:
        by_model.setdefault(r.model, []).append(r)
    for model, rs in by_model.items():
        if len({(r.rotation, r.curriculum) for r in rs}) != 4:
            continue
        tests = curriculum_rotation_analysis([r.count() for r in rs])
        lines.append("")
        lines.append(f"{model} effects:")
        for name, t in tests.items():
            lines.append(f"  {name}: chi2={t.chi2:.2f} df={t.df} p={t.p:.3g}")
        rule = {r.curriculum: r for r in rs if r.rotation == comp.RULE_LIKE}
        if set(rule) == {comp.BLOCKED, comp.INTERLEAVED}:
            t = simple_effect(rule[comp.BLOCKED].count(), rule[comp.INTERLEAVED].count(),
                              name="curriculum within rule-like")
            lines.append(f"  {t.name}: chi2={t.chi2:.2f} df={t.df} p={t.p:.3g}")
    return "\n".join(lines) + "\n"
