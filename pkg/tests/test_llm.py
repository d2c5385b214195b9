"""LLM harness: prompts, parsing, retries, fixtures, replay, condition tallies."""

import json

import pytest

import iclsim.compositional as comp
from iclsim.episodes import ENGLISH_ANIMALS, ENGLISH_COLORS
from iclsim.llm import (
    CompletionClient,
    CompletionConfig,
    ConditionResult,
    LlmRunRecord,
    PromptSpec,
    TransportError,
    build_prompt,
    condition_answer_key,
    condition_report,
    load_fixture,
    oracle_transport,
    parse_location,
    prompt_for_query,
    request_key,
    run_condition,
)
from iclsim.rng import SplitRng


def _spec():
    study = tuple(
        (ENGLISH_COLORS[i % 5], ENGLISH_ANIMALS[(i * 2) % 5], (i % 5, (i + 1) % 5))
        for i in range(9)
    )
    return PromptSpec(study=study, query=("blue", "alligator"))


# ---------------------------------------------------------------- prompts

def test_build_prompt_shape():
    text = build_prompt(_spec())
    assert text.endswith("blue alligator :")
    assert text.count(":") == 10
    assert text.count(";") == 9
    first = text.split(" ; ")[0]
    assert first == "red bear : 0 1"
    # same spec twice gives byte-identical text
    assert build_prompt(_spec()) == text


def test_prompt_spec_validation():
    with pytest.raises(ValueError):
        PromptSpec(study=_spec().study[:5], query=("red", "bear"))
    with pytest.raises(ValueError):
        PromptSpec(study=_spec().study, query=("red", "bear"), template="chatty")


def test_prompt_for_query_never_leaks_answer():
    task = comp.build_task(SplitRng(0, ("t",)), comp.RULE_LIKE, comp.BLOCKED)
    for cue in task.curr.test:
        text = prompt_for_query(task, cue)
        qc, qa = ENGLISH_COLORS[cue[0]], ENGLISH_ANIMALS[cue[1]]
        assert text.endswith(f"{qc} {qa} :")
        # the query cue appears once, unanswered
        assert text.count(f"{qc} {qa}") == 1
    # study examples do carry their locations
    study_cue = task.curr.study[0]
    x, y = comp.location_of(task.spec, *study_cue)
    text = prompt_for_query(task, task.curr.test[0])
    sc, sa = ENGLISH_COLORS[study_cue[0]], ENGLISH_ANIMALS[study_cue[1]]
    assert f"{sc} {sa} : {x} {y}" in text


def test_prompt_follows_curriculum_order():
    rng = SplitRng(3, ("t",))
    task = comp.build_task(rng, comp.RULE_LIKE, comp.BLOCKED)
    text = prompt_for_query(task, task.curr.test[0])
    rendered = [
        f"{ENGLISH_COLORS[c]} {ENGLISH_ANIMALS[a]}" for c, a in task.curr.study
    ]
    positions = [text.index(r) for r in rendered]
    assert positions == sorted(positions)


def test_parse_location_corpus():
    assert parse_location("3 2") == (3, 2)
    assert parse_location("  3 2\n") == (3, 2)
    assert parse_location("3,2") == (3, 2)
    assert parse_location("x=3, y=2 extra") == (3, 2)
    assert parse_location("-1 4 9") == (-1, 4)
    assert parse_location("the answer is unclear") is None
    assert parse_location("7") is None
    assert parse_location("") is None


# ---------------------------------------------------------------- client

def test_completion_config_validation():
    with pytest.raises(ValueError):
        CompletionConfig(temperature=-0.1)
    with pytest.raises(ValueError):
        CompletionConfig(max_tokens=1)
    with pytest.raises(ValueError):
        CompletionConfig(runs=0)
    with pytest.raises(ValueError):
        CompletionConfig(max_retries=0)


def test_request_key_depends_on_all_parts():
    k = request_key("m", "p", 0)
    assert k == request_key("m", "p", 0)
    assert k != request_key("m", "p", 1)
    assert k != request_key("m2", "p", 0)
    assert k != request_key("m", "p2", 0)


def test_client_retries_then_succeeds(monkeypatch):
    calls = []

    def flaky(cfg, prompt):
        calls.append(prompt)
        if len(calls) < 3:
            raise ConnectionError("down")
        return " 4 1 "

    monkeypatch.setattr("time.sleep", lambda s: None)
    client = CompletionClient(CompletionConfig(backoff=0.0), transport=flaky)
    assert client.query("p", 0) == "4 1"
    assert len(calls) == 3


def test_client_raises_after_exhausted_retries(monkeypatch):
    monkeypatch.setattr("time.sleep", lambda s: None)

    def dead(cfg, prompt):
        raise ConnectionError("down")

    client = CompletionClient(CompletionConfig(max_retries=2, backoff=0.0), transport=dead)
    with pytest.raises(TransportError):
        client.query("p", 0)


def test_replay_requires_fixture_path():
    with pytest.raises(ValueError):
        CompletionClient(CompletionConfig(), replay=True)


# ---------------------------------------------------------------- conditions

def _oracle_client(rotation, curriculum, n_tasks, seed=0, **cfg_kw):
    answers = condition_answer_key(rotation, curriculum, n_tasks, seed)
    cfg = CompletionConfig(model="mock", runs=cfg_kw.pop("runs", 1), **cfg_kw)
    return CompletionClient(cfg, transport=oracle_transport(answers))


def test_oracle_transport_scores_100_everywhere():
    for rotation in (comp.RULE_LIKE, comp.ROTATED):
        for curriculum in (comp.BLOCKED, comp.INTERLEAVED, comp.ALIGNED, comp.MISALIGNED):
            client = _oracle_client(rotation, curriculum, n_tasks=2)
            res = run_condition(client, rotation, curriculum, n_tasks=2)
            assert res.successes == 2 * 16 and res.failures == 0 and res.excluded == 0
            assert res.accuracy == 1.0


def test_run_condition_counts_runs_separately():
    client = _oracle_client(comp.RULE_LIKE, comp.BLOCKED, n_tasks=1, runs=5)
    res = run_condition(client, comp.RULE_LIKE, comp.BLOCKED, n_tasks=1)
    assert res.successes + res.failures == 16 * 5


def test_transport_errors_are_excluded_not_failed():
    answers = condition_answer_key(comp.RULE_LIKE, comp.BLOCKED, 1)
    good = oracle_transport(answers)
    seen = {}

    def sometimes(cfg, prompt):
        seen[prompt] = seen.get(prompt, 0) + 1
        if len(seen) % 4 == 0:
            raise ConnectionError("down")
        return good(cfg, prompt)

    cfg = CompletionConfig(model="mock", runs=1, max_retries=1, max_in_flight=1, backoff=0.0)
    client = CompletionClient(cfg, transport=sometimes)
    res = run_condition(client, comp.RULE_LIKE, comp.BLOCKED, n_tasks=1)
    assert res.excluded == 4
    assert res.successes + res.failures == 16 - 4
    assert res.failures == 0


def test_record_and_replay_produce_identical_tallies(tmp_path):
    fixture = tmp_path / "fixture.jsonl"
    answers = condition_answer_key(comp.RULE_LIKE, comp.INTERLEAVED, 2)

    def imperfect(cfg, prompt):
        # a deliberately wrong answer for some prompts, to vary the tally
        text = answers[prompt]
        return "8 8" if hash(prompt) % 3 == 0 else text

    cfg = CompletionConfig(model="mock", runs=2)
    live = CompletionClient(cfg, transport=imperfect, fixture_path=fixture)
    first = run_condition(live, comp.RULE_LIKE, comp.INTERLEAVED, n_tasks=2)
    assert fixture.exists()
    replayed = CompletionClient(cfg, replay=True, fixture_path=fixture)
    second = run_condition(replayed, comp.RULE_LIKE, comp.INTERLEAVED, n_tasks=2)
    assert (first.successes, first.failures, first.excluded) == (
        second.successes, second.failures, second.excluded)
    assert [(r.key, r.correct) for r in first.records] == [
        (r.key, r.correct) for r in second.records]
    third = run_condition(replayed, comp.RULE_LIKE, comp.INTERLEAVED, n_tasks=2)
    assert [(r.key, r.correct) for r in third.records] == [
        (r.key, r.correct) for r in second.records]


def test_replay_missing_entries_become_exclusions(tmp_path):
    fixture = tmp_path / "fixture.jsonl"
    answers = condition_answer_key(comp.RULE_LIKE, comp.BLOCKED, 1)
    cfg = CompletionConfig(model="mock", runs=1)
    live = CompletionClient(cfg, transport=oracle_transport(answers), fixture_path=fixture)
    run_condition(live, comp.RULE_LIKE, comp.BLOCKED, n_tasks=1)
    lines = fixture.read_text().strip().splitlines()
    fixture.write_text("\n".join(lines[:10]) + "\n")
    replayed = CompletionClient(cfg, replay=True, fixture_path=fixture)
    res = run_condition(replayed, comp.RULE_LIKE, comp.BLOCKED, n_tasks=1)
    assert res.excluded == 6
    assert res.successes == 10


def test_fixture_loads_last_write(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text(
        json.dumps({"key": "k", "completion": "old"}) + "\n"
        + json.dumps({"key": "k", "completion": "new"}) + "\n"
    )
    assert load_fixture(p) == {"k": "new"}


# ---------------------------------------------------------------- report

def _result(model, rotation, curriculum, s, f):
    records = [
        LlmRunRecord(rotation, curriculum, 0, (0, 0), i, f"k{i}", "0 0", (0, 0), i < s)
        for i in range(s + f)
    ]
    return ConditionResult(model=model, rotation=rotation, curriculum=curriculum, records=records)


def test_condition_report_shape_and_stats():
    results = [
        _result("strong", comp.RULE_LIKE, comp.BLOCKED, 77, 3),
        _result("strong", comp.RULE_LIKE, comp.INTERLEAVED, 63, 17),
        _result("strong", comp.ROTATED, comp.BLOCKED, 0, 80),
        _result("strong", comp.ROTATED, comp.INTERLEAVED, 1, 79),
    ]
    text = condition_report(results)
    assert "strong | rule_like | blocked | 77 | 3 | 96.25%" in text
    assert "strong | rotated | blocked | 0 | 80 | 0.00%" in text
    assert "rotation: chi2=" in text
    assert "curriculum within rule-like" in text


def test_condition_report_lists_exclusions():
    r = _result("m", comp.RULE_LIKE, comp.BLOCKED, 3, 1)
    r.records.append(LlmRunRecord(comp.RULE_LIKE, comp.BLOCKED, 0, (0, 1), 9, "kx", None, None, False))
    text = condition_report([r])
    assert "excluded by transport errors: 1" in text
