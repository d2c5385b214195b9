"""Experiment drivers: metalearning, few-shot evaluation, finetuning, sweeps.

Metalearning fits a transformer to an episode stream drawn from thousands of
tasks. Few-shot evaluation freezes the weights and tallies exact-match answers
on novel tasks. Finetuning trains on a single task's study queries under
independent context and gradient-step curricula while tracing per-group train
accuracy and held-out test accuracy every step. Retention evaluation and the
tradeoff sweep measure what finetuning left in the weights once the context
is ablated away.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import category as cat
from . import compositional as comp
from .checkpoint import load_params, save_params
from .episodes import (
    ABSTRACT_ANIMALS,
    ABSTRACT_COLORS,
    Vocab,
    category_vocab,
    compositional_vocab,
    encode_category_episode,
    encode_compositional_episode,
)
from .model import (
    NO_INTERVENTION,
    AttentionIntervention,
    ModelConfig,
    Transformer,
    batch_episodes,
)
from .optim import AdamConfig, Param, adam_step, params_astype, params_checksum, zero_grads
from .rng import SplitRng

CATEGORY = "category"
COMPOSITIONAL = "compositional"
FAMILIES = (CATEGORY, COMPOSITIONAL)

RULE_LIKE = cat.RULE_LIKE
ROTATED = cat.ROTATED
BLOCKED = cat.BLOCKED
INTERLEAVED = cat.INTERLEAVED

RETENTION_P_ATTENTION = 1.0
RETENTION_SIGMA = 8.0

_EVAL_BATCH = 256


def family_vocab(family: str) -> Vocab:
    if family == CATEGORY:
        return category_vocab()
    if family == COMPOSITIONAL:
        return compositional_vocab()
    raise ValueError(f"unknown task family {family!r}")


def model_config(family: str, n_layers: int | None = None) -> ModelConfig:
    """Reference transformer shape for a family; n_layers overrides the depth."""
    if family == CATEGORY:
        # 32 study examples of 5 tokens, 3 query tokens, 1 answer token
        return ModelConfig(
            d_v=len(family_vocab(family)), n_layers=n_layers or 4, n_heads=8,
            d_model=64, max_seq_len=164,
        )
    if family == COMPOSITIONAL:
        # 9 study examples of 6 tokens, 3 query tokens, 2 answer tokens
        return ModelConfig(
            d_v=len(family_vocab(family)), n_layers=n_layers or 12, n_heads=8,
            d_model=64, max_seq_len=59, dropout=0.1,
        )
    raise ValueError(f"unknown task family {family!r}")


def _config_hash(obj) -> str:
    payload = json.dumps(asdict(obj), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def derive_seed(*parts) -> int:
    """Stable 63-bit integer from a label path, for nested run seeds."""
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# ---------------------------------------------------------------- configs

@dataclass(frozen=True)
class MetaTrainConfig:
    """Metalearning run: task family plus the distribution's rotation/curriculum."""

    family: str
    rotation: str
    curriculum: str
    epochs: int
    lr: float
    batch_size: int
    n_tasks: int
    n_validation: int
    n_test: int
    inclusion_threshold: float
    n_layers: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size <= 0 or self.n_tasks <= 0:
            raise ValueError("epochs must be >= 0; lr, batch size and task count positive")
        if not 0.0 < self.inclusion_threshold < 1.0:
            raise ValueError("inclusion threshold must lie in (0, 1)")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n_tasks / self.batch_size)

    def hash(self) -> str:
        return _config_hash(self)

    def resume_key(self) -> str:
        """Config identity ignoring the epoch budget.

        Every rng stream is keyed by absolute epoch and step, so a checkpoint
        may be resumed under a larger budget and continues bit-for-bit.
        """
        fields = asdict(self)
        del fields["epochs"]
        payload = json.dumps(fields, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def meta_config(family: str, **overrides) -> MetaTrainConfig:
    """MetaTrainConfig with per-family defaults (20 epochs at 1e-4 for category,
    500 at 1e-3 for compositional; 12,000 tasks, batch 256, 100 validation and
    10 test tasks, 90% few-shot inclusion threshold)."""
    defaults = dict(
        family=family,
        rotation=RULE_LIKE,
        curriculum=BLOCKED,
        epochs=20 if family == CATEGORY else 500,
        lr=1e-4 if family == CATEGORY else 1e-3,
        batch_size=256,
        n_tasks=12_000,
        n_validation=100,
        n_test=10,
        inclusion_threshold=0.90,
    )
    defaults.update(overrides)
    return MetaTrainConfig(**defaults)


@dataclass(frozen=True)
class FinetuneConfig:
    """Single-task training; context and gradient-step curricula vary independently.

    Each optimizer step trains on all queries of the active block: under a
    blocked step curriculum the groups alternate every steps_per_block steps
    for n_blocks blocks, under an interleaved one every batch holds all study
    queries of both groups. The context curriculum only controls the order of
    study examples inside each episode.
    """

    family: str
    context_curriculum: str
    step_curriculum: str
    n_blocks: int
    steps_per_block: int
    lr: float
    intervention: AttentionIntervention = NO_INTERVENTION

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        for c in (self.context_curriculum, self.step_curriculum):
            if c not in (BLOCKED, INTERLEAVED):
                raise ValueError(f"unknown curriculum {c!r}")
        if self.n_blocks < 1 or self.steps_per_block < 1:
            raise ValueError("need at least one block of at least one step")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def total_steps(self) -> int:
        return self.n_blocks * self.steps_per_block

    def hash(self) -> str:
        return _config_hash(self)


def finetune_config(family: str, context_curriculum: str, step_curriculum: str, **overrides) -> FinetuneConfig:
    """FinetuneConfig with per-family defaults: 4 blocks of 50 steps (category)
    or 100 steps (compositional), Adam at 1e-3."""
    defaults = dict(
        family=family,
        context_curriculum=context_curriculum,
        step_curriculum=step_curriculum,
        n_blocks=4,
        steps_per_block=50 if family == CATEGORY else 100,
        lr=1e-3,
    )
    defaults.update(overrides)
    return FinetuneConfig(**defaults)


# ---------------------------------------------------------------- episodes

def _cue_strings(cue: tuple[int, int]) -> tuple[str, str]:
    return ABSTRACT_COLORS[cue[0]], ABSTRACT_ANIMALS[cue[1]]


def _comp_order(curr: comp.CompCurriculum, kind: str, rng: SplitRng) -> list[tuple[int, int]]:
    """Fresh presentation order of a frozen study set under a context curriculum."""
    g1, g2 = curr.groups
    g1 = [g1[i] for i in rng.permutation(len(g1))]
    g2 = [g2[i] for i in rng.permutation(len(g2))]
    order = g1 + g2 if int(rng.integers(0, 2)) == 0 else g2 + g1
    if kind == INTERLEAVED:
        order = [order[i] for i in rng.permutation(len(order))]
    elif kind != BLOCKED:
        raise ValueError(f"unknown curriculum {kind!r}")
    return order


def build_episode(family: str, task, query, context_curriculum: str, rng: SplitRng, vocab: Vocab):
    """One teacher-forced episode: freshly ordered study context plus the query."""
    if family == CATEGORY:
        ordered = cat.order_study(task.spec, task.split, context_curriculum, rng)
        answer = cat.assign_category(task.spec, query)
        return encode_category_episode(ordered, query, answer, task.spec.dims, vocab)
    order = _comp_order(task.curr, context_curriculum, rng)
    study = [(*_cue_strings(c), comp.location_of(task.spec, *c)) for c in order]
    answer = comp.location_of(task.spec, *query)
    return encode_compositional_episode(study, _cue_strings(query), answer, vocab)


def task_queries(family: str, task, query_set: str) -> list:
    """Study or held-out queries of one task, in canonical order."""
    if query_set not in ("study", "heldout"):
        raise ValueError(f"unknown query set {query_set!r}")
    if family == CATEGORY:
        if query_set == "study":
            return [item for side in task.split.study for item in side]
        return list(task.split.heldout)
    return list(task.curr.study if query_set == "study" else task.curr.test)


def task_groups(family: str, task) -> tuple[list, list]:
    """The two stimulus groups of a task's study queries.

    Category groups are the two label sides (16 each); compositional groups
    are the row-block and column-block cues (5 and 4, the shared cue counted
    with the first block).
    """
    if family == CATEGORY:
        return list(task.split.study[0]), list(task.split.study[1])
    return list(task.curr.groups[0]), list(task.curr.groups[1])


def _batched(episodes: list, vocab: Vocab, limit: int = _EVAL_BATCH):
    for i in range(0, len(episodes), limit):
        yield batch_episodes(episodes[i : i + limit], vocab)


# ---------------------------------------------------------------- tasks

def build_meta_tasks(cfg: MetaTrainConfig, seed: int):
    """Training and validation tasks for one metalearning run.

    Validation tasks are forced onto task identities absent from the training
    set (fresh dimension pairs / fresh grid maps).
    """
    base = SplitRng(seed, ("tasks", cfg.family))
    if cfg.family == CATEGORY:
        train = [cat.build_task(base.split("train", i), cfg.rotation) for i in range(cfg.n_tasks)]
        keys = {cat.dim_pair_key(t.spec) for t in train}
        val = []
        for i in range(cfg.n_validation):
            t = cat.build_task(base.split("val", i), cfg.rotation, exclude_pairs=keys)
            keys.add(cat.dim_pair_key(t.spec))
            val.append(t)
        return train, val
    train = [comp.sample_metalearn_task(base.split("train", i), cfg.rotation) for i in range(cfg.n_tasks)]
    keys = {comp.task_key(t) for t in train}
    val = []
    for i in range(cfg.n_validation):
        t = comp.build_task(base.split("val", i), cfg.rotation, cfg.curriculum, exclude_keys=keys)
        keys.add(comp.task_key(t.spec))
        val.append(t)
    return train, val


def meta_task_keys(cfg: MetaTrainConfig, seed: int) -> set:
    """Task identities used by a metalearning run (training plus validation),
    for excluding them when sampling test tasks. Rebuilds only the cheap specs."""
    base = SplitRng(seed, ("tasks", cfg.family))
    if cfg.family == CATEGORY:
        keys = set()
        for i in range(cfg.n_tasks):
            keys.add(cat.dim_pair_key(cat.sample_task(base.split("train", i), cfg.rotation)))
        for i in range(cfg.n_validation):
            task = cat.build_task(base.split("val", i), cfg.rotation, exclude_pairs=keys)
            keys.add(cat.dim_pair_key(task.spec))
        return keys
    keys = set()
    for i in range(cfg.n_tasks):
        keys.add(comp.task_key(comp.sample_metalearn_task(base.split("train", i), cfg.rotation)))
    for i in range(cfg.n_validation):
        task = comp.build_task(base.split("val", i), cfg.rotation, cfg.curriculum, exclude_keys=keys)
        keys.add(comp.task_key(task.spec))
    return keys


def build_eval_tasks(
    family: str,
    n: int,
    rotation: str,
    curriculum: str,
    seed: int,
    exclude_keys: set | None = None,
) -> list:
    """Fresh test tasks for evaluation or finetuning, disjoint from exclude_keys.

    For the compositional family the curriculum fixes each task's study set
    (blocked and interleaved draw a random row and column; aligned and
    misaligned use their prescribed sets).
    """
    base = SplitRng(seed, ("eval_tasks", family, rotation, curriculum))
    tasks = []
    exclude = set(exclude_keys) if exclude_keys else set()
    for i in range(n):
        if family == CATEGORY:
            task = cat.build_task(base.split(i), rotation, exclude_pairs=exclude)
            exclude.add(cat.dim_pair_key(task.spec))
        else:
            task = comp.build_task(base.split(i), rotation, curriculum, exclude_keys=exclude)
            exclude.add(comp.task_key(task.spec))
        tasks.append(task)
    return tasks


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalTally:
    """Exact-match successes and failures over a set of queries."""

    successes: int
    failures: int

    @property
    def total(self) -> int:
        return self.successes + self.failures

    @property
    def accuracy(self) -> float:
        return self.successes / self.total if self.total else 0.0


def few_shot_eval(
    model: Transformer,
    family: str,
    tasks: list,
    context_curriculum: str,
    query_set: str = "heldout",
    intervention: AttentionIntervention = NO_INTERVENTION,
    seed: int = 0,
) -> EvalTally:
    """Frozen-weight exact-match tally over every query of every task.

    An answer counts only if all its tokens match under teacher forcing.
    Parameters are checksummed before and after: evaluation never writes them.
    """
    before = params_checksum(model.params)
    rng = SplitRng(seed, ("few_shot", family, query_set))
    vocab = family_vocab(family)
    episodes = []
    for ti, task in enumerate(tasks):
        trng = rng.split("task", ti)
        for qi, q in enumerate(task_queries(family, task, query_set)):
            episodes.append(build_episode(family, task, q, context_curriculum, trng.split(qi), vocab))
    successes = failures = 0
    for bi, batch in enumerate(_batched(episodes, vocab)):
        pred = model.predict_answers(batch, intervention=intervention, step=bi)
        ok = np.all(pred == batch.targets, axis=1)
        successes += int(ok.sum())
        failures += int(ok.size - ok.sum())
    if params_checksum(model.params) != before:
        raise AssertionError("few-shot evaluation must not modify parameters")
    return EvalTally(successes, failures)


def retention_eval(model: Transformer, family: str, task, variant: str = "example_mask", seed: int = 0) -> EvalTally:
    """Study-query accuracy with the context ablated away entirely.

    example_mask hides every study example (p_attention = 1); value_noise
    drowns the context values in noise at sigma = 8. The context order cannot
    matter under full ablation, so episodes use an interleaved order.
    """
    if variant == "example_mask":
        iv = AttentionIntervention(kind="example_mask", p_attention=RETENTION_P_ATTENTION, seed=seed)
    elif variant == "value_noise":
        iv = AttentionIntervention(kind="value_noise", sigma_value=RETENTION_SIGMA, seed=seed)
    else:
        raise ValueError(f"unknown retention variant {variant!r}")
    return few_shot_eval(model, family, [task], INTERLEAVED, "study", iv, seed=seed)


# ---------------------------------------------------------------- metalearning

@dataclass
class MetaRunReport:
    """Outcome of one metalearning seed."""

    losses: np.ndarray            # per-optimizer-step training loss
    epochs_done: int
    validation: EvalTally | None  # few-shot on held-out queries of validation tasks
    included: bool                # validation accuracy reached the inclusion threshold
    aborted: bool                 # loss went non-finite; run stopped and recorded
    seed: int
    config_hash: str


def from_scratch_model(family: str, seed: int, n_layers: int | None = None) -> Transformer:
    """Randomly initialized transformer at the family's reference shape."""
    cfg = model_config(family, n_layers)
    return Transformer(cfg, init_rng=SplitRng(seed, ("init", family)))


def metalearn(
    cfg: MetaTrainConfig,
    seed: int,
    out_dir: str | Path | None = None,
    resume: bool = False,
    verbose: bool = False,
) -> tuple[dict[str, Param], MetaRunReport]:
    """Train one seed on the task distribution; returns params and its report.

    With out_dir set, every epoch checkpoints parameters plus optimizer state
    and the loss trace, so resume=True continues bit-for-bit after the last
    finished epoch. A non-finite loss aborts the run; the report records it.
    """
    mcfg = model_config(cfg.family, cfg.n_layers)
    vocab = family_vocab(cfg.family)
    base = SplitRng(seed, ("metalearn",))
    train_tasks, val_tasks = build_meta_tasks(cfg, seed)

    out = Path(out_dir) if out_dir is not None else None
    losses: list[float] = []
    start_epoch = 0
    state_path = out / "state.dupx" if out else None
    progress_path = out / "progress.json" if out else None
    if resume and state_path and state_path.exists():
        params = load_params(state_path)
        saved = json.loads(progress_path.read_text())
        if saved["resume_key"] != cfg.resume_key():
            raise ValueError("resume directory was produced by a different config")
        if saved.get("aborted"):
            raise ValueError("cannot resume an aborted run")
        start_epoch = saved["epochs_done"]
        losses = list(saved["losses"])
        model = Transformer(mcfg, params=params)
    else:
        model = Transformer(mcfg, init_rng=base.split("init"))
    opt = AdamConfig(lr=cfg.lr)

    aborted = False
    epochs_done = start_epoch
    t0 = time.time()
    for epoch in range(start_epoch, cfg.epochs):
        order = base.split("order", epoch).permutation(cfg.n_tasks)
        epoch_tasks = [train_tasks[int(i)] for i in order]
        if cfg.family == CATEGORY:
            stream = cat.metalearn_stream(epoch_tasks, cfg.curriculum, base.split("episodes", epoch))
            encode = lambda item: encode_category_episode(
                item[1], item[2], item[3], item[0].spec.dims, vocab
            )
        else:
            stream = comp.metalearn_stream(epoch_tasks, cfg.curriculum, base.split("episodes", epoch))
            encode = lambda item: encode_compositional_episode(
                [(*_cue_strings(c), comp.location_of(item[0], *c)) for c in item[1].study],
                _cue_strings(item[2]),
                item[3],
                vocab,
            )
        buf: list = []
        step_in_epoch = 0

        def flush(buf):
            nonlocal step_in_epoch
            batch = batch_episodes(buf, vocab)
            loss = model.batch_loss(batch, train=True, rng=base.split("dropout", epoch, step_in_epoch))
            value = loss.item()
            if math.isfinite(value):
                loss.backward()
                adam_step(model.params, opt)
            zero_grads(model.params)
            losses.append(value)
            step_in_epoch += 1
            return math.isfinite(value)

        for item in stream:
            buf.append(encode(item))
            if len(buf) == cfg.batch_size:
                if not flush(buf):
                    aborted = True
                    break
                buf = []
        if buf and not aborted:
            aborted = not flush(buf)
        if not aborted:
            epochs_done = epoch + 1
        if out:
            out.mkdir(parents=True, exist_ok=True)
            save_params(state_path, model.params)
            progress_path.write_text(json.dumps({
                "resume_key": cfg.resume_key(),
                "config_hash": cfg.hash(),
                "epochs_done": epochs_done,
                "aborted": aborted,
                "losses": losses,
            }))
        if verbose:
            recent = losses[-cfg.steps_per_epoch:]
            print(
                f"epoch {epoch + 1}/{cfg.epochs} loss={np.mean(recent):.4f} "
                f"({time.time() - t0:.0f}s)",
                flush=True,
            )
        if aborted:
            break

    validation = None
    included = False
    if not aborted:
        validation = few_shot_eval(
            model, cfg.family, val_tasks, cfg.curriculum, "heldout",
            seed=derive_seed(seed, "validation"),
        )
        included = validation.accuracy >= cfg.inclusion_threshold
    report = MetaRunReport(
        losses=np.asarray(losses, dtype=np.float64),
        epochs_done=epochs_done,
        validation=validation,
        included=included,
        aborted=aborted,
        seed=seed,
        config_hash=cfg.hash(),
    )
    if out:
        out.mkdir(parents=True, exist_ok=True)
        rows = [[i, v] for i, v in enumerate(losses)]
        write_run_dir(
            out, asdict(cfg), seed, ["step", "loss"], rows, params=model.params,
            extra={"report": {
                "validation_successes": validation.successes if validation else None,
                "validation_failures": validation.failures if validation else None,
                "included": included,
                "aborted": aborted,
            }},
        )
    return model.params, report


def load_meta_model(run_dir: str | Path) -> tuple[Transformer, MetaTrainConfig, dict]:
    """Rebuild a metalearned model from its run directory.

    Returns the model, its training config and the manifest's report block
    (validation tallies, inclusion flag)."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = MetaTrainConfig(**manifest["config"])
    params = load_params(run_dir / "model.dupx")
    model = Transformer(model_config(cfg.family, cfg.n_layers), params=params)
    return model, cfg, manifest.get("report", {})


# ---------------------------------------------------------------- finetuning

@dataclass
class RunRecord:
    """Per-step traces and final tallies of one finetuning cell."""

    losses: np.ndarray        # (S,) training loss
    group_acc: np.ndarray     # (2, S) study accuracy per stimulus group, post-update
    test_acc: np.ndarray      # (S,) held-out accuracy, post-update
    group_sizes: tuple[int, int]
    final_train: tuple[int, int]   # successes, failures over all study queries
    final_test: tuple[int, int]
    first_group: int          # group index trained in the first block
    seed: int
    config_hash: str

    def __post_init__(self):
        S = len(self.losses)
        if self.group_acc.shape != (2, S) or self.test_acc.shape != (S,):
            raise ValueError("trace lengths must equal the total step count")
        if sum(self.final_train) != sum(self.group_sizes):
            raise ValueError("final train tally must cover every study query")

    def train_acc_trace(self) -> np.ndarray:
        """(S,) overall study accuracy, groups weighted by their sizes."""
        n1, n2 = self.group_sizes
        return (self.group_acc[0] * n1 + self.group_acc[1] * n2) / (n1 + n2)

    def steps_to_criterion(self, threshold: float = 0.99) -> int | None:
        """First step whose overall train accuracy reaches threshold, else None."""
        hits = np.nonzero(self.train_acc_trace() >= threshold)[0]
        return int(hits[0]) if hits.size else None


def load_finetune_record(run_dir: str | Path) -> RunRecord:
    """Rebuild a RunRecord from a finetuning run directory."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    S = len(rows)
    losses = np.array([float(r[1]) for r in rows])
    group_acc = np.array([[float(r[2]) for r in rows], [float(r[3]) for r in rows]])
    test_acc = np.array([float(r[4]) for r in rows])
    cfg = manifest["config"]
    cfg["intervention"] = AttentionIntervention(**cfg["intervention"])
    return RunRecord(
        losses=losses,
        group_acc=group_acc.reshape(2, S),
        test_acc=test_acc,
        group_sizes=tuple(manifest["group_sizes"]),
        final_train=tuple(manifest["final_train"]),
        final_test=tuple(manifest["final_test"]),
        first_group=manifest["first_group"],
        seed=manifest["seed"],
        config_hash=FinetuneConfig(**cfg).hash(),
    )


def finetune_run_complete(run_dir: str | Path) -> bool:
    """True when the run directory holds a finished, self-consistent run."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    metrics_path = run_dir / "metrics.csv"
    if not manifest_path.exists() or not metrics_path.exists():
        return False
    manifest = json.loads(manifest_path.read_text())
    return manifest.get("content_hash") == _git_blob_sha1(metrics_path.read_bytes())


def step_queries(cfg: FinetuneConfig, groups: tuple[list, list], first: int, step: int) -> list:
    """Queries trained at one step: the active group when step-blocked
    (groups alternate every steps_per_block steps), both groups interleaved
    otherwise. Every query appears exactly once."""
    if cfg.step_curriculum == BLOCKED:
        return list(groups[(first + step // cfg.steps_per_block) % 2])
    return list(groups[0]) + list(groups[1])


def finetune(
    model: Transformer,
    task,
    cfg: FinetuneConfig,
    seed: int,
    out_dir: str | Path | None = None,
    provenance: dict | None = None,
) -> tuple[RunRecord, Transformer]:
    """Train a copy of the model on one task's study queries.

    The input model is left untouched; optimizer state starts fresh. Every
    batch holds all queries of the active block (one group per batch when
    step-blocked, both groups when interleaved), each with a freshly ordered
    study context. Both accuracy traces are measured after each update, with
    the run's intervention active (none unless configured, as in the sweeps).
    """
    net = Transformer(model.cfg, params=params_astype(model.params, np.float32))
    rng = SplitRng(seed, ("finetune", cfg.family))
    vocab = family_vocab(cfg.family)
    g1, g2 = task_groups(cfg.family, task)
    groups = (g1, g2)
    study = [(0, q) for q in g1] + [(1, q) for q in g2]
    test_queries = task_queries(cfg.family, task, "heldout")
    first = int(rng.split("block_order").integers(0, 2))
    opt = AdamConfig(lr=cfg.lr)
    S = cfg.total_steps

    losses = np.zeros(S, dtype=np.float64)
    group_acc = np.zeros((2, S), dtype=np.float64)
    test_acc = np.zeros(S, dtype=np.float64)

    def eval_batch(queries, tag, step):
        eps = [
            build_episode(cfg.family, task, q, cfg.context_curriculum, rng.split(tag, step, i), vocab)
            for i, q in enumerate(queries)
        ]
        return batch_episodes(eps, vocab)

    ok = np.zeros(len(study), dtype=bool)
    tok = np.zeros(len(test_queries), dtype=bool)
    gidx = np.array([g for g, _ in study])
    for step in range(S):
        queries = step_queries(cfg, groups, first, step)
        batch = eval_batch(queries, "train", step)
        loss = net.batch_loss(
            batch, train=True, rng=rng.split("dropout", step),
            intervention=cfg.intervention, step=step,
        )
        losses[step] = loss.item()
        if not math.isfinite(losses[step]):
            raise FloatingPointError(f"finetuning loss became non-finite at step {step}")
        loss.backward()
        adam_step(net.params, opt)
        zero_grads(net.params)

        sb = eval_batch([q for _, q in study], "study_eval", step)
        pred = net.predict_answers(sb, intervention=cfg.intervention, step=S + step)
        ok = np.all(pred == sb.targets, axis=1)
        group_acc[0, step] = float(ok[gidx == 0].mean())
        group_acc[1, step] = float(ok[gidx == 1].mean())
        tb = eval_batch(test_queries, "test_eval", step)
        tpred = net.predict_answers(tb, intervention=cfg.intervention, step=2 * S + step)
        tok = np.all(tpred == tb.targets, axis=1)
        test_acc[step] = float(tok.mean())

    record = RunRecord(
        losses=losses,
        group_acc=group_acc,
        test_acc=test_acc,
        group_sizes=(len(g1), len(g2)),
        final_train=(int(ok.sum()), int(ok.size - ok.sum())),
        final_test=(int(tok.sum()), int(tok.size - tok.sum())),
        first_group=first,
        seed=seed,
        config_hash=cfg.hash(),
    )
    if out_dir is not None:
        rows = [
            [s, losses[s], group_acc[0, s], group_acc[1, s], test_acc[s]]
            for s in range(S)
        ]
        write_run_dir(
            Path(out_dir), asdict(cfg), seed,
            ["step", "loss", "train_acc_group1", "train_acc_group2", "test_acc"],
            rows, params=net.params,
            extra={
                "rotation": task.spec.rotation,
                "final_train": list(record.final_train),
                "final_test": list(record.final_test),
                "first_group": first,
                "group_sizes": list(record.group_sizes),
                **(provenance or {}),
            },
        )
    return record, net


def forgotten_group_acc(record: RunRecord, cfg: FinetuneConfig) -> float:
    """Mean accuracy of the first block's group while the second block trains.

    The signature of catastrophic interference under a blocked step curriculum:
    the group mastered first collapses once the other group starts training.
    """
    if cfg.step_curriculum != BLOCKED or cfg.n_blocks < 2:
        raise ValueError("forgetting is defined for blocked runs of at least two blocks")
    N = cfg.steps_per_block
    return float(record.group_acc[record.first_group, N : 2 * N].mean())


# ---------------------------------------------------------------- condition cells

@dataclass
class CellRun:
    """One finetuning run inside a condition cell."""

    seed: int
    task_index: int
    record: RunRecord


@dataclass
class CellResult:
    """All runs of one experimental condition (rotation x curricula)."""

    family: str
    rotation: str
    context_curriculum: str
    step_curriculum: str
    runs: list[CellRun] = field(default_factory=list)

    def train_tally(self) -> EvalTally:
        s = sum(r.record.final_train[0] for r in self.runs)
        f = sum(r.record.final_train[1] for r in self.runs)
        return EvalTally(s, f)

    def test_tally(self) -> EvalTally:
        s = sum(r.record.final_test[0] for r in self.runs)
        f = sum(r.record.final_test[1] for r in self.runs)
        return EvalTally(s, f)


def run_finetune_cell(
    family: str,
    rotation: str,
    curriculum: str,
    seeds,
    n_tasks: int,
    model_for_seed=None,
    exclude_keys_for_seed=None,
    out_root: str | Path | None = None,
    context_curriculum: str | None = None,
    step_curriculum: str | None = None,
    resume: bool = False,
    verbose: bool = False,
    **overrides,
) -> CellResult:
    """Finetune seeds x tasks under one condition and pool the final tallies.

    curriculum sets both the context and the gradient-step curriculum, the
    congruent case; either can be overridden separately for incongruent cells.
    model_for_seed maps a seed to a starting model (default: fresh random
    init); exclude_keys_for_seed keeps that seed's evaluation tasks disjoint
    from whatever the model was trained on. With resume, runs whose output
    directory is already complete are reloaded instead of recomputed.
    """
    ctx = context_curriculum or curriculum
    step = step_curriculum or curriculum
    cfg = finetune_config(family, ctx, step, **overrides)
    result = CellResult(family, rotation, ctx, step)
    for seed in seeds:
        model = None
        exclude = None
        tasks = None
        for ti in range(n_tasks):
            out = None
            if out_root is not None:
                out = Path(out_root) / f"seed{seed:02d}-task{ti:02d}"
            if resume and out is not None and finetune_run_complete(out):
                record = load_finetune_record(out)
                if record.config_hash != cfg.hash():
                    raise ValueError(f"{out} was produced by a different config")
            else:
                if model is None:
                    model = model_for_seed(seed) if model_for_seed else from_scratch_model(family, seed)
                    exclude = exclude_keys_for_seed(seed) if exclude_keys_for_seed else None
                    tasks = build_eval_tasks(
                        family, n_tasks, rotation, ctx,
                        seed=derive_seed(seed, "cell", family, rotation, ctx, step),
                        exclude_keys=exclude,
                    )
                record, _ = finetune(
                    model, tasks[ti], cfg, seed=derive_seed(seed, "ft", ti), out_dir=out,
                    provenance={"cell_seed": seed, "task_index": ti},
                )
            result.runs.append(CellRun(seed=seed, task_index=ti, record=record))
            if verbose:
                print(
                    f"{family}/{rotation}/{ctx}x{step} seed {seed} task {ti}: "
                    f"train {record.final_train} test {record.final_test}",
                    flush=True,
                )
    return result


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepRun:
    """One finetuning run at one ablation level."""

    grid_value: float
    task_index: int
    few_shot: float           # held-out accuracy under the ablation, before finetuning
    cumulative_loss: float    # summed training loss over the whole run
    steps_to_criterion: int | None
    retention: float          # study accuracy with context fully ablated, after finetuning


@dataclass
class SweepPoint:
    value: float
    runs: list[SweepRun] = field(default_factory=list)

    def mean(self, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.runs]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else float("nan")


def tradeoff_sweep(
    model: Transformer,
    family: str,
    tasks: list,
    kind: str = "example_mask",
    grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0),
    seed: int = 0,
    verbose: bool = False,
    **finetune_overrides,
) -> list[SweepPoint]:
    """Flexibility-retention tradeoff across ablation levels.

    For each grid value and task: few-shot accuracy under the ablation,
    finetune with the ablation active (interleaved context and steps),
    cumulative training loss, steps to the 0.99 train-accuracy criterion,
    and retention of study answers with the context fully removed.
    """
    if kind not in ("example_mask", "value_noise"):
        raise ValueError(f"unknown ablation kind {kind!r}")
    points = []
    for vi, value in enumerate(grid):
        point = SweepPoint(value=value)
        for ti, task in enumerate(tasks):
            iv = AttentionIntervention(
                kind=kind,
                p_attention=value if kind == "example_mask" else 0.0,
                sigma_value=value if kind == "value_noise" else 0.0,
                seed=derive_seed(seed, "iv", kind, vi, ti),
            )
            few = few_shot_eval(
                model, family, [task], INTERLEAVED, "heldout", iv,
                seed=derive_seed(seed, "few", kind, vi, ti),
            )
            cfg = finetune_config(family, INTERLEAVED, INTERLEAVED, intervention=iv, **finetune_overrides)
            record, net = finetune(model, task, cfg, seed=derive_seed(seed, "ft", kind, vi, ti))
            kept = retention_eval(net, family, task, variant=kind, seed=derive_seed(seed, "ret", kind, vi, ti))
            point.runs.append(SweepRun(
                grid_value=value,
                task_index=ti,
                few_shot=few.accuracy,
                cumulative_loss=float(record.losses.sum()),
                steps_to_criterion=record.steps_to_criterion(),
                retention=kept.accuracy,
            ))
            if verbose:
                r = point.runs[-1]
                print(
                    f"{kind}={value:g} task {ti}: few_shot={r.few_shot:.3f} "
                    f"loss={r.cumulative_loss:.2f} retention={r.retention:.3f}",
                    flush=True,
                )
        points.append(point)
    return points


def sweep_rows(points: list[SweepPoint]) -> list[list]:
    """Flat metric rows (one per run) for the sweep report table."""
    rows = []
    for p in points:
        for r in p.runs:
            rows.append([
                r.grid_value, r.task_index, r.few_shot, r.cumulative_loss,
                -1 if r.steps_to_criterion is None else r.steps_to_criterion,
                r.retention,
            ])
    return rows


# ---------------------------------------------------------------- run outputs

def _git_blob_sha1(data: bytes) -> str:
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def _format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def metrics_csv(header: list[str], rows: list[list]) -> bytes:
    lines = [",".join(header)]
    lines += [",".join(_format_cell(v) for v in row) for row in rows]
    return ("\n".join(lines) + "\n").encode()


def write_run_dir(
    out_dir: str | Path,
    config: dict,
    seed: int,
    header: list[str],
    rows: list[list],
    params: dict[str, Param] | None = None,
    extra: dict | None = None,
) -> Path:
    """One run directory: manifest.json, metrics.csv, optional checkpoint.

    The manifest carries the full config, the seed and a git-style content
    hash of the metrics file, so identical reruns are detectable byte-for-byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = metrics_csv(header, rows)
    (out / "metrics.csv").write_bytes(data)
    manifest = {"config": config, "seed": seed, "content_hash": _git_blob_sha1(data)}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if params is not None:
        save_params(out / "model.dupx", params)
    return out
