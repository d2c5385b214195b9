"""Category-learning tasks: two feature dimensions, a binary label, 64 items.

A task picks 2 of 200 dimensions (8 values each). Rule-like tasks label by a
threshold on one relevant dimension (f_rel <= 4); rotated tasks use the
diagonal boundary f1 + f2 <= 9, so both dimensions matter. Which side gets the
letter "A" is randomized per task.
"""

from __future__ import annotations

from dataclasses import dataclass

from .rng import SplitRng

N_DIMS = 200
N_VALUES = 8
THRESHOLD = 4
STUDY_PER_SIDE = 16

RULE_LIKE = "rule_like"
ROTATED = "rotated"
BLOCKED = "blocked"
INTERLEAVED = "interleaved"


@dataclass(frozen=True)
class CategoryTaskSpec:
    dims: tuple[int, int]
    rotation: str
    relevant: int            # 0 or 1; which of dims drives the rule-like boundary
    labels: tuple[str, str]  # letter for the rule-true side, letter for the other side


@dataclass(frozen=True)
class CategorySplit:
    """16 study items per side; held-out items are the remaining 32."""

    study: tuple[tuple[tuple[int, int], ...], tuple[tuple[int, int], ...]]
    heldout: tuple[tuple[int, int], ...]


def category_side(task: CategoryTaskSpec, f1: int, f2: int) -> int:
    """0 if the item falls on the rule-true side of the boundary, else 1."""
    if not (1 <= f1 <= N_VALUES and 1 <= f2 <= N_VALUES):
        raise ValueError("feature values must lie in 1..8")
    if task.rotation == RULE_LIKE:
        return 0 if (f1, f2)[task.relevant] <= THRESHOLD else 1
    if task.rotation == ROTATED:
        return 0 if f1 + f2 <= N_VALUES + 1 else 1
    raise ValueError(f"unknown rotation {task.rotation!r}")


def assign_category(task: CategoryTaskSpec, features: tuple[int, int]) -> str:
    """Label letter for a feature pair under this task's boundary and letter map."""
    return task.labels[category_side(task, features[0], features[1])]


def all_items() -> list[tuple[int, int]]:
    return [(f1, f2) for f1 in range(1, N_VALUES + 1) for f2 in range(1, N_VALUES + 1)]


def sample_task(rng: SplitRng, rotation: str = RULE_LIKE, exclude_pairs: set | None = None) -> CategoryTaskSpec:
    """Draw a task: a fresh dimension pair (optionally avoiding given pairs), rule
    parameters, and a random letter map."""
    while True:
        d1, d2 = (int(x) for x in rng.choice(N_DIMS, size=2, replace=False))
        if exclude_pairs is None or frozenset((d1, d2)) not in exclude_pairs:
            break
    return CategoryTaskSpec(
        dims=(d1, d2),
        rotation=rotation,
        relevant=int(rng.integers(0, 2)),
        labels=("A", "B") if rng.random() < 0.5 else ("B", "A"),
    )


def dim_pair_key(task: CategoryTaskSpec) -> frozenset:
    return frozenset(task.dims)


def make_split(task: CategoryTaskSpec, rng: SplitRng) -> CategorySplit:
    """Sample 16 study items from each side; everything else is held out."""
    sides: tuple[list, list] = ([], [])
    for item in all_items():
        sides[category_side(task, *item)].append(item)
    study = []
    heldout = []
    for members in sides:
        idx = rng.choice(len(members), size=STUDY_PER_SIDE, replace=False)
        chosen = set(int(i) for i in idx)
        study.append(tuple(members[i] for i in sorted(chosen)))
        heldout.extend(members[i] for i in range(len(members)) if i not in chosen)
    return CategorySplit(study=(study[0], study[1]), heldout=tuple(heldout))


def order_study(task: CategoryTaskSpec, split: CategorySplit, curriculum: str, rng: SplitRng):
    """Ordered (f1, f2, label) presentation of the 32 study items.

    Blocked shows one side in full before the other (side order random);
    interleaved shuffles all 32 together.
    """
    labeled = [[(f1, f2, task.labels[side]) for f1, f2 in split.study[side]] for side in (0, 1)]
    if curriculum == BLOCKED:
        first = int(rng.integers(0, 2))
        ordered = [labeled[first][i] for i in rng.permutation(STUDY_PER_SIDE)]
        ordered += [labeled[1 - first][i] for i in rng.permutation(STUDY_PER_SIDE)]
        return ordered
    if curriculum == INTERLEAVED:
        merged = labeled[0] + labeled[1]
        return [merged[i] for i in rng.permutation(len(merged))]
    raise ValueError(f"unknown curriculum {curriculum!r}")


@dataclass(frozen=True)
class CategoryTask:
    """A task spec with its frozen study/held-out split."""

    spec: CategoryTaskSpec
    split: CategorySplit


def build_task(rng: SplitRng, rotation: str, exclude_pairs: set | None = None) -> CategoryTask:
    spec = sample_task(rng, rotation, exclude_pairs)
    return CategoryTask(spec=spec, split=make_split(spec, rng))


def metalearn_stream(tasks: list[CategoryTask], curriculum: str, rng: SplitRng):
    """One episode draw per task for one epoch.

    Yields (task, ordered_study, query, answer, query_is_study); the query is
    uniform over all 64 items, study order redrawn fresh each epoch.
    """
    for i, task in enumerate(tasks):
        trng = rng.split(i)
        ordered = order_study(task.spec, task.split, curriculum, trng)
        pool = [p for side in task.split.study for p in side] + list(task.split.heldout)
        query = pool[int(trng.integers(0, len(pool)))]
        yield (
            task,
            ordered,
            query,
            assign_category(task.spec, query),
            any(query in side for side in task.split.study),
        )
