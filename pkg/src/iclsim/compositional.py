"""Compositional grid tasks: color and animal features map to 5x5 locations.

A task assigns each of 5 colors and 5 animals a grid position through random
permutation orders, and one axis to each feature. Rule-like locations read the
positions off directly; the rotated variant turns the grid 45 degrees so both
coordinates depend on both features. Study sets are one full row plus one full
column of the grid (9 cues); curricula differ only in presentation order.
"""

from __future__ import annotations

from dataclasses import dataclass

from .rng import SplitRng

GRID = 5
CENTER = GRID // 2

RULE_LIKE = "rule_like"
ROTATED = "rotated"
BLOCKED = "blocked"
INTERLEAVED = "interleaved"
ALIGNED = "aligned"
MISALIGNED = "misaligned"
CURRICULA = (BLOCKED, INTERLEAVED, ALIGNED, MISALIGNED)


@dataclass(frozen=True)
class CompTaskSpec:
    color_order: tuple[int, ...]   # color index -> grid position along its axis
    animal_order: tuple[int, ...]
    color_axis: str                # "x" or "y"
    rotation: str


def rotate_coords(x: int, y: int) -> tuple[int, int]:
    """45-degree grid rotation; output coordinates range over 0..8."""
    return (x - y + GRID - 1, x + y)


def location_of(task: CompTaskSpec, color: int, animal: int) -> tuple[int, int]:
    """Target location for a (color, animal) cue under this task's map."""
    cpos, apos = task.color_order[color], task.animal_order[animal]
    x, y = (cpos, apos) if task.color_axis == "x" else (apos, cpos)
    if task.rotation == ROTATED:
        return rotate_coords(x, y)
    if task.rotation == RULE_LIKE:
        return (x, y)
    raise ValueError(f"unknown rotation {task.rotation!r}")


def cue_at_grid(task: CompTaskSpec, gx: int, gy: int) -> tuple[int, int]:
    """Inverse feature lookup: which (color, animal) sits at rule-like grid (gx, gy)."""
    cpos, apos = (gx, gy) if task.color_axis == "x" else (gy, gx)
    return (task.color_order.index(cpos), task.animal_order.index(apos))


def all_cues() -> list[tuple[int, int]]:
    return [(c, a) for c in range(GRID) for a in range(GRID)]


@dataclass(frozen=True)
class CompCurriculum:
    """Ordered study cues, their two presentation groups, and the test cues."""

    kind: str
    study: tuple[tuple[int, int], ...]
    groups: tuple[tuple[tuple[int, int], ...], tuple[tuple[int, int], ...]]
    test: tuple[tuple[int, int], ...]


def make_curriculum(task: CompTaskSpec, kind: str, rng: SplitRng) -> CompCurriculum:
    """Build the 9-cue study sequence for one episode or training run.

    blocked/interleaved: a uniformly chosen row and column; aligned: the middle
    row and column; misaligned: the two diagonals. The first group has 5 cues,
    the second drops the shared cue (4). Blocked presents group by group
    (group order random); interleaved shuffles all 9.
    """
    if kind in (BLOCKED, INTERLEAVED):
        r, c = int(rng.integers(0, GRID)), int(rng.integers(0, GRID))
        lines = ([(gx, r) for gx in range(GRID)], [(c, gy) for gy in range(GRID)])
        shared = (c, r)
    elif kind == ALIGNED:
        r = c = CENTER
        lines = ([(gx, r) for gx in range(GRID)], [(c, gy) for gy in range(GRID)])
        shared = (c, r)
    elif kind == MISALIGNED:
        lines = ([(i, i) for i in range(GRID)], [(i, GRID - 1 - i) for i in range(GRID)])
        shared = (CENTER, CENTER)
    else:
        raise ValueError(f"unknown curriculum {kind!r}")

    first = int(rng.integers(0, 2))
    g1_grid = lines[first]
    g2_grid = [p for p in lines[1 - first] if p != shared]
    g1 = [cue_at_grid(task, *p) for p in g1_grid]
    g2 = [cue_at_grid(task, *p) for p in g2_grid]
    g1 = [g1[i] for i in rng.permutation(len(g1))]
    g2 = [g2[i] for i in rng.permutation(len(g2))]

    study = g1 + g2
    if kind == INTERLEAVED:
        study = [study[i] for i in rng.permutation(len(study))]
    study_set = set(study)
    if len(study_set) != 9:
        raise AssertionError("study cues must be 9 distinct cues")
    test = tuple(cue for cue in all_cues() if cue not in study_set)
    return CompCurriculum(kind=kind, study=tuple(study), groups=(tuple(g1), tuple(g2)), test=test)


def sample_metalearn_task(rng: SplitRng, rotation: str = RULE_LIKE, exclude_keys: set | None = None) -> CompTaskSpec:
    """Draw a task with fresh permutation orders and axis roles.

    exclude_keys rejects previously seen task identities, so validation tasks
    are genuinely novel maps.
    """
    while True:
        task = CompTaskSpec(
            color_order=tuple(int(i) for i in rng.permutation(GRID)),
            animal_order=tuple(int(i) for i in rng.permutation(GRID)),
            color_axis="x" if rng.random() < 0.5 else "y",
            rotation=rotation,
        )
        if exclude_keys is None or task_key(task) not in exclude_keys:
            return task


def task_key(task: CompTaskSpec) -> tuple:
    return (task.color_order, task.animal_order, task.color_axis)


@dataclass(frozen=True)
class CompTask:
    """A task map with one frozen study curriculum (study set, groups, test cues)."""

    spec: CompTaskSpec
    curr: CompCurriculum


def build_task(rng: SplitRng, rotation: str, kind: str, exclude_keys: set | None = None) -> CompTask:
    spec = sample_metalearn_task(rng, rotation, exclude_keys)
    return CompTask(spec=spec, curr=make_curriculum(spec, kind, rng))


def metalearn_stream(tasks: list[CompTaskSpec], curriculum: str, rng: SplitRng):
    """One episode draw per task for one epoch.

    Yields (task, curriculum, query, answer, query_is_study); the study row and
    column are redrawn fresh each epoch, the query is uniform over all 25 cues.
    """
    cues = all_cues()
    for i, task in enumerate(tasks):
        trng = rng.split(i)
        curr = make_curriculum(task, curriculum, trng)
        query = cues[int(trng.integers(0, len(cues)))]
        yield task, curr, query, location_of(task, *query), query in set(curr.study)
