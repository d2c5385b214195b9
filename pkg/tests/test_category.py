"""Category task generator: boundaries, splits, curricula, metalearning stream."""

from math import comb

import numpy as np

from iclsim.category import (
    BLOCKED,
    INTERLEAVED,
    ROTATED,
    RULE_LIKE,
    CategoryTaskSpec,
    assign_category,
    all_items,
    build_task,
    category_side,
    dim_pair_key,
    make_split,
    metalearn_stream,
    order_study,
    sample_task,
)
from iclsim.rng import SplitRng


def _spec(rotation=RULE_LIKE, relevant=0, labels=("A", "B")):
    return CategoryTaskSpec(dims=(0, 1), rotation=rotation, relevant=relevant, labels=labels)


def test_rule_like_threshold_on_relevant_dimension():
    task = _spec(relevant=0)
    assert assign_category(task, (3, 7)) == "A"  # 3 <= 4 on the relevant dim
    assert assign_category(task, (5, 1)) == "B"
    flipped = _spec(relevant=1)
    assert assign_category(flipped, (3, 7)) == "B"
    assert assign_category(flipped, (7, 4)) == "A"


def test_rule_like_ignores_irrelevant_dimension():
    task = _spec(relevant=0)
    for f2 in range(1, 9):
        assert assign_category(task, (2, f2)) == "A"
        assert assign_category(task, (6, f2)) == "B"


def test_rotated_boundary_corners():
    task = _spec(rotation=ROTATED)
    assert assign_category(task, (1, 8)) == "A"  # 1+8 = 9, on the boundary side
    assert assign_category(task, (8, 1)) == "A"
    assert assign_category(task, (8, 8)) == "B"
    assert assign_category(task, (1, 1)) == "A"


def test_rotated_side_counts_are_36_28():
    task = _spec(rotation=ROTATED)
    sides = [category_side(task, f1, f2) for f1, f2 in all_items()]
    assert sides.count(0) == 36 and sides.count(1) == 28


def test_rotated_depends_on_both_dimensions():
    task = _spec(rotation=ROTATED)
    assert assign_category(task, (1, 8)) != assign_category(task, (2, 8))
    assert assign_category(task, (8, 1)) != assign_category(task, (8, 2))


def test_label_map_swaps_letters():
    task = _spec(labels=("B", "A"))
    assert assign_category(task, (3, 7)) == "B"


def test_sampled_tasks_have_distinct_dims_and_balanced_letters():
    rng = SplitRng(0, ("sample",))
    swaps = 0
    n = 12000
    for _ in range(n):
        task = sample_task(rng)
        assert task.dims[0] != task.dims[1]
        assert 0 <= task.dims[0] < 200 and 0 <= task.dims[1] < 200
        swaps += task.labels == ("B", "A")
    # binomial(12000, 0.5), 3 sigma ~ 164
    assert abs(swaps - n / 2) < 3 * np.sqrt(n * 0.25)


def test_excluded_pairs_never_sampled():
    rng = SplitRng(1, ("excl",))
    used = {frozenset((d1, d2)) for d1 in range(0, 100) for d2 in range(d1 + 1, 100)}
    for _ in range(200):
        task = sample_task(rng, exclude_pairs=used)
        assert dim_pair_key(task) not in used


def test_split_sizes_and_disjointness():
    rng = SplitRng(2, ("split",))
    for rotation in (RULE_LIKE, ROTATED):
        task = _spec(rotation=rotation)
        split = make_split(task, rng)
        flat_study = [p for side in split.study for p in side]
        assert len(split.study[0]) == len(split.study[1]) == 16
        assert len(split.heldout) == 32
        assert len(set(flat_study) | set(split.heldout)) == 64
        assert not set(flat_study) & set(split.heldout)
        for side_idx, side in enumerate(split.study):
            assert all(category_side(task, *item) == side_idx for item in side)


def test_blocked_order_is_one_side_then_other():
    rng = SplitRng(3, ("order",))
    task = _spec()
    split = make_split(task, rng)
    for _ in range(20):
        ordered = order_study(task, split, BLOCKED, rng)
        labels = [lab for _, _, lab in ordered]
        assert len(ordered) == 32
        assert labels[:16].count(labels[0]) == 16
        assert labels[16:].count(labels[16]) == 16
        assert labels[0] != labels[16]


def test_interleaved_mixes_sides_early():
    """Both labels appear in the first 8 positions for almost all draws.

    Exact hypergeometric: P(one label fills the first 8 slots) =
    2 * C(16,8) / C(32,8), about 0.00245.
    """
    p_single = 2 * comb(16, 8) / comb(32, 8)
    assert 1 - p_single > 0.99

    rng = SplitRng(4, ("inter",))
    task = _spec()
    split = make_split(task, rng)
    n, mixed = 2000, 0
    for _ in range(n):
        ordered = order_study(task, split, INTERLEAVED, rng)
        first8 = {lab for _, _, lab in ordered[:8]}
        mixed += len(first8) == 2
    assert abs(mixed / n - (1 - p_single)) < 0.005


def test_metalearn_stream_epoch_shape_and_query_mix():
    rng = SplitRng(5, ("stream",))
    tasks = [build_task(rng.split("task", i), RULE_LIKE) for i in range(300)]
    draws = list(metalearn_stream(tasks, BLOCKED, rng.split("epoch", 0)))
    assert len(draws) == 300
    n_study = sum(is_study for *_, is_study in draws)
    # query uniform over all 64 items: half study, binomial 3 sigma
    assert abs(n_study - 150) < 3 * np.sqrt(300 * 0.25)
    for task, ordered, query, answer, _ in draws[:20]:
        assert answer == assign_category(task.spec, query)
        assert len(ordered) == 32


def test_metalearn_stream_is_deterministic_and_epochs_differ():
    rng = SplitRng(6, ("det",))
    tasks = [build_task(rng.split("task", i), RULE_LIKE) for i in range(50)]
    a = list(metalearn_stream(tasks, INTERLEAVED, SplitRng(9).split("epoch", 1)))
    b = list(metalearn_stream(tasks, INTERLEAVED, SplitRng(9).split("epoch", 1)))
    c = list(metalearn_stream(tasks, INTERLEAVED, SplitRng(9).split("epoch", 2)))
    assert [d[1] for d in a] == [d[1] for d in b]
    assert [d[1] for d in a] != [d[1] for d in c]
