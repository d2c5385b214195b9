"""Compositional task generator: location maps, rotation, curricula."""

import numpy as np

from iclsim.compositional import (
    ALIGNED,
    BLOCKED,
    INTERLEAVED,
    MISALIGNED,
    ROTATED,
    RULE_LIKE,
    CompTaskSpec,
    all_cues,
    cue_at_grid,
    location_of,
    make_curriculum,
    rotate_coords,
    sample_metalearn_task,
    task_key,
)
from iclsim.rng import SplitRng


def _identity_task(rotation=RULE_LIKE, color_axis="x"):
    return CompTaskSpec(
        color_order=(0, 1, 2, 3, 4),
        animal_order=(0, 1, 2, 3, 4),
        color_axis=color_axis,
        rotation=rotation,
    )


def test_rule_like_location_reads_positions():
    task = _identity_task()
    assert location_of(task, 3, 2) == (3, 2)  # color drives x, animal drives y
    swapped = _identity_task(color_axis="y")
    assert location_of(swapped, 3, 2) == (2, 3)


def test_rotation_formula_and_example():
    assert rotate_coords(3, 2) == (5, 5)
    task = _identity_task(rotation=ROTATED)
    assert location_of(task, 3, 2) == (5, 5)


def test_rotated_coordinates_stay_in_vocabulary_range():
    task = _identity_task(rotation=ROTATED)
    for c, a in all_cues():
        x, y = location_of(task, c, a)
        assert 0 <= x <= 8 and 0 <= y <= 8


def test_rotation_is_injective_on_grid():
    task = _identity_task(rotation=ROTATED)
    locs = {location_of(task, c, a) for c, a in all_cues()}
    assert len(locs) == 25


def test_rotation_scales_distances_by_sqrt2():
    pts = [(0, 0), (3, 2), (4, 4), (1, 3)]
    for ax, ay in pts:
        for bx, by in pts:
            d_orig = np.hypot(ax - bx, ay - by)
            rax, ray = rotate_coords(ax, ay)
            rbx, rby = rotate_coords(bx, by)
            assert abs(np.hypot(rax - rbx, ray - rby) - np.sqrt(2) * d_orig) < 1e-12


def test_rule_like_single_feature_moves_single_axis():
    task = _identity_task()
    x0, y0 = location_of(task, 1, 1)
    x1, y1 = location_of(task, 2, 1)
    assert x1 != x0 and y1 == y0
    x2, y2 = location_of(task, 1, 4)
    assert x2 == x0 and y2 != y0


def test_rotated_single_feature_moves_both_axes():
    task = _identity_task(rotation=ROTATED)
    for (c1, a1), (c2, a2) in [((1, 1), (2, 1)), ((1, 1), (1, 2))]:
        x1, y1 = location_of(task, c1, a1)
        x2, y2 = location_of(task, c2, a2)
        assert x1 != x2 and y1 != y2


def test_permuted_orders_define_the_map():
    task = CompTaskSpec(color_order=(4, 3, 2, 1, 0), animal_order=(1, 0, 3, 2, 4), color_axis="x", rotation=RULE_LIKE)
    assert location_of(task, 0, 0) == (4, 1)
    assert cue_at_grid(task, 4, 1) == (0, 0)


def test_blocked_curriculum_is_row_then_column():
    task = _identity_task()
    rng = SplitRng(0, ("curr",))
    for _ in range(25):
        cur = make_curriculum(task, BLOCKED, rng)
        assert len(cur.study) == 9
        assert len(set(cur.study)) == 9
        assert len(cur.groups[0]) == 5 and len(cur.groups[1]) == 4
        assert tuple(cur.study[:5]) == cur.groups[0]
        assert tuple(cur.study[5:]) == cur.groups[1]
        # one group holds a fixed feature value; identity task makes grid = features
        g1_colors = {c for c, _ in cur.groups[0]}
        g1_animals = {a for _, a in cur.groups[0]}
        assert len(g1_colors) == 1 or len(g1_animals) == 1
        assert len(cur.test) == 16
        assert not set(cur.test) & set(cur.study)


def test_interleaved_shuffles_but_keeps_row_column_structure():
    task = _identity_task()
    rng = SplitRng(1, ("curr2",))
    shuffled_somewhere = False
    for _ in range(25):
        cur = make_curriculum(task, INTERLEAVED, rng)
        assert len(set(cur.study)) == 9
        assert set(cur.study) == set(cur.groups[0]) | set(cur.groups[1])
        if tuple(cur.study[:5]) != cur.groups[0]:
            shuffled_somewhere = True
    assert shuffled_somewhere


def test_aligned_uses_middle_row_and_column():
    task = _identity_task()
    cur = make_curriculum(task, ALIGNED, SplitRng(2, ("al",)))
    grid_pts = {(task.color_order[c], task.animal_order[a]) for c, a in cur.study}
    assert grid_pts == {(x, 2) for x in range(5)} | {(2, y) for y in range(5)}


def test_misaligned_uses_diagonals_sharing_center():
    task = _identity_task()
    cur = make_curriculum(task, MISALIGNED, SplitRng(3, ("mis",)))
    grid_pts = {(task.color_order[c], task.animal_order[a]) for c, a in cur.study}
    assert grid_pts == {(i, i) for i in range(5)} | {(i, 4 - i) for i in range(5)}
    assert len(cur.study) == 9  # center appears once


def test_sampled_tasks_balance_axis_and_exclude_keys():
    rng = SplitRng(4, ("samp",))
    n = 4000
    x_axis = 0
    seen = set()
    for _ in range(n):
        t = sample_metalearn_task(rng)
        x_axis += t.color_axis == "x"
        seen.add(task_key(t))
    assert abs(x_axis - n / 2) < 3 * np.sqrt(n * 0.25)
    for _ in range(100):
        t = sample_metalearn_task(rng, exclude_keys=seen)
        assert task_key(t) not in seen
