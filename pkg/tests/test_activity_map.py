import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crm.activity_map import (
    BBox,
    Person,
    Scene,
    build_activity_map,
    combine_max,
    composite,
    decode_group_by_pooling,
    decode_individual_by_pooling,
    gaussian_density,
    gaussian_params,
    read_pnm,
    render_person_map,
    write_pgm,
    write_ppm,
)

from oracles import render_brute_force


def grid_scene(boxes_actions, group, grid):
    """Scene whose image size equals the grid, so boxes are already in grid units."""
    persons = [Person(BBox(*b), a) for b, a in boxes_actions]
    return Scene(persons, group, image_size=grid)


def random_boxes(rng, m, grid, dyadic=False):
    H, W = grid
    out = []
    for _ in range(m):
        w, h = rng.uniform(0.5, W / 3), rng.uniform(0.5, H / 2)
        x1, y1 = rng.uniform(0, W - w), rng.uniform(0, H - h)
        box = (x1, y1, x1 + w, y1 + h)
        if dyadic:
            box = tuple(round(v * 8) / 8 for v in box)
            if box[2] <= box[0] or box[3] <= box[1]:
                box = (box[0], box[1], box[0] + 1, box[1] + 1)
        out.append(box)
    return out


# gaussian parameters


@pytest.mark.parametrize(
    "box,mu,sigma",
    [((8, 4, 16, 12), (12, 8), (2, 2)), ((0, 0, 4, 4), (2, 2), (1, 1)), ((0, 0, 1, 1), (0.5, 0.5), (0.5, 0.5))],
)
def test_gaussian_params(box, mu, sigma):
    gp = gaussian_params(BBox(*box))
    assert gp.mu == mu and gp.sigma == sigma


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        BBox(1, 1, 1, 3)
    with pytest.raises(ValueError):
        BBox(2, 1, 1, 3)


def test_density_peak_value():
    # a cell center sits exactly on the mean
    gp = gaussian_params(BBox(7.5, 3.5, 15.5, 11.5))
    d = gaussian_density(gp, (16, 24))
    assert abs(d[7, 11] - 1 / (8 * math.pi)) < 1e-15
    assert abs(1 / (8 * math.pi) - 0.039789) < 1e-6


def test_normalized_peak_and_one_sigma():
    m = render_person_map(BBox(7.5, 3.5, 15.5, 11.5), 1, 0, (16, 24), 3, 2)
    f = m[:, :, 1]
    assert f[7, 11] == 1.0 == f.max()
    assert abs(f[7, 13] - math.exp(-0.5)) < 1e-15
    assert abs(math.exp(-0.5) - 0.6065) < 1e-4
    assert np.array_equal(f, m[:, :, 3])
    assert not m[:, :, [0, 2, 4]].any()


def test_render_group_only():
    m = render_person_map(BBox(1, 1, 5, 5), None, 1, (8, 8), 0, 3)
    assert m.shape == (8, 8, 3)
    assert m[:, :, 1].max() == 1.0 and not m[:, :, [0, 2]].any()


# combination


def test_combine_max_basics(rng):
    a = rng.uniform(size=(4, 5, 3))
    assert np.array_equal(combine_max([a]), a)
    assert not combine_max([], (4, 5, 3)).any()
    with pytest.raises(ValueError):
        combine_max([a, np.zeros((4, 5, 2))])


def test_combine_max_three_persons_oracle(rng):
    maps = [rng.uniform(size=(6, 7, 4)) for _ in range(3)]
    got = combine_max(maps)
    for y in range(6):
        for x in range(7):
            for n in range(4):
                assert got[y, x, n] == max(m[y, x, n] for m in maps)


def test_one_person_fields():
    s = grid_scene([((2, 2, 6, 8), 2)], 1, (12, 16))
    m = build_activity_map(s, (12, 16), 4, 3)
    nonzero = [n for n in range(7) if m[:, :, n].any()]
    assert nonzero == [2, 4 + 1]


def test_two_persons_same_group():
    s = grid_scene([((1, 1, 5, 9), 0), ((9, 1, 13, 9), 3)], 2, (12, 16))
    m = build_activity_map(s, (12, 16), 4, 3)
    assert m[:, :, 0].max() == 1.0 and m[:, :, 3].max() == 1.0
    g = m[:, :, 4 + 2]
    # two separated peaks at the box centers
    assert g[5, 3] > 0.99 * g.max() and g[5, 11] > 0.99 * g.max()
    assert g[5, 7] < 0.5


def test_empty_scene_all_zero():
    m = build_activity_map(grid_scene([], 0, (5, 6)), (5, 6), 2, 2)
    assert m.shape == (5, 6, 4) and not m.any()


def test_random_five_person_oracle(rng):
    grid = (20, 30)
    boxes = random_boxes(rng, 5, grid)
    acts = rng.integers(0, 4, size=5).tolist()
    s = grid_scene(list(zip(boxes, acts)), 2, grid)
    got = build_activity_map(s, grid, 4, 3)
    ref = render_brute_force(list(zip(boxes, acts)), 2, grid, 4, 3)
    assert np.max(np.abs(got - ref)) < 1e-12


def test_image_space_boxes_are_scaled():
    s = Scene([Person(BBox(40, 20, 80, 60), 0)], 0, image_size=(96, 160))
    (b,) = s.grid_boxes((24, 40))
    assert b.as_tuple() == (10.0, 5.0, 20.0, 15.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), m=st.integers(1, 6))
def test_map_invariants(seed, m):
    r = np.random.default_rng(seed)
    grid = (12, 18)
    pairs = list(zip(random_boxes(r, m, grid), r.integers(0, 3, size=m).tolist()))
    s = grid_scene(pairs, int(r.integers(0, 4)), grid)
    a = build_activity_map(s, grid, 3, 4)
    assert a.min() >= 0.0 and a.max() <= 1.0
    touched = {act for _, act in pairs} | {3 + s.group}
    for n in range(7):
        if n in touched:
            assert a[:, :, n].max() == 1.0
        else:
            assert not a[:, :, n].any()
    # permutation invariance, bit for bit
    perm = r.permutation(m)
    s2 = grid_scene([pairs[i] for i in perm], s.group, grid)
    assert np.array_equal(a, build_activity_map(s2, grid, 3, 4))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), dx=st.integers(-3, 3), dy=st.integers(-3, 3))
def test_translation_equivariance(seed, dx, dy):
    r = np.random.default_rng(seed)
    grid = (24, 32)
    # dyadic boxes kept away from the border so the shift stays in bounds
    pairs = []
    for _ in range(int(r.integers(1, 4))):
        w, h = r.integers(4, 24) / 4, r.integers(4, 24) / 4
        x1, y1 = 4 + r.integers(0, 4 * (32 - 8 - 6)) / 4, 4 + r.integers(0, 4 * (24 - 8 - 6)) / 4
        pairs.append(((x1, y1, x1 + w, y1 + h), int(r.integers(0, 2))))
    a = build_activity_map(grid_scene(pairs, 1, grid), grid, 2, 2)
    moved = [((x1 + dx, y1 + dy, x2 + dx, y2 + dy), act) for (x1, y1, x2, y2), act in pairs]
    b = build_activity_map(grid_scene(moved, 1, grid), grid, 2, 2)
    H, W = grid
    src = a[max(0, -dy):H - max(0, dy), max(0, -dx):W - max(0, dx)]
    dst = b[max(0, dy):H - max(0, -dy), max(0, dx):W - max(0, -dx)]
    assert np.array_equal(src, dst)


def test_brute_force_oracle_volleyball_shape():
    r = np.random.default_rng(7)
    grid = (43, 78)
    for _ in range(3):
        m = int(r.integers(0, 13))
        pairs = list(zip(random_boxes(r, m, grid), r.integers(0, 9, size=m).tolist()))
        s = grid_scene(pairs, int(r.integers(0, 8)), grid)
        got = build_activity_map(s, grid, 9, 8)
        assert np.max(np.abs(got - render_brute_force(pairs, s.group, grid, 9, 8))) < 1e-12


# decoding


def test_decode_ground_truth_group():
    grid = (12, 16)
    pairs = [((1, 1, 5, 9), 0), ((9, 1, 13, 9), 1)]
    m = build_activity_map(grid_scene(pairs, 2, grid), grid, 2, 4)
    g, scores = decode_group_by_pooling(m, [BBox(*b) for b, _ in pairs], 4)
    assert g == 2 and scores[2] > 0 and np.count_nonzero(scores) == 1


def test_decode_zero_map_ties_to_first():
    g, scores = decode_group_by_pooling(np.zeros((6, 6, 5)), [BBox(0, 0, 3, 3)], 3)
    assert g == 0 and not scores.any()


def test_decode_empty_boxes_rejected():
    with pytest.raises(ValueError):
        decode_group_by_pooling(np.zeros((6, 6, 5)), [], 3)


def test_decode_random_map_matches_box_sum(rng):
    amap = rng.uniform(size=(10, 14, 7))
    boxes = [BBox(0.4, 1.6, 5.2, 7.0), BBox(8.0, 2.0, 13.9, 9.5)]
    g, scores = decode_group_by_pooling(amap, boxes, 4)
    ref = np.zeros(4)
    for b in boxes:
        for y in range(10):
            for x in range(14):
                if math.floor(b.x1) <= x < math.ceil(b.x2) and math.floor(b.y1) <= y < math.ceil(b.y2):
                    ref += amap[y, x, 3:]
    assert np.allclose(scores, ref, rtol=1e-14) and g == int(np.argmax(ref))


def test_decode_individual_overlapping_persons():
    grid = (16, 16)
    outer, inner = (2, 2, 14, 14), (6, 6, 10, 10)
    m = build_activity_map(grid_scene([(outer, 0), (inner, 1)], 0, grid), grid, 2, 1)
    for box in (outer, inner):
        b = BBox(*box)
        rows, cols = slice(int(b.y1), int(b.y2)), slice(int(b.x1), int(b.x2))
        sums = m[rows, cols, :2].sum(axis=(0, 1))
        assert sums[0] > 0 and sums[1] > 0
        assert decode_individual_by_pooling(m, b, 2) == int(np.argmax(sums))


def test_decode_round_trip_non_overlapping():
    grid = (24, 40)
    pairs = [((1, 2, 7, 12), 3), ((10, 4, 15, 20), 0), ((20, 1, 26, 11), 2), ((30, 10, 38, 22), 1)]
    m = build_activity_map(grid_scene(pairs, 1, grid), grid, 4, 2)
    for box, act in pairs:
        assert decode_individual_by_pooling(m, BBox(*box), 4) == act
    assert decode_group_by_pooling(m, [BBox(*b) for b, _ in pairs], 2)[0] == 1


# image export


def test_pgm_ppm_round_trip(tmp_path, rng):
    f = rng.uniform(size=(5, 7))
    write_pgm(tmp_path / "a.pgm", f)
    assert np.array_equal(read_pnm(tmp_path / "a.pgm"), np.rint(255 * f).astype(np.uint8))
    rgb = composite(rng.uniform(size=(5, 7, 3)))
    write_ppm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")


def test_composite_uses_strongest_field():
    f = np.zeros((1, 2, 2))
    f[0, 0, 1] = 1.0
    f[0, 1, 0] = 0.5
    rgb = composite(f)
    assert rgb[0, 0].tolist() == [60, 180, 75]
    assert rgb[0, 1].tolist() == [115, 12, 38]


def test_boxes_clamped_to_grid():
    grid = (10, 12)
    outside = grid_scene([((-3, 2, 4, 6), 0)], 0, grid)
    inside = grid_scene([((0, 2, 4, 6), 0)], 0, grid)
    assert outside.grid_boxes(grid)[0].as_tuple() == (0.0, 2.0, 4.0, 6.0)
    assert np.array_equal(build_activity_map(outside, grid, 1, 1), build_activity_map(inside, grid, 1, 1))
