import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from orbitseg import mscca


def _check_partition(b, cs):
    """Labels cover the foreground exactly, are 1..k, and match the records."""
    assert np.array_equal(cs.labels > 0, np.asarray(b) != 0)
    assert set(np.unique(cs.labels[cs.labels > 0])) == set(range(1, cs.k + 1))
    assert [c.label for c in cs.components] == list(range(1, cs.k + 1))
    for c in cs.components:
        assert c.area == int((cs.labels == c.label).sum())


def dumbbell(side: int, bridge: int, pad: int = 2):
    """Two side x side squares joined by a 1-px-wide horizontal bridge."""
    h, w = side + 2 * pad, 2 * side + bridge + 2 * pad
    b = np.zeros((h, w), dtype=np.uint8)
    img = np.zeros((h, w))
    b[pad:pad + side, pad:pad + side] = 1
    b[pad:pad + side, pad + side + bridge:pad + 2 * side + bridge] = 1
    img[b == 1] = 1.0
    b[pad + side // 2, pad + side:pad + side + bridge] = 1  # dark bridge
    return b, img


# --------------------------------------------------------------------------
# binarize


def test_binarize_zero_and_strict_threshold():
    assert not mscca.binarize(np.zeros((1, 4, 4))).any()
    assert mscca.binarize(np.array([[0.5, 0.50001]]))[0].tolist() == [0, 1]


def test_binarize_matches_loop(rng):
    r = rng.random((1, 9, 7))
    out = mscca.binarize(r, 0.3)
    for y in range(9):
        for x in range(7):
            assert out[y, x] == (1 if r[0, y, x] > 0.3 else 0)


def test_binarize_rejects_colour():
    with pytest.raises(ValueError):
        mscca.binarize(np.zeros((3, 4, 4)))


# --------------------------------------------------------------------------
# labeling


def test_empty_image():
    cs = mscca.label_components(np.zeros((5, 5)))
    assert cs.k == 0 and cs.components == ()


def test_diagonal_pixels_join():
    b = np.array([[1, 0], [0, 1]])
    assert mscca.label_components(b).k == 1
    assert mscca.label_components(b[::-1]).k == 1


def test_exhaustive_4x4_matches_flood_fill():
    bitsel = np.arange(16)
    for code in range(1 << 16):
        b = ((code >> bitsel) & 1).reshape(4, 4)
        cs = mscca.label_components(b)
        ref = oracles.flood_fill_labels(b)
        assert np.array_equal(cs.labels, ref), code
        assert cs.k == ref.max()


@pytest.mark.parametrize("density", [0.2, 0.5, 0.8])
def test_random_32x32_matches_flood_fill(rng, density):
    for _ in range(100):
        b = rng.random((32, 32)) < density
        cs = mscca.label_components(b)
        ref = oracles.flood_fill_labels(b)
        assert oracles.same_partition(cs.labels, ref)
        np.testing.assert_array_equal(cs.labels, ref)
        _check_partition(b, cs)


def test_component_records():
    b = np.zeros((6, 8), dtype=np.uint8)
    b[1:3, 2:6] = 1
    cs = mscca.label_components(b)
    c = cs.get(1)
    assert c.area == 8
    assert c.bbox == (1, 2, 2, 5)
    assert c.centroid == (2.0, 4.0)
    assert c.solidity == pytest.approx(1.0)
    with pytest.raises(KeyError):
        cs.get(2)


@given(st.integers(0, 2**32 - 1))
def test_solidity_matches_bruteforce_hull(seed):
    rng = np.random.default_rng(seed)
    b = rng.random((7, 7)) < 0.6
    cs = mscca.label_components(b)
    for c in cs.components:
        rows, cols = np.nonzero(cs.labels == c.label)
        corners = [(r + dr, q + dq) for r, q in zip(rows, cols) for dr in (0, 1) for dq in (0, 1)]
        expected = c.area / oracles.hull_area_bruteforce(corners)
        assert c.solidity == pytest.approx(expected, rel=1e-12)


@given(st.lists(st.tuples(st.integers(0, 19), st.integers(0, 19)), max_size=40))
def test_union_find_laws(pairs):
    uf = mscca.UnionFind(20)
    for a, b in pairs:
        uf.union(a, b)
        assert uf.find(a) == uf.find(b)
    for x in range(20):
        assert uf.find(uf.find(x)) == uf.find(x)


def _best_times(a, b, trials=15):
    """Fastest of interleaved runs, so both images see the same machine load."""
    ta, tb = [], []
    for _ in range(trials):
        for img, ts in ((a, ta), (b, tb)):
            t0 = time.perf_counter()
            mscca.label_components(img)
            ts.append(time.perf_counter() - t0)
    return min(ta), min(tb)


@pytest.mark.slow
@pytest.mark.parametrize("side", [256, 512])
def test_doubling_pixels_scales_linearly(rng, side):
    mscca.label_components(np.ones((4, 4)))
    small = rng.random((side, side)) < 0.5
    large = rng.random((side, 2 * side)) < 0.5
    t_small, t_large = _best_times(small, large)
    assert t_large <= 2.5 * t_small


# --------------------------------------------------------------------------
# suspicion


def test_square_not_suspicious():
    b = np.zeros((12, 12))
    b[2:10, 2:10] = 1
    assert mscca.detect_suspicious(mscca.label_components(b)) == []


def test_long_dumbbell_low_solidity():
    b, _ = dumbbell(8, 24)
    cs = mscca.label_components(b)
    assert cs.k == 1
    assert cs.components[0].solidity == pytest.approx(152 / 320)
    assert mscca.detect_suspicious(cs) == [1]


def _blobs(areas):
    b = np.zeros((4, 4 * len(areas) * 20), dtype=np.uint8)
    col = 0
    for a in areas:
        b[0, col:col + a] = 1
        col += a + 2
    return b


def test_mad_rule():
    assert mscca.detect_suspicious(mscca.label_components(_blobs([10, 10, 10]))) == []
    assert mscca.detect_suspicious(mscca.label_components(_blobs([10, 10, 10, 30]))) == [4]
    assert mscca.detect_suspicious(mscca.label_components(_blobs([10, 11, 12, 60]))) == [4]
    # fewer than three components never trigger the area rule
    assert mscca.detect_suspicious(mscca.label_components(_blobs([5, 60]))) == []


# --------------------------------------------------------------------------
# min-cut split


def test_max_flow_equals_bruteforce_min_cut(rng):
    for _ in range(20):
        rows, cols = np.nonzero(rng.random((4, 4)) < 0.9)
        if rows.size < 2:
            continue
        nbr, cap = mscca.grid_graph(rows, cols, rng.random(rows.size), 0.3)
        s, t = 0, rows.size - 1
        value, side = mscca.max_flow(nbr, cap, s, t)
        edges = {(i, int(nbr[i, d])): cap[i, d] for i in range(rows.size) for d in range(8) if nbr[i, d] >= 0}
        best, argmin = oracles.min_cut_bruteforce(rows.size, edges, s, t)
        assert value == pytest.approx(best, rel=1e-9, abs=1e-12)
        if best > 0:
            assert frozenset(np.flatnonzero(side).tolist()) in argmin


def test_small_dumbbell_split_matches_oracle():
    b, img = dumbbell(3, 1, pad=1)
    cs = mscca.label_components(b)
    rows, cols = np.nonzero(cs.labels == 1)
    assert rows.size == 19
    nbr, cap = mscca.grid_graph(rows, cols, img[rows, cols], 0.1)
    s, t = mscca.principal_axis_seeds(rows, cols)
    edges = {(i, int(nbr[i, d])): cap[i, d] for i in range(19) for d in range(8) if nbr[i, d] >= 0}
    _, argmin = oracles.min_cut_bruteforce(19, edges, s, t)

    out = mscca.refine_split(b, img, 1, cs, mscca.CutConfig(a_min=4))
    assert out.k == 2
    src = frozenset(i for i in range(19) if out.labels[rows[i], cols[i]] == 1)
    assert src in argmin
    _check_partition(b, out)
    assert all(c.split_from == 1 for c in out.components)


def test_default_dumbbell_splits_at_bridge():
    b, img = dumbbell(8, 24)
    cs = mscca.label_components(b)
    out = mscca.refine_split(b, img, 1, cs)
    assert out.k == 2
    _check_partition(b, out)
    areas = sorted(c.area for c in out.components)
    assert areas == [64, 64 + 24]
    # every bridge pixel sits with one of the squares, never split
    bridge = out.labels[2 + 8 // 2, 2 + 8:2 + 8 + 24]
    assert len(set(bridge.tolist())) == 1


def test_homogeneous_square_retained():
    b = np.zeros((14, 14), dtype=np.uint8)
    b[2:12, 2:12] = 1
    cs = mscca.label_components(b)
    out = mscca.refine_split(b, np.full((14, 14), 0.7), 1, cs)
    assert out is cs


def test_split_leaves_other_pixels(rng):
    b, img = dumbbell(8, 24, pad=3)
    b[0, 0] = b[-1, -1] = 1
    cs = mscca.label_components(b)
    lab = cs.labels[3 + 4, 3]
    out = mscca.refine_split(b, img, lab, cs)
    outside = cs.labels != lab
    np.testing.assert_array_equal(out.labels[outside], cs.labels[outside])
    _check_partition(b, out)


def test_segment_instances_flags_and_splits():
    b, img = dumbbell(8, 24)
    cs = mscca.segment_instances(b.astype(float)[None], img)
    assert cs.k == 2
    assert all(c.suspicious and c.split_from == 1 for c in cs.components)
    json_rows = cs.to_json()
    assert {"label", "area", "bbox", "centroid", "solidity", "suspicious", "split_from"} <= set(json_rows[0])
