import numpy as np
import pytest
from scipy import ndimage

from oracles import flood_fill_components, rescan_grouping
from soco.data import make_rectangles_scene
from soco.errors import InvalidInputError
from soco.proposals import iou
from soco.segmentation import (
    LabelMap,
    Region,
    build_regions,
    felzenszwalb_segment,
    group_regions,
    hierarchical_group,
    merge_regions,
    region_similarity,
    selective_search,
    similarity_terms,
)


def half_half(size=32):
    img = np.zeros((size, size, 3))
    img[:, size // 2:] = 1.0
    return img


def smooth_noise(seed, size=64):
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((size, size, 3)), sigma=(2, 2, 0))
    return (img - img.min()) / (img.max() - img.min())


def test_uniform_image_one_segment():
    lm = felzenszwalb_segment(np.full((32, 32, 3), 0.4))
    assert lm.n_segments == 1


def test_half_half_two_segments_match_flood_fill():
    img = half_half()
    lm = felzenszwalb_segment(img, k=500, sigma=0.0, min_size=1)
    assert lm.n_segments == 2
    assert np.array_equal(lm.labels, flood_fill_components(img))


def test_half_half_min_size_forces_merge():
    lm = felzenszwalb_segment(half_half(), k=500, sigma=0.9, min_size=600)
    assert lm.n_segments == 1


def test_empty_image_rejected():
    with pytest.raises(InvalidInputError):
        felzenszwalb_segment(np.zeros((0, 4, 3)))


def test_labelmap_contract():
    for seed in range(4):
        img = smooth_noise(seed)
        lm = felzenszwalb_segment(img, k=150, sigma=0.9, min_size=10)
        labels = lm.labels
        ids = np.unique(labels)
        assert np.array_equal(ids, np.arange(lm.n_segments))
        counts = np.bincount(labels.ravel())
        assert counts.min() >= 10
        for i in ids:
            _, n = ndimage.label(labels == i)  # default structure is 4-connected
            assert n == 1


def test_segment_count_monotone_in_k():
    for seed in range(10):
        img = smooth_noise(seed)
        counts = [felzenszwalb_segment(img, k=k, sigma=0.9, min_size=10).n_segments for k in (50, 150, 500)]
        assert counts[0] >= counts[1] >= counts[2], counts


def test_segmentation_deterministic():
    img = smooth_noise(1)
    a = felzenszwalb_segment(img, 150).labels
    b = felzenszwalb_segment(img.copy(), 150).labels
    assert np.array_equal(a, b)


def test_build_regions_half_half():
    img = half_half()
    lm = felzenszwalb_segment(img, sigma=0.0, min_size=1)
    regions, adj = build_regions(img, lm)
    assert len(regions) == 2 and adj == {(0, 1)}
    for r in regions:
        assert r.color_hist.shape == (75,) and r.texture_hist.shape == (240,)
        assert abs(r.color_hist.sum() - 1) <= 1e-6 and abs(r.texture_hist.sum() - 1) <= 1e-6


def test_build_regions_uniform():
    img = np.full((16, 16, 3), 0.3)
    regions, adj = build_regions(img, LabelMap(np.zeros((16, 16), dtype=np.int64)))
    assert len(regions) == 1 and adj == set()
    assert regions[0].corners == (0, 0, 16, 16)


def test_quadrant_adjacency_has_no_diagonals():
    labels = np.zeros((8, 8), dtype=np.int64)
    labels[:4, 4:] = 1
    labels[4:, :4] = 2
    labels[4:, 4:] = 3
    _, adj = build_regions(np.random.default_rng(0).random((8, 8, 3)), LabelMap(labels))
    # oracle: enumerate every horizontally/vertically neighbouring pixel pair
    want = set()
    for y in range(8):
        for x in range(8):
            for ny, nx in ((y + 1, x), (y, x + 1)):
                if ny < 8 and nx < 8 and labels[y, x] != labels[ny, nx]:
                    want.add(tuple(sorted((int(labels[y, x]), int(labels[ny, nx])))))
    assert adj == want and len(adj) == 4


def test_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        build_regions(np.zeros((4, 4, 3)), LabelMap(np.zeros((4, 5), dtype=np.int64)))


def _region(i, count, corners, rng=None, color=None):
    rng = rng or np.random.default_rng(i)
    c = color if color is not None else rng.random(75)
    t = rng.random(240)
    return Region(i, count, corners, c / c.sum(), t / t.sum())


def test_similarity_terms():
    a = _region(0, 50, (0, 0, 10, 5))
    b = Region(1, 50, (0, 5, 10, 10), a.color_hist.copy(), a.texture_hist.copy())
    col, tex, size, fill = similarity_terms(a, b, 100)
    assert col == pytest.approx(1.0) and tex == pytest.approx(1.0)
    assert size == pytest.approx(0.0)  # the pair covers the whole image
    assert fill == pytest.approx(1.0)  # union bbox has no uncovered area
    assert 0 <= region_similarity(a, b, 100) <= 4
    with pytest.raises(InvalidInputError):
        similarity_terms(a, b, 0)


def test_merge_weights_histograms():
    a = _region(0, 30, (0, 0, 5, 6))
    b = _region(1, 10, (5, 0, 7, 5))
    m = merge_regions(a, b, 2)
    assert m.pixel_count == 40 and m.corners == (0, 0, 7, 6)
    assert np.abs(m.color_hist - (0.75 * a.color_hist + 0.25 * b.color_hist)).sum() <= 1e-6
    assert np.abs(m.texture_hist - (0.75 * a.texture_hist + 0.25 * b.texture_hist)).sum() <= 1e-6


def test_grouping_small_cases():
    one = [_region(0, 16, (0, 0, 4, 4))]
    assert len(hierarchical_group(one, set(), 16)) == 1
    two = [_region(0, 8, (0, 0, 2, 4)), _region(1, 8, (2, 0, 4, 4))]
    assert len(hierarchical_group(two, {(0, 1)}, 16)) == 3
    row = [_region(i, 8, (2 * i, 0, 2 * i + 2, 4)) for i in range(3)]
    boxes = hierarchical_group(row, {(0, 1), (1, 2)}, 24)
    assert len(boxes) == 5


def _random_instance(rng, n):
    """n regions tiling a strip, with random histograms and random extra adjacencies."""
    regions, adj = [], set()
    x = 0
    for i in range(n):
        w = int(rng.integers(1, 5))
        regions.append(Region(i, int(w * 4), (x, 0, x + w, 4),
                              *(v / v.sum() for v in (rng.random(75), rng.random(240)))))
        x += w
        if i:
            adj.add((i - 1, i))
    for _ in range(n if n > 1 else 0):
        i, j = sorted(rng.choice(n, 2, replace=False))
        adj.add((int(i), int(j)))
    return regions, adj, float(x * 4)


def test_grouping_matches_rescan_oracle():
    rng = np.random.default_rng(4)
    for _ in range(60):
        n = int(rng.integers(1, 7))
        regions, adj, area = _random_instance(rng, n)
        _, merges = group_regions(regions, adj, area)
        assert merges == rescan_grouping(regions, adj, area)
        assert len(merges) == n - 1


def test_grouping_merge_invariants():
    rng = np.random.default_rng(9)
    regions, adj, area = _random_instance(rng, 6)
    history, merges = group_regions(regions, adj, area)
    by_id = {r.id: r for r in history}
    for a, b, new in merges:
        ra, rb, rn = by_id[a], by_id[b], by_id[new]
        assert rn.pixel_count == ra.pixel_count + rb.pixel_count
        wa = ra.pixel_count / rn.pixel_count
        expect = wa * ra.color_hist + (1 - wa) * rb.color_hist
        assert np.abs(rn.color_hist - expect).sum() <= 1e-6


def test_selective_search_uniform():
    boxes = selective_search(np.full((40, 60, 3), 0.5))
    assert len(boxes) == 1
    assert tuple(boxes[0]) == (30.0, 20.0, 60.0, 40.0)


def test_selective_search_three_rectangles():
    for seed in range(5):
        scene = make_rectangles_scene(np.random.default_rng([7, seed]))
        boxes = selective_search(scene.image)
        for s in scene.shapes:
            assert max(iou(s.bbox, b) for b in boxes) >= 0.7


def test_selective_search_pure_and_covers_initial_segments():
    img = smooth_noise(2)
    a = selective_search(img)
    assert a == selective_search(img.copy())
    n_initial = felzenszwalb_segment(img).n_segments
    assert len(a) >= n_initial
    regions, _ = build_regions(img, felzenszwalb_segment(img))
    assert {r.bbox for r in regions} <= set(a)
