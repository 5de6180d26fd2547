"""Unsupervised object proposals: graph segmentation plus selective search grouping.

Images here are HWC float arrays in [0, 1].  The segmentation ``k`` is
expressed on the usual 0-255 intensity scale (so the customary
``k=500, sigma=0.9, min_size=10`` applies unchanged) and divided by 255
internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from soco.errors import InvalidInputError
from soco.proposals import BBox

COLOR_BINS = 25
TEXTURE_BINS = 10
TEXTURE_ORIENTATIONS = 8
TEXTURE_SIGMA = 1.0


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W) int64, contiguous ids 0..n-1

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_segments(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass
class Region:
    id: int
    pixel_count: int
    corners: tuple[int, int, int, int]  # x0, y0, x1, y1 with exclusive max edges
    color_hist: np.ndarray
    texture_hist: np.ndarray

    @property
    def bbox(self) -> BBox:
        return BBox.from_corners(*(float(c) for c in self.corners))

    @property
    def bbox_area(self) -> int:
        x0, y0, x1, y1 = self.corners
        return (x1 - x0) * (y1 - y0)


def _as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0 or img.shape[2] == 0:
        raise InvalidInputError(f"expected a non-empty HxWxC image, got shape {np.shape(image)}")
    return img


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        if self.rank[a] < self.rank[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        if self.rank[a] == self.rank[b]:
            self.rank[a] += 1
        return a


def _grid_edges(h: int, w: int, diagonal: bool) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(h * w).reshape(h, w)
    pairs = [(idx[:, :-1], idx[:, 1:]), (idx[:-1, :], idx[1:, :])]
    if diagonal:
        pairs += [(idx[:-1, :-1], idx[1:, 1:]), (idx[1:, :-1], idx[:-1, 1:])]
    a = np.concatenate([p[0].reshape(-1) for p in pairs])
    b = np.concatenate([p[1].reshape(-1) for p in pairs])
    return np.minimum(a, b), np.maximum(a, b)


def _sorted_edges(flat: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    weight = np.sqrt(np.sum((flat[lo] - flat[hi]) ** 2, axis=1))
    order = np.lexsort((hi, lo, weight))
    return lo[order], hi[order], weight[order]


def _relabel_first_seen(labels: np.ndarray) -> np.ndarray:
    flat = labels.reshape(-1)
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse].reshape(labels.shape)


def felzenszwalb_segment(image, k: float = 500.0, sigma: float = 0.9, min_size: int = 10) -> LabelMap:
    """Graph-based segmentation on the 8-connected pixel grid.

    Edges are sorted by Euclidean colour distance of the Gaussian-smoothed
    image, ties broken by (lower pixel index, higher pixel index).  After the
    main pass, segments are split into 4-connected pieces and every piece
    smaller than ``min_size`` is merged along the cheapest 4-connected edge.
    """
    img = _as_image(image)
    if k <= 0 or sigma < 0 or min_size < 1:
        raise InvalidInputError("need k > 0, sigma >= 0, min_size >= 1")
    h, w, c = img.shape
    if sigma > 0:
        img = np.stack([ndimage.gaussian_filter(img[:, :, i], sigma, mode="nearest")
                        for i in range(c)], axis=-1)
    flat = img.reshape(-1, c)
    c_scale = k / 255.0

    lo, hi, wt = _sorted_edges(flat, *_grid_edges(h, w, diagonal=True))
    ds = _DisjointSet(h * w)
    thresh = [c_scale] * (h * w)
    find, union, size = ds.find, ds.union, ds.size
    for a, b, weight in zip(lo.tolist(), hi.tolist(), wt.tolist()):
        ra, rb = find(a), find(b)
        if ra != rb and weight <= thresh[ra] and weight <= thresh[rb]:
            root = union(ra, rb)
            thresh[root] = weight + c_scale / size[root]
    roots = np.fromiter((find(i) for i in range(h * w)), dtype=np.int64, count=h * w)

    # Diagonal-only joins can leave segments that are not 4-connected.
    lo4, hi4, wt4 = _sorted_edges(flat, *_grid_edges(h, w, diagonal=False))
    same = roots[lo4] == roots[hi4]
    graph = coo_matrix((np.ones(int(same.sum())), (lo4[same], hi4[same])), shape=(h * w, h * w))
    n_pieces, pieces = connected_components(graph, directed=False)

    ds = _DisjointSet(n_pieces)
    ds.size = np.bincount(pieces, minlength=n_pieces).tolist()
    find, union, size = ds.find, ds.union, ds.size
    boundary = pieces[lo4] != pieces[hi4]
    for a, b in zip(pieces[lo4[boundary]].tolist(), pieces[hi4[boundary]].tolist()):
        ra, rb = find(a), find(b)
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            union(ra, rb)
    merged = np.array([find(p) for p in range(n_pieces)], dtype=np.int64)[pieces]
    return LabelMap(_relabel_first_seen(merged.reshape(h, w)))


def _texture_bins(img: np.ndarray) -> np.ndarray:
    """(H, W, C, orientations) bin index of half-rectified oriented derivatives."""
    h, w, c = img.shape
    angles = np.arange(TEXTURE_ORIENTATIONS) * (2 * np.pi / TEXTURE_ORIENTATIONS)
    bins = np.empty((h, w, c, TEXTURE_ORIENTATIONS), dtype=np.int64)
    for ch in range(c):
        gy = ndimage.gaussian_filter(img[:, :, ch], TEXTURE_SIGMA, order=(1, 0), mode="nearest")
        gx = ndimage.gaussian_filter(img[:, :, ch], TEXTURE_SIGMA, order=(0, 1), mode="nearest")
        resp = np.maximum(gx[..., None] * np.cos(angles) + gy[..., None] * np.sin(angles), 0.0)
        top = resp.max()
        scaled = resp / top if top > 0 else resp
        bins[:, :, ch] = np.clip((scaled * TEXTURE_BINS).astype(np.int64), 0, TEXTURE_BINS - 1)
    return bins


def _region_histograms(labels: np.ndarray, bins: np.ndarray, nbins: int, n: int) -> np.ndarray:
    """Per-label histograms over the trailing channel axes of ``bins``, L1-normalised."""
    flat_labels = labels.reshape(-1)
    chans = bins.reshape(flat_labels.size, -1)
    parts = [np.bincount(flat_labels * nbins + chans[:, j], minlength=n * nbins).reshape(n, nbins)
             for j in range(chans.shape[1])]
    hist = np.concatenate(parts, axis=1).astype(np.float64)
    return hist / hist.sum(axis=1, keepdims=True)


def build_regions(image, labelmap: LabelMap) -> tuple[list[Region], set[tuple[int, int]]]:
    """Descriptors for each segment plus its 4-connected adjacency pairs (i < j)."""
    img = _as_image(image)
    labels = labelmap.labels
    if labels.shape != img.shape[:2]:
        raise InvalidInputError(f"label map {labels.shape} does not match image {img.shape[:2]}")
    n = labelmap.n_segments
    color_bins = np.clip((img * COLOR_BINS).astype(np.int64), 0, COLOR_BINS - 1)
    color = _region_histograms(labels, color_bins, COLOR_BINS, n)
    texture = _region_histograms(labels, _texture_bins(img), TEXTURE_BINS, n)

    counts = np.bincount(labels.reshape(-1), minlength=n)
    ys, xs = np.indices(labels.shape)
    flat = labels.reshape(-1)
    x0 = np.full(n, np.iinfo(np.int64).max)
    y0 = np.full(n, np.iinfo(np.int64).max)
    x1 = np.full(n, -1)
    y1 = np.full(n, -1)
    np.minimum.at(x0, flat, xs.reshape(-1))
    np.minimum.at(y0, flat, ys.reshape(-1))
    np.maximum.at(x1, flat, xs.reshape(-1) + 1)
    np.maximum.at(y1, flat, ys.reshape(-1) + 1)

    regions = [Region(i, int(counts[i]), (int(x0[i]), int(y0[i]), int(x1[i]), int(y1[i])),
                      color[i], texture[i]) for i in range(n)]

    adjacency: set[tuple[int, int]] = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        adjacency.update(zip(lo.tolist(), hi.tolist()))
    return regions, adjacency


def similarity_terms(a: Region, b: Region, image_area: float) -> tuple[float, float, float, float]:
    """(colour, texture, size, fill) similarity, each in [0, 1]."""
    if image_area <= 0:
        raise InvalidInputError("image_area must be positive")
    s_color = float(np.minimum(a.color_hist, b.color_hist).sum())
    s_texture = float(np.minimum(a.texture_hist, b.texture_hist).sum())
    joint = a.pixel_count + b.pixel_count
    s_size = 1.0 - joint / image_area
    x0 = min(a.corners[0], b.corners[0])
    y0 = min(a.corners[1], b.corners[1])
    x1 = max(a.corners[2], b.corners[2])
    y1 = max(a.corners[3], b.corners[3])
    s_fill = 1.0 - ((x1 - x0) * (y1 - y0) - joint) / image_area
    clip = lambda v: min(max(v, 0.0), 1.0)  # noqa: E731
    return clip(s_color), clip(s_texture), clip(s_size), clip(s_fill)


def region_similarity(a: Region, b: Region, image_area: float) -> float:
    return sum(similarity_terms(a, b, image_area))


def merge_regions(a: Region, b: Region, new_id: int) -> Region:
    n = a.pixel_count + b.pixel_count
    wa, wb = a.pixel_count / n, b.pixel_count / n
    corners = (min(a.corners[0], b.corners[0]), min(a.corners[1], b.corners[1]),
               max(a.corners[2], b.corners[2]), max(a.corners[3], b.corners[3]))
    return Region(new_id, n, corners,
                  wa * a.color_hist + wb * b.color_hist,
                  wa * a.texture_hist + wb * b.texture_hist)


def group_regions(regions: Sequence[Region], adjacency: Iterable[tuple[int, int]],
                  image_area: float) -> tuple[list[Region], list[tuple[int, int, int]]]:
    """Greedy hierarchical grouping.

    Repeatedly merges the most similar adjacent pair (ties go to the
    lexicographically smallest id pair) until no adjacent pairs remain.
    Returns every region ever created, indexed by id, and the merge log
    ``(id_a, id_b, new_id)``.
    """
    if not regions:
        raise InvalidInputError("need at least one region")
    pool = {r.id: r for r in regions}
    history = list(regions)
    next_id = max(pool) + 1
    neighbours: dict[int, set[int]] = {r.id: set() for r in regions}
    sims: dict[tuple[int, int], float] = {}
    for i, j in adjacency:
        i, j = min(i, j), max(i, j)
        neighbours[i].add(j)
        neighbours[j].add(i)
        sims[(i, j)] = region_similarity(pool[i], pool[j], image_area)

    merges = []
    while sims:
        (i, j), _ = max(sims.items(), key=lambda kv: (kv[1], -kv[0][0], -kv[0][1]))
        new = merge_regions(pool.pop(i), pool.pop(j), next_id)
        pool[new.id] = new
        history.append(new)
        merges.append((i, j, new.id))
        touched = (neighbours.pop(i) | neighbours.pop(j)) - {i, j}
        for key in [key for key in sims if i in key or j in key]:
            del sims[key]
        neighbours[new.id] = set()
        for t in sorted(touched):
            neighbours[t] -= {i, j}
            neighbours[t].add(new.id)
            neighbours[new.id].add(t)
            sims[(t, new.id)] = region_similarity(pool[t], new, image_area)
        next_id += 1
    return history, merges


def _dedupe(boxes: Iterable[BBox]) -> list[BBox]:
    seen: set[BBox] = set()
    out = []
    for b in boxes:
        if b not in seen:
            seen.add(b)
            out.append(b)
    return out


def hierarchical_group(regions: Sequence[Region], adjacency: Iterable[tuple[int, int]],
                       image_area: float) -> list[BBox]:
    """Bounding boxes of all initial and merged regions, de-duplicated in creation order."""
    history, _ = group_regions(regions, adjacency, image_area)
    return _dedupe(r.bbox for r in history)


def selective_search(image, k: float = 500.0, sigma: float = 0.9, min_size: int = 10) -> list[BBox]:
    """Proposal boxes (centre format, image pixel coordinates) for one image."""
    img = _as_image(image)
    labelmap = felzenszwalb_segment(img, k=k, sigma=sigma, min_size=min_size)
    regions, adjacency = build_regions(img, labelmap)
    return hierarchical_group(regions, adjacency, float(img.shape[0] * img.shape[1]))
