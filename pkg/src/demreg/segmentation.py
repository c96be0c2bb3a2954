"""Region segmentation by immersion watershed and saliency merging.

watershed() floods the gradient-magnitude surface from its regional
minima, so each region is the catchment of one minimum.  On surfaces
with all-distinct values this reproduces steepest-descent basins
exactly (each cell is claimed by its lowest neighbour, which by flood
order is already labelled).

p_model_segment() coarsens the watershed through levels that merge
adjacent regions across weak boundaries.  Boundary saliency between two
regions is the lowest pass elevation on their shared boundary minus the
higher of the two region minima, i.e. the climb needed to spill from
the shallower basin into the other.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dem_io import DemGrid
from .errors import AllNoData

BACKGROUND_LABEL = -1

_N4 = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass
class SegmentLabels:
    """Region ids per cell; nodata cells carry BACKGROUND_LABEL."""

    labels: np.ndarray
    region_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)


@dataclass
class SegmentHierarchy:
    """Nested segmentations, finest first.

    merge_tree[k][i] is the level-(k+1) region containing level-k
    region i; len(merge_tree) == len(levels) - 1.
    """

    levels: list
    merge_tree: list


def gradient_magnitude(grid: DemGrid) -> np.ndarray:
    """Central-difference gradient magnitude in elevation units per cell.

    One-sided differences at borders and beside nodata; cells with no
    valid neighbour along an axis get a zero component.  Nodata cells
    hold NaN.
    """
    z = np.where(grid.valid_mask, grid.data, np.nan)
    out = np.empty((2,) + z.shape)
    for axis in (0, 1):
        fwd = np.full_like(z, np.nan)
        bwd = np.full_like(z, np.nan)
        if axis == 0:
            fwd[:-1, :] = z[1:, :]
            bwd[1:, :] = z[:-1, :]
        else:
            fwd[:, :-1] = z[:, 1:]
            bwd[:, 1:] = z[:, :-1]
        have_f = np.isfinite(fwd)
        have_b = np.isfinite(bwd)
        comp = np.zeros_like(z)
        both = have_f & have_b
        comp[both] = (fwd[both] - bwd[both]) / 2.0
        only_f = have_f & ~have_b
        comp[only_f] = fwd[only_f] - z[only_f]
        only_b = have_b & ~have_f
        comp[only_b] = z[only_b] - bwd[only_b]
        out[axis] = comp
    mag = np.hypot(out[0], out[1])
    mag[~grid.valid_mask] = np.nan
    return mag


def _regional_minima(surface: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Label seeds: connected plateaus with no lower 4-neighbour.

    Returns an int array, -1 outside seeds, seed ids densely numbered
    by each plateau's first row-major cell.
    """
    nr, nc = surface.shape
    no_lower = valid.copy()
    for dr, dc in _N4:
        src = np.full_like(surface, np.inf)
        if dr == -1:
            src[1:, :] = surface[:-1, :]
        elif dr == 1:
            src[:-1, :] = surface[1:, :]
        elif dc == -1:
            src[:, 1:] = surface[:, :-1]
        else:
            src[:, :-1] = surface[:, 1:]
        src[~np.isfinite(src)] = np.inf
        with np.errstate(invalid="ignore"):
            no_lower &= ~(src < surface)
    comp, n_comp = ndimage.label(no_lower, structure=np.array(
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    # Reject components that are only the interior of a plateau whose
    # rim drains downhill: such a component touches an equal-valued
    # valid cell outside itself.
    keep = np.ones(n_comp + 1, dtype=bool)
    for idx, slc in enumerate(ndimage.find_objects(comp), start=1):
        r0 = max(slc[0].start - 1, 0)
        r1 = min(slc[0].stop + 1, nr)
        c0 = max(slc[1].start - 1, 0)
        c1 = min(slc[1].stop + 1, nc)
        sub = comp[r0:r1, c0:c1] == idx
        ring = ndimage.binary_dilation(sub, structure=np.array(
            [[0, 1, 0], [1, 1, 1], [0, 1, 0]])) & ~sub
        ring &= valid[r0:r1, c0:c1]
        if ring.any():
            v = surface[r0:r1, c0:c1][sub][0]
            if np.any(surface[r0:r1, c0:c1][ring] == v):
                keep[idx] = False
    next_id = 0
    flat_comp = comp.ravel()
    # assign dense ids in order of each component's first row-major cell
    first_cell = np.full(n_comp + 1, np.iinfo(np.int64).max, dtype=np.int64)
    idxs = np.flatnonzero(flat_comp)
    np.minimum.at(first_cell, flat_comp[idxs], idxs)
    comp_order = [i for i in np.argsort(first_cell[1:], kind="stable") + 1
                  if keep[i] and first_cell[i] != np.iinfo(np.int64).max]
    remap = np.full(n_comp + 1, -1, dtype=np.int32)
    for cid in comp_order:
        remap[cid] = next_id
        next_id += 1
    seeds = remap[comp]
    return seeds


def flood_basins(surface: np.ndarray, valid: np.ndarray) -> SegmentLabels:
    """Immersion flood of an arbitrary surface from its regional minima."""
    seeds = _regional_minima(surface, valid)
    labels = seeds.copy()
    nr, nc = surface.shape
    heap = []
    counter = 0
    seed_cells = np.argwhere(seeds >= 0)
    for r, c in seed_cells:
        heapq.heappush(heap, (surface[r, c], counter, int(r), int(c)))
        counter += 1
    while heap:
        _, _, r, c = heapq.heappop(heap)
        lab = labels[r, c]
        for dr, dc in _N4:
            rr, cj = r + dr, c + dc
            if 0 <= rr < nr and 0 <= cj < nc and valid[rr, cj] \
                    and labels[rr, cj] < 0:
                labels[rr, cj] = lab
                heapq.heappush(heap, (surface[rr, cj], counter, rr, cj))
                counter += 1
    n_regions = int(seeds.max()) + 1
    labels[~valid] = BACKGROUND_LABEL
    return SegmentLabels(labels, n_regions)


def watershed(grid: DemGrid) -> SegmentLabels:
    """Segment a DEM by flooding its gradient-magnitude surface."""
    valid = grid.valid_mask
    if not valid.any():
        raise AllNoData("watershed needs at least one valid cell")
    mag = gradient_magnitude(grid)
    return flood_basins(mag, valid)


def _passes_and_minima(grid: DemGrid, seg: SegmentLabels):
    """Min pass elevation per adjacent region pair, plus region minima."""
    labels = seg.labels
    z = grid.data
    region_min = np.full(seg.region_count, np.inf)
    inside = labels >= 0
    np.minimum.at(region_min, labels[inside], z[inside])

    pass_min: dict = {}
    for axis in (0, 1):
        if axis == 0:
            la, lb = labels[:-1, :], labels[1:, :]
            za, zb = z[:-1, :], z[1:, :]
        else:
            la, lb = labels[:, :-1], labels[:, 1:]
            za, zb = z[:, :-1], z[:, 1:]
        touching = (la >= 0) & (lb >= 0) & (la != lb)
        if not touching.any():
            continue
        a = la[touching]
        b = lb[touching]
        passes = np.maximum(za[touching], zb[touching])
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        keys = lo.astype(np.int64) * seg.region_count + hi
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        passes = passes[order]
        first = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
        pass_per_key = np.minimum.reduceat(passes, first)
        for key, p in zip(keys[first], pass_per_key):
            pair = (int(key // seg.region_count), int(key % seg.region_count))
            prev = pass_min.get(pair)
            if prev is None or p < prev:
                pass_min[pair] = float(p)
    return pass_min, region_min


def boundary_saliency(grid: DemGrid, seg: SegmentLabels) -> dict:
    """Pass-height saliency for every 4-adjacent region pair.

    Returns {(lo_id, hi_id): saliency}.  The pass elevation of a
    boundary cell pair is the higher of its two elevations; saliency is
    the minimum pass over the shared boundary minus the higher region
    minimum.
    """
    pass_min, region_min = _passes_and_minima(grid, seg)
    return {key: p - float(max(region_min[key[0]], region_min[key[1]]))
            for key, p in pass_min.items()}


def _merge_below(adj: dict, minima: np.ndarray, root: np.ndarray,
                 threshold: float) -> None:
    """Cheapest-first sequential merging of pairs under a threshold.

    Merging into the lower id and recomputing after every merge keeps a
    ridge-top region from bridging two deep basins: once the strip is
    absorbed by one side, the pair across the ridge is re-scored at the
    full climb height.  Mutates adj, minima, and root in place.
    """
    def saliency(a, b):
        return adj[a][b] - max(minima[a], minima[b])

    heap = []
    for a, nbrs in adj.items():
        for b in nbrs:
            if a < b:
                heapq.heappush(heap, (saliency(a, b), a, b))
    while heap:
        s, a, b = heapq.heappop(heap)
        if a not in adj or b not in adj or b not in adj[a]:
            continue
        cur = saliency(a, b)
        if cur != s:
            heapq.heappush(heap, (cur, a, b))
            continue
        if s >= threshold:
            break
        # merge b into a (a < b by construction)
        minima[a] = min(minima[a], minima[b])
        for n, p in adj[b].items():
            if n == a:
                continue
            merged_pass = min(p, adj[a].get(n, np.inf))
            adj[a][n] = merged_pass
            del adj[n][b]
            adj[n][a] = merged_pass
            lo, hi = (a, n) if a < n else (n, a)
            heapq.heappush(heap, (merged_pass - max(minima[lo], minima[hi]),
                                  lo, hi))
        del adj[a][b]
        del adj[b]
        root[root == b] = a
        # a's minimum may have dropped; re-score its surviving pairs
        for n in adj[a]:
            lo, hi = (a, n) if a < n else (n, a)
            heapq.heappush(heap, (saliency(lo, hi), lo, hi))


def p_model_segment(grid: DemGrid, max_levels: int) -> SegmentHierarchy:
    """Build a merge hierarchy over the watershed segmentation.

    Level k+1 repeatedly merges the adjacent region pair of least
    boundary saliency while one falls below t_0 * 2**k, where t_0 is
    2 percent of the grid's elevation range.  Stops when max_levels
    levels exist or one region remains.
    """
    if max_levels < 1:
        raise ValueError("max_levels must be >= 1")
    base = watershed(grid)
    vals = grid.valid_values()
    elev_range = float(vals.max() - vals.min())
    t0 = max(0.02 * elev_range, 1e-9)

    levels = [base]
    merge_tree = []
    k = 0
    while len(levels) < max_levels and levels[-1].region_count > 1:
        cur = levels[-1]
        threshold = t0 * (2.0 ** k)
        pass_min, minima = _passes_and_minima(grid, cur)
        adj: dict = {i: {} for i in range(cur.region_count)}
        for (a, b), p in pass_min.items():
            adj[a][b] = p
            adj[b][a] = p
        root = np.arange(cur.region_count, dtype=np.int32)
        _merge_below(adj, minima, root, threshold)
        remap = {}
        parent = np.empty(cur.region_count, dtype=np.int32)
        for i in range(cur.region_count):
            r = int(root[i])
            if r not in remap:
                remap[r] = len(remap)
            parent[i] = remap[r]
        new_labels = np.where(cur.labels >= 0, parent[cur.labels],
                              BACKGROUND_LABEL)
        levels.append(SegmentLabels(new_labels, len(remap)))
        merge_tree.append(parent)
        k += 1
    return SegmentHierarchy(levels, merge_tree)
