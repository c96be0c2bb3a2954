"""Watershed and merge-hierarchy behaviour against a basin oracle."""

import numpy as np
import pytest

from demreg import DemGrid
from demreg.errors import AllNoData
from demreg.segmentation import (
    BACKGROUND_LABEL,
    boundary_saliency,
    flood_basins,
    gradient_magnitude,
    p_model_segment,
    watershed,
)

N4 = ((-1, 0), (1, 0), (0, -1), (0, 1))


def steepest_descent_basins(surface, valid):
    """Oracle: each cell follows its lowest 4-neighbour to a minimum.

    Assumes all valid surface values are distinct.
    """
    nr, nc = surface.shape
    basin = np.full((nr, nc), -2, dtype=int)

    def lowest_neighbor(r, c):
        best = None
        for dr, dc in N4:
            rr, cj = r + dr, c + dc
            if 0 <= rr < nr and 0 <= cj < nc and valid[rr, cj]:
                if best is None or surface[rr, cj] < surface[best]:
                    best = (rr, cj)
        return best

    minima = []
    for r in range(nr):
        for c in range(nc):
            if not valid[r, c]:
                continue
            nb = lowest_neighbor(r, c)
            if nb is None or surface[nb] >= surface[r, c]:
                minima.append((r, c))
    for i, (r, c) in enumerate(minima):
        basin[r, c] = i
    for r in range(nr):
        for c in range(nc):
            if not valid[r, c] or basin[r, c] >= 0:
                continue
            path = [(r, c)]
            cur = (r, c)
            while basin[cur] < 0:
                cur = lowest_neighbor(*cur)
                path.append(cur)
            for cell in path:
                basin[cell] = basin[cur]
    return basin


def same_partition(a, b, valid):
    """True when two label fields induce the same cell partition."""
    fwd, bwd = {}, {}
    for x, y in zip(a[valid].ravel(), b[valid].ravel()):
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


def distinct_gradient_grid(seed, shape):
    rng = np.random.default_rng(seed)
    g = DemGrid(rng.uniform(0, 100, size=shape))
    mag = gradient_magnitude(g)
    vals = mag[np.isfinite(mag)]
    assert np.unique(vals).size == vals.size, "gradient ties; pick new seed"
    return g, mag


class TestFloodBasins:
    def test_matches_oracle_on_random_surfaces(self):
        for seed in range(25):
            rng = np.random.default_rng(1000 + seed)
            nr = int(rng.integers(4, 17))
            nc = int(rng.integers(4, 17))
            surface = rng.permutation(nr * nc).astype(float).reshape(nr, nc)
            valid = np.ones((nr, nc), dtype=bool)
            got = flood_basins(surface, valid)
            want = steepest_descent_basins(surface, valid)
            assert same_partition(got.labels, want, valid), f"seed {seed}"

    def test_single_minimum(self):
        rr, cc = np.meshgrid(np.arange(9.0), np.arange(9.0), indexing="ij")
        bowl = (rr - 4) ** 2 + (cc - 4) ** 2
        seg = flood_basins(bowl, np.ones_like(bowl, dtype=bool))
        assert seg.region_count == 1
        assert np.all(seg.labels == 0)

    def test_plateau_flows_to_single_region(self):
        # plateau with one downhill exit must not seed its own region
        surface = np.array([[5.0, 3.0, 3.0, 3.0],
                            [5.0, 3.0, 3.0, 3.0],
                            [5.0, 1.0, 5.0, 5.0]])
        seg = flood_basins(surface, np.ones_like(surface, dtype=bool))
        assert seg.region_count == 1


class TestWatershed:
    def test_two_ridge_profile_splits_into_two(self):
        row = np.array([5.0, 1.0, 5.0, 5.0, 1.0, 5.0])
        g = DemGrid(np.tile(row, (6, 1)))
        seg = watershed(g)
        assert seg.region_count == 2
        # split lands on the central ridge plateau (between cols 2 and 3)
        assert np.all(seg.labels[:, :2] == seg.labels[0, 0])
        assert np.all(seg.labels[:, 4:] == seg.labels[0, 5])
        assert seg.labels[0, 0] != seg.labels[0, 5]

    def test_constant_grid_single_region(self):
        seg = watershed(DemGrid(np.full((12, 12), 42.0)))
        assert seg.region_count == 1

    def test_oracle_equivalence_on_gradient_surface(self):
        for seed in (0, 1, 2, 3, 4):
            g, mag = distinct_gradient_grid(2000 + seed, (12, 12))
            seg = watershed(g)
            want = steepest_descent_basins(mag, g.valid_mask)
            assert same_partition(seg.labels, want, g.valid_mask)

    def test_nodata_background_label(self):
        data = np.random.default_rng(5).uniform(0, 10, size=(8, 8))
        data[0:2, 0:2] = -9999.0
        g = DemGrid(data)
        seg = watershed(g)
        assert np.all(seg.labels[0:2, 0:2] == BACKGROUND_LABEL)
        assert np.all(seg.labels[g.valid_mask] >= 0)

    def test_labels_contiguous_and_connected(self):
        g, _ = distinct_gradient_grid(3001, (14, 14))
        seg = watershed(g)
        present = np.unique(seg.labels[seg.labels >= 0])
        assert list(present) == list(range(seg.region_count))
        # 4-connectivity of every region
        from scipy import ndimage
        for rid in present:
            _, n = ndimage.label(seg.labels == rid, structure=np.array(
                [[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
            assert n == 1

    def test_all_nodata_raises(self):
        with pytest.raises(AllNoData):
            watershed(DemGrid(np.full((4, 4), -9999.0)))


def ridge_between_halves(height, n=16):
    """Flat terrain split by a 1-cell ridge of the given height."""
    data = np.zeros((n, n))
    data[:, n // 2] = height
    return DemGrid(data)


def bowl_basin(n, depth, sigma):
    """A shallow Gaussian dip filling an n x n patch (one gradient bowl)."""
    rr, cc = np.meshgrid(np.arange(n, dtype=float),
                         np.arange(n, dtype=float), indexing="ij")
    c = (n - 1) / 2.0
    return -depth * np.exp(-((rr - c) ** 2 + (cc - c) ** 2)
                           / (2.0 * sigma ** 2))


def two_pit_ridge_grid(ridge, n=12, depth=0.05):
    """Two pit basins split by a two-cell wall of the given height.

    Each basin is a single gradient bowl (sigma exceeds the basin
    half-diagonal), built piecewise so the basins do not interact.
    """
    data = np.zeros((n, 2 * n + 2))
    data[:, 0:n] = bowl_basin(n, depth, sigma=n * 0.75)
    data[:, n + 2:] = bowl_basin(n, depth, sigma=n * 0.75)
    data[:, n:n + 2] = ridge
    return DemGrid(data)


def four_basin_grid(low, high, n=12, depth=0.2):
    """Four bowl basins with walls of height low, high, low between."""
    ncols = 4 * n + 6
    data = np.zeros((n, ncols))
    for i in range(4):
        c0 = i * (n + 2)
        data[:, c0:c0 + n] = bowl_basin(n, depth, sigma=n * 0.75)
        if i < 3:
            data[:, c0 + n:c0 + n + 2] = high if i == 1 else low
    return DemGrid(data)


class TestSaliency:
    def test_two_pit_ridge_full_story(self):
        # Two pit basins split by a wall of height 1.  The gradient
        # watershed also carves out wall-top strips (the crest is a
        # valley of gradient magnitude); the first merge level absorbs
        # them, leaving the two basins whose shared saliency is the
        # climb from pit rim over the wall.  Rising thresholds then
        # merge the basins.
        g = two_pit_ridge_grid(ridge=1.0, depth=0.05)
        hier = p_model_segment(g, max_levels=10)
        assert hier.levels[0].region_count >= 2
        two = [lv for lv in hier.levels if lv.region_count == 2]
        assert two, [lv.region_count for lv in hier.levels]
        sal = boundary_saliency(g, two[0])
        assert len(sal) == 1
        assert sal[(0, 1)] == pytest.approx(1.05, abs=0.05)
        assert hier.levels[-1].region_count == 1

    def test_saliency_matches_brute_scan(self):
        g = two_pit_ridge_grid(ridge=3.0)
        seg = watershed(g)
        labels = seg.labels
        z = g.data
        nr, nc = z.shape
        # independent scan: min pass per pair, then subtract the higher
        # region minimum
        passes, minima = {}, {}
        for r in range(nr):
            for c in range(nc):
                lab = labels[r, c]
                minima[lab] = min(minima.get(lab, np.inf), z[r, c])
                for dr, dc in ((0, 1), (1, 0)):
                    rr, cj = r + dr, c + dc
                    if rr < nr and cj < nc and labels[rr, cj] != lab:
                        key = tuple(sorted((lab, labels[rr, cj])))
                        p = max(z[r, c], z[rr, cj])
                        passes[key] = min(passes.get(key, np.inf), p)
        want = {k: p - max(minima[k[0]], minima[k[1]])
                for k, p in passes.items()}
        got = boundary_saliency(g, seg)
        assert set(got) == set(want)
        for k in want:
            assert got[k] == pytest.approx(want[k], abs=1e-12)

    def test_ridge_height_is_saliency(self):
        g = ridge_between_halves(1.0)
        seg = watershed(g)
        sal = boundary_saliency(g, seg)
        # independent boundary scan: every pass over the ridge sits at
        # elevation 1 and both basins bottom out at 0, so the ridge
        # boundary's saliency must be exactly 1.  The ridge crest is its
        # own gradient region; its internal boundaries have saliency <= 1.
        assert max(sal.values()) == pytest.approx(1.0)
        left = seg.labels[8, 0]
        right = seg.labels[8, -1]
        assert left != right

    def test_hierarchy_merges_to_one(self):
        g = ridge_between_halves(1.0)
        hier = p_model_segment(g, max_levels=12)
        assert hier.levels[0].region_count >= 2
        assert hier.levels[-1].region_count == 1

    def test_low_ridges_merge_before_high(self):
        # four bowl basins separated by two-cell walls of height 2, 40,
        # and 2; an intermediate level must group across the low walls
        # while the high wall still divides.
        g = four_basin_grid(low=2.0, high=40.0)
        hier = p_model_segment(g, max_levels=12)
        counts = [lv.region_count for lv in hier.levels]
        mids = [lv for lv in hier.levels if lv.region_count == 2]
        assert mids, f"no 2-region level in counts {counts}"
        lv = mids[0]
        centers = [6, 20, 34, 48]
        left = lv.labels[6, centers[0]]
        right = lv.labels[6, centers[3]]
        assert left != right
        assert lv.labels[6, centers[1]] == left
        assert lv.labels[6, centers[2]] == right
        assert hier.levels[-1].region_count == 1

    def test_nesting_via_merge_tree(self):
        g, _ = distinct_gradient_grid(4004, (16, 16))
        hier = p_model_segment(g, max_levels=6)
        for k in range(len(hier.levels) - 1):
            child = hier.levels[k].labels
            parent = hier.levels[k + 1].labels
            mapped = np.where(child >= 0, hier.merge_tree[k][child],
                              BACKGROUND_LABEL)
            assert np.array_equal(mapped, parent)

    def test_region_count_non_increasing(self):
        g, _ = distinct_gradient_grid(4005, (16, 16))
        hier = p_model_segment(g, max_levels=8)
        counts = [lv.region_count for lv in hier.levels]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_constant_grid_one_level(self):
        hier = p_model_segment(DemGrid(np.full((10, 10), 3.0)), max_levels=3)
        assert len(hier.levels) == 1
        assert hier.levels[0].region_count == 1
