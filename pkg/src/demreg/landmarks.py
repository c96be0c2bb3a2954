"""Concentric-window landmark detection and the landmark knowledge base.

Every interior cell is summarized by statistics over four concentric odd
windows (3, 5, 7, and 9 cells wide): window mean, relief, center minus
outer-ring mean, and mean gradient magnitude, plus the count of sign
alternations along the radial profile of ring means.  Threshold rules
over these statistics assign cells to one of four classes (Peak, Valley,
Flat, Ripple).  Non-maximum suppression and proximity clustering then
reduce the classified cells to a small set of landmarks per class, with
sub-cell positions for extremal classes.

When a scene is too bland for the initial thresholds, detection relaxes
them for up to five rounds until some class yields at least three major
landmarks; scenes that still fail raise InsufficientLandmarks and the
caller is expected to fall back to high-curvature contour anchors.

A content-addressed knowledge base caches detection output keyed by the
raster digest, so registering a previously seen raster skips detection
entirely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import ClassVar, Optional

import numpy as np
from scipy import ndimage
from skimage import measure

from .dem_io import DemGrid, atomic_write_text, content_digest
from .errors import (
    AllNoData,
    DegenerateRange,
    GridTooSmall,
    InsufficientLandmarks,
    NoDataInWindow,
    WindowOutOfBounds,
)
from .segmentation import gradient_magnitude

WINDOW_SIZES = (3, 5, 7, 9)

#: Reach of the widest window; doubles as the non-maximum suppression radius.
SUPPORT_RADIUS = 4

#: Relative step size below which radial profile differences count as flat
#: when tallying sign alternations.  Keeps exact planes (whose ring means
#: equal the center up to accumulated rounding) at zero alternations.
_ALTERNATION_EPS = 1e-9


class LandmarkClass(IntEnum):
    PEAK = 0
    VALLEY = 1
    FLAT = 2
    RIPPLE = 3


@dataclass(frozen=True)
class PyramidSignature:
    """Window statistics at one cell, one slot per window size.

    profile holds the radial means: the center value followed by the
    mean of the square ring at Chebyshev radius 1 through 4.
    alternations counts sign changes along consecutive profile
    differences, ignoring steps smaller than a relative epsilon.
    """

    mean: tuple[float, ...]
    relief: tuple[float, ...]
    cmr: tuple[float, ...]
    grad: tuple[float, ...]
    profile: tuple[float, ...]
    alternations: int


@dataclass(frozen=True)
class Thresholds:
    """Classification thresholds, all in elevation units.

    peak_slack and valley_slack loosen the requirement that center minus
    ring grow with window size: each level may fall short of the
    previous one by at most the slack.  Zero slack gives the strict
    monotone rule.  relax() leaves the slacks untouched so that every
    relaxation round classifies a superset of the previous round's
    cells.
    """

    t_peak: float
    t_valley: float
    t_flat: float
    t_ripple_relief: float
    min_alternations: int = 3
    cluster_radius: float = 15.0
    peak_slack: float = 0.0
    valley_slack: float = 0.0

    FLAT_FRACTION: ClassVar[float] = 0.02
    PEAK_FRACTION: ClassVar[float] = 0.05
    VALLEY_FRACTION: ClassVar[float] = 0.05
    RIPPLE_FRACTION: ClassVar[float] = 0.04
    SLACK_FRACTION: ClassVar[float] = 0.25
    FLOOR: ClassVar[float] = 1e-6

    def __post_init__(self):
        for name in ("t_peak", "t_valley", "t_flat", "t_ripple_relief",
                     "cluster_radius"):
            if not (getattr(self, name) > 0):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.min_alternations < 1:
            raise ValueError("min_alternations must be at least 1")
        if self.peak_slack < 0 or self.valley_slack < 0:
            raise ValueError("slack values must be non-negative")

    @classmethod
    def from_grid(cls, grid: DemGrid) -> "Thresholds":
        """Scale-relative defaults from the grid's elevation range.

        Tiny positive floors keep the thresholds legal on constant
        grids, where the range is zero.
        """
        values = grid.valid_values()
        if values.size == 0:
            raise AllNoData("cannot derive thresholds: no valid cells")
        span = float(values.max() - values.min())
        t_peak = max(cls.PEAK_FRACTION * span, cls.FLOOR)
        t_valley = max(cls.VALLEY_FRACTION * span, cls.FLOOR)
        return cls(
            t_peak=t_peak,
            t_valley=t_valley,
            t_flat=max(cls.FLAT_FRACTION * span, cls.FLOOR),
            t_ripple_relief=max(cls.RIPPLE_FRACTION * span, cls.FLOOR),
            peak_slack=cls.SLACK_FRACTION * t_peak,
            valley_slack=cls.SLACK_FRACTION * t_valley,
        )

    def relax(self) -> "Thresholds":
        """One relaxation round: easier extrema, wider flat and ripple bands."""
        return replace(self,
                       t_peak=0.8 * self.t_peak,
                       t_valley=0.8 * self.t_valley,
                       t_flat=1.25 * self.t_flat,
                       t_ripple_relief=1.25 * self.t_ripple_relief)

    def as_dict(self) -> dict:
        return {
            "t_peak": self.t_peak,
            "t_valley": self.t_valley,
            "t_flat": self.t_flat,
            "t_ripple_relief": self.t_ripple_relief,
            "min_alternations": self.min_alternations,
            "cluster_radius": self.cluster_radius,
            "peak_slack": self.peak_slack,
            "valley_slack": self.valley_slack,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        return cls(**d)


@dataclass(frozen=True)
class Landmark:
    """A classified terrain feature at sub-cell precision.

    prominence is the absolute center-minus-ring statistic at the widest
    window, for every class.  is_major marks landmarks that survive the
    per-class prominence cut or arise from merging a crowded cluster.
    """

    cls: LandmarkClass
    row: float
    col: float
    prominence: float
    is_major: bool = False
    support_radius: int = SUPPORT_RADIUS
    signature: Optional[PyramidSignature] = None

    @property
    def position(self) -> tuple[float, float]:
        return (self.row, self.col)


def landmark_to_dict(lm: Landmark) -> dict:
    """JSON-ready form; signatures are recomputable and not included."""
    return {
        "class": lm.cls.name,
        "row": lm.row,
        "col": lm.col,
        "prominence": lm.prominence,
        "support_radius": lm.support_radius,
        "is_major": lm.is_major,
    }


def landmark_from_dict(d: dict) -> Landmark:
    return Landmark(
        cls=LandmarkClass[d["class"]],
        row=float(d["row"]),
        col=float(d["col"]),
        prominence=float(d["prominence"]),
        is_major=bool(d["is_major"]),
        support_radius=int(d["support_radius"]),
    )


# --- signature computation --------------------------------------------------

def _alternation_count(profile) -> int:
    """Sign alternations along consecutive differences of the profile."""
    prof = np.asarray(profile, dtype=np.float64)
    diffs = np.diff(prof)
    tol = _ALTERNATION_EPS * max(float(np.max(np.abs(prof))), 1.0)
    count = 0
    last = 0
    for d in diffs:
        sign = 0 if abs(d) <= tol else (1 if d > 0 else -1)
        if sign == 0:
            continue
        if last != 0 and sign != last:
            count += 1
        last = sign
    return count


def pyramid_signature(grid: DemGrid, center: tuple[int, int]) -> PyramidSignature:
    """Statistics of the four concentric windows centered on one cell.

    Raises WindowOutOfBounds when the 9x9 window leaves the grid and
    NoDataInWindow when it covers a nodata cell.  This is the per-cell
    reference path; detection uses an equivalent whole-grid filter
    cascade.
    """
    r, c = int(center[0]), int(center[1])
    m = SUPPORT_RADIUS
    if not (m <= r < grid.nrows - m and m <= c < grid.ncols - m):
        raise WindowOutOfBounds(
            f"9x9 window at ({r}, {c}) leaves the {grid.nrows}x{grid.ncols} grid")
    block = grid.data[r - m:r + m + 1, c - m:c + m + 1]
    if (block == grid.nodata).any():
        raise NoDataInWindow(f"window at ({r}, {c}) touches nodata")
    gblock = gradient_magnitude(grid)[r - m:r + m + 1, c - m:c + m + 1]
    center_value = float(block[m, m])
    means, reliefs, cmrs, grads = [], [], [], []
    profile = [center_value]
    for w in WINDOW_SIZES:
        k = w // 2
        win = block[m - k:m + k + 1, m - k:m + k + 1]
        inner = win[1:-1, 1:-1]
        ring_mean = float((win.sum() - inner.sum()) / (w * w - (w - 2) ** 2))
        means.append(float(win.mean()))
        reliefs.append(float(win.max() - win.min()))
        cmrs.append(center_value - ring_mean)
        grads.append(float(gblock[m - k:m + k + 1, m - k:m + k + 1].mean()))
        profile.append(ring_mean)
    return PyramidSignature(
        mean=tuple(means), relief=tuple(reliefs), cmr=tuple(cmrs),
        grad=tuple(grads), profile=tuple(profile),
        alternations=_alternation_count(profile))


def classify_cell(sig: PyramidSignature, th: Thresholds) -> Optional[LandmarkClass]:
    """Priority-ordered rules: Peak, Valley, Flat, then Ripple.

    Peaks need center-minus-ring at least t_peak at the widest window
    and non-decreasing across windows up to the slack; valleys mirror
    this with ring minus center.  Flat takes any remaining cell whose
    widest-window relief sits under t_flat; Ripple needs relief under
    t_ripple_relief plus enough radial sign alternations.
    """
    c3, c5, c7, c9 = sig.cmr
    s = th.peak_slack
    if (c9 >= th.t_peak and c5 >= c3 - s and c7 >= c5 - s and c9 >= c7 - s):
        return LandmarkClass.PEAK
    s = th.valley_slack
    if (-c9 >= th.t_valley and -c5 >= -c3 - s and -c7 >= -c5 - s
            and -c9 >= -c7 - s):
        return LandmarkClass.VALLEY
    relief9 = sig.relief[-1]
    if relief9 < th.t_flat:
        return LandmarkClass.FLAT
    if relief9 < th.t_ripple_relief and sig.alternations >= th.min_alternations:
        return LandmarkClass.RIPPLE
    return None


@dataclass(frozen=True)
class _SignatureMaps:
    """Whole-grid signature rasters; stats are garbage where ok is False."""

    ok: np.ndarray
    mean: np.ndarray
    relief: np.ndarray
    cmr: np.ndarray
    grad: np.ndarray
    profile: np.ndarray
    alternations: np.ndarray


def _signature_maps(grid: DemGrid) -> _SignatureMaps:
    valid = grid.valid_mask
    if not valid.any():
        raise AllNoData("grid has no valid cells")
    data = grid.data
    z = np.where(valid, data, 0.0)
    zmax = np.where(valid, data, -np.inf)
    zmin = np.where(valid, data, np.inf)
    grad_mag = np.where(valid, gradient_magnitude(grid), 0.0)
    bad = (~valid).astype(np.float64)
    shape = data.shape
    n = len(WINDOW_SIZES)
    mean = np.empty((n,) + shape)
    relief = np.empty((n,) + shape)
    cmr = np.empty((n,) + shape)
    grad = np.empty((n,) + shape)
    profile = np.empty((n + 1,) + shape)
    profile[0] = data
    ok = np.ones(shape, dtype=bool)
    prev_sum = z
    for i, w in enumerate(WINDOW_SIZES):
        # Windows overlapping the border or any nodata cell are invalid;
        # cval=1 makes out-of-grid area count as bad.
        bad_frac = ndimage.uniform_filter(bad, size=w, mode="constant", cval=1.0)
        ok &= bad_frac < 0.5 / (w * w)
        window_sum = ndimage.uniform_filter(z, size=w, mode="constant",
                                            cval=0.0) * float(w * w)
        mean[i] = window_sum / (w * w)
        ring = (window_sum - prev_sum) / (w * w - (w - 2) ** 2)
        profile[i + 1] = ring
        cmr[i] = data - ring
        with np.errstate(invalid="ignore"):
            relief[i] = (
                ndimage.maximum_filter(zmax, size=w, mode="constant", cval=-np.inf)
                - ndimage.minimum_filter(zmin, size=w, mode="constant", cval=np.inf))
        grad[i] = ndimage.uniform_filter(grad_mag, size=w, mode="constant",
                                         cval=0.0)
        prev_sum = window_sum

    diffs = np.diff(profile, axis=0)
    tol = _ALTERNATION_EPS * np.maximum(np.max(np.abs(profile), axis=0), 1.0)
    with np.errstate(invalid="ignore"):
        signs = np.where(np.abs(diffs) <= tol, 0, np.sign(diffs)).astype(np.int8)
    alternations = np.zeros(shape, dtype=np.int16)
    last = np.zeros(shape, dtype=np.int8)
    for k in range(signs.shape[0]):
        current = signs[k]
        flip = (current != 0) & (last != 0) & (current != last)
        alternations[flip] += 1
        last = np.where(current != 0, current, last)
    return _SignatureMaps(ok=ok, mean=mean, relief=relief, cmr=cmr,
                          grad=grad, profile=profile, alternations=alternations)


def _signature_at(maps: _SignatureMaps, r: int, c: int) -> PyramidSignature:
    return PyramidSignature(
        mean=tuple(float(maps.mean[i, r, c]) for i in range(len(WINDOW_SIZES))),
        relief=tuple(float(maps.relief[i, r, c]) for i in range(len(WINDOW_SIZES))),
        cmr=tuple(float(maps.cmr[i, r, c]) for i in range(len(WINDOW_SIZES))),
        grad=tuple(float(maps.grad[i, r, c]) for i in range(len(WINDOW_SIZES))),
        profile=tuple(float(maps.profile[i, r, c]) for i in range(len(WINDOW_SIZES) + 1)),
        alternations=int(maps.alternations[r, c]))


def _class_map(maps: _SignatureMaps, th: Thresholds) -> np.ndarray:
    """Per-cell class ids (-1 for unclassified), mirroring classify_cell."""
    c3, c5, c7, c9 = maps.cmr
    relief9 = maps.relief[-1]
    sp, sv = th.peak_slack, th.valley_slack
    with np.errstate(invalid="ignore"):
        peak = (maps.ok & (c9 >= th.t_peak)
                & (c5 >= c3 - sp) & (c7 >= c5 - sp) & (c9 >= c7 - sp))
        valley = (maps.ok & (-c9 >= th.t_valley)
                  & (-c5 >= -c3 - sv) & (-c7 >= -c5 - sv) & (-c9 >= -c7 - sv))
        flat = maps.ok & (relief9 < th.t_flat)
        ripple = (maps.ok & (relief9 < th.t_ripple_relief)
                  & (maps.alternations >= th.min_alternations))
    out = np.full(relief9.shape, -1, dtype=np.int8)
    # Assign lowest priority first so higher priorities overwrite.
    out[ripple] = int(LandmarkClass.RIPPLE)
    out[flat] = int(LandmarkClass.FLAT)
    out[valley] = int(LandmarkClass.VALLEY)
    out[peak] = int(LandmarkClass.PEAK)
    return out


# --- suppression, clustering, detection -------------------------------------

def _nms(rows: np.ndarray, cols: np.ndarray, scores: np.ndarray,
         radius: float) -> list[int]:
    """Greedy non-maximum suppression, ties broken row-major.

    Accepted points are bucketed on a radius-sized lattice so each
    candidate only checks its neighboring buckets.
    """
    order = np.lexsort((cols, rows, -scores))
    bucket_size = max(float(radius), 1.0)
    r2 = float(radius) * float(radius)
    buckets: dict[tuple[int, int], list[tuple[float, float]]] = {}
    kept: list[int] = []
    for i in order:
        r = float(rows[i])
        c = float(cols[i])
        br = int(r // bucket_size)
        bc = int(c // bucket_size)
        suppressed = False
        for nb in ((br - 1, bc - 1), (br - 1, bc), (br - 1, bc + 1),
                   (br, bc - 1), (br, bc), (br, bc + 1),
                   (br + 1, bc - 1), (br + 1, bc), (br + 1, bc + 1)):
            for ar, ac in buckets.get(nb, ()):
                dr = ar - r
                dc = ac - c
                if dr * dr + dc * dc <= r2:
                    suppressed = True
                    break
            if suppressed:
                break
        if not suppressed:
            kept.append(int(i))
            buckets.setdefault((br, bc), []).append((r, c))
    return kept


def _link_clusters(positions: list[tuple[float, float]],
                   radius: float) -> list[list[int]]:
    """Connected components under pairwise distance <= radius."""
    n = len(positions)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    bucket_size = max(float(radius), 1e-9)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (r, c) in enumerate(positions):
        buckets.setdefault((int(r // bucket_size), int(c // bucket_size)),
                           []).append(i)
    r2 = float(radius) * float(radius)
    for i, (r, c) in enumerate(positions):
        br = int(r // bucket_size)
        bc = int(c // bucket_size)
        for nb in ((br - 1, bc - 1), (br - 1, bc), (br - 1, bc + 1),
                   (br, bc - 1), (br, bc), (br, bc + 1),
                   (br + 1, bc - 1), (br + 1, bc), (br + 1, bc + 1)):
            for j in buckets.get(nb, ()):
                if j <= i:
                    continue
                dr = positions[j][0] - r
                dc = positions[j][1] - c
                if dr * dr + dc * dc <= r2:
                    ra, rb = find(i), find(j)
                    if ra != rb:
                        parent[max(ra, rb)] = min(ra, rb)
    clusters: dict[int, list[int]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)
    return [clusters[root] for root in sorted(clusters)]


def group_major(landmarks: list[Landmark],
                cluster_radius: float = 15.0) -> list[Landmark]:
    """Cluster same-class landmarks and promote majors.

    Landmarks of one class linked by pairwise distance at most
    cluster_radius form connected clusters.  A cluster of more than
    three members collapses to a single major landmark at the
    prominence-weighted centroid (carrying the strongest member's
    signature); smaller clusters pass through, marked major when their
    prominence reaches the class median computed before grouping.
    """
    out: list[Landmark] = []
    for cls in LandmarkClass:
        members = [lm for lm in landmarks if lm.cls is cls]
        if not members:
            continue
        median = float(np.median([lm.prominence for lm in members]))
        clusters = _link_clusters([(lm.row, lm.col) for lm in members],
                                  cluster_radius)
        for indices in clusters:
            group = [members[i] for i in indices]
            if len(group) > 3:
                weights = np.array([lm.prominence for lm in group])
                if weights.sum() <= 0:
                    weights = np.ones(len(group))
                rows = np.array([lm.row for lm in group])
                cols = np.array([lm.col for lm in group])
                total = float(weights.sum())
                strongest = max(group,
                                key=lambda lm: (lm.prominence, -lm.row, -lm.col))
                out.append(Landmark(
                    cls=cls,
                    row=float((weights * rows).sum() / total),
                    col=float((weights * cols).sum() / total),
                    prominence=strongest.prominence,
                    is_major=True,
                    support_radius=strongest.support_radius,
                    signature=strongest.signature))
            else:
                for lm in group:
                    out.append(replace(lm, is_major=bool(lm.prominence >= median)))
    out.sort(key=lambda lm: (int(lm.cls), -lm.prominence, lm.row, lm.col))
    return out


def _parabolic_offset(values: np.ndarray, r: int, c: int) -> tuple[float, float]:
    """Sub-cell vertex offset from a separable 3-point parabola fit."""

    def axis_offset(lo: float, mid: float, hi: float) -> float:
        denom = lo - 2.0 * mid + hi
        if abs(denom) < 1e-12:
            return 0.0
        return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))

    dr = axis_offset(values[r - 1, c], values[r, c], values[r + 1, c])
    dc = axis_offset(values[r, c - 1], values[r, c], values[r, c + 1])
    return dr, dc


def _detect_once(grid: DemGrid, maps: _SignatureMaps,
                 th: Thresholds) -> list[Landmark]:
    class_map = _class_map(maps, th)
    prominence = np.abs(maps.cmr[-1])
    found: list[Landmark] = []
    for cls in LandmarkClass:
        rows, cols = np.nonzero(class_map == int(cls))
        if rows.size == 0:
            continue
        scores = prominence[rows, cols]
        for i in _nms(rows, cols, scores, SUPPORT_RADIUS):
            r = int(rows[i])
            c = int(cols[i])
            row, col = float(r), float(c)
            if cls in (LandmarkClass.PEAK, LandmarkClass.VALLEY):
                dr, dc = _parabolic_offset(grid.data, r, c)
                row += dr
                col += dc
            found.append(Landmark(cls=cls, row=row, col=col,
                                  prominence=float(scores[i]),
                                  signature=_signature_at(maps, r, c)))
    return group_major(found, th.cluster_radius)


def detect_landmarks(grid: DemGrid, thresholds: Optional[Thresholds] = None,
                     *, max_rounds: int = 5) -> tuple[list[Landmark], Thresholds]:
    """Scan the grid for landmarks of all four classes.

    Classified cells go through non-maximum suppression within
    SUPPORT_RADIUS and proximity grouping.  If no class ends up with at
    least three major landmarks, thresholds relax (extrema scaled by
    0.8, flat and ripple bands by 1.25) and the scan repeats, up to
    max_rounds times; exhausting the rounds raises
    InsufficientLandmarks.  Returns the landmark list and the thresholds
    actually used.
    """
    if grid.nrows < 11 or grid.ncols < 11:
        raise GridTooSmall(
            f"landmark detection needs at least 11x11 cells, "
            f"got {grid.nrows}x{grid.ncols}")
    maps = _signature_maps(grid)
    th = thresholds if thresholds is not None else Thresholds.from_grid(grid)
    best = 0
    for attempt in range(max_rounds + 1):
        landmarks = _detect_once(grid, maps, th)
        major_counts: dict[LandmarkClass, int] = {}
        for lm in landmarks:
            if lm.is_major:
                major_counts[lm.cls] = major_counts.get(lm.cls, 0) + 1
        top = max(major_counts.values(), default=0)
        best = max(best, top)
        if top >= 3:
            return landmarks, th
        if attempt < max_rounds:
            th = th.relax()
    raise InsufficientLandmarks(
        f"no class reached 3 major landmarks after {max_rounds} "
        f"relaxation rounds (best class had {best})")


# --- contour fallback -------------------------------------------------------

def _high_curvature_vertices(poly: np.ndarray,
                             percentile: float) -> list[tuple[float, float]]:
    """Vertices of one traced contour whose turning angle is extreme.

    The cut is the given percentile of this contour's own turning
    angles plus a small floor, so straight contours (all angles zero)
    contribute nothing.
    """
    closed = len(poly) > 1 and bool(np.array_equal(poly[0], poly[-1]))
    pts = poly[:-1] if closed else poly
    n = len(pts)
    if n < 3:
        return []
    vertex_range = range(n) if closed else range(1, n - 1)
    angles: list[float] = []
    vertices: list[tuple[float, float]] = []
    for j in vertex_range:
        before = pts[(j - 1) % n]
        here = pts[j]
        after = pts[(j + 1) % n]
        u = here - before
        v = after - here
        nu = float(np.hypot(u[0], u[1]))
        nv = float(np.hypot(v[0], v[1]))
        if nu < 1e-12 or nv < 1e-12:
            continue
        cross = u[0] * v[1] - u[1] * v[0]
        dot = u[0] * v[0] + u[1] * v[1]
        angles.append(abs(float(np.arctan2(cross, dot))))
        vertices.append((float(here[0]), float(here[1])))
    if not angles:
        return []
    cut = float(np.percentile(angles, percentile)) + 1e-9
    return [v for v, a in zip(vertices, angles) if a > cut]


def contour_anchors(grid: DemGrid, n_levels: int = 6,
                    percentile: float = 90.0) -> list[tuple[float, float]]:
    """High-curvature points of iso-elevation contours.

    Contours are traced at n_levels equally spaced levels strictly
    between the minimum and maximum elevation; each contour keeps the
    vertices whose discrete turning angle exceeds that contour's own
    percentile cut.  Used as fallback anchors when landmark detection
    fails.
    """
    if n_levels < 1:
        raise ValueError(f"n_levels must be at least 1, got {n_levels}")
    values = grid.valid_values()
    if values.size == 0:
        raise AllNoData("grid has no valid cells")
    lo = float(values.min())
    hi = float(values.max())
    if not (hi > lo):
        raise DegenerateRange(
            f"cannot place contour levels: all cells at elevation {lo}")
    z = np.where(grid.valid_mask, grid.data, np.nan)
    anchors: list[tuple[float, float]] = []
    for i in range(n_levels):
        level = lo + (i + 1) * (hi - lo) / (n_levels + 1)
        for poly in measure.find_contours(z, level):
            anchors.extend(_high_curvature_vertices(poly, percentile))
    anchors.sort()
    return anchors


# --- knowledge base ---------------------------------------------------------

class KnowledgeBase:
    """Content-addressed cache of detection output.

    Entries are keyed by the raster digest, so any change to cell values
    or georeferencing misses the cache.  Each entry stores the landmark
    list, the thresholds used, and the per-class graphs in JSON form.
    Concurrent readers are safe; writers must be serialized externally.
    """

    VERSION = 1

    def __init__(self):
        self._entries: dict[str, dict] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, grid: DemGrid) -> bool:
        return content_digest(grid) in self._entries

    def put(self, grid: DemGrid, landmarks: list[Landmark],
            thresholds: Thresholds, graphs: Optional[dict] = None) -> None:
        self._entries[content_digest(grid)] = {
            "thresholds": thresholds.as_dict(),
            "landmarks": [landmark_to_dict(lm) for lm in landmarks],
            "graphs": dict(graphs) if graphs else {},
        }

    def get(self, grid: DemGrid) -> Optional[dict]:
        """Deserialized entry for this exact grid, or None."""
        entry = self._entries.get(content_digest(grid))
        if entry is None:
            return None
        return {
            "thresholds": Thresholds.from_dict(entry["thresholds"]),
            "landmarks": [landmark_from_dict(d) for d in entry["landmarks"]],
            "graphs": entry["graphs"],
        }

    def save(self, path) -> None:
        doc = {"version": self.VERSION, "entries": self._entries}
        atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "KnowledgeBase":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != cls.VERSION:
            raise ValueError(
                f"unsupported knowledge base version {doc.get('version')!r}")
        kb = cls()
        kb._entries = dict(doc["entries"])
        return kb
