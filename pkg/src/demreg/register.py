"""Similarity-transform registration of a candidate DEM onto a reference.

The pipeline detects landmarks on both grids (consulting the knowledge
base first), matches the per-class graphs, fits a rotation + uniform
scale + translation to the winning class's matched pairs, and resamples
the candidate into the reference frame.  When landmark detection or
class selection fails, high-curvature contour anchors paired by nearest
neighbor provide a fallback estimate; results from that path, or with a
thin overlap, are flagged low confidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dem_io import DemGrid
from .errors import (
    DegenerateConfiguration,
    DegenerateRange,
    DimsMismatch,
    GridTooSmall,
    InsufficientLandmarks,
    NoUsableClass,
    RegistrationFailed,
)
from .graph_match import (
    LandmarkGraph,
    build_graph,
    graph_from_dict,
    graph_to_dict,
    match_graphs,
    pad_dummy,
    select_class,
)
from .landmarks import KnowledgeBase, LandmarkClass, contour_anchors, detect_landmarks
from .metrics import DEFAULT_BINS, MetricsReport, cc, kld, mutual_information


@dataclass(frozen=True)
class SimilarityTransform:
    """Maps candidate (row, col) to reference (row, col).

    p_ref = scale * R(theta) @ p_cand + (t_row, t_col), with R rotating
    row toward column for positive theta.
    """

    theta: float
    scale: float
    t_row: float
    t_col: float

    def __post_init__(self):
        if not (self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        cos_t = math.cos(self.theta)
        sin_t = math.sin(self.theta)
        rows = self.scale * (cos_t * pts[:, 0] - sin_t * pts[:, 1]) + self.t_row
        cols = self.scale * (sin_t * pts[:, 0] + cos_t * pts[:, 1]) + self.t_col
        return np.column_stack([rows, cols])

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        cos_t = math.cos(self.theta)
        sin_t = math.sin(self.theta)
        t_row = -inv_scale * (cos_t * self.t_row + sin_t * self.t_col)
        t_col = -inv_scale * (-sin_t * self.t_row + cos_t * self.t_col)
        return SimilarityTransform(theta=-self.theta, scale=inv_scale,
                                   t_row=t_row, t_col=t_col)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Transform equivalent to applying other first, then self."""
        moved = self.apply([[other.t_row, other.t_col]])[0]
        return SimilarityTransform(theta=self.theta + other.theta,
                                   scale=self.scale * other.scale,
                                   t_row=float(moved[0]),
                                   t_col=float(moved[1]))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(theta=0.0, scale=1.0, t_row=0.0, t_col=0.0)

    def as_dict(self) -> dict:
        return {"theta_deg": math.degrees(self.theta), "scale": self.scale,
                "t_row": self.t_row, "t_col": self.t_col}


@dataclass(frozen=True)
class RegistrationResult:
    """Output of register(); class_used is None on the contour fallback."""

    transform: SimilarityTransform
    class_used: Optional[LandmarkClass]
    registered: DemGrid
    overlap_fraction: float
    rms_residual: float
    metrics: MetricsReport
    low_confidence: bool = False

    def as_dict(self) -> dict:
        return {
            "transform": self.transform.as_dict(),
            "class_used": None if self.class_used is None
            else self.class_used.name,
            "overlap_fraction": self.overlap_fraction,
            "rms_residual": self.rms_residual,
            "metrics": self.metrics.as_dict(),
            "low_confidence": self.low_confidence,
        }


@dataclass
class RegisterConfig:
    """Knobs for the registration pipeline.

    min_overlap below the achieved overlap fraction turns the result
    into a RegistrationFailed error; low_confidence_overlap only flags
    it.  A knowledge base, when provided, caches detection output per
    grid digest and is updated in place.
    """

    kb: Optional[KnowledgeBase] = None
    dummy_penalty: Optional[float] = None
    distortion_tolerance: float = 2.0
    min_overlap: float = 0.0
    low_confidence_overlap: float = 0.60
    contour_levels: int = 6
    bins: int = DEFAULT_BINS


def estimate_transform(pairs) -> SimilarityTransform:
    """Least-squares similarity fit mapping candidate points onto reference.

    pairs holds (ref_point, cand_point) tuples.  Both sets are centered;
    scale is the ratio of their root-mean-square radii, rotation comes
    from the angle of the cross-covariance, and translation aligns the
    centroids under that scale and rotation.
    """
    if len(pairs) < 3:
        raise DegenerateConfiguration(
            f"similarity fit needs at least 3 point pairs, got {len(pairs)}")
    ref = np.array([p[0] for p in pairs], dtype=float).reshape(-1, 2)
    cand = np.array([p[1] for p in pairs], dtype=float).reshape(-1, 2)
    ref_mean = ref.mean(axis=0)
    cand_mean = cand.mean(axis=0)
    ref_c = ref - ref_mean
    cand_c = cand - cand_mean
    ss_ref = float(np.sum(ref_c * ref_c))
    ss_cand = float(np.sum(cand_c * cand_c))
    if ss_ref < 1e-18 or ss_cand < 1e-18:
        raise DegenerateConfiguration(
            "point pairs are coincident; similarity transform undetermined")
    same = float(ref_c[:, 0] @ cand_c[:, 0] + ref_c[:, 1] @ cand_c[:, 1])
    cross = float(ref_c[:, 1] @ cand_c[:, 0] - ref_c[:, 0] @ cand_c[:, 1])
    theta = math.atan2(cross, same)
    scale = math.sqrt(ss_ref / ss_cand)
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    t_row = ref_mean[0] - scale * (cos_t * cand_mean[0] - sin_t * cand_mean[1])
    t_col = ref_mean[1] - scale * (sin_t * cand_mean[0] + cos_t * cand_mean[1])
    return SimilarityTransform(theta=theta, scale=scale,
                               t_row=float(t_row), t_col=float(t_col))


def transform_residual(transform: SimilarityTransform, pairs) -> float:
    """Root-mean-square distance between ref points and mapped cand points."""
    if not pairs:
        return 0.0
    ref = np.array([p[0] for p in pairs], dtype=float).reshape(-1, 2)
    cand = np.array([p[1] for p in pairs], dtype=float).reshape(-1, 2)
    moved = transform.apply(cand)
    return float(np.sqrt(np.mean(np.sum((ref - moved) ** 2, axis=1))))


def resample(cand: DemGrid, transform: SimilarityTransform,
             ref_frame: DemGrid) -> DemGrid:
    """Candidate bilinearly interpolated onto the reference frame.

    Each reference cell is inverse-mapped into candidate coordinates.
    A cell becomes nodata when any corner with nonzero interpolation
    weight is nodata or out of bounds; zero-weight corners are ignored,
    which keeps integer-offset lookups exact.
    """
    inv = transform.inverse()
    cos_t = math.cos(inv.theta)
    sin_t = math.sin(inv.theta)
    rr, cc_idx = np.meshgrid(np.arange(ref_frame.nrows, dtype=float),
                             np.arange(ref_frame.ncols, dtype=float),
                             indexing="ij")
    src_r = inv.scale * (cos_t * rr - sin_t * cc_idx) + inv.t_row
    src_c = inv.scale * (sin_t * rr + cos_t * cc_idx) + inv.t_col
    nrows, ncols = cand.nrows, cand.ncols
    inside = ((src_r >= 0.0) & (src_r <= nrows - 1)
              & (src_c >= 0.0) & (src_c <= ncols - 1))
    r0 = np.floor(src_r)
    c0 = np.floor(src_c)
    fr = src_r - r0
    fc = src_c - c0
    ri0 = np.clip(r0, 0, nrows - 1).astype(np.intp)
    ci0 = np.clip(c0, 0, ncols - 1).astype(np.intp)
    ri1 = np.clip(r0 + 1, 0, nrows - 1).astype(np.intp)
    ci1 = np.clip(c0 + 1, 0, ncols - 1).astype(np.intp)
    w00 = (1.0 - fr) * (1.0 - fc)
    w01 = (1.0 - fr) * fc
    w10 = fr * (1.0 - fc)
    w11 = fr * fc
    data = cand.data
    valid = cand.valid_mask
    value = (w00 * data[ri0, ci0] + w01 * data[ri0, ci1]
             + w10 * data[ri1, ci0] + w11 * data[ri1, ci1])
    ok = (inside
          & ((w00 == 0.0) | valid[ri0, ci0])
          & ((w01 == 0.0) | valid[ri0, ci1])
          & ((w10 == 0.0) | valid[ri1, ci0])
          & ((w11 == 0.0) | valid[ri1, ci1]))
    out = np.where(ok, value, ref_frame.nodata)
    return ref_frame.with_data(out)


def overlap_mask(ref: DemGrid, registered: DemGrid) -> np.ndarray:
    """True where both grids hold real elevations."""
    if ref.data.shape != registered.data.shape:
        raise DimsMismatch(
            f"grid shapes differ: {ref.data.shape} vs "
            f"{registered.data.shape}")
    return ref.valid_mask & registered.valid_mask


# --- resolution unification -------------------------------------------------

def _rescale(grid: DemGrid, cellsize: float) -> DemGrid:
    """Resample a grid onto a finer cell size, preserving extent."""
    factor = grid.cellsize / cellsize
    nrows = int(round((grid.nrows - 1) * factor)) + 1
    ncols = int(round((grid.ncols - 1) * factor)) + 1
    frame = DemGrid(np.full((nrows, ncols), grid.nodata),
                    cellsize=cellsize, xll=grid.xll, yll=grid.yll,
                    nodata=grid.nodata)
    blowup = SimilarityTransform(theta=0.0, scale=factor,
                                 t_row=0.0, t_col=0.0)
    return resample(grid, blowup, frame)


def unify_resolution(ref: DemGrid,
                     cand: DemGrid) -> tuple[DemGrid, DemGrid]:
    """Resample the coarser grid to the finer cell size."""
    if math.isclose(ref.cellsize, cand.cellsize, rel_tol=1e-9):
        return ref, cand
    fine = min(ref.cellsize, cand.cellsize)
    if ref.cellsize > fine:
        ref = _rescale(ref, fine)
    else:
        cand = _rescale(cand, fine)
    return ref, cand


# --- pipeline ---------------------------------------------------------------

def _class_graphs(grid: DemGrid,
                  kb: Optional[KnowledgeBase]) -> dict[LandmarkClass,
                                                       LandmarkGraph]:
    """Per-class landmark graphs, from the knowledge base when possible."""
    if kb is not None:
        entry = kb.get(grid)
        if entry is not None:
            if entry["graphs"]:
                return {LandmarkClass[name]: graph_from_dict(payload)
                        for name, payload in entry["graphs"].items()}
            return {cls: build_graph(entry["landmarks"], cls)
                    for cls in LandmarkClass}
    landmarks, thresholds = detect_landmarks(grid)
    graphs = {cls: build_graph(landmarks, cls) for cls in LandmarkClass}
    if kb is not None:
        kb.put(grid, landmarks, thresholds,
               graphs={cls.name: graph_to_dict(g)
                       for cls, g in graphs.items() if g.nodes})
    return graphs


def _greedy_anchor_pairs(ref_pts: np.ndarray,
                         cand_pts: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one nearest-neighbor pairing, closest distances first."""
    order = []
    for i in range(len(ref_pts)):
        deltas = cand_pts - ref_pts[i]
        dists = np.hypot(deltas[:, 0], deltas[:, 1])
        for j in range(len(cand_pts)):
            order.append((float(dists[j]), i, j))
    order.sort()
    used_ref = set()
    used_cand = set()
    pairs = []
    for _, i, j in order:
        if i in used_ref or j in used_cand:
            continue
        used_ref.add(i)
        used_cand.add(j)
        pairs.append((i, j))
    return pairs


def _contour_fallback(ref: DemGrid, cand: DemGrid,
                      config: RegisterConfig) -> tuple[SimilarityTransform,
                                                       list]:
    """Transform from contour anchors when landmark matching is unusable.

    Anchors are coarsely aligned by centroid translation, paired one to
    one by nearest neighbor, fit, then re-paired once under the fitted
    transform and re-fit.
    """
    try:
        ref_anchors = np.array(
            contour_anchors(ref, n_levels=config.contour_levels),
            dtype=float).reshape(-1, 2)
        cand_anchors = np.array(
            contour_anchors(cand, n_levels=config.contour_levels),
            dtype=float).reshape(-1, 2)
    except DegenerateRange as exc:
        raise RegistrationFailed(
            f"contour fallback unusable: {exc}") from exc
    if len(ref_anchors) < 3 or len(cand_anchors) < 3:
        raise RegistrationFailed(
            f"contour fallback needs 3 anchors per grid, got "
            f"{len(ref_anchors)} and {len(cand_anchors)}")
    shift = ref_anchors.mean(axis=0) - cand_anchors.mean(axis=0)
    try:
        pairs_idx = _greedy_anchor_pairs(ref_anchors, cand_anchors + shift)
        pairs = [(tuple(ref_anchors[i]), tuple(cand_anchors[j]))
                 for i, j in pairs_idx]
        transform = estimate_transform(pairs)
        moved = transform.apply(cand_anchors)
        pairs_idx = _greedy_anchor_pairs(ref_anchors, moved)
        pairs = [(tuple(ref_anchors[i]), tuple(cand_anchors[j]))
                 for i, j in pairs_idx]
        transform = estimate_transform(pairs)
    except DegenerateConfiguration as exc:
        raise RegistrationFailed(
            f"contour fallback unusable: {exc}") from exc
    return transform, pairs


def register(ref: DemGrid, cand: DemGrid,
             config: Optional[RegisterConfig] = None) -> RegistrationResult:
    """Register the candidate DEM onto the reference frame.

    Returns the recovered transform, the resampled candidate, and
    overlap metrics.  Raises RegistrationFailed when neither landmark
    matching nor the contour fallback yields a usable transform, or
    when the overlap falls below config.min_overlap.
    """
    if config is None:
        config = RegisterConfig()
    ref_u, cand_u = unify_resolution(ref, cand)
    fallback = False
    try:
        ref_graphs = _class_graphs(ref_u, config.kb)
        cand_graphs = _class_graphs(cand_u, config.kb)
        per_class = {}
        for cls in LandmarkClass:
            g_ref = ref_graphs.get(cls)
            g_cand = cand_graphs.get(cls)
            if g_ref is None or g_cand is None:
                continue
            if not g_ref.nodes or not g_cand.nodes:
                continue
            size = max(len(g_ref.nodes), len(g_cand.nodes))
            per_class[cls] = match_graphs(
                pad_dummy(g_ref, size), pad_dummy(g_cand, size),
                dummy_penalty=config.dummy_penalty,
                distortion_tolerance=config.distortion_tolerance)
        class_used = select_class(per_class)
        matching = per_class[class_used]
        g_ref = ref_graphs[class_used]
        g_cand = cand_graphs[class_used]
        pairs = [((g_ref.nodes[i].row, g_ref.nodes[i].col),
                  (g_cand.nodes[j].row, g_cand.nodes[j].col))
                 for i, j in matching.pairs]
        transform = estimate_transform(pairs)
    except (InsufficientLandmarks, NoUsableClass, GridTooSmall,
            DegenerateConfiguration):
        transform, pairs = _contour_fallback(ref_u, cand_u, config)
        class_used = None
        fallback = True
    registered = resample(cand_u, transform, ref_u)
    mask = overlap_mask(ref_u, registered)
    ref_valid = int(ref_u.valid_mask.sum())
    overlap_fraction = float(mask.sum()) / ref_valid if ref_valid else 0.0
    if overlap_fraction < config.min_overlap:
        raise RegistrationFailed(
            f"overlap fraction {overlap_fraction:.3f} is below the "
            f"configured minimum {config.min_overlap:.3f}")
    if not mask.any():
        raise RegistrationFailed(
            "registered candidate does not overlap the reference")
    report = MetricsReport(
        cc=cc(ref_u, registered, mask),
        mi=mutual_information(ref_u, registered, mask, bins=config.bins),
        kld=kld(ref_u, registered, mask, bins=config.bins),
        n_cells=int(mask.sum()),
        bins=config.bins,
    )
    low_confidence = fallback or overlap_fraction < config.low_confidence_overlap
    return RegistrationResult(
        transform=transform,
        class_used=class_used,
        registered=registered,
        overlap_fraction=overlap_fraction,
        rms_residual=transform_residual(transform, pairs),
        metrics=report,
        low_confidence=low_confidence,
    )
