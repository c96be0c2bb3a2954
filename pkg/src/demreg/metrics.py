"""Similarity metrics between co-registered rasters.

All statistics run over an explicit cell mask (default: cells valid in
both grids).  Histogram-based quantities use equal-width bins; mutual
information and divergence are reported in bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dem_io import DemGrid, add_noise
from .errors import ConstantInput, DimsMismatch, EmptyMask

DEFAULT_BINS = 32


@dataclass(frozen=True)
class MetricsReport:
    cc: float
    mi: float
    kld: float
    n_cells: int
    bins: int

    def as_dict(self) -> dict:
        return {"cc": self.cc, "mi": self.mi, "kld": self.kld,
                "n_cells": self.n_cells, "bins": self.bins}


def _masked_pair(a: DemGrid, b: DemGrid, mask: Optional[np.ndarray]):
    if a.data.shape != b.data.shape:
        raise DimsMismatch(
            f"grid shapes differ: {a.data.shape} vs {b.data.shape}")
    if mask is None:
        mask = a.valid_mask & b.valid_mask
    elif mask.shape != a.data.shape:
        raise DimsMismatch(
            f"mask shape {mask.shape} does not match grids {a.data.shape}")
    else:
        mask = mask & a.valid_mask & b.valid_mask
    return a.data[mask], b.data[mask]


def cc(a: DemGrid, b: DemGrid, mask: Optional[np.ndarray] = None) -> float:
    """Pearson correlation coefficient over the masked cells."""
    va, vb = _masked_pair(a, b, mask)
    if va.size == 0:
        raise EmptyMask("correlation requested over zero cells")
    da = va - va.mean()
    db = vb - vb.mean()
    ssa = float(da @ da)
    ssb = float(db @ db)
    if ssa == 0.0 or ssb == 0.0:
        raise ConstantInput("correlation undefined for constant input")
    return float(da @ db) / math.sqrt(ssa * ssb)


def _bin_indices(v: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Equal-width bin index per value; hi maps into the last bin."""
    if hi == lo:
        return np.zeros(v.shape, dtype=np.int64)
    idx = np.floor(((v - lo) / (hi - lo)) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    # sort so the sum is invariant to histogram orientation
    terms = np.sort(p * np.log2(p))
    return float(-terms.sum())


def mutual_information(a: DemGrid, b: DemGrid,
                       mask: Optional[np.ndarray] = None,
                       bins: int = DEFAULT_BINS) -> float:
    """Mutual information in bits from a bins x bins joint histogram.

    Bin edges are equal-width over each input's own masked min..max, so
    the result is invariant to separate affine rescalings of a and b.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    va, vb = _masked_pair(a, b, mask)
    if va.size == 0:
        raise EmptyMask("mutual information requested over zero cells")
    ia = _bin_indices(va, float(va.min()), float(va.max()), bins)
    ib = _bin_indices(vb, float(vb.min()), float(vb.max()), bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).astype(
        np.float64).reshape(bins, bins)
    joint /= joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    return _entropy_bits(pa) + _entropy_bits(pb) - _entropy_bits(joint.ravel())


def kld(a: DemGrid, b: DemGrid, mask: Optional[np.ndarray] = None,
        bins: int = DEFAULT_BINS) -> float:
    """Kullback-Leibler divergence D(P_a || Q_b) in bits.

    Both marginal histograms share equal-width bins over the combined
    masked range.  Q_b gets add-one smoothing so its support covers
    P_a's; the result is therefore finite and non-negative.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    va, vb = _masked_pair(a, b, mask)
    if va.size == 0:
        raise EmptyMask("divergence requested over zero cells")
    lo = float(min(va.min(), vb.min()))
    hi = float(max(va.max(), vb.max()))
    ca = np.bincount(_bin_indices(va, lo, hi, bins), minlength=bins).astype(
        np.float64)
    cb = np.bincount(_bin_indices(vb, lo, hi, bins), minlength=bins).astype(
        np.float64)
    p = ca / ca.sum()
    q = (cb + 1.0) / (cb.sum() + bins)
    nz = p > 0
    d = float(np.sum(p[nz] * np.log2(p[nz] / q[nz])))
    assert d >= -1e-9, f"Gibbs inequality violated: {d}"
    return max(d, 0.0)


def psnr(orig: DemGrid, recon: DemGrid, peak: float) -> float:
    """Peak signal-to-noise ratio in dB over jointly valid cells."""
    vo, vr = _masked_pair(orig, recon, None)
    if vo.size == 0:
        raise EmptyMask("PSNR requested over zero cells")
    mse = float(np.mean((vo - vr) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def robustness_eval(ref: DemGrid, cand: DemGrid, half_range: float,
                    seed: int, config=None):
    """Paired clean/noisy registration of the same candidate.

    Returns a dict with cc/mi for both runs plus the two full
    registration results under keys 'clean' and 'noisy'.
    """
    from .register import register  # local import; register depends on us

    clean = register(ref, cand, config)
    noisy = register(ref, add_noise(cand, half_range, seed), config)
    return {
        "cc_clean": clean.metrics.cc,
        "cc_noisy": noisy.metrics.cc,
        "mi_clean": clean.metrics.mi,
        "mi_noisy": noisy.metrics.mi,
        "clean": clean,
        "noisy": noisy,
    }
