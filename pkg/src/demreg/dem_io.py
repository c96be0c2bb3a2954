"""Raster I/O and synthetic terrain.

The on-disk format is ESRI ASCII grid: six header lines (ncols, nrows,
xllcorner, yllcorner, cellsize, NODATA_value; keys case-insensitive)
followed by whitespace-separated cell values, top row first.  Values are
written with shortest round-trip float formatting so parse(write(g))
reproduces g exactly.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
import tempfile
from contextlib import suppress
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (
    CellCountMismatch,
    FeatureOutOfBounds,
    MissingHeaderField,
    NonNumericCell,
)

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize",
                "nodata_value")


@dataclass
class DemGrid:
    """A single-band elevation raster.

    data holds elevations row-major with the top (northernmost) row
    first, matching ESRI ASCII body order.  Cells equal to ``nodata``
    are holes; everything else must be finite.  Treat instances as
    immutable: the data array is marked read-only on construction.
    """

    data: np.ndarray
    cellsize: float = 1.0
    xll: float = 0.0
    yll: float = 0.0
    nodata: float = -9999.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"grid data must be 2-D, got shape {arr.shape}")
        if not (self.cellsize > 0):
            raise ValueError(f"cellsize must be positive, got {self.cellsize}")
        if not math.isfinite(self.nodata):
            raise ValueError("nodata sentinel must be finite")
        bad = ~np.isfinite(arr) & (arr != self.nodata)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise ValueError(f"non-finite cell at ({r}, {c})")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def nrows(self) -> int:
        return self.data.shape[0]

    @property
    def ncols(self) -> int:
        return self.data.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        """Boolean array, True where the cell holds a real elevation."""
        return self.data != self.nodata

    def valid_values(self) -> np.ndarray:
        return self.data[self.valid_mask]

    def with_data(self, data: np.ndarray) -> "DemGrid":
        """New grid sharing this grid's georeferencing."""
        return DemGrid(data, cellsize=self.cellsize, xll=self.xll,
                       yll=self.yll, nodata=self.nodata)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DemGrid):
            return NotImplemented
        return (self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data)
                and self.cellsize == other.cellsize
                and self.xll == other.xll
                and self.yll == other.yll
                and self.nodata == other.nodata)


def content_digest(grid: DemGrid) -> str:
    """Hex digest identifying a grid by exact content and georeferencing."""
    h = hashlib.sha256()
    h.update(struct.pack("<qq", grid.nrows, grid.ncols))
    h.update(struct.pack("<dddd", grid.cellsize, grid.xll, grid.yll,
                         grid.nodata))
    h.update(np.ascontiguousarray(grid.data).tobytes())
    return h.hexdigest()


# --- synthetic features -----------------------------------------------------

@dataclass(frozen=True)
class GaussianPeak:
    row: float
    col: float
    amplitude: float
    sigma: float

    def evaluate(self, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
        d2 = (rr - self.row) ** 2 + (cc - self.col) ** 2
        return self.amplitude * np.exp(-d2 / (2.0 * self.sigma ** 2))


@dataclass(frozen=True)
class GaussianPit:
    row: float
    col: float
    amplitude: float
    sigma: float

    def evaluate(self, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
        d2 = (rr - self.row) ** 2 + (cc - self.col) ** 2
        return -self.amplitude * np.exp(-d2 / (2.0 * self.sigma ** 2))


@dataclass(frozen=True)
class Plane:
    """Tilted plane through z=0 at the grid origin cell."""
    grad_row: float
    grad_col: float

    def evaluate(self, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
        return self.grad_row * rr + self.grad_col * cc


@dataclass(frozen=True)
class Ripple:
    """Sinusoidal corrugation; k_* are in cycles per cell."""
    amplitude: float
    k_row: float
    k_col: float
    phase: float = 0.0

    def evaluate(self, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
        arg = 2.0 * np.pi * (self.k_row * rr + self.k_col * cc) + self.phase
        return self.amplitude * np.sin(arg)


Feature = Union[GaussianPeak, GaussianPit, Plane, Ripple]


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic synthetic DEM.

    jitter, when nonzero, adds per-cell uniform noise in [-jitter, jitter]
    drawn from a generator seeded with ``seed``; the output is a pure
    function of the spec.
    """

    nrows: int
    ncols: int
    base: float = 0.0
    features: Sequence[Feature] = field(default_factory=tuple)
    seed: int = 0
    jitter: float = 0.0
    cellsize: float = 1.0
    xll: float = 0.0
    yll: float = 0.0
    nodata: float = -9999.0

    def __post_init__(self):
        if self.nrows < 1 or self.ncols < 1:
            raise ValueError("grid dimensions must be positive")
        for f in self.features:
            if isinstance(f, (GaussianPeak, GaussianPit)):
                if not (f.sigma > 0):
                    raise ValueError(f"sigma must be positive, got {f.sigma}")
                if not math.isfinite(f.amplitude):
                    raise ValueError("amplitude must be finite")


def generate_synthetic(spec: SynthSpec) -> DemGrid:
    """Evaluate a SynthSpec on its cell lattice.

    Raises FeatureOutOfBounds if a peak or pit center falls outside the
    grid.  Output is bit-identical across runs for a fixed spec.
    """
    for f in spec.features:
        if isinstance(f, (GaussianPeak, GaussianPit)):
            if not (0 <= f.row <= spec.nrows - 1 and 0 <= f.col <= spec.ncols - 1):
                raise FeatureOutOfBounds(
                    f"feature center ({f.row}, {f.col}) outside "
                    f"{spec.nrows}x{spec.ncols} grid")
    rr, cc = np.meshgrid(np.arange(spec.nrows, dtype=np.float64),
                         np.arange(spec.ncols, dtype=np.float64),
                         indexing="ij")
    z = np.full((spec.nrows, spec.ncols), float(spec.base))
    for f in spec.features:
        z += f.evaluate(rr, cc)
    if spec.jitter > 0:
        rng = np.random.default_rng(spec.seed)
        z += rng.uniform(-spec.jitter, spec.jitter, size=z.shape)
    return DemGrid(z, cellsize=spec.cellsize, xll=spec.xll, yll=spec.yll,
                   nodata=spec.nodata)


def add_noise(grid: DemGrid, half_range: float, seed: int) -> DemGrid:
    """Perturb valid cells with truncated Gaussian noise.

    Draws are zero-mean with sigma = half_range / 3, clamped to
    [-half_range, +half_range].  Nodata cells pass through untouched.
    """
    if half_range < 0:
        raise ValueError("half_range must be non-negative")
    if half_range == 0:
        return grid.with_data(grid.data)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, half_range / 3.0, size=grid.data.shape)
    np.clip(noise, -half_range, half_range, out=noise)
    out = grid.data.copy()
    mask = grid.valid_mask
    out[mask] += noise[mask]
    return grid.with_data(out)


def atomic_write_text(path, text: str) -> None:
    """Write text to path so readers never observe a partial file.

    The content goes to a temporary sibling first and is moved into
    place with os.replace, which is atomic on POSIX filesystems.
    """
    target = Path(path)
    parent = target.parent if str(target.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(dir=parent, prefix=target.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, target)
    except BaseException:
        with suppress(OSError):
            os.unlink(tmp)
        raise


# --- ESRI ASCII -------------------------------------------------------------

def _format_value(v: float) -> str:
    """Shortest decimal string that parses back to exactly v."""
    return repr(float(v))


def parse_ascii_grid(text: str) -> DemGrid:
    """Parse an ESRI ASCII grid from a string.

    Raises MissingHeaderField, NonNumericCell, or CellCountMismatch; the
    message names the offending token and 1-based line number.
    """
    lines = text.splitlines()
    header: dict[str, float] = {}
    body_start = 0
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        key = parts[0].lower()
        if key in _HEADER_KEYS and key not in header:
            if len(parts) != 2:
                raise NonNumericCell(
                    f"header line {lineno}: expected '<key> <value>', "
                    f"got {line!r}")
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise NonNumericCell(
                    f"header line {lineno}: value {parts[1]!r} for "
                    f"{parts[0]} is not numeric") from None
            body_start = lineno
        else:
            break
    for key in _HEADER_KEYS:
        if key not in header:
            raise MissingHeaderField(f"header field {key!r} not found")
    nrows = int(header["nrows"])
    ncols = int(header["ncols"])
    if nrows < 1 or ncols < 1 or header["nrows"] != nrows or header["ncols"] != ncols:
        raise NonNumericCell(
            f"nrows/ncols must be positive integers, got "
            f"{header['nrows']}, {header['ncols']}")

    tokens: list[str] = []
    token_lines: list[int] = []
    for lineno in range(body_start + 1, len(lines) + 1):
        for tok in lines[lineno - 1].split():
            tokens.append(tok)
            token_lines.append(lineno)
    expected = nrows * ncols
    if len(tokens) != expected:
        raise CellCountMismatch(
            f"expected {expected} cell values ({nrows}x{ncols}), "
            f"got {len(tokens)}")
    try:
        values = np.array(tokens, dtype=np.float64)
    except ValueError:
        for tok, lineno in zip(tokens, token_lines):
            try:
                float(tok)
            except ValueError:
                raise NonNumericCell(
                    f"line {lineno}: cell token {tok!r} is not numeric"
                ) from None
        raise
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.argmax(bad))
        raise NonNumericCell(
            f"line {token_lines[i]}: cell token {tokens[i]!r} is not finite")
    return DemGrid(values.reshape(nrows, ncols),
                   cellsize=header["cellsize"],
                   xll=header["xllcorner"], yll=header["yllcorner"],
                   nodata=header["nodata_value"])


def write_ascii_grid(grid: DemGrid) -> str:
    """Serialize a grid to ESRI ASCII text (round-trip exact)."""
    out = [
        f"ncols {grid.ncols}",
        f"nrows {grid.nrows}",
        f"xllcorner {_format_value(grid.xll)}",
        f"yllcorner {_format_value(grid.yll)}",
        f"cellsize {_format_value(grid.cellsize)}",
        f"NODATA_value {_format_value(grid.nodata)}",
    ]
    for row in grid.data:
        out.append(" ".join(_format_value(v) for v in row))
    return "\n".join(out) + "\n"
