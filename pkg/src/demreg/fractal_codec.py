"""Fractal (PIFS) coding of elevation rasters.

Elevations are affinely quantized to 16 bits, padded to a multiple of
the range size, and covered by 4x4 range blocks.  Each range block
stores the best-fitting 8x8 domain block (averaged 2:1, under one of 8
dihedral isometries) together with a quantized contrast s and offset o
such that range ~ s * domain + o with |s| <= 0.9.  Decoding iterates
that block map from a flat mid-scale start; the contrast bound makes it
a contraction, so the iteration converges to a unique fixed point.

Nodata cells are filled by iterated neighbor means before encoding and
restored from a separately stored mask afterwards, so holes round-trip
exactly.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dem_io import DemGrid
from .errors import AllNoData, GridTooSmall

RANGE_SIZE = 4
DOMAIN_SIZE = 8
DOMAIN_STEP = 4
S_BITS = 5
O_BITS = 12
S_MAX = 0.9
Q_PEAK = 65535.0
MAGIC = b"FDEM1"
FORMAT_VERSION = 1

#: Dihedral square symmetries in their canonical storage order.
_ISOMETRIES = (
    lambda a: a,
    lambda a: np.rot90(a, 1),
    lambda a: np.rot90(a, 2),
    lambda a: np.rot90(a, 3),
    lambda a: np.fliplr(a),
    lambda a: np.rot90(np.fliplr(a), 1),
    lambda a: np.rot90(np.fliplr(a), 2),
    lambda a: np.rot90(np.fliplr(a), 3),
)

_MASK_NONE = 0
_MASK_RLE = 1
_MASK_BITMAP = 2


@dataclass(frozen=True)
class BlockCode:
    domain_index: int
    isometry: int
    s_q: int
    o_q: int


@dataclass(eq=False)
class FractalCode:
    """Everything needed to reconstruct one raster."""

    nrows: int
    ncols: int
    cellsize: float
    xll: float
    yll: float
    nodata: float
    z_min: float
    z_max: float
    o_min: float
    o_max: float
    blocks: tuple[BlockCode, ...]
    nodata_mask: Optional[np.ndarray] = None
    encode_seconds: float = field(default=0.0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FractalCode):
            return NotImplemented
        if self.nodata_mask is None:
            masks_equal = other.nodata_mask is None
        else:
            masks_equal = (other.nodata_mask is not None
                           and np.array_equal(self.nodata_mask,
                                              other.nodata_mask))
        return (masks_equal
                and (self.nrows, self.ncols, self.cellsize, self.xll,
                     self.yll, self.nodata, self.z_min, self.z_max,
                     self.o_min, self.o_max, self.blocks)
                == (other.nrows, other.ncols, other.cellsize, other.xll,
                    other.yll, other.nodata, other.z_min, other.z_max,
                    other.o_min, other.o_max, other.blocks))


@dataclass(frozen=True)
class DecodeResult:
    grid: DemGrid
    iterations: int
    deltas: tuple[float, ...]


@dataclass(frozen=True)
class CodecReport:
    compression_ratio: float
    psnr_db: float
    encode_seconds: float
    decode_iterations: int

    def as_dict(self) -> dict:
        return {"compression_ratio": self.compression_ratio,
                "psnr_db": self.psnr_db,
                "encode_seconds": self.encode_seconds,
                "decode_iterations": self.decode_iterations}


# --- quantization and geometry ---------------------------------------------

def dequantize_s(s_q: int) -> float:
    return (s_q - 16) * S_MAX / 16.0


def _quantize_s(s: np.ndarray) -> np.ndarray:
    q = np.rint(s * 16.0 / S_MAX) + 16
    return np.clip(q, 0, 31)


def _padded_dims(nrows: int, ncols: int) -> tuple[int, int]:
    pr = -(-nrows // RANGE_SIZE) * RANGE_SIZE
    pc = -(-ncols // RANGE_SIZE) * RANGE_SIZE
    return pr, pc


def _domain_grid_dims(pr: int, pc: int) -> tuple[int, int]:
    return ((pr - DOMAIN_SIZE) // DOMAIN_STEP + 1,
            (pc - DOMAIN_SIZE) // DOMAIN_STEP + 1)


def _quantize_grid(values: np.ndarray, z_min: float,
                   z_max: float) -> np.ndarray:
    if z_max <= z_min:
        return np.zeros_like(values)
    q = np.rint((values - z_min) / (z_max - z_min) * Q_PEAK)
    return np.clip(q, 0.0, Q_PEAK)


def _dequantize_grid(q: np.ndarray, z_min: float, z_max: float) -> np.ndarray:
    if z_max <= z_min:
        return np.full_like(q, z_min)
    return z_min + q / Q_PEAK * (z_max - z_min)


def fill_nodata(data: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid cells by iterated means of their valid neighbors."""
    if valid.all():
        return data.copy()
    if not valid.any():
        raise AllNoData("cannot fill a grid with no valid cells")
    filled = np.where(valid, data, 0.0)
    known = valid.copy()
    while not known.all():
        nb_sum = np.zeros_like(filled)
        nb_cnt = np.zeros_like(filled)
        known_f = known.astype(float)
        nb_sum[1:, :] += filled[:-1, :] * known_f[:-1, :]
        nb_cnt[1:, :] += known_f[:-1, :]
        nb_sum[:-1, :] += filled[1:, :] * known_f[1:, :]
        nb_cnt[:-1, :] += known_f[1:, :]
        nb_sum[:, 1:] += filled[:, :-1] * known_f[:, :-1]
        nb_cnt[:, 1:] += known_f[:, :-1]
        nb_sum[:, :-1] += filled[:, 1:] * known_f[:, 1:]
        nb_cnt[:, :-1] += known_f[:, 1:]
        newly = ~known & (nb_cnt > 0)
        filled[newly] = nb_sum[newly] / nb_cnt[newly]
        known |= newly
    return filled


def _half_resolution(padded: np.ndarray) -> np.ndarray:
    return (padded[0::2, 0::2] + padded[0::2, 1::2]
            + padded[1::2, 0::2] + padded[1::2, 1::2]) / 4.0


def _domain_variants(padded: np.ndarray) -> np.ndarray:
    """All domains x all isometries, flattened; index = domain * 8 + iso."""
    half = _half_resolution(padded)
    step = DOMAIN_STEP // 2
    size = DOMAIN_SIZE // 2
    windows = sliding_window_view(half, (size, size))[::step, ::step]
    n_dr, n_dc = windows.shape[:2]
    domains = windows.reshape(n_dr * n_dc, size, size)
    variants = np.empty((len(domains), 8, size * size))
    for k, iso in enumerate(_ISOMETRIES):
        variants[:, k, :] = iso(domains.transpose(1, 2, 0)).transpose(
            2, 0, 1).reshape(len(domains), -1)
    return variants.reshape(len(domains) * 8, size * size)


# --- encoding ---------------------------------------------------------------

def encode(grid: DemGrid) -> FractalCode:
    """Search the best contractive block map for each 4x4 range.

    Deterministic: ties on fit error resolve to the lowest domain index,
    then the lowest isometry.  Offsets are quantized over their actual
    range, recorded in the header.
    """
    started = time.perf_counter()
    if grid.nrows < 2 * RANGE_SIZE or grid.ncols < 2 * RANGE_SIZE:
        raise GridTooSmall(
            f"fractal coding needs at least {2 * RANGE_SIZE}x"
            f"{2 * RANGE_SIZE} cells, got {grid.nrows}x{grid.ncols}")
    valid = grid.valid_mask
    mask = None if valid.all() else ~valid
    values = fill_nodata(grid.data, valid)
    z_min = float(values.min())
    z_max = float(values.max())
    quant = _quantize_grid(values, z_min, z_max)
    pr, pc = _padded_dims(grid.nrows, grid.ncols)
    padded = np.pad(quant, ((0, pr - grid.nrows), (0, pc - grid.ncols)),
                    mode="edge")
    variants = _domain_variants(padded)
    n_pix = RANGE_SIZE * RANGE_SIZE
    v_sum = variants.sum(axis=1)
    v_ss = np.einsum("ij,ij->i", variants, variants)
    v_var = v_ss - v_sum * v_sum / n_pix

    blocks_r = pr // RANGE_SIZE
    blocks_c = pc // RANGE_SIZE
    ranges = (padded.reshape(blocks_r, RANGE_SIZE, blocks_c, RANGE_SIZE)
              .transpose(0, 2, 1, 3).reshape(blocks_r * blocks_c, n_pix))
    r_sum = ranges.sum(axis=1)
    r_ss = np.einsum("ij,ij->i", ranges, ranges)
    r_var = r_ss - r_sum * r_sum / n_pix

    n_blocks = len(ranges)
    best_idx = np.empty(n_blocks, dtype=np.int64)
    best_s_q = np.empty(n_blocks, dtype=np.int64)
    offsets = np.empty(n_blocks)
    chunk = max(16, min(512, 8_000_000 // max(1, len(variants))))
    safe_var = np.where(v_var > 1e-12, v_var, 1.0)
    for lo in range(0, n_blocks, chunk):
        hi = min(lo + chunk, n_blocks)
        sp = ranges[lo:hi] @ variants.T
        sp_c = sp - np.outer(r_sum[lo:hi], v_sum) / n_pix
        s = np.where(v_var > 1e-12, sp_c / safe_var, 0.0)
        s_q = _quantize_s(np.clip(s, -S_MAX, S_MAX))
        s_deq = (s_q - 16) * (S_MAX / 16.0)
        err = (r_var[lo:hi, None] - 2.0 * s_deq * sp_c
               + s_deq * s_deq * v_var[None, :])
        pick = np.argmin(err, axis=1)
        rows = np.arange(hi - lo)
        best_idx[lo:hi] = pick
        best_s_q[lo:hi] = s_q[rows, pick]
        s_sel = s_deq[rows, pick]
        offsets[lo:hi] = (r_sum[lo:hi] - s_sel * v_sum[pick]) / n_pix

    o_min = float(offsets.min())
    o_max = float(offsets.max())
    if o_max > o_min:
        o_q = np.rint((offsets - o_min) / (o_max - o_min)
                      * (2 ** O_BITS - 1))
    else:
        o_q = np.zeros(n_blocks)
    blocks = tuple(
        BlockCode(domain_index=int(best_idx[k] // 8),
                  isometry=int(best_idx[k] % 8),
                  s_q=int(best_s_q[k]),
                  o_q=int(o_q[k]))
        for k in range(n_blocks))
    return FractalCode(
        nrows=grid.nrows, ncols=grid.ncols, cellsize=grid.cellsize,
        xll=grid.xll, yll=grid.yll, nodata=grid.nodata,
        z_min=z_min, z_max=z_max, o_min=o_min, o_max=o_max,
        blocks=blocks, nodata_mask=mask,
        encode_seconds=time.perf_counter() - started)


# --- decoding ---------------------------------------------------------------

def _gather_indices(code: FractalCode) -> tuple[np.ndarray, np.ndarray,
                                                np.ndarray]:
    """Half-grid source indices and full-grid destinations per block."""
    pr, pc = _padded_dims(code.nrows, code.ncols)
    n_dr, n_dc = _domain_grid_dims(pr, pc)
    h_cols = pc // 2
    size = RANGE_SIZE
    local = np.arange(size * size).reshape(size, size)
    iso_sources = [iso(local).ravel() for iso in _ISOMETRIES]

    blocks_c = pc // RANGE_SIZE
    n_blocks = len(code.blocks)
    gather = np.empty((n_blocks, size * size), dtype=np.intp)
    scatter = np.empty((n_blocks, size * size), dtype=np.intp)
    s_vals = np.empty((n_blocks, 1))
    dest_local = (np.repeat(np.arange(size), size) * pc
                  + np.tile(np.arange(size), size))
    o_step = ((code.o_max - code.o_min) / (2 ** O_BITS - 1)
              if code.o_max > code.o_min else 0.0)
    o_vals = np.empty((n_blocks, 1))
    for k, block in enumerate(code.blocks):
        dr = (block.domain_index // n_dc) * DOMAIN_STEP
        dc = (block.domain_index % n_dc) * DOMAIN_STEP
        src = iso_sources[block.isometry]
        gather[k] = ((dr // 2 + src // size) * h_cols
                     + (dc // 2 + src % size))
        br, bc = divmod(k, blocks_c)
        scatter[k] = (br * size * pc + bc * size) + dest_local
        s_vals[k, 0] = dequantize_s(block.s_q)
        o_vals[k, 0] = code.o_min + block.o_q * o_step
    return gather, scatter, np.concatenate([s_vals, o_vals], axis=1)


def decode_details(code: FractalCode, max_iterations: int = 30,
                   epsilon: float = 0.5,
                   start: float = Q_PEAK / 2.0) -> DecodeResult:
    """Iterate the block map to its fixed point, keeping per-step deltas.

    Stops when the largest cell change (in 16-bit quantization units)
    drops below epsilon, or after max_iterations.  start sets the
    uniform initial level; the fixed point does not depend on it.
    """
    pr, pc = _padded_dims(code.nrows, code.ncols)
    gather, scatter, s_o = _gather_indices(code)
    s_vals = s_o[:, :1]
    o_vals = s_o[:, 1:]
    current = np.full(pr * pc, float(start))
    deltas = []
    iterations = 0
    for _ in range(max_iterations):
        half = _half_resolution(current.reshape(pr, pc)).ravel()
        new = np.empty_like(current)
        new[scatter.ravel()] = (s_vals * half[gather] + o_vals).ravel()
        np.clip(new, 0.0, Q_PEAK, out=new)
        delta = float(np.max(np.abs(new - current)))
        deltas.append(delta)
        current = new
        iterations += 1
        if delta < epsilon:
            break
    quant = current.reshape(pr, pc)[:code.nrows, :code.ncols]
    values = _dequantize_grid(quant, code.z_min, code.z_max)
    if code.nodata_mask is not None:
        values = np.where(code.nodata_mask, code.nodata, values)
    grid = DemGrid(values, cellsize=code.cellsize, xll=code.xll,
                   yll=code.yll, nodata=code.nodata)
    return DecodeResult(grid=grid, iterations=iterations,
                        deltas=tuple(deltas))


def decode(code: FractalCode, max_iterations: int = 30,
           epsilon: float = 0.5) -> DemGrid:
    return decode_details(code, max_iterations, epsilon).grid


# --- serialization ----------------------------------------------------------

class _BitWriter:
    def __init__(self):
        self._buf = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, value: int, bits: int) -> None:
        self._acc |= (value & ((1 << bits) - 1)) << self._nbits
        self._nbits += bits
        while self._nbits >= 8:
            self._buf.append(self._acc & 0xFF)
            self._acc >>= 8
            self._nbits -= 8

    def getvalue(self) -> bytes:
        if self._nbits:
            self._buf.append(self._acc & 0xFF)
            self._acc = 0
            self._nbits = 0
        return bytes(self._buf)


class _BitReader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._acc = 0
        self._nbits = 0

    def read(self, bits: int) -> int:
        while self._nbits < bits:
            self._acc |= self._data[self._pos] << self._nbits
            self._pos += 1
            self._nbits += 8
        value = self._acc & ((1 << bits) - 1)
        self._acc >>= bits
        self._nbits -= bits
        return value


def _domain_bits(n_domains: int) -> int:
    return max(1, (n_domains - 1).bit_length())


def _rle_encode(mask: np.ndarray) -> bytes:
    flat = mask.ravel().astype(np.int8)
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    lengths = np.diff(bounds).astype(np.uint32)
    if flat[0]:
        lengths = np.concatenate([[np.uint32(0)], lengths])
    return lengths.astype("<u4").tobytes()


def _rle_decode(payload: bytes, nrows: int, ncols: int) -> np.ndarray:
    lengths = np.frombuffer(payload, dtype="<u4")
    mask = np.zeros(nrows * ncols, dtype=bool)
    pos = 0
    value = False
    for run in lengths:
        if value:
            mask[pos:pos + int(run)] = True
        pos += int(run)
        value = not value
    if pos != nrows * ncols:
        raise ValueError("nodata run lengths do not cover the grid")
    return mask.reshape(nrows, ncols)


_HEADER = struct.Struct("<5s6B5I7d")


def serialize(code: FractalCode) -> bytes:
    """Byte-exact .fdem representation of a code."""
    pr, pc = _padded_dims(code.nrows, code.ncols)
    n_dr, n_dc = _domain_grid_dims(pr, pc)
    n_domains = n_dr * n_dc
    dom_bits = _domain_bits(n_domains)
    writer = _BitWriter()
    for block in code.blocks:
        writer.write(block.domain_index, dom_bits)
        writer.write(block.isometry, 3)
        writer.write(block.s_q, S_BITS)
        writer.write(block.o_q, O_BITS)
    payload = writer.getvalue()
    if code.nodata_mask is None:
        mask_mode = _MASK_NONE
        mask_bytes = b""
    else:
        rle = _rle_encode(code.nodata_mask)
        bitmap = np.packbits(code.nodata_mask.ravel()).tobytes()
        if len(rle) <= len(bitmap):
            mask_mode, mask_bytes = _MASK_RLE, rle
        else:
            mask_mode, mask_bytes = _MASK_BITMAP, bitmap
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, RANGE_SIZE, DOMAIN_STEP, S_BITS, O_BITS,
        mask_mode, code.nrows, code.ncols, len(code.blocks), n_domains,
        len(mask_bytes), code.cellsize, code.xll, code.yll, code.nodata,
        code.z_min, code.z_max, code.o_min)
    # o_max rides behind the fixed header to keep the struct word count
    # in sync with the format version.
    return header + struct.pack("<d", code.o_max) + payload + mask_bytes


def deserialize(payload: bytes) -> FractalCode:
    if payload[:5] != MAGIC:
        raise ValueError("not a fractal DEM stream (bad magic)")
    fields = _HEADER.unpack_from(payload, 0)
    (_, version, range_size, domain_step, s_bits, o_bits, mask_mode,
     nrows, ncols, n_blocks, n_domains, mask_len, cellsize, xll, yll,
     nodata, z_min, z_max, o_min) = fields
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    if (range_size, domain_step, s_bits, o_bits) != (RANGE_SIZE,
                                                     DOMAIN_STEP, S_BITS,
                                                     O_BITS):
        raise ValueError("stream was written with unsupported parameters")
    offset = _HEADER.size
    (o_max,) = struct.unpack_from("<d", payload, offset)
    offset += 8
    dom_bits = _domain_bits(n_domains)
    bits_per_block = dom_bits + 3 + S_BITS + O_BITS
    block_bytes = (n_blocks * bits_per_block + 7) // 8
    reader = _BitReader(payload[offset:offset + block_bytes])
    blocks = []
    for _ in range(n_blocks):
        domain_index = reader.read(dom_bits)
        isometry = reader.read(3)
        s_q = reader.read(S_BITS)
        o_q = reader.read(O_BITS)
        blocks.append(BlockCode(domain_index=domain_index,
                                isometry=isometry, s_q=s_q, o_q=o_q))
    offset += block_bytes
    mask_bytes = payload[offset:offset + mask_len]
    if mask_mode == _MASK_NONE:
        mask = None
    elif mask_mode == _MASK_RLE:
        mask = _rle_decode(mask_bytes, nrows, ncols)
    elif mask_mode == _MASK_BITMAP:
        bits = np.unpackbits(np.frombuffer(mask_bytes, dtype=np.uint8),
                             count=nrows * ncols)
        mask = bits.astype(bool).reshape(nrows, ncols)
    else:
        raise ValueError(f"unknown nodata mask mode {mask_mode}")
    return FractalCode(
        nrows=nrows, ncols=ncols, cellsize=cellsize, xll=xll, yll=yll,
        nodata=nodata, z_min=z_min, z_max=z_max, o_min=o_min, o_max=o_max,
        blocks=tuple(blocks), nodata_mask=mask)


# --- reporting --------------------------------------------------------------

def codec_report(grid: DemGrid, code: FractalCode,
                 decoded: Union[DemGrid, DecodeResult]) -> CodecReport:
    """Compression ratio and fidelity of one encode/decode round trip.

    The ratio compares raw 16-bit storage against the serialized code;
    PSNR compares the 16-bit quantized original with the quantized
    decode, peak 65535, over valid cells.
    """
    if isinstance(decoded, DecodeResult):
        iterations = decoded.iterations
        decoded_grid = decoded.grid
    else:
        iterations = 0
        decoded_grid = decoded
    encoded = serialize(code)
    ratio = (grid.nrows * grid.ncols * 2) / len(encoded)
    valid = grid.valid_mask & decoded_grid.valid_mask
    q_orig = _quantize_grid(grid.data, code.z_min, code.z_max)
    q_dec = _quantize_grid(decoded_grid.data, code.z_min, code.z_max)
    if valid.any():
        diff = q_orig[valid] - q_dec[valid]
        mse = float(np.mean(diff * diff))
    else:
        mse = 0.0
    psnr_db = math.inf if mse == 0.0 else 10.0 * math.log10(
        Q_PEAK * Q_PEAK / mse)
    return CodecReport(compression_ratio=float(ratio), psnr_db=psnr_db,
                       encode_seconds=code.encode_seconds,
                       decode_iterations=iterations)
