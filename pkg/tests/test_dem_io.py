"""Raster parsing, writing, and synthetic generation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demreg import (
    DemGrid,
    GaussianPeak,
    GaussianPit,
    Plane,
    Ripple,
    SynthSpec,
    add_noise,
    generate_synthetic,
    parse_ascii_grid,
    write_ascii_grid,
)
from demreg.errors import (
    CellCountMismatch,
    FeatureOutOfBounds,
    MissingHeaderField,
    NonNumericCell,
)

SAMPLE = """ncols 3
nrows 2
xllcorner 10.0
yllcorner 20.0
cellsize 30.0
NODATA_value -9999
1 2 3
4 -9999 6
"""


class TestParse:
    def test_basic(self):
        g = parse_ascii_grid(SAMPLE)
        assert g.nrows == 2 and g.ncols == 3
        assert g.cellsize == 30.0 and g.xll == 10.0 and g.yll == 20.0
        # top row first
        assert list(g.data[0]) == [1.0, 2.0, 3.0]
        assert g.data[1, 1] == -9999.0
        assert g.valid_mask.sum() == 5

    def test_header_case_insensitive(self):
        text = SAMPLE.replace("ncols", "NCOLS").replace("NODATA_value",
                                                        "nodata_VALUE")
        g = parse_ascii_grid(text)
        assert g.ncols == 3

    def test_missing_header_field(self):
        text = "\n".join(l for l in SAMPLE.splitlines()
                         if not l.startswith("cellsize"))
        with pytest.raises(MissingHeaderField, match="cellsize"):
            parse_ascii_grid(text)

    def test_cell_count_mismatch_short(self):
        with pytest.raises(CellCountMismatch, match="expected 6"):
            parse_ascii_grid(SAMPLE.replace("4 -9999 6", "4 -9999"))

    def test_cell_count_mismatch_long(self):
        with pytest.raises(CellCountMismatch):
            parse_ascii_grid(SAMPLE + "7 8\n")

    def test_non_numeric_cell_names_token_and_line(self):
        bad = SAMPLE.replace("4 -9999 6", "4 oops 6")
        with pytest.raises(NonNumericCell, match=r"line 8.*'oops'"):
            parse_ascii_grid(bad)

    def test_non_numeric_header(self):
        with pytest.raises(NonNumericCell, match="thirty"):
            parse_ascii_grid(SAMPLE.replace("cellsize 30.0", "cellsize thirty"))


class TestWrite:
    def test_round_trip_exact(self):
        g = parse_ascii_grid(SAMPLE)
        assert parse_ascii_grid(write_ascii_grid(g)) == g

    def test_round_trip_awkward_floats(self):
        rng = np.random.default_rng(11)
        data = rng.uniform(-1e6, 1e6, size=(7, 5))
        data[0, 0] = 0.1 + 0.2   # classic non-representable sum
        g = DemGrid(data, cellsize=0.3333333333333333, xll=-1.5e-7,
                    yll=2.0 ** -20)
        g2 = parse_ascii_grid(write_ascii_grid(g))
        assert g2 == g
        assert np.array_equal(g2.data, g.data)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, nr, nc, seed):
        rng = np.random.default_rng(seed)
        g = DemGrid(rng.normal(scale=1e4, size=(nr, nc)))
        assert parse_ascii_grid(write_ascii_grid(g)) == g


class TestDemGrid:
    def test_rejects_nan(self):
        data = np.zeros((2, 2))
        data[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            DemGrid(data)

    def test_rejects_bad_cellsize(self):
        with pytest.raises(ValueError, match="cellsize"):
            DemGrid(np.zeros((2, 2)), cellsize=0.0)

    def test_data_read_only(self):
        g = DemGrid(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            g.data[0, 0] = 1.0


class TestSynthetic:
    def test_peak_amplitude_at_center(self):
        spec = SynthSpec(64, 64, base=100.0,
                         features=[GaussianPeak(32, 32, 50.0, 5.0)])
        g = generate_synthetic(spec)
        assert g.data[32, 32] - 100.0 >= 0.99 * 50.0
        # closed form at 15 cells out
        expect = 50.0 * math.exp(-(15.0 ** 2) / (2.0 * 5.0 ** 2))
        assert g.data[32, 47] - 100.0 == pytest.approx(expect, abs=1e-12)

    def test_pit_mirrors_peak(self):
        up = generate_synthetic(
            SynthSpec(32, 32, features=[GaussianPeak(16, 16, 20.0, 4.0)]))
        dn = generate_synthetic(
            SynthSpec(32, 32, features=[GaussianPit(16, 16, 20.0, 4.0)]))
        assert np.allclose(up.data, -dn.data)

    def test_ripple_extent_over_period(self):
        # wavelength 8 cells along columns, phase 0: every 8-cell row
        # segment samples both +A and -A exactly.
        spec = SynthSpec(16, 32, features=[Ripple(2.0, 0.0, 1.0 / 8.0)])
        g = generate_synthetic(spec)
        for start in range(0, 24):
            seg = g.data[5, start:start + 8]
            assert 3.8 <= seg.max() - seg.min() <= 4.0 + 1e-12

    def test_plane_gradient(self):
        g = generate_synthetic(SynthSpec(8, 8, features=[Plane(0.5, -0.25)]))
        assert g.data[3, 0] - g.data[2, 0] == pytest.approx(0.5)
        assert g.data[0, 3] - g.data[0, 2] == pytest.approx(-0.25)

    def test_zero_features_constant(self):
        g = generate_synthetic(SynthSpec(9, 9, base=100.0))
        assert np.all(g.data == 100.0)

    def test_deterministic_per_seed(self):
        spec = SynthSpec(16, 16, features=[GaussianPeak(8, 8, 10, 3)],
                         seed=42, jitter=0.5)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        assert np.array_equal(a.data, b.data)
        c = generate_synthetic(SynthSpec(16, 16,
                                         features=[GaussianPeak(8, 8, 10, 3)],
                                         seed=43, jitter=0.5))
        assert not np.array_equal(a.data, c.data)

    def test_feature_out_of_bounds(self):
        with pytest.raises(FeatureOutOfBounds):
            generate_synthetic(
                SynthSpec(16, 16, features=[GaussianPeak(20, 8, 10, 3)]))

    def test_bad_sigma(self):
        with pytest.raises(ValueError, match="sigma"):
            SynthSpec(16, 16, features=[GaussianPeak(8, 8, 10, 0.0)])


class TestAddNoise:
    def test_bounds_and_mean(self):
        g = generate_synthetic(SynthSpec(100, 100, base=500.0))
        n = add_noise(g, 10.0, seed=3)
        delta = n.data - g.data
        assert delta.min() >= -10.0 and delta.max() <= 10.0
        # zero-mean with sigma = 10/3 over 10^4 cells: |mean| < 5 sigma/sqrt(N)
        assert abs(delta.mean()) < 5 * (10.0 / 3.0) / 100.0

    def test_nodata_untouched(self):
        data = np.full((20, 20), 7.0)
        data[3, 4] = -9999.0
        g = DemGrid(data)
        n = add_noise(g, 5.0, seed=1)
        assert n.data[3, 4] == -9999.0
        assert np.all(n.data[n.data != -9999.0] != 7.0)

    def test_zero_half_range_identity(self):
        g = generate_synthetic(SynthSpec(10, 10, base=5.0))
        n = add_noise(g, 0.0, seed=9)
        assert np.array_equal(n.data, g.data)

    def test_deterministic(self):
        g = generate_synthetic(SynthSpec(10, 10, base=5.0))
        assert np.array_equal(add_noise(g, 2.0, 5).data,
                              add_noise(g, 2.0, 5).data)
