import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatioformer.errors import ConfigError, DataError
from spatioformer.geoenc import GeoEncoderConfig, distinctiveness, encode, encode_many, render_layer

CFG = GeoEncoderConfig(d=16, a=1.0, c=100.0)
AUSTRALIA = (112.0, -44.0, 154.0, -10.0)

# scalar evaluation of the encoder formula with math.sin/cos, 1-based j, at (151.2, -33.9)
SYDNEY_TOKEN = [
    1.8587386051595818, -0.7685966604045347, 1.2928158555453475, -1.5145079290965993,
    -0.12898525203245917, 0.03887869805278543, -0.5709736190873432, 0.8005279708843397,
    0.14557171661429813, 1.0489880724341298, 0.8117688829595281, -0.03532009574540107,
    -1.0607568072803135, 0.22532625385306906, 0.5277242678595098, 0.3871168476120994,
]


@pytest.mark.parametrize("cfg", [CFG, GeoEncoderConfig(d=4, a=2.0, c=10.0), GeoEncoderConfig(d=32, a=0.5, c=1000.0)])
def test_origin_token(cfg):
    tok = encode(cfg, 0.0, 0.0)
    # element j is 1-based: odd j (index 0, 2, ...) are cosines
    assert np.array_equal(tok[0::2], np.full(cfg.d // 2, 2.0))
    assert np.array_equal(tok[1::2], np.zeros(cfg.d // 2))


def test_matches_scalar_oracle():
    assert np.max(np.abs(encode(CFG, 151.2, -33.9) - SYDNEY_TOKEN)) < 1e-12


def test_one_based_wavelengths():
    w, v = CFG.wavelengths()
    assert w[0] == pytest.approx(100 ** (1 / 16)) and w[-1] == pytest.approx(100.0)
    assert v[0] == pytest.approx(100 ** (15 / 16)) and v[-1] == pytest.approx(1.0)
    assert np.all(np.diff(w) > 0) and np.all(np.diff(v) < 0)


@settings(max_examples=300, deadline=None)
@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_bounded(lon, lat):
    tok = encode(CFG, lon, lat)
    assert np.all(tok >= -2.0) and np.all(tok <= 2.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-360, 360))
def test_even_elements_odd_in_longitude_on_equator(lon):
    a, b = encode(CFG, lon, 0.0), encode(CFG, -lon, 0.0)
    assert np.array_equal(a[1::2], -b[1::2])


def test_deterministic():
    assert encode(CFG, 133.3, -25.1).tobytes() == encode(CFG, 133.3, -25.1).tobytes()


def test_rejects_non_finite():
    with pytest.raises(DataError):
        encode(CFG, math.nan, 0.0)
    with pytest.raises(DataError):
        encode_many(CFG, [0.0, math.inf], [0.0, 0.0])


@pytest.mark.parametrize("kw", [dict(d=3), dict(d=0), dict(a=0.0), dict(c=1.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        GeoEncoderConfig(**kw)


def test_affine_pretransform():
    shifted = GeoEncoderConfig(lon_offset=-10.0, lat_scale=0.5)
    assert np.array_equal(encode(shifted, 30.0, 8.0), encode(CFG, 20.0, 4.0))


def test_render_even_layer_on_equator_is_pure_longitude_sine():
    grid = render_layer(CFG, 4, (100.0, -0.05, 160.0, 0.05), 0.1)
    lon, lat = grid.cell_centers()
    assert grid.height == 1
    w4 = 100 ** (4 / 16)
    # lat cell centre is 0 up to rounding of the bbox arithmetic
    assert np.max(np.abs(grid.values - np.sin(lon / w4) - np.sin(lat / 100 ** (12 / 16)))) < 1e-12
    assert np.max(np.abs(lat)) < 1e-12
    assert np.max(np.abs(grid.values - np.sin(lon / w4))) < 1e-12


def test_render_layer_one_longitude_period():
    res = 0.01
    grid = render_layer(CFG, 1, AUSTRALIA, res)
    row = grid.values[0] - np.cos(grid.cell_centers()[1][0, 0] / 100 ** (15 / 16))
    # row = cos(lon / w1): count zero crossings, two per period
    crossings = np.nonzero(np.diff(np.sign(row)) != 0)[0]
    spacing = np.diff(crossings).mean() * res
    period = 2 * math.pi * 100 ** (1 / 16)
    assert spacing * 2 == pytest.approx(period, rel=0.01)
    # latitude varies slowly in layer 1, fast in layer 16
    g1, g16 = grid.values, render_layer(CFG, 16, AUSTRALIA, 0.05).values
    assert np.abs(np.diff(g1, axis=1)).mean() > np.abs(np.diff(g1, axis=0)).mean()
    assert np.abs(np.diff(g16, axis=0)).mean() > np.abs(np.diff(g16, axis=1)).mean()


def test_render_single_cell_matches_encode():
    grid = render_layer(CFG, 7, (140.0, -30.0, 141.0, -29.0), 1.0)
    assert grid.values.shape == (1, 1)
    assert grid.values[0, 0] == encode(CFG, 140.5, -29.5)[6]


@pytest.mark.parametrize("j,bbox", [(0, AUSTRALIA), (17, AUSTRALIA), (1, (150.0, -10.0, 140.0, 0.0)), (1, (0, 0, 1, 0))])
def test_render_rejects_bad_input(j, bbox):
    with pytest.raises(ConfigError):
        render_layer(CFG, j, bbox, 0.1)


def test_distinctiveness_identical_points():
    assert distinctiveness(CFG, [(140.0, -20.0), (140.0, -20.0)]) == 0.0


def test_single_layer_alias_broken_by_other_layers():
    w1 = 100 ** (1 / 16)
    p, q = (120.0, -30.0), (120.0 + 2 * math.pi * w1 * 3, -30.0)
    tp, tq = encode(CFG, *p), encode(CFG, *q)
    assert abs(tp[0] - tq[0]) < 1e-12  # layer 1 aliases exactly
    assert distinctiveness(CFG, [p, q]) > 0.1  # the rest of the ladder separates them


def test_thousand_points_are_distinct_over_australia():
    rng = np.random.default_rng(42)
    pts = np.column_stack([rng.uniform(112, 154, 1000), rng.uniform(-44, -10, 1000)])
    sep = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
    np.fill_diagonal(sep, np.inf)
    assert sep.min() >= 0.01
    assert distinctiveness(CFG, pts, min_separation=0.01) > 0.0


def test_distinctiveness_needs_two_points():
    with pytest.raises(DataError):
        distinctiveness(CFG, [(0.0, 0.0)])
