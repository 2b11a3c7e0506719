import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatioformer.data import (
    ImageChip,
    SampleRecord,
    SynthConfig,
    TileGrid,
    check_no_leakage,
    read_chip,
    read_samples,
    read_split,
    split_by_tiles,
    synth_generate,
    write_chip,
    write_samples,
    write_split,
)
from spatioformer.errors import ConfigError, DataError
from spatioformer.numerics import RngStream


def _chip(seed=0, size=9):
    rng = np.random.default_rng(seed)
    return ImageChip(rng.uniform(0, 1, (size, size, 6)), 147.25, -35.5)


def test_chip_round_trip(tmp_path):
    chip = _chip()
    write_chip(chip, tmp_path / "a.chip")
    back = read_chip(tmp_path / "a.chip")
    assert back.reflectance.tobytes() == chip.reflectance.tobytes()
    assert (back.center_lon, back.center_lat, back.pixel_pitch) == (chip.center_lon, chip.center_lat, chip.pixel_pitch)


def test_chip_corrupted_magic_names_offset(tmp_path):
    write_chip(_chip(), tmp_path / "a.chip")
    raw = bytearray((tmp_path / "a.chip").read_bytes())
    raw[5] = ord("X")
    (tmp_path / "b.chip").write_bytes(bytes(raw))
    with pytest.raises(DataError, match="offset 5"):
        read_chip(tmp_path / "b.chip")


def test_chip_truncated_payload(tmp_path):
    write_chip(_chip(), tmp_path / "a.chip")
    raw = (tmp_path / "a.chip").read_bytes()
    (tmp_path / "t.chip").write_bytes(raw[:-16])
    with pytest.raises(DataError, match="expected"):
        read_chip(tmp_path / "t.chip")
    (tmp_path / "h.chip").write_bytes(raw[:20])
    with pytest.raises(DataError, match="truncated"):
        read_chip(tmp_path / "h.chip")


@pytest.mark.parametrize("bad", [1.5, -0.1, np.nan])
def test_chip_rejects_invalid_reflectance(bad, tmp_path):
    r = np.full((3, 3, 6), 0.5)
    r[1, 1, 2] = bad
    with pytest.raises(DataError):
        ImageChip(r, 0.0, 0.0)
    # the same check runs on read
    chip = _chip(size=3)
    write_chip(chip, tmp_path / "a.chip")
    raw = bytearray((tmp_path / "a.chip").read_bytes())
    raw[-8:] = np.array([bad], dtype="<f8").tobytes()
    (tmp_path / "a.chip").write_bytes(bytes(raw))
    with pytest.raises(DataError):
        read_chip(tmp_path / "a.chip")


def test_chip_pixel_coords_centre_aligned():
    chip = _chip(size=5)
    lon, lat = chip.pixel_coords()
    assert lon[2, 2] == chip.center_lon and lat[2, 2] == chip.center_lat
    assert lon[2, 3] > lon[2, 2] and lat[1, 2] > lat[2, 2]  # east is +col, north is -row
    crop = chip.crop(3)
    assert np.array_equal(crop.reflectance, chip.reflectance[1:4, 1:4])


def test_sample_validation():
    with pytest.raises(DataError):
        SampleRecord("x", 0.0, 0.0, 2020, -1.0)
    with pytest.raises(DataError):
        SampleRecord("x", np.inf, 0.0, 2020, 1.0)


def test_sample_csv_round_trip(tmp_path):
    samples, _ = synth_generate(SynthConfig(chip_size=3), 20, RngStream(1))
    write_samples(samples, tmp_path / "s.csv")
    assert read_samples(tmp_path / "s.csv") == samples


def _samples_in_tiles(n_tiles, per_tile=2, grid=TileGrid()):
    samples = []
    for t in range(n_tiles):
        i, j = t % 40, t // 40
        for k in range(per_tile):
            lon = grid.origin_lon + (i + 0.25 + 0.5 * k / per_tile) * grid.tile_lon + 290.0
            lat = grid.origin_lat + (j + 0.5) * grid.tile_lat + 40.0
            samples.append(SampleRecord(f"{t}-{k}", lon, lat, 2020, 10.0))
    return samples


def test_split_958_tiles_counts():
    samples = _samples_in_tiles(958)
    a = split_by_tiles(samples, TileGrid(), (0.8, 0.1, 0.1), seed=3)
    assert len(a.tiles) == 958
    assert a.counts() == {"train": 766, "val": 96, "test": 96}


def test_split_single_tile_warns():
    samples = _samples_in_tiles(1, per_tile=5)
    with pytest.warns(UserWarning, match="empty"):
        a = split_by_tiles(samples, TileGrid(), seed=0)
    assert {a.split_of(s) for s in samples} == {"train"}


def test_split_deterministic_and_seed_dependent():
    samples = _samples_in_tiles(100)
    a, b = split_by_tiles(samples, seed=9), split_by_tiles(samples, seed=9)
    assert a.tiles == b.tiles
    assert split_by_tiles(samples, seed=10).tiles != a.tiles


def test_split_rejects_bad_input():
    with pytest.raises(DataError):
        split_by_tiles([])
    with pytest.raises(ConfigError):
        split_by_tiles(_samples_in_tiles(3), fractions=(0.5, 0.2, 0.2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_split_is_tile_pure_and_disjoint(seed):
    samples, _ = synth_generate(SynthConfig(chip_size=1, bbox=(130.0, -30.0, 140.0, -20.0)), 300, RngStream(seed))
    a = split_by_tiles(samples, TileGrid(), seed=seed)
    parts = a.partition(samples)
    ids = [set(parts[k]) for k in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(map(len, ids)) == len(samples)
    groups = {k: [samples[i] for i in v] for k, v in parts.items()}
    check_no_leakage(TileGrid(), **groups)


def test_leakage_check_fails_on_shared_tile():
    s = _samples_in_tiles(1, per_tile=2)
    with pytest.raises(DataError, match="leaks"):
        check_no_leakage(TileGrid(), train=[s[0]], val=[s[1]])


def test_tile_grid_partition():
    g = TileGrid()
    assert g.tile_of(0.0, 0.0) == (200, 100)
    assert g.tile_of(-0.0001, 0.0) == (199, 100)


def test_split_file_round_trip(tmp_path):
    samples = _samples_in_tiles(30)
    a = split_by_tiles(samples, seed=1)
    write_split(a, samples, tmp_path / "split.csv")
    back = read_split(tmp_path / "split.csv")
    assert back == {s.id: a.split_of(s) for s in samples}


def test_synth_deterministic():
    cfg = SynthConfig(chip_size=5)
    s1, c1 = synth_generate(cfg, 50, RngStream(4))
    s2, c2 = synth_generate(cfg, 50, RngStream(4))
    assert s1 == s2
    assert all(a.reflectance.tobytes() == b.reflectance.tobytes() for a, b in zip(c1, c2))


def test_synth_validation():
    with pytest.raises(ConfigError):
        SynthConfig(bbox=(10.0, 0.0, 5.0, 1.0))
    with pytest.raises(ConfigError):
        SynthConfig(regions=0)
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(), 0, RngStream(0))


def test_synth_regions_flip_slopes():
    cfg = SynthConfig(regions=4)
    assert sorted(cfg.slopes) == [-40.0, -40.0, 40.0, 40.0]
    assert cfg.region_of(113.0, -43.0) == 0 and cfg.region_of(153.0, -11.0) == 3
    assert cfg.slopes[0] == -cfg.slopes[1]


def test_synth_single_region_is_global_linear_map():
    cfg = SynthConfig(regions=1, noise=0.0)
    samples, chips = synth_generate(cfg, 200, RngStream(0))
    refl = np.stack([c.reflectance for c in chips])
    s = cfg.spectral_signal(refl)
    y = np.array([x.richness for x in samples])
    coef = np.polyfit(s, y, 1)
    assert np.max(np.abs(np.polyval(coef, s) - y)) < 1e-9
    assert cfg.geo_blind_bayes_risk() == 0.0


def test_synth_two_regions_noiseless_oracle_and_bayes_risk():
    cfg = SynthConfig(regions=2, slopes=(40.0, -40.0), intercepts=(30.0, 30.0), noise=0.0)
    samples, chips = synth_generate(cfg, 500, RngStream(2))
    refl = np.stack([c.reflectance for c in chips])
    lon = np.array([x.lon for x in samples])
    lat = np.array([x.lat for x in samples])
    y = np.array([x.richness for x in samples])
    assert np.array_equal(cfg.oracle_predict(lon, lat, refl), y)
    # identical chips in the two regions carry different richness
    assert cfg.oracle_predict(113.0, -20.0, refl[0]) != cfg.oracle_predict(153.0, -20.0, refl[0])
    # closed form: (40)^2 * E[s^2], with s the difference of two U(0.2, 0.6)
    assert cfg.geo_blind_bayes_risk() == pytest.approx(1600 * 0.4**2 / 6, rel=1e-12)


def test_bayes_risk_matches_monte_carlo():
    cfg = SynthConfig(regions=4, noise=2.0)
    samples, chips = synth_generate(cfg, 60_000, RngStream(8))
    refl = np.stack([c.reflectance for c in chips])
    y = np.array([x.richness for x in samples])
    s = cfg.spectral_signal(refl)
    # best geo-blind predictor: average the regional responses with the area weights
    blind = cfg.region_weights() @ (np.outer(cfg.slopes, s) + np.asarray(cfg.intercepts)[:, None])
    mc = np.mean((y - blind) ** 2)
    assert mc == pytest.approx(cfg.geo_blind_bayes_risk(), rel=0.03)


def test_variance_signal_depends_on_neighbourhood():
    cfg = SynthConfig(signal="variance", regions=1, chip_size=9)
    r = np.full((9, 9, 6), 0.4)
    flat = cfg.spectral_signal(r)
    r[3, 3, 3] = 0.6  # a neighbour of the centre
    assert cfg.spectral_signal(r) > flat
    with pytest.raises(ConfigError):
        cfg.signal_moments()
