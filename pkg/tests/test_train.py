import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatioformer.data import ChipBatch, SynthConfig, TileGrid, split_by_tiles, synth_generate
from spatioformer.errors import ConfigError, DataError
from spatioformer.model import init
from spatioformer.numerics import RngStream
from spatioformer.train import (
    Dataset,
    TrainConfig,
    TrainingAborted,
    ablate_chip_size,
    evaluate,
    format_table,
    metrics,
    predict,
    train,
    write_log,
    write_metrics,
)

# hand computation for y = [10, 20, 30], yhat = [12, 18, 33]
ORACLE = dict(
    r=0.970725343394151,
    r2=0.9423076923076923,
    mae=7 / 3,
    rae=7 / 60,
    mse=17 / 3,
    rse=17 / 1400,
    rmse=2.3804761428476167,
)


def test_metrics_hand_example():
    m = metrics([10.0, 20.0, 30.0], [12.0, 18.0, 33.0])
    for k, v in ORACLE.items():
        assert abs(getattr(m, k) - v) <= 1e-12, k
    assert m.n == 3


def test_metrics_perfect_and_offset():
    y = np.array([3.0, 7.0, 11.0, 2.0])
    m = metrics(y, y)
    assert (m.r, m.r2) == (1.0, 1.0)
    assert m.mae == m.rae == m.mse == m.rse == m.rmse == 0.0
    off = metrics(y, y + 5)
    assert off.r == pytest.approx(1.0, abs=1e-15) and off.mae == pytest.approx(5.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.5, 100), st.floats(-50, 150)), min_size=3, max_size=40),
       st.floats(0.01, 100.0))
def test_metric_identities(pairs, k):
    y = np.array([p[0] for p in pairs])
    yhat = np.array([p[1] for p in pairs])
    if np.ptp(y) < 1e-6 or np.ptp(yhat) < 1e-6:
        return
    m = metrics(y, yhat)
    assert -1.0 - 1e-12 <= m.r <= 1.0 + 1e-12
    assert abs(m.r2 - m.r**2) <= 1e-12
    assert abs(m.rmse**2 - m.mse) <= 1e-12 * max(1.0, m.mse)
    assert min(m.mae, m.rae, m.mse, m.rse, m.rmse) >= 0.0
    s = metrics(k * y, k * yhat)
    assert s.rae == pytest.approx(m.rae, rel=1e-10)
    assert s.rse == pytest.approx(m.rse, rel=1e-10)


def test_metrics_zero_variance_warns():
    with pytest.warns(UserWarning, match="correlation undefined"):
        m = metrics([5.0, 5.0, 5.0], [4.0, 6.0, 5.0])
    assert math.isnan(m.r) and math.isnan(m.r2)
    assert m.mae == pytest.approx(2 / 3)


def test_metrics_reject_bad_input():
    with pytest.raises(DataError):
        metrics([], [])
    with pytest.raises(DataError):
        metrics([1.0, 2.0], [1.0])


def test_metrics_outputs(tmp_path):
    m = metrics([10.0, 20.0, 30.0], [12.0, 18.0, 33.0])
    write_metrics([("vit", m)], tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "model,r,r2,mae,rae,mse,rse,rmse,n"
    assert float(rows[1].split(",")[5]) == 17 / 3
    assert "vit" in format_table([("vit", m)])


def test_train_config_validation():
    for kw in (dict(chip_size=4), dict(chip_size=11), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})


def _data(cfg, n, seed, chip=3):
    samples, chips = synth_generate(replace(cfg, chip_size=chip), n, RngStream(seed))
    return Dataset(samples, ChipBatch.from_chips(chips))


def _split(data, seed=0):
    parts = split_by_tiles(data.samples, TileGrid(), seed=seed).partition(data.samples)
    return tuple(data.subset(parts[k]) for k in ("train", "val", "test"))


def _run(tcfg, tr, va):
    mcfg = tcfg.model_config()
    return train(init(mcfg, RngStream(tcfg.seed, 0)), mcfg, tcfg, tr, va), mcfg


@pytest.mark.filterwarnings("ignore:zero-variance")
def test_overfits_single_sample(tiny_cfg):
    data = _data(SynthConfig(), 1, 3)
    empty = data.subset([])
    tcfg = TrainConfig(chip_size=3, epochs=300, batch_size=1, lr=3e-3, dropout=0.0, weight_decay=0.0,
                       patience=300, model=tiny_cfg)
    res, mcfg = _run(tcfg, data, empty)
    assert evaluate(res.params, mcfg, data).mse < 1e-4


def test_training_is_deterministic(tiny_cfg, tmp_path):
    tr, va, _ = _split(_data(SynthConfig(), 200, 1))
    tcfg = TrainConfig(chip_size=3, epochs=3, batch_size=32, model=tiny_cfg, seed=5)
    (a, _), (b, _) = _run(tcfg, tr, va), _run(tcfg, tr, va)
    assert a.log == b.log
    a.params.save(tmp_path / "a.spf")
    b.params.save(tmp_path / "b.spf")
    assert (tmp_path / "a.spf").read_bytes() == (tmp_path / "b.spf").read_bytes()
    write_log(a.log, tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().startswith("epoch,lr,train_loss,val_mse")


@pytest.mark.parametrize("kind", ["spatioformer", "vit", "cnn"])
def test_loss_drops_tenfold_on_noiseless_data(kind, tiny_cfg):
    cfg = SynthConfig(regions=1, noise=0.0)
    tr, va, _ = _split(_data(cfg, 400, 2))
    tcfg = TrainConfig(kind=kind, chip_size=3, epochs=25, batch_size=32, lr=3e-3, model=tiny_cfg)
    res, _ = _run(tcfg, tr, va)
    first = res.log[0]["train_loss"]
    best = min(h["train_loss"] for h in res.log)
    assert best * 10 <= first


def test_nan_loss_aborts_and_keeps_last_good_state(tiny_cfg):
    tr, va, _ = _split(_data(SynthConfig(), 200, 4))
    tcfg = TrainConfig(chip_size=3, epochs=2, batch_size=32, model=tiny_cfg)
    ok, mcfg = _run(tcfg, tr, va)
    bad = tr.subset(range(len(tr)))
    bad.y = bad.y.copy()
    bad.y[7] = np.inf
    with pytest.raises(TrainingAborted) as info:
        train(ok.params, mcfg, tcfg, bad, va)
    kept = info.value.result.params
    assert kept.all_finite()
    assert all(kept[k].values.tobytes() == ok.params[k].values.tobytes() for k in kept.names())


def test_leakage_checked_before_training(tiny_cfg):
    data = _data(SynthConfig(), 40, 6)
    tcfg = TrainConfig(chip_size=3, epochs=1, model=tiny_cfg)
    with pytest.raises(DataError, match="leaks"):
        _run(tcfg, data.subset(range(0, 30)), data.subset(range(0, 10)))


def test_empty_evaluation_rejected(sf3):
    params, cfg = sf3
    data = _data(SynthConfig(), 3, 0)
    with pytest.raises(DataError):
        evaluate(params, cfg, data.subset([]))


# medium geo-blind net on unit-scale reflectance, so the transformer blocks can mix pixels
ABLATION_MODEL = {"layers": 2, "heads": 4, "ffn_dim": 32, "head_hidden": 64, "reflectance_scale": 1.0}


@pytest.mark.slow
def test_ablation_neighbourhood_signal_prefers_3x3():
    cfg = SynthConfig(signal="variance", regions=1, noise=0.5, chip_size=3)
    tr, va, te = _split(_data(cfg, 1200, 7))
    tcfg = TrainConfig(kind="vit", epochs=30, batch_size=32, lr=3e-3, model=ABLATION_MODEL, seed=1)
    rows = dict(ablate_chip_size(tcfg, tr, va, te, sizes=(1, 3)))
    assert rows[3].mse < rows[1].mse


@pytest.mark.slow
def test_ablation_centre_signal_ties(tiny_cfg):
    cfg = SynthConfig(regions=1, noise=2.0, chip_size=3)
    tr, va, te = _split(_data(cfg, 2000, 7))
    tcfg = TrainConfig(kind="vit", epochs=40, batch_size=32, lr=3e-3, model=tiny_cfg, seed=1)
    rows = dict(ablate_chip_size(tcfg, tr, va, te, sizes=(1, 3)))
    # both sit near the noise floor (sigma^2 = 4)
    assert max(rows[1].mse, rows[3].mse) < 5.0
    assert abs(rows[3].mse - rows[1].mse) <= 0.1 * max(rows[1].mse, rows[3].mse)


@pytest.mark.slow
def test_two_region_benchmark_against_bayes_risk():
    cfg = SynthConfig(regions=2, noise=2.0, chip_size=3)
    tr, va, _ = _split(_data(cfg, 2000, 0))
    bayes = cfg.geo_blind_bayes_risk()
    val = {}
    for kind in ("spatioformer", "vit"):
        res, mcfg = _run(TrainConfig(kind=kind, chip_size=3, epochs=30), tr, va)
        val[kind] = (predict(res.params, mcfg, va) - va.y) ** 2
    assert val["spatioformer"].mean() < bayes
    # a few hundred validation samples carry sampling error larger than 5% of the bound
    se = val["vit"].std(ddof=1) / np.sqrt(len(va))
    assert val["vit"].mean() >= bayes - max(0.05 * bayes, 2 * se)
