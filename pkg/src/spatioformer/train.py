"""Training loop, the seven-metric evaluation suite and the chip-size ablation."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import numerics as nx
from .data import ChipBatch, TileGrid, check_no_leakage
from .errors import ConfigError, DataError, NumericError
from .model import ModelParams, SpatioformerConfig, init, predict_batch
from .numerics import AdamState, LrSchedule, RngStream

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    samples: list
    chips: ChipBatch
    y: np.ndarray = None

    def __post_init__(self):
        if self.y is None:
            self.y = np.array([s.richness for s in self.samples], dtype=np.float64)
        if len(self.samples) != len(self.chips) or len(self.y) != len(self.chips):
            raise DataError("dataset samples, chips and targets differ in length")

    def __len__(self):
        return len(self.samples)

    def crop(self, size: int) -> "Dataset":
        return Dataset(self.samples, self.chips.crop(size), self.y) if size != self.chips.size else self

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset([self.samples[i] for i in idx], self.chips.subset(idx), self.y[idx])


@dataclass
class TrainConfig:
    kind: str = "spatioformer"
    chip_size: int = 9
    epochs: int = 200
    patience: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    min_lr: float = 0.0
    dropout: float = 0.1
    seed: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.chip_size % 2 == 0 or not 1 <= self.chip_size <= 9:
            raise ConfigError(f"chip_size must be odd within 1..9, got {self.chip_size}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("need batch_size >= 1, epochs >= 0 and patience >= 1")

    def model_config(self) -> SpatioformerConfig:
        return SpatioformerConfig.from_dict({**self.model, "kind": self.kind, "chip_size": self.chip_size, "dropout": self.dropout})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingAborted(NumericError):
    """Raised on a non-finite loss; ``result`` holds the last good state."""

    def __init__(self, msg, result):
        super().__init__(msg)
        self.result = result


@dataclass
class TrainResult:
    params: ModelParams
    log: list
    best_epoch: int
    best_val: float


def _predict(params, cfg, chips: ChipBatch, batch=512) -> np.ndarray:
    out = [predict_batch(params, cfg, chips.subset(slice(i, i + batch))).values for i in range(0, len(chips), batch)]
    return np.concatenate(out) if out else np.zeros(0)


def predict(params, cfg, data: Dataset) -> np.ndarray:
    return _predict(params, cfg, data.chips.crop(cfg.chip_size))


def train(params: ModelParams, cfg: SpatioformerConfig, tcfg: TrainConfig, train_set: Dataset, val_set: Dataset,
          grid: TileGrid = TileGrid()) -> TrainResult:
    """Minimise MSE with Adam under warmup + cosine annealing; keep the best-on-validation state."""
    if len(train_set) == 0:
        raise DataError("empty training set")
    check_no_leakage(grid, train=train_set.samples, val=val_set.samples)
    train_set = train_set.crop(cfg.chip_size)
    val_set = val_set.crop(cfg.chip_size)
    params = params.copy()
    n = len(train_set)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    sched = LrSchedule.for_run(tcfg.lr, max(1, tcfg.epochs * steps_per_epoch), tcfg.warmup_frac, tcfg.min_lr)
    adam = AdamState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    shuffle_rng = RngStream(tcfg.seed, 1)
    drop_rng = RngStream(tcfg.seed, 2)

    def val_mse(p):
        if len(val_set) == 0:
            return float("nan")
        return float(np.mean((_predict(p, cfg, val_set.chips) - val_set.y) ** 2))

    init_train = float(np.mean((_predict(params, cfg, train_set.chips) - train_set.y) ** 2))
    best_val = val_mse(params)
    best = params.copy()
    best_epoch = 0
    history = [{"epoch": 0, "lr": 0.0, "train_loss": init_train, "val_mse": best_val}]
    step = 0
    stale = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            adam.lr = nx.lr_at(sched, step)
            params.zero_grad()
            try:
                out = predict_batch(params, cfg, train_set.chips.subset(idx), training=True, rng=drop_rng)
                loss = nx.mse(out, train_set.y[idx])
                if not math.isfinite(loss.item()):
                    raise NumericError("non-finite loss")
                loss.backward()
                nx.adam_step(params.tensors, params.grads(), adam)
            except NumericError as exc:
                res = TrainResult(best, history, best_epoch, best_val)
                raise TrainingAborted(f"training aborted at epoch {epoch}, step {step}: {exc}", res) from exc
            total += loss.item() * len(idx)
            step += 1
        v = val_mse(params)
        history.append({"epoch": epoch, "lr": adam.lr, "train_loss": total / n, "val_mse": v})
        log.info("epoch %d train %.4f val %.4f", epoch, total / n, v)
        if not params.all_finite():
            raise TrainingAborted(f"non-finite parameters after epoch {epoch}", TrainResult(best, history, best_epoch, best_val))
        if math.isnan(best_val) or v < best_val or (math.isnan(v) and epoch == tcfg.epochs):
            best_val, best, best_epoch, stale = v, params.copy(), epoch, 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    if len(val_set) == 0:
        best, best_epoch = params, history[-1]["epoch"]
    return TrainResult(best, history, best_epoch, best_val)


def write_log(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "val_mse"])
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(v)) if k != "epoch" else v for k, v in row.items()})


# --------------------------------------------------------------------------
# metrics

METRIC_NAMES = ("r", "r2", "mae", "rae", "mse", "rse", "rmse")


@dataclass
class MetricsReport:
    r: float
    r2: float
    mae: float
    rae: float
    mse: float
    rse: float
    rmse: float
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


def metrics(y, yhat) -> MetricsReport:
    """Seven-metric suite. RAE and RSE divide by the raw magnitudes sum|y| and sum(y^2)."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.size == 0 or y.shape != yhat.shape:
        raise DataError("metrics need non-empty, equally shaped targets and predictions")
    e = yhat - y
    yc, pc = y - y.mean(), yhat - yhat.mean()
    denom = math.sqrt(float(yc @ yc) * float(pc @ pc))
    if denom == 0.0:
        warnings.warn("zero-variance targets or predictions: correlation undefined", stacklevel=2)
        r = float("nan")
    else:
        r = float(yc @ pc) / denom
    mse = float(np.mean(e * e))
    return MetricsReport(
        r=r,
        r2=r * r,
        mae=float(np.mean(np.abs(e))),
        rae=float(np.sum(np.abs(e)) / np.sum(np.abs(y))),
        mse=mse,
        rse=float(np.sum(e * e) / np.sum(y * y)),
        rmse=math.sqrt(mse),
        n=int(y.size),
    )


def evaluate(params, cfg, test_set: Dataset) -> MetricsReport:
    if len(test_set) == 0:
        raise DataError("cannot evaluate on an empty test set")
    return metrics(test_set.y, predict(params, cfg, test_set))


def write_metrics(rows, path, key="model") -> None:
    """``rows`` is a list of (label, MetricsReport)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([key, *METRIC_NAMES, "n"])
        for label, m in rows:
            w.writerow([label, *(repr(getattr(m, k)) for k in METRIC_NAMES), m.n])


def format_table(rows, key="model") -> str:
    labels = [str(label) for label, _ in rows]
    width = max([len(key)] + [len(s) for s in labels])
    lines = [f"{key:<{width}} " + " ".join(f"{k:>10}" for k in METRIC_NAMES)]
    for label, m in zip(labels, (m for _, m in rows)):
        lines.append(f"{label:<{width}} " + " ".join(f"{getattr(m, k):>10.4f}" for k in METRIC_NAMES))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# ablation


def ablate_chip_size(template: TrainConfig, train_set: Dataset, val_set: Dataset, test_set: Dataset,
                     sizes=(1, 3, 5, 7, 9), grid: TileGrid = TileGrid()) -> list:
    """Train and evaluate one model per centre-crop size; returns [(size, MetricsReport)]."""
    rows = []
    for size in sizes:
        tcfg = replace(template, chip_size=size)
        mcfg = tcfg.model_config()
        params = init(mcfg, RngStream(tcfg.seed, 0))
        res = train(params, mcfg, tcfg, train_set, val_set, grid)
        rows.append((size, evaluate(res.params, mcfg, test_set.crop(size))))
        log.info("chip %dx%d: %s", size, size, rows[-1][1])
    return rows
