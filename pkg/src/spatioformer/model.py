"""Spatioformer regressor and the ViT / CNN baselines.

Spatioformer: every pixel of a chip is linearly embedded, the embedding is
shifted by ``lambda * g(lon, lat)`` of its own centre coordinate, a learnable
geolocation-independent token is prepended, and the sequence runs through
pre-norm transformer blocks. All output tokens are flattened into a
1024-unit fully connected head. The ViT baseline is the same network without
the geo shift and without the extra token.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .data import ChipBatch, ImageChip
from .errors import ConfigError, DataError
from .geoenc import GeoEncoderConfig, encode_many
from .numerics import RngStream, Tensor

KINDS = ("spatioformer", "vit", "cnn")


@dataclass
class SpatioformerConfig:
    kind: str = "spatioformer"
    chip_size: int = 9
    bands: int = 6
    embed_dim: int = 16
    layers: int = 3
    heads: int = 8
    ffn_dim: int = 64
    head_hidden: int = 1024
    dropout: float = 0.1
    lambda_init: float = 1e4
    # reflectance in [0, 1] is multiplied by this before embedding (integer-scaled surface reflectance)
    reflectance_scale: float = 1e4
    cnn_filters: int = 8
    cnn_layers: int = 3
    ln_eps: float = 1e-5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    geo: GeoEncoderConfig = field(default_factory=GeoEncoderConfig)

    def __post_init__(self):
        if isinstance(self.geo, dict):
            self.geo = GeoEncoderConfig(**self.geo)
        if self.kind not in KINDS:
            raise ConfigError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if not 1 <= self.chip_size <= 9:
            raise ConfigError(f"chip_size must be within 1..9, got {self.chip_size}")
        if self.kind == "cnn" and self.chip_size < 3:
            raise ConfigError("the CNN baseline needs chips of at least 3x3")
        if self.embed_dim != self.geo.d:
            raise ConfigError(f"embed_dim ({self.embed_dim}) must equal geo token dimension ({self.geo.d})")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim ({self.embed_dim}) must be divisible by heads ({self.heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def pixels(self) -> int:
        return self.chip_size * self.chip_size

    @property
    def tokens(self) -> int:
        return self.pixels + (1 if self.kind == "spatioformer" else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "SpatioformerConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelParams:
    """Learnable tensors plus non-learnable buffers (batch-norm running stats)."""

    def __init__(self, tensors: dict, buffers: dict | None = None):
        self.tensors = tensors
        self.buffers = buffers or {}

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.values)) for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(t.values.copy(), requires_grad=True) for k, t in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def arrays(self) -> dict:
        out = {f"param/{k}": t.values for k, t in self.tensors.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def save(self, path, cfg: SpatioformerConfig | None = None):
        nx.save_checkpoint(path, self.arrays(), {"config": cfg.to_dict()} if cfg is not None else None)

    @classmethod
    def load(cls, path) -> tuple["ModelParams", SpatioformerConfig | None]:
        arrays, extra = nx.load_checkpoint(path)
        tensors = {k[6:]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("param/")}
        buffers = {k[7:]: v for k, v in arrays.items() if k.startswith("buffer/")}
        cfg = SpatioformerConfig.from_dict(extra["config"]) if "config" in extra else None
        return cls(tensors, buffers), cfg


# --------------------------------------------------------------------------
# initialisation


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init(cfg: SpatioformerConfig, rng: RngStream) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, unit/zero norms, lambda = lambda_init."""
    D, F, H = cfg.embed_dim, cfg.ffn_dim, cfg.head_hidden
    t: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    if cfg.kind == "cnn":
        c_in = cfg.bands
        for i in range(cfg.cnn_layers):
            t[f"conv{i}.w"] = _uniform(rng, (cfg.cnn_filters, c_in, 3, 3), c_in * 9)
            t[f"conv{i}.b"] = np.zeros(cfg.cnn_filters)
            t[f"bn{i}.g"] = np.ones(cfg.cnn_filters)
            t[f"bn{i}.b"] = np.zeros(cfg.cnn_filters)
            buffers[f"bn{i}.mean"] = np.zeros(cfg.cnn_filters)
            buffers[f"bn{i}.var"] = np.ones(cfg.cnn_filters)
            c_in = cfg.cnn_filters
        flat = cfg.cnn_filters * cfg.pixels
    else:
        t["embed.w"] = _uniform(rng, (cfg.bands, D), cfg.bands)
        if cfg.kind == "spatioformer":
            t["geo.lambda"] = np.array([cfg.lambda_init])
            t["geo.token"] = rng.uniform(-0.02, 0.02, D)
        for i in range(cfg.layers):
            p = f"block{i}."
            t[p + "ln1.g"], t[p + "ln1.b"] = np.ones(D), np.zeros(D)
            for m in ("wq", "wk", "wv", "wo"):
                t[p + "attn." + m] = _uniform(rng, (D, D), D)
            t[p + "attn.bo"] = np.zeros(D)
            t[p + "ln2.g"], t[p + "ln2.b"] = np.ones(D), np.zeros(D)
            t[p + "ffn.w1"] = _uniform(rng, (D, F), D)
            t[p + "ffn.b1"] = np.zeros(F)
            t[p + "ffn.w2"] = _uniform(rng, (F, D), F)
            t[p + "ffn.b2"] = np.zeros(D)
        t["final_ln.g"], t["final_ln.b"] = np.ones(D), np.zeros(D)
        flat = cfg.tokens * D
    t["head.w1"] = _uniform(rng, (flat, H), flat)
    t["head.b1"] = np.zeros(H)
    t["head.w2"] = _uniform(rng, (H, 1), H)
    t["head.b2"] = np.zeros(1)
    return ModelParams({k: Tensor(v, requires_grad=True) for k, v in t.items()}, buffers)


def vit_params_from_spatioformer(params: ModelParams, cfg: SpatioformerConfig) -> tuple[ModelParams, SpatioformerConfig]:
    """Drop lambda and the extra token, and the head rows that read the token."""
    vcfg = replace(cfg, kind="vit")
    D = cfg.embed_dim
    tensors = {}
    for k, v in params.tensors.items():
        if k.startswith("geo."):
            continue
        vals = v.values[D:] if k == "head.w1" else v.values
        tensors[k] = Tensor(vals.copy(), requires_grad=True)
    return ModelParams(tensors), vcfg


# --------------------------------------------------------------------------
# forward passes


def _as_batch(chips) -> ChipBatch:
    if isinstance(chips, ChipBatch):
        return chips
    if isinstance(chips, ImageChip):
        return ChipBatch.from_chips([chips])
    return ChipBatch.from_chips(chips)


def _check_batch(cfg: SpatioformerConfig, batch: ChipBatch):
    r = batch.reflectance
    if r.ndim != 4 or r.shape[1:] != (cfg.chip_size, cfg.chip_size, cfg.bands):
        raise DataError(f"chip batch shape {r.shape[1:]} does not match model ({cfg.chip_size}, {cfg.chip_size}, {cfg.bands})")
    if not (np.all(np.isfinite(batch.center_lon)) and np.all(np.isfinite(batch.center_lat))):
        raise DataError("chip centre coordinates must be finite")


def geo_tokens(cfg: SpatioformerConfig, batch: ChipBatch) -> np.ndarray:
    """(N, pixels, d) geolocation tokens of each pixel centre."""
    lon, lat = batch.pixel_coords()
    return encode_many(cfg.geo, lon, lat).reshape(len(batch), cfg.pixels, cfg.geo.d)


def _transformer(params, cfg, batch, *, use_geo, use_token, drop, rng, trace=None):
    N, D, Hh = len(batch), cfg.embed_dim, cfg.heads
    dk = D // Hh
    x = Tensor(batch.reflectance.reshape(N, cfg.pixels, cfg.bands) * cfg.reflectance_scale)
    h = x @ params["embed.w"]
    geo_part = None
    if use_geo:
        geo_part = params["geo.lambda"] * Tensor(geo_tokens(cfg, batch))
        h = h + geo_part
    if use_token:
        tok = nx.broadcast_to(nx.reshape(params["geo.token"], (1, 1, D)), (N, 1, D))
        h = nx.concat([tok, h], axis=1)
    T = h.shape[1]
    training = drop > 0.0
    scale = 1.0 / math.sqrt(dk)
    for i in range(cfg.layers):
        p = f"block{i}."
        if trace is not None:
            trace.setdefault("h_in", []).append(h.values.copy())
        a = nx.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)

        def heads(w):
            return nx.swapaxes(nx.reshape(a @ params[p + "attn." + w], (N, T, Hh, dk)), 1, 2)

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        logits = (q @ nx.swapaxes(k, 2, 3)) * scale
        att = nx.softmax_rows(logits)
        if trace is not None:
            trace.setdefault("logits", []).append(logits.values.copy())
            trace.setdefault("attention", []).append(att.values.copy())
        o = nx.reshape(nx.swapaxes(att @ v, 1, 2), (N, T, D)) @ params[p + "attn.wo"] + params[p + "attn.bo"]
        h = h + nx.dropout(o, drop, rng, training)
        f = nx.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
        f = nx.gelu(f @ params[p + "ffn.w1"] + params[p + "ffn.b1"]) @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        h = h + nx.dropout(f, drop, rng, training)
    h = nx.layer_norm(h, params["final_ln.g"], params["final_ln.b"], cfg.ln_eps)
    return _head(params, nx.reshape(h, (N, T * D)), drop, rng)


def _head(params, flat, drop, rng):
    z = nx.relu(flat @ params["head.w1"] + params["head.b1"])
    z = nx.dropout(z, drop, rng, drop > 0.0)
    out = z @ params["head.w2"] + params["head.b2"]
    return nx.reshape(out, (out.shape[0],))


def _cnn(params, cfg, batch, *, drop, rng, bn_training, update_stats):
    N = len(batch)
    h = Tensor(batch.reflectance.transpose(0, 3, 1, 2) * cfg.reflectance_scale)
    for i in range(cfg.cnn_layers):
        h = nx.relu(nx.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"]))
        g = nx.reshape(params[f"bn{i}.g"], (1, -1, 1, 1))
        b = nx.reshape(params[f"bn{i}.b"], (1, -1, 1, 1))
        if bn_training:
            mu = h.mean(axis=(0, 2, 3), keepdims=True)
            hc = h - mu
            var = (hc * hc).mean(axis=(0, 2, 3), keepdims=True)
            if update_stats:
                m = cfg.bn_momentum
                count = N * h.shape[2] * h.shape[3]
                unbiased = var.values.reshape(-1) * count / max(count - 1, 1)
                params.buffers[f"bn{i}.mean"] = (1 - m) * params.buffers[f"bn{i}.mean"] + m * mu.values.reshape(-1)
                params.buffers[f"bn{i}.var"] = (1 - m) * params.buffers[f"bn{i}.var"] + m * unbiased
            h = hc * nx.power(var + cfg.bn_eps, -0.5) * g + b
        else:
            mean = params.buffers[f"bn{i}.mean"].reshape(1, -1, 1, 1)
            inv = (params.buffers[f"bn{i}.var"].reshape(1, -1, 1, 1) + cfg.bn_eps) ** -0.5
            h = (h - mean) * inv * g + b
    return _head(params, nx.reshape(h, (N, -1)), drop, rng)


def _drop_rate(cfg, training, dropout_rate):
    if dropout_rate is not None:
        return dropout_rate
    return cfg.dropout if training else 0.0


def predict_batch(params, cfg, chips, *, training=False, rng=None, dropout_rate=None, update_stats=None) -> Tensor:
    """Batched forward of whichever model ``cfg.kind`` names; returns an (N,) Tensor.

    ``training`` switches dropout (at ``cfg.dropout``) and batch-norm batch
    statistics on. ``dropout_rate`` overrides the dropout rate independently
    of batch-norm mode, which is how MC dropout runs.
    """
    batch = _as_batch(chips)
    _check_batch(cfg, batch)
    drop = _drop_rate(cfg, training, dropout_rate)
    if cfg.kind == "cnn":
        return _cnn(params, cfg, batch, drop=drop, rng=rng, bn_training=training, update_stats=training if update_stats is None else update_stats)
    geo = cfg.kind == "spatioformer"
    return _transformer(params, cfg, batch, use_geo=geo, use_token=geo, drop=drop, rng=rng)


def forward(params, cfg, chip, training=False, rng=None) -> float:
    """Predicted richness (species per 400 m^2) of one chip with the Spatioformer."""
    if cfg.kind != "spatioformer":
        raise ConfigError(f"forward() runs the spatioformer; config kind is {cfg.kind!r}")
    return float(predict_batch(params, cfg, chip, training=training, rng=rng).values[0])


def forward_vit(params, cfg, chip, training=False, rng=None) -> float:
    if cfg.kind != "vit":
        raise ConfigError(f"forward_vit() needs a vit config, got {cfg.kind!r}")
    return float(predict_batch(params, cfg, chip, training=training, rng=rng).values[0])


def forward_cnn(params, cfg, chip, training=False, rng=None) -> float:
    if cfg.kind != "cnn":
        raise ConfigError(f"forward_cnn() needs a cnn config, got {cfg.kind!r}")
    return float(predict_batch(params, cfg, chip, training=training, rng=rng, update_stats=False).values[0])


def forward_trace(params, cfg, chips, *, use_geo=None, use_token=None) -> tuple[np.ndarray, dict]:
    """Inference forward of a transformer model recording per-layer inputs, logits and attention."""
    batch = _as_batch(chips)
    _check_batch(cfg, batch)
    if cfg.kind == "cnn":
        raise ConfigError("attention traces exist only for transformer models")
    geo = cfg.kind == "spatioformer"
    trace: dict = {}
    out = _transformer(
        params, cfg, batch,
        use_geo=geo if use_geo is None else use_geo,
        use_token=geo if use_token is None else use_token,
        drop=0.0, rng=None, trace=trace,
    )
    return out.values, trace


# --------------------------------------------------------------------------
# attention decomposition


@dataclass
class AttentionDecomposition:
    term_pp: np.ndarray
    term_pg: np.ndarray
    term_gp: np.ndarray
    term_gg: np.ndarray
    full: np.ndarray

    def total(self) -> np.ndarray:
        return self.term_pp + self.term_pg + self.term_gp + self.term_gg


def attention_decompose(params, cfg, chip, layer: int, head: int) -> AttentionDecomposition:
    """Split the pre-softmax logits of one head into pixel/geo cross terms.

    The residual stream entering ``layer`` is ``h = x + lambda*G`` where
    ``lambda*G`` is the geo shift carried along the skip path (zero on the
    geolocation-independent token) and ``x`` is everything else. Layer norm
    is affine once its per-token mean and scale are fixed, so the normalised
    input splits as ``xhat + ghat`` with the norm's bias kept on ``xhat``.
    The four products of (xhat, ghat) through W^Q and W^K sum to the logits
    the real forward pass computes.
    """
    if cfg.kind != "spatioformer":
        raise ConfigError("attention_decompose() needs a spatioformer config")
    if not 0 <= layer < cfg.layers:
        raise IndexError(f"layer {layer} out of range 0..{cfg.layers - 1}")
    if not 0 <= head < cfg.heads:
        raise IndexError(f"head {head} out of range 0..{cfg.heads - 1}")
    batch = _as_batch(chip)
    if len(batch) != 1:
        raise DataError("attention_decompose() works on a single chip")
    _, trace = forward_trace(params, cfg, batch)
    h = trace["h_in"][layer][0]
    lam = params["geo.lambda"].values[0]
    G = np.zeros_like(h)
    G[1:] = lam * geo_tokens(cfg, batch)[0]
    x = h - G
    p = f"block{layer}."
    gain, bias = params[p + "ln1.g"].values, params[p + "ln1.b"].values
    mu = h.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((h - mu) ** 2).mean(axis=-1, keepdims=True) + cfg.ln_eps)
    xhat = gain * (x - x.mean(axis=-1, keepdims=True)) / sigma + bias
    ghat = gain * (G - G.mean(axis=-1, keepdims=True)) / sigma
    dk = cfg.embed_dim // cfg.heads
    cols = slice(head * dk, (head + 1) * dk)
    wq = params[p + "attn.wq"].values[:, cols]
    wk = params[p + "attn.wk"].values[:, cols]
    s = 1.0 / math.sqrt(dk)
    qx, qg, kx, kg = xhat @ wq, ghat @ wq, xhat @ wk, ghat @ wk
    return AttentionDecomposition(
        term_pp=s * qx @ kx.T,
        term_pg=s * qx @ kg.T,
        term_gp=s * qg @ kx.T,
        term_gg=s * qg @ kg.T,
        full=trace["logits"][layer][0, head],
    )
