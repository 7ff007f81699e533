"""Joint multi-vehicle forecaster: encoder, two self-attention layers,
predictor, decoder and the constrained mixture output map.

All functions accept arbitrary leading batch axes in front of the vehicle
axis, so a bucket of equal-size windows runs as one graph.  Attention only
ever mixes vehicles of the same window.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import ConfigError, DimensionError
from .forecast import MixtureForecast

RHO_LIMIT = 1.0 - 1e-6
ANCHORS = ("none", "last", "cv")
# history samples spanned by the velocity estimate of the cv anchor
ANCHOR_SPAN = 4


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 128
    n_heads: int = 8
    n_mix: int = 6
    n_pred: int = 25
    conv_kernel: int = 3
    decoder_hidden: int = 128
    sigma_min: float = 0.1
    # meters per network unit for inputs, means and deviations
    pos_scale: float = 1.0
    # lateral (y) override of pos_scale; None keeps the axes isotropic
    lat_scale: float | None = None
    layer_norm: bool = False
    # forecast means as offsets from: "none", the last observed position
    # ("last") or its constant-velocity extrapolation ("cv")
    anchor: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.d_feat % self.n_heads:
            raise ConfigError(f"d_feat={self.d_feat} is not divisible by n_heads={self.n_heads}")
        if self.n_mix < 1:
            raise ConfigError("n_mix must be at least 1")
        if self.sigma_min <= 0:
            raise ConfigError("sigma_min must be positive")
        if self.conv_kernel != 3:
            raise ConfigError("only kernel size 3 is supported")
        if self.pos_scale <= 0:
            raise ConfigError("pos_scale must be positive")
        if self.lat_scale is not None and self.lat_scale <= 0:
            raise ConfigError("lat_scale must be positive")
        if self.anchor not in ANCHORS:
            raise ConfigError(f"anchor must be one of {ANCHORS}, got {self.anchor!r}")

    @property
    def axis_scale(self) -> np.ndarray:
        """Meters per network unit along ``(x, y)``."""
        return np.array([self.pos_scale, self.pos_scale if self.lat_scale is None else self.lat_scale])

    @property
    def d_k(self) -> int:
        return self.d_feat // self.n_heads

    @classmethod
    def full(cls, **overrides) -> ModelConfig:
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        base = dict(d_feat=32, n_heads=4, n_mix=3, decoder_hidden=32, pos_scale=10.0, lat_scale=2.0, anchor="cv")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class MixtureOutput:
    """Graph-side forecast for training; see :class:`MixtureForecast`."""

    mean: Tensor
    sigma: Tensor
    rho: Tensor
    log_p: Tensor
    p: Tensor

    def to_forecast(self) -> MixtureForecast:
        return MixtureForecast(self.mean.data, self.sigma.data, self.rho.data, self.p.data)


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, gain: float = 1.0):
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _lstm_params(rng, d_in: int, d_h: int) -> dict[str, np.ndarray]:
    b = np.zeros(4 * d_h)
    b[d_h : 2 * d_h] = 1.0  # forget gate starts open
    return {
        "W": _glorot(rng, (d_in, 4 * d_h), d_in, d_h),
        "U": _glorot(rng, (d_h, 4 * d_h), d_h, d_h),
        "b": b,
    }


def _attention_params(rng, d: int, n_heads: int, d_k: int) -> dict[str, np.ndarray]:
    return {
        "Lq": _glorot(rng, (n_heads, d, d_k), d, d_k),
        "Lk": _glorot(rng, (n_heads, d, d_k), d, d_k),
        "Lv": _glorot(rng, (n_heads, d, d_k), d, d_k),
        "combine.W": _glorot(rng, (n_heads * d_k, d), n_heads * d_k, d),
        "combine.b": np.zeros(d),
    }


def init_params(config: ModelConfig, seed: int | None = None) -> ParameterSet:
    """Fresh parameters; drawn in a fixed order from ``seed`` (or config.seed)."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, dh, H, dk = config.d_feat, config.decoder_hidden, config.n_heads, config.d_k
    n_out = 6 * config.n_mix
    groups: list[tuple[str, dict[str, np.ndarray]]] = [
        ("encoder.conv", {"w": _glorot(rng, (3, 2, d), 3 * 2, d), "b": np.zeros(d)}),
        ("encoder.lstm", _lstm_params(rng, d, d)),
        ("attn1", _attention_params(rng, d, H, dk)),
        ("predictor.lstm", _lstm_params(rng, d, d)),
        ("attn2", _attention_params(rng, d, H, dk)),
        ("decoder.l1", {"W": _glorot(rng, (d, dh), d, dh), "b": np.zeros(dh)}),
        ("decoder.l2", {"W": _glorot(rng, (dh, dh), dh, dh), "b": np.zeros(dh)}),
        ("decoder.out", {"W": _glorot(rng, (dh, n_out), dh, n_out, gain=0.1), "b": np.zeros(n_out)}),
    ]
    params = ParameterSet()
    for prefix, group in groups:
        for name, value in group.items():
            params[f"{prefix}.{name}"] = value
    return params


def init_extension_params(config: ModelConfig, seed: int = 0) -> ParameterSet:
    """Extra key/value projections for attending to non-vehicle inputs."""
    rng = np.random.default_rng(seed)
    d, H, dk = config.d_feat, config.n_heads, config.d_k
    return ParameterSet({
        "Lk_ext": _glorot(rng, (H, d, dk), d, dk),
        "Lv_ext": _glorot(rng, (H, d, dk), d, dk),
    })


# ---------------------------------------------------------------------------
# blocks


def _layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean(ad.square(xc), axis=-1, keepdims=True)
    return ad.div(xc, ad.sqrt(ad.add(var, eps)))


def encode(history, params: ParameterSet, config: ModelConfig) -> Tensor:
    """``[..., n_veh, n_hist, 2]`` positions (m) -> ``[..., n_veh, d_feat]``."""
    x = history if isinstance(history, Tensor) else Tensor(np.asarray(history, dtype=np.float64))
    if x.shape[-1] != 2:
        raise DimensionError(f"history must end with a coordinate axis of size 2, got {x.shape}")
    if x.shape[-2] < 3:
        raise DimensionError("history needs at least 3 samples")
    x = ad.mul(x, Tensor(1.0 / config.axis_scale))
    conv = params.scope("encoder.conv")
    feats = ad.conv1d_k3(x, conv["w"], conv["b"])
    _, h, _ = ad.lstm_sequence(feats, params.scope("encoder.lstm"))
    return h


class AttentionLayer:
    """Parameter view for one multi-head self-attention layer."""

    def __init__(self, params: ParameterSet, prefix: str):
        scoped = params.scope(prefix)
        self.Lq, self.Lk, self.Lv = scoped["Lq"], scoped["Lk"], scoped["Lv"]
        self.W, self.b = scoped["combine.W"], scoped["combine.b"]

    @property
    def n_heads(self) -> int:
        return self.Lq.shape[0]

    @property
    def d_k(self) -> int:
        return self.Lq.shape[2]


def _heads(x: Tensor) -> Tensor:
    # [..., n, d] -> [..., 1, n, d] so per-head projections broadcast
    return ad.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])


def _attend(
    x: Tensor, layer: AttentionLayer, ext_k: Tensor | None = None, ext_v: Tensor | None = None
) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != layer.Lq.shape[1]:
        raise DimensionError(f"attention input {x.shape} does not match projections {layer.Lq.shape}")
    xh = _heads(x)
    q = ad.matmul(xh, layer.Lq)
    k = ad.matmul(xh, layer.Lk)
    v = ad.matmul(xh, layer.Lv)
    if ext_k is not None:
        k = ad.concat([k, ad.broadcast_to(ext_k, k.shape[:-2] + ext_k.shape[-2:])], axis=-2)
        v = ad.concat([v, ad.broadcast_to(ext_v, v.shape[:-2] + ext_v.shape[-2:])], axis=-2)
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(layer.d_k))
    att = ad.softmax(scores, axis=-1)
    heads = ad.matmul(att, v)  # [..., H, n, d_k]
    nd = heads.ndim
    merged = ad.transpose(heads, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    merged = ad.reshape(merged, merged.shape[:-2] + (layer.n_heads * layer.d_k,))
    out = ad.add(x, ad.add(ad.matmul(merged, layer.W), layer.b))
    return out, att


def self_attention(x: Tensor, layer: AttentionLayer) -> tuple[Tensor, Tensor]:
    """Residual multi-head self-attention over the vehicle axis (-2).

    Returns the updated features and attention ``[..., n_heads, n, n]``
    where entry ``(i, j)`` is the attention of vehicle i on vehicle j.
    """
    return _attend(x, layer)


def extended_attention(
    x: Tensor, layer: AttentionLayer, ext_encoded: Tensor, ext_params
) -> tuple[Tensor, Tensor]:
    """Self-attention whose keys/values are extended with external items.

    ``ext_encoded`` is ``[n_ext, d_feat]``; its projected keys and values
    are appended after the vehicles'.  Attention is ``[..., H, n, n + n_ext]``.
    """
    if ext_encoded.ndim != 2 or ext_encoded.shape[-1] != x.shape[-1]:
        raise DimensionError(f"external features {ext_encoded.shape} do not match input {x.shape}")
    if ext_encoded.shape[0] == 0:
        return _attend(x, layer)
    eh = _heads(ext_encoded)
    ext_k = ad.matmul(eh, ext_params["Lk_ext"])
    ext_v = ad.matmul(eh, ext_params["Lv_ext"])
    return _attend(x, layer, ext_k, ext_v)


def predict_unroll(z: Tensor, n_pred: int, params: ParameterSet) -> Tensor:
    """Tile ``z`` over ``n_pred`` steps and run the predictor LSTM."""
    if n_pred < 1:
        raise DimensionError("n_pred must be at least 1")
    seq = ad.repeat_new_axis(z, n_pred, axis=z.ndim - 1)
    out, _, _ = ad.lstm_sequence(seq, params.scope("predictor.lstm"))
    return out


def per_step_attention(seq: Tensor, layer: AttentionLayer) -> tuple[Tensor, Tensor]:
    """Self-attention over vehicles independently at each step.

    ``seq`` is ``[..., n_veh, n_pred, d]``; attention is
    ``[..., n_pred, H, n_veh, n_veh]``.
    """
    t = ad.swapaxes(seq, -2, -3)
    out, att = self_attention(t, layer)
    return ad.swapaxes(out, -2, -3), att


def decode(seq: Tensor, params: ParameterSet) -> Tensor:
    """Time-shared MLP to raw mixture coefficients ``[..., 6 * n_mix]``."""
    h = seq
    for name in ("decoder.l1", "decoder.l2"):
        layer = params.scope(name)
        h = ad.relu(ad.add(ad.matmul(h, layer["W"]), layer["b"]))
    out = params.scope("decoder.out")
    return ad.add(ad.matmul(h, out["W"]), out["b"])


def output_activation(o: Tensor, n_mix: int, sigma_min: float = 0.1, pos_scale=1.0) -> MixtureOutput:
    """Map raw coefficients to a valid mixture.

    The last axis holds ``n_mix`` blocks of six values ``(o1..o6)``:
    means ``(o1, o2)``, deviations ``exp(o/2)`` floored at ``sigma_min``,
    correlation ``tanh(o5)`` and weights softmax of ``o6`` over components.
    """
    if o.shape[-1] != 6 * n_mix:
        raise DimensionError(f"raw output last dim {o.shape[-1]} != 6 * n_mix = {6 * n_mix}")
    o6 = ad.reshape(o, o.shape[:-1] + (n_mix, 6))
    mean = ad.getitem(o6, (Ellipsis, slice(0, 2)))
    sigma = ad.exp(ad.scale(ad.getitem(o6, (Ellipsis, slice(2, 4))), 0.5))
    scale = np.broadcast_to(np.asarray(pos_scale, dtype=np.float64), (2,))
    if np.any(scale != 1.0):
        mean = ad.mul(mean, Tensor(scale))
        sigma = ad.mul(sigma, Tensor(scale))
    sigma = ad.clip_min(sigma, sigma_min)
    rho = ad.clip(ad.tanh(ad.getitem(o6, (Ellipsis, 4))), -RHO_LIMIT, RHO_LIMIT)
    logits = ad.getitem(o6, (Ellipsis, 5))
    log_p = ad.log_softmax(logits, axis=-1)
    p = ad.softmax(logits, axis=-1)
    return MixtureOutput(mean, sigma, rho, log_p, p)


def _anchor(history: Tensor, n_pred: int, kind: str) -> Tensor:
    """Per-vehicle reference track ``[..., n_pred, 1, 2]`` for the means."""
    n_hist = history.shape[-2]
    last = ad.getitem(history, (Ellipsis, slice(n_hist - 1, n_hist), slice(None)))  # [..., 1, 2]
    if kind == "cv" and n_hist > 1:
        span = min(ANCHOR_SPAN, n_hist - 1)
        first = ad.getitem(history, (Ellipsis, slice(n_hist - 1 - span, n_hist - span), slice(None)))
        vel = ad.scale(ad.sub(last, first), 1.0 / span)
        ramp = Tensor(np.arange(1, n_pred + 1, dtype=np.float64)[:, None])
        track = ad.add(last, ad.mul(vel, ramp))  # [..., n_pred, 2]
    else:
        track = ad.broadcast_to(last, last.shape[:-2] + (n_pred, 2))
    return ad.reshape(track, track.shape[:-1] + (1, 2))


@dataclass
class ForwardResult:
    mixture: MixtureOutput
    attention1: Tensor  # [..., H, n, n]
    attention2: Tensor  # [..., n_pred, H, n, n]


def forward_full(history, params: ParameterSet, config: ModelConfig, n_pred: int | None = None) -> ForwardResult:
    n_pred = config.n_pred if n_pred is None else n_pred
    z = encode(history, params, config)
    if config.layer_norm:
        z = _layer_norm(z)
    z, att1 = self_attention(z, AttentionLayer(params, "attn1"))
    seq = predict_unroll(z, n_pred, params)
    if config.layer_norm:
        seq = _layer_norm(seq)
    seq, att2 = per_step_attention(seq, AttentionLayer(params, "attn2"))
    o = decode(seq, params)
    mix = output_activation(o, config.n_mix, config.sigma_min, config.axis_scale)
    if config.anchor != "none":
        mix.mean = ad.add(mix.mean, _anchor(ad.as_tensor(history), n_pred, config.anchor))
    return ForwardResult(mix, att1, att2)


def forward(history, params: ParameterSet, config: ModelConfig, n_pred: int | None = None) -> MixtureOutput:
    """Joint forecast for every vehicle of the window(s) in ``history``."""
    return forward_full(history, params, config, n_pred).mixture


def predict(history: np.ndarray, params: ParameterSet, config: ModelConfig, n_pred: int | None = None) -> MixtureForecast:
    """Numpy convenience wrapper around :func:`forward`."""
    return forward(np.asarray(history, dtype=np.float64), params, config, n_pred).to_forecast()


# ---------------------------------------------------------------------------
# checkpoints

MANIFEST_NAME = "model.json"
BLOB_NAME = "model.bin"


def save_checkpoint(directory: str | Path, params: ParameterSet, config: ModelConfig) -> Path:
    """Write ``model.json`` + ``model.bin`` (little-endian float64, manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in params:
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "sammp-checkpoint-1", "dtype": "<f8", "config": config.to_dict(), "parameters": entries}
    (directory / BLOB_NAME).write_bytes(b"".join(chunks))
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[ParameterSet, ModelConfig]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    blob = (directory / BLOB_NAME).read_bytes()
    params = ParameterSet()
    for e in manifest["parameters"]:
        n = e["nbytes"] // 8
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = arr.astype(np.float64)
    return params, ModelConfig.from_dict(manifest["config"])
