"""
The peak-decomposed forecaster and its ablation variants.

Data flow for one batch (``B`` series, ``T`` creation times, ``H`` horizons,
``Q`` quantiles)::

    past [B,P,T] --forward_fill?--> conv stack --> e_hist [B,T,E]
    static [B,S] --> MLP --> e_static
    future [B,F,T,H] --> MLP --> f_enc [B,T,H,50]
    (e_hist, e_static, f_enc) --> horizon-agnostic MLP --> per-horizon heads --> base [B,T,H,Q]
    (e_hist, raw past, future, peak mask) --> peak attention --> delta [B,T,H,Q]
    prediction = base + delta          (delta only for attention variants)

Predictions live in scaled, per-period units (demand / series scale / span).
``forecast`` converts them back to demand and sorts the quantile axis.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ModelConfig, model_config_from_dict, model_config_to_dict
from .data import SampleBatch, SeriesRecord, forward_fill, make_batch
from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import (
    Tensor, broadcast_to, concat, conv1d_causal, gather_time, matmul, relu, softmax_masked,
)


class VariantFlag(str, enum.Enum):
    ORIGINAL = "original"
    MASKED_CONV = "masked_conv"
    PEAK_ATTENTION = "peak_attention"
    FULL = "full"

    @property
    def masked_conv(self) -> bool:
        return self in (VariantFlag.MASKED_CONV, VariantFlag.FULL)

    @property
    def peak_attention(self) -> bool:
        return self in (VariantFlag.PEAK_ATTENTION, VariantFlag.FULL)

    @classmethod
    def parse(cls, value) -> "VariantFlag":
        try:
            return cls(value.value if isinstance(value, VariantFlag) else str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown variant {value!r}; expected one of "
                              f"{[v.value for v in cls]}") from None


@dataclass
class ForecastGrid:
    """Quantile forecasts ``values[i, t, h, q]`` in demand units."""

    series_ids: list[str]
    values: np.ndarray
    quantiles: tuple[float, ...]
    horizons: tuple[tuple[int, int], ...]
    offset: np.ndarray

    def quantile_index(self, q: float) -> int:
        for i, x in enumerate(self.quantiles):
            if abs(x - q) < 1e-12:
                return i
        raise KeyError(f"quantile {q} not in grid {self.quantiles}")

    def __getitem__(self, q: float) -> np.ndarray:
        return self.values[..., self.quantile_index(q)]


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def dense(x: Tensor, params: dict[str, Tensor], name: str, act: bool = True) -> Tensor:
    out = matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]
    return relu(out) if act else out


def mlp(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    """Hidden ReLU layer followed by a linear projection."""
    return dense(dense(x, params, f"{name}.hidden"), params, f"{name}.out", act=False)


def encode_history(past: Tensor | np.ndarray, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Dilated causal conv stack: ``[B, P, T] -> [B, T, E]``.

    ReLU between layers, none after the last one.
    """
    x = past if isinstance(past, Tensor) else Tensor(past)
    if x.ndim != 3 or x.shape[1] != config.n_past:
        raise ShapeError(f"encode_history: expected [B, {config.n_past}, T], got {list(x.shape)}")
    for i, d in enumerate(config.dilations):
        x = conv1d_causal(x, params[f"conv.{i}.weight"], d) + params[f"conv.{i}.bias"]
        if i < config.conv_layers - 1:
            x = relu(x)
    return x.transpose(0, 2, 1)


def encode_static(static: Tensor | np.ndarray, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    x = static if isinstance(static, Tensor) else Tensor(static)
    if x.shape[-1] != config.n_static:
        raise ShapeError(f"encode_static: expected {config.n_static} features, got {x.shape[-1]}")
    return dense(x, params, "static")


def _future_inputs(future: np.ndarray) -> np.ndarray:
    """``[B, F, T, H] -> [B, T, H, F]``."""
    return np.ascontiguousarray(future.transpose(0, 2, 3, 1))


def decode_baseline(e_hist: Tensor, e_static: Tensor, future: np.ndarray,
                    params: dict[str, Tensor], config: ModelConfig,
                    extra_context: Tensor | None = None) -> Tensor:
    """Horizon-agnostic MLP then one small MLP head per horizon -> ``[B, T, H, Q]``."""
    b, t, _ = e_hist.shape
    xf = _future_inputs(future)
    h = xf.shape[2]
    if xf.shape[:2] != (b, t) or h != len(config.horizons) or xf.shape[3] != config.n_future:
        raise ShapeError(f"decode_baseline: future {list(future.shape)} does not match "
                         f"history {list(e_hist.shape)} / config")
    f_enc = dense(Tensor(xf), params, "future")                       # [B,T,H,Wf]
    s = broadcast_to(e_static.reshape(b, 1, -1), (b, t, e_static.shape[-1]))
    parts = [e_hist, s, f_enc.reshape(b, t, h * config.future_width)]
    if extra_context is not None:
        parts.append(extra_context)
    ctx = dense(concat(parts, axis=-1), params, "agnostic")          # [B,T,Na]
    ctx_h = broadcast_to(ctx.reshape(b, t, 1, -1), (b, t, h, config.agnostic_width))
    z = concat([ctx_h, f_enc], axis=-1).reshape(b, t, h, 1, -1)      # [B,T,H,1,in]
    z = relu(matmul(z, params["specific.hidden.weight"]) + params["specific.hidden.bias"])
    out = matmul(z, params["specific.out.weight"]) + params["specific.out.bias"]
    return out.reshape(b, t, h, len(config.quantiles))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """``[B, N, H, A] -> [B, H, heads, N, A/heads]``."""
    b, n, h, a = x.shape
    return x.reshape(b, n, h, heads, a // heads).transpose(0, 2, 3, 1, 4)


def peak_positions(history_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Padded indices ``[B, K]`` of peak steps and their validity flags."""
    counts = (history_mask > 0).sum(axis=1)
    k = int(counts.max()) if len(counts) else 0
    idx = np.zeros((history_mask.shape[0], k), dtype=np.int64)
    valid = np.zeros((history_mask.shape[0], k), dtype=bool)
    for b in range(history_mask.shape[0]):
        pos = np.flatnonzero(history_mask[b] > 0)
        idx[b, :len(pos)] = pos
        valid[b, :len(pos)] = True
    return idx, valid


def peak_attention(e_hist: Tensor, future: np.ndarray, past_raw: np.ndarray,
                   history_mask: np.ndarray, horizon_mask: np.ndarray,
                   params: dict[str, Tensor], config: ModelConfig,
                   trace: dict | None = None) -> Tensor | None:
    """Forecast correction from attention over past peak steps -> ``[B, T, H, Q]``.

    Query ``(t, h)`` sees only keys at peak steps ``tau <= t`` of the same
    horizon; the output is zeroed wherever ``horizon_mask`` is 0. Returns
    None when the batch has no peak steps at all (the correction is then 0).
    """
    b, t, e = e_hist.shape
    xf = _future_inputs(future)
    h = xf.shape[2]
    heads = config.attention_heads
    if config.attention_width % heads:
        raise ConfigError(f"attention_width {config.attention_width} not divisible by {heads} heads")
    e_h = broadcast_to(e_hist.reshape(b, t, 1, e), (b, t, h, e))
    raw = np.broadcast_to(past_raw.transpose(0, 2, 1)[:, :, None, :], (b, t, h, past_raw.shape[1]))
    query = mlp(concat([e_h, Tensor(xf)], axis=-1), params, "attn.query")
    kv_in = concat([e_h, Tensor(raw), Tensor(xf)], axis=-1)
    key = mlp(kv_in, params, "attn.key")
    value = mlp(kv_in, params, "attn.value")
    if trace is not None:
        trace.update(query=query, key=key, value=value)

    idx, valid = peak_positions(history_mask)
    if idx.shape[1] == 0:
        return None
    qh = _split_heads(query, heads)                                   # [B,H,nh,T,d]
    kh = _split_heads(gather_time(key, idx), heads).transpose(0, 1, 2, 4, 3)  # [B,H,nh,d,K]
    vh = _split_heads(gather_time(value, idx), heads)                 # [B,H,nh,K,d]
    d = config.attention_width // heads
    scores = matmul(qh, kh) * (1.0 / math.sqrt(d))                    # [B,H,nh,T,K]
    allowed = valid[:, None, :] & (idx[:, None, :] <= np.arange(t)[None, :, None])  # [B,T,K]
    weights = softmax_masked(scores, allowed[:, None, None].astype(np.float64))
    attended = matmul(weights, vh).transpose(0, 3, 1, 2, 4).reshape(b, t, h, config.attention_width)
    delta = mlp(attended, params, "attn.delta") * horizon_mask[..., None]
    if trace is not None:
        trace.update(weights=weights, allowed=allowed, peak_index=idx, attended=attended, delta=delta)
    return delta


def history_attention(e_hist: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Unmasked causal attention over the last ``history_window`` steps -> ``[B, T, A]``.

    Used by the ``mqt_like`` backbone only.
    """
    b, t, e = e_hist.shape
    w = config.history_window
    offsets = np.arange(-w + 1, 1)
    pos = np.arange(t)[:, None] + offsets[None, :]                   # [T,W]
    ok = (pos >= 0).astype(np.float64)
    idx = np.broadcast_to(np.maximum(pos, 0).reshape(1, -1), (b, t * w))
    window = gather_time(e_hist, idx).reshape(b, t, w, e)
    q = matmul(e_hist, params["hist.query.weight"]).reshape(b, t, 1, -1)
    k = matmul(window, params["hist.key.weight"])                     # [B,T,W,A]
    v = matmul(window, params["hist.value.weight"])
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(config.attention_width))
    att = softmax_masked(scores, ok[None, :, None, :])
    return matmul(att, v).reshape(b, t, config.attention_width)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def _param_shapes(config: ModelConfig, with_attention: bool) -> dict[str, tuple[tuple[int, ...], int]]:
    """Parameter name -> (shape, fan_in). Biases use fan_in 0 (zero init)."""
    c = config
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    k = c.effective_kernel
    channels = c.n_past
    for i in range(c.conv_layers):
        shapes[f"conv.{i}.weight"] = ((c.conv_filters, channels, k), channels * k)
        shapes[f"conv.{i}.bias"] = ((c.conv_filters, 1), 0)
        channels = c.conv_filters
    h, q = len(c.horizons), len(c.quantiles)

    def lin(name, n_in, n_out):
        shapes[f"{name}.weight"] = ((n_in, n_out), n_in)
        shapes[f"{name}.bias"] = ((n_out,), 0)

    lin("static", c.n_static, c.static_width)
    lin("future", c.n_future, c.future_width)
    agn_in = c.conv_filters + c.static_width + h * c.future_width
    if c.backbone == "mqt_like":
        agn_in += c.attention_width
        for part in ("query", "key", "value"):
            shapes[f"hist.{part}.weight"] = ((c.conv_filters, c.attention_width), c.conv_filters)
    lin("agnostic", agn_in, c.agnostic_width)
    spec_in = c.agnostic_width + c.future_width
    shapes["specific.hidden.weight"] = ((h, spec_in, c.specific_width), spec_in)
    shapes["specific.hidden.bias"] = ((h, 1, c.specific_width), 0)
    shapes["specific.out.weight"] = ((h, c.specific_width, q), c.specific_width)
    shapes["specific.out.bias"] = ((h, 1, q), 0)
    if with_attention:
        a = c.attention_width
        q_in = c.conv_filters + c.n_future
        kv_in = c.conv_filters + c.n_past + c.n_future
        for part, n_in in (("query", q_in), ("key", kv_in), ("value", kv_in)):
            lin(f"attn.{part}.hidden", n_in, a)
            lin(f"attn.{part}.out", a, a)
        lin("attn.delta.hidden", a, a)
        lin("attn.delta.out", a, q)
    return shapes


class SpadeModel:
    """Parameters plus the forward pass for one :class:`VariantFlag`.

    A model built for an attention variant carries the attention
    parameters and can also run the non-attention variants on the shared
    weights, which is how ablation diffs are taken on identical weights.
    """

    def __init__(self, config: ModelConfig, variant: VariantFlag | str = VariantFlag.FULL, seed: int = 0):
        self.config = config
        self.variant = VariantFlag.parse(variant)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.params: dict[str, Tensor] = {}
        for name, (shape, fan_in) in _param_shapes(config, self.variant.peak_attention).items():
            if fan_in:
                # He bound on the deep ReLU conv stack keeps its output from
                # vanishing at init; 1/sqrt(fan_in) elsewhere
                gain = math.sqrt(6.0) if name.startswith("conv.") else 1.0
                bound = gain / math.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            else:
                data = np.zeros(shape)
            self.params[name] = Tensor(data, requires_grad=True, name=name)

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.astype("<f8").tobytes())
        return h.hexdigest()

    def zero_delta(self) -> None:
        """Zero the last attention layer so the correction path outputs 0."""
        for name in ("attn.delta.out.weight", "attn.delta.out.bias"):
            self.params[name].data = np.zeros_like(self.params[name].data)

    # -- forward -------------------------------------------------------------

    def _variant(self, variant) -> VariantFlag:
        v = self.variant if variant is None else VariantFlag.parse(variant)
        if v.peak_attention and not self.variant.peak_attention:
            raise ConfigError(f"model built for {self.variant.value!r} has no attention parameters "
                              f"for variant {v.value!r}")
        return v

    def forward(self, batch: SampleBatch, variant=None, trace: dict | None = None) -> Tensor:
        """Scaled per-period quantile predictions ``[B, T, H, Q]`` (unsorted)."""
        v = self._variant(variant)
        c = self.config
        past = forward_fill(batch.past, batch.history_mask[:, None, :]) if v.masked_conv else batch.past
        e_hist = encode_history(Tensor(past), self.params, c)
        e_static = encode_static(Tensor(batch.static), self.params, c)
        extra = history_attention(e_hist, self.params, c) if c.backbone == "mqt_like" else None
        out = decode_baseline(e_hist, e_static, batch.future, self.params, c, extra)
        if trace is not None:
            trace.update(e_hist=e_hist, base=out)
        if v.peak_attention:
            delta = peak_attention(e_hist, batch.future, batch.past, batch.history_mask,
                                   batch.horizon_mask, self.params, c, trace)
            if delta is not None:
                out = out + delta
        return out

    def forecast(self, data: Sequence[SeriesRecord] | SampleBatch, variant=None,
                 chunk: int = 64, holdout: int = 12) -> ForecastGrid:
        """Forecast grid in demand units with quantiles sorted per point.

        ``holdout`` only matters for records: it sets the period range used
        for the series scale, which must match training.
        """
        batch = data if isinstance(data, SampleBatch) else make_batch(list(data), "all", 1, holdout)
        preds = []
        for lo in range(0, len(batch), chunk):
            part = batch.take(np.arange(lo, min(lo + chunk, len(batch))))
            preds.append(self.forward(part, variant).data)
        values = np.concatenate(preds) * batch.scale[:, None, None, None] * batch.spans[None, None, :, None]
        return ForecastGrid(list(batch.series_ids), np.sort(values, axis=-1), self.config.quantiles,
                            batch.horizons, batch.offset.copy())


def count_parameters(model: SpadeModel) -> int:
    return int(sum(p.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SPADECKP"
VERSION = 1


def save_checkpoint(model: SpadeModel, path: str | Path, extra: dict | None = None) -> None:
    """Header, JSON echo of config + parameter manifest, then little-endian float64 data."""
    manifest = [{"name": n, "shape": list(p.shape)} for n, p in model.params.items()]
    header = {
        "config": model_config_to_dict(model.config),
        "variant": model.variant.value,
        "seed": model.seed,
        "parameters": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint_header(path: str | Path) -> tuple[dict, int]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(n))
        return header, fh.tell()


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> SpadeModel:
    """Rebuild a model and validate every parameter shape by name.

    When ``config`` is given the checkpoint must match it.
    """
    header, start = read_checkpoint_header(path)
    saved = model_config_from_dict(header["config"])
    model = SpadeModel(config or saved, header["variant"], header.get("seed", 0))
    stored = {p["name"]: tuple(p["shape"]) for p in header["parameters"]}
    expected = {n: p.shape for n, p in model.params.items()}
    if stored.keys() != expected.keys():
        missing = sorted(expected.keys() - stored.keys())
        unexpected = sorted(stored.keys() - expected.keys())
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
    for name, shape in expected.items():
        if stored[name] != shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {list(stored[name])} "
                                  f"!= model shape {list(shape)}")
    raw = Path(path).read_bytes()[start:]
    total = sum(int(np.prod(s)) for s in stored.values())
    if len(raw) != 8 * total:
        raise CheckpointError(f"checkpoint data has {len(raw)} bytes, expected {8 * total}")
    flat = np.frombuffer(raw, dtype="<f8")
    pos = 0
    for p in header["parameters"]:
        n = int(np.prod(p["shape"]))
        model.params[p["name"]].data = flat[pos: pos + n].reshape(p["shape"]).astype(np.float64)
        pos += n
    return model
