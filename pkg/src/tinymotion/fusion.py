"""Adaptive two-stream feature fusion with channel/spatial attention.

A softmax gate pools both input maps globally, runs a small MLP, and mixes
the streams with two scalar weights; the mixed map then passes through a
channel-then-spatial attention block (shared-MLP channel attention over
average+max pooling, 7x7 convolution spatial attention over channel
mean/max). Everything is double precision with analytic gradients for every
parameter and input, verified against central finite differences in the
test suite. No training framework is involved.

Shapes follow the (C, H, W) convention throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

SPATIAL_KERNEL_SIZE = 7
_PAD = SPATIAL_KERNEL_SIZE // 2


@dataclass(frozen=True)
class FusionParams:
    """Dense-layer and convolution weights for the fusion block.

    gate_*: 2C -> hidden -> 2 MLP producing the modality logits.
    chan_*: C -> hidden -> C MLP shared by the avg- and max-pool paths.
    spatial_kernel/bias: 7x7 convolution over the stacked channel mean/max.
    """

    gate_w1: np.ndarray
    gate_b1: np.ndarray
    gate_w2: np.ndarray
    gate_b2: np.ndarray
    chan_w1: np.ndarray
    chan_b1: np.ndarray
    chan_w2: np.ndarray
    chan_b2: np.ndarray
    spatial_kernel: np.ndarray
    spatial_bias: float

    def __post_init__(self):
        c = self.channels
        gate_hidden = self.gate_w1.shape[0]
        chan_hidden = self.chan_w1.shape[0]
        expect = {
            "gate_w1": (gate_hidden, 2 * c),
            "gate_b1": (gate_hidden,),
            "gate_w2": (2, gate_hidden),
            "gate_b2": (2,),
            "chan_w1": (chan_hidden, c),
            "chan_b1": (chan_hidden,),
            "chan_w2": (c, chan_hidden),
            "chan_b2": (c,),
            "spatial_kernel": (2, SPATIAL_KERNEL_SIZE, SPATIAL_KERNEL_SIZE),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} must have shape {shape}, got {got}")

    @property
    def channels(self) -> int:
        return self.chan_w2.shape[0]


@dataclass(frozen=True)
class FusionTrace:
    """Forward-pass record: outputs plus every intermediate the backward needs."""

    weights: tuple[float, float]  # (w_rgb, w_m), softmax outputs summing to 1
    mixed: np.ndarray
    channel_attention: np.ndarray  # (C,)
    spatial_attention: np.ndarray  # (H, W)
    output: np.ndarray
    # Internals (inputs and pre-activations) retained for fusion_backward.
    f_rgb: np.ndarray
    f_m: np.ndarray
    gate_input: np.ndarray
    gate_hidden_pre: np.ndarray
    gate_hidden: np.ndarray
    pooled_avg: np.ndarray
    pooled_max: np.ndarray
    pooled_max_idx: np.ndarray
    chan_hidden_pre_avg: np.ndarray
    chan_hidden_pre_max: np.ndarray
    attended: np.ndarray
    chan_mean: np.ndarray
    chan_max: np.ndarray
    chan_max_idx: np.ndarray


@dataclass(frozen=True)
class FusionGradients:
    f_rgb: np.ndarray
    f_m: np.ndarray
    gate_w1: np.ndarray
    gate_b1: np.ndarray
    gate_w2: np.ndarray
    gate_b2: np.ndarray
    chan_w1: np.ndarray
    chan_b1: np.ndarray
    chan_w2: np.ndarray
    chan_b2: np.ndarray
    spatial_kernel: np.ndarray
    spatial_bias: float


def init_params(c: int, r: int, rng_seed: int = 0) -> FusionParams:
    """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] init, deterministic per seed.

    ``r`` is the channel reduction of both MLPs and must divide ``c``.
    """
    if c < 1 or r < 1:
        raise ValueError("c and r must be >= 1")
    if c % r != 0 or (2 * c) % r != 0:
        raise ValueError(f"reduction {r} must divide channel count {c}")
    gate_hidden = (2 * c) // r
    chan_hidden = c // r
    if gate_hidden < 1 or chan_hidden < 1:
        raise ValueError(f"reduction {r} too large for {c} channels")
    rng = np.random.default_rng(rng_seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return FusionParams(
        gate_w1=uniform((gate_hidden, 2 * c), 2 * c),
        gate_b1=uniform((gate_hidden,), 2 * c),
        gate_w2=uniform((2, gate_hidden), gate_hidden),
        gate_b2=uniform((2,), gate_hidden),
        chan_w1=uniform((chan_hidden, c), c),
        chan_b1=uniform((chan_hidden,), c),
        chan_w2=uniform((c, chan_hidden), chan_hidden),
        chan_b2=uniform((c,), chan_hidden),
        spatial_kernel=uniform((2, SPATIAL_KERNEL_SIZE, SPATIAL_KERNEL_SIZE), 2 * SPATIAL_KERNEL_SIZE**2),
        spatial_bias=float(uniform((), 2 * SPATIAL_KERNEL_SIZE**2)),
    )


def _check_feature_map(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"{what} must be non-empty (C, H, W), got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")
    return x


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax2(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def adaptive_weight_block(
    f_rgb: np.ndarray, f_m: np.ndarray, params: FusionParams
) -> tuple[tuple[float, float], np.ndarray]:
    """Softmax modality gate: returns ((w_rgb, w_m), w_rgb*f_rgb + w_m*f_m)."""
    f_rgb = _check_feature_map(f_rgb, "f_rgb")
    f_m = _check_feature_map(f_m, "f_m")
    if f_rgb.shape != f_m.shape:
        raise ValueError(f"shape mismatch: {f_rgb.shape} vs {f_m.shape}")
    if f_rgb.shape[0] * 2 != params.gate_w1.shape[1]:
        raise ValueError(
            f"params expect {params.gate_w1.shape[1] // 2} channels, got {f_rgb.shape[0]}"
        )
    z = np.concatenate([f_rgb.mean(axis=(1, 2)), f_m.mean(axis=(1, 2))])
    hidden = np.maximum(params.gate_w1 @ z + params.gate_b1, 0.0)
    logits = params.gate_w2 @ hidden + params.gate_b2
    w = _softmax2(logits)
    mixed = w[0] * f_rgb + w[1] * f_m
    return (float(w[0]), float(w[1])), mixed


def _chan_mlp(params: FusionParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pre = params.chan_w1 @ x + params.chan_b1
    return params.chan_w2 @ np.maximum(pre, 0.0) + params.chan_b2, pre


def _spatial_logit(params: FusionParams, stats: np.ndarray) -> np.ndarray:
    _, h, w = stats.shape
    padded = np.pad(stats, ((0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    logit = np.full((h, w), params.spatial_bias)
    for c in range(2):
        for i in range(SPATIAL_KERNEL_SIZE):
            for j in range(SPATIAL_KERNEL_SIZE):
                logit += params.spatial_kernel[c, i, j] * padded[c, i : i + h, j : j + w]
    return logit


def cbam(
    mixed: np.ndarray, params: FusionParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Channel then spatial attention; returns (out, channel att, spatial att)."""
    mixed = _check_feature_map(mixed, "mixed")
    if mixed.shape[0] != params.channels:
        raise ValueError(f"params expect {params.channels} channels, got {mixed.shape[0]}")
    avg = mixed.mean(axis=(1, 2))
    mx = mixed.max(axis=(1, 2))
    mc = _sigmoid(_chan_mlp(params, avg)[0] + _chan_mlp(params, mx)[0])
    attended = mc[:, None, None] * mixed
    stats = np.stack([attended.mean(axis=0), attended.max(axis=0)])
    ms = _sigmoid(_spatial_logit(params, stats))
    return ms[None, :, :] * attended, mc, ms


def fusion_forward(f_rgb: np.ndarray, f_m: np.ndarray, params: FusionParams) -> FusionTrace:
    """Full forward pass recording every intermediate needed for gradients."""
    f_rgb = _check_feature_map(f_rgb, "f_rgb")
    f_m = _check_feature_map(f_m, "f_m")
    if f_rgb.shape != f_m.shape:
        raise ValueError(f"shape mismatch: {f_rgb.shape} vs {f_m.shape}")
    c = params.channels
    if f_rgb.shape[0] != c:
        raise ValueError(f"params expect {c} channels, got {f_rgb.shape[0]}")

    z = np.concatenate([f_rgb.mean(axis=(1, 2)), f_m.mean(axis=(1, 2))])
    hidden_pre = params.gate_w1 @ z + params.gate_b1
    hidden = np.maximum(hidden_pre, 0.0)
    logits = params.gate_w2 @ hidden + params.gate_b2
    w = _softmax2(logits)
    mixed = w[0] * f_rgb + w[1] * f_m

    avg = mixed.mean(axis=(1, 2))
    flat = mixed.reshape(c, -1)
    max_idx = flat.argmax(axis=1)  # first maximal index per channel
    mx = flat[np.arange(c), max_idx]
    mlp_avg, pre_avg = _chan_mlp(params, avg)
    mlp_max, pre_max = _chan_mlp(params, mx)
    mc = _sigmoid(mlp_avg + mlp_max)
    attended = mc[:, None, None] * mixed

    chan_mean = attended.mean(axis=0)
    chan_max_idx = attended.argmax(axis=0)  # first maximal channel per position
    chan_max = np.take_along_axis(attended, chan_max_idx[None], axis=0)[0]
    stats = np.stack([chan_mean, chan_max])
    ms = _sigmoid(_spatial_logit(params, stats))
    output = ms[None, :, :] * attended

    return FusionTrace(
        weights=(float(w[0]), float(w[1])),
        mixed=mixed,
        channel_attention=mc,
        spatial_attention=ms,
        output=output,
        f_rgb=f_rgb,
        f_m=f_m,
        gate_input=z,
        gate_hidden_pre=hidden_pre,
        gate_hidden=hidden,
        pooled_avg=avg,
        pooled_max=mx,
        pooled_max_idx=max_idx,
        chan_hidden_pre_avg=pre_avg,
        chan_hidden_pre_max=pre_max,
        attended=attended,
        chan_mean=chan_mean,
        chan_max=chan_max,
        chan_max_idx=chan_max_idx,
    )


def fusion_backward(
    trace: FusionTrace, upstream_grad: np.ndarray, params: FusionParams
) -> FusionGradients:
    """Analytic gradients of the traced forward pass.

    Max-pool gradients route to the first maximal index recorded in the
    trace; ReLU uses the zero subgradient at the kink.
    """
    g_out = np.asarray(upstream_grad, dtype=np.float64)
    if g_out.shape != trace.output.shape:
        raise ValueError(f"upstream grad shape {g_out.shape} != output {trace.output.shape}")
    c, h, w = trace.output.shape
    ms = trace.spatial_attention
    mc = trace.channel_attention

    # Spatial attention stage: output = ms * attended.
    d_ms = (g_out * trace.attended).sum(axis=0)
    d_attended = g_out * ms[None, :, :]

    d_logit = d_ms * ms * (1.0 - ms)
    stats = np.stack([trace.chan_mean, trace.chan_max])
    padded = np.pad(stats, ((0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    d_kernel = np.zeros_like(params.spatial_kernel)
    d_padded = np.zeros_like(padded)
    for ch in range(2):
        for i in range(SPATIAL_KERNEL_SIZE):
            for j in range(SPATIAL_KERNEL_SIZE):
                window = padded[ch, i : i + h, j : j + w]
                d_kernel[ch, i, j] = (d_logit * window).sum()
                d_padded[ch, i : i + h, j : j + w] += params.spatial_kernel[ch, i, j] * d_logit
    d_bias = float(d_logit.sum())
    d_stats = d_padded[:, _PAD : _PAD + h, _PAD : _PAD + w]

    # Channel mean/max statistics over the attended map.
    d_attended += d_stats[0][None, :, :] / c
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    np.add.at(d_attended, (trace.chan_max_idx, yy, xx), d_stats[1])

    # Channel attention stage: attended = mc * mixed.
    d_mc = (d_attended * trace.mixed).sum(axis=(1, 2))
    d_mixed = d_attended * mc[:, None, None]

    d_pre_sig = d_mc * mc * (1.0 - mc)
    d_chan_w1 = np.zeros_like(params.chan_w1)
    d_chan_b1 = np.zeros_like(params.chan_b1)
    d_chan_w2 = np.zeros_like(params.chan_w2)
    d_chan_b2 = np.zeros_like(params.chan_b2)
    d_pooled = []
    for pooled, pre in (
        (trace.pooled_avg, trace.chan_hidden_pre_avg),
        (trace.pooled_max, trace.chan_hidden_pre_max),
    ):
        hidden = np.maximum(pre, 0.0)
        d_hidden = params.chan_w2.T @ d_pre_sig
        d_hidden_pre = d_hidden * (pre > 0.0)
        d_chan_w2 += np.outer(d_pre_sig, hidden)
        d_chan_b2 += d_pre_sig
        d_chan_w1 += np.outer(d_hidden_pre, pooled)
        d_chan_b1 += d_hidden_pre
        d_pooled.append(params.chan_w1.T @ d_hidden_pre)
    d_avg, d_max = d_pooled

    d_mixed += d_avg[:, None, None] / (h * w)
    flat = d_mixed.reshape(c, -1)
    flat[np.arange(c), trace.pooled_max_idx] += d_max
    d_mixed = flat.reshape(c, h, w)

    # Modality gate: mixed = w0*f_rgb + w1*f_m, w = softmax(logits).
    w0, w1 = trace.weights
    d_w = np.array(
        [(d_mixed * trace.f_rgb).sum(), (d_mixed * trace.f_m).sum()]
    )
    d_f_rgb = w0 * d_mixed
    d_f_m = w1 * d_mixed

    wvec = np.array([w0, w1])
    d_logits = wvec * (d_w - float(wvec @ d_w))
    d_gate_w2 = np.outer(d_logits, trace.gate_hidden)
    d_gate_b2 = d_logits.copy()
    d_hidden = params.gate_w2.T @ d_logits
    d_hidden_pre = d_hidden * (trace.gate_hidden_pre > 0.0)
    d_gate_w1 = np.outer(d_hidden_pre, trace.gate_input)
    d_gate_b1 = d_hidden_pre.copy()
    d_z = params.gate_w1.T @ d_hidden_pre

    d_f_rgb += d_z[:c, None, None] / (h * w)
    d_f_m += d_z[c:, None, None] / (h * w)

    return FusionGradients(
        f_rgb=d_f_rgb,
        f_m=d_f_m,
        gate_w1=d_gate_w1,
        gate_b1=d_gate_b1,
        gate_w2=d_gate_w2,
        gate_b2=d_gate_b2,
        chan_w1=d_chan_w1,
        chan_b1=d_chan_b1,
        chan_w2=d_chan_w2,
        chan_b2=d_chan_b2,
        spatial_kernel=d_kernel,
        spatial_bias=d_bias,
    )


def save_params(params: FusionParams, path: Path | str) -> None:
    """Serialize params as a JSON shape header line + little-endian float64 blob."""
    arrays = []
    blob = bytearray()
    for f in fields(FusionParams):
        value = getattr(params, f.name)
        arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
        arrays.append({"name": f.name, "shape": list(np.asarray(value).shape)})
        blob += arr.astype("<f8").tobytes()
    header = json.dumps({"format": "fusion-params-v1", "arrays": arrays}).encode() + b"\n"
    Path(path).write_bytes(header + bytes(blob))


def load_params(path: Path | str) -> FusionParams:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode())
    if header.get("format") != "fusion-params-v1":
        raise ValueError(f"{path}: not a fusion params file")
    offset = nl + 1
    kwargs = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).copy()
        offset += count * 8
        kwargs[spec["name"]] = float(values[0]) if shape == () else values.reshape(shape)
    return FusionParams(**kwargs)
