"""ShallowConvNet-style spatial tokenizer.

Temporal filtering, spatial mixing across all channels, squaring, average
pooling and log give log-power features; a 1x1 projection maps them to
d_model. The temporal and spatial convolutions are both linear, so the graph
contracts them into one spatio-temporal kernel

    W[f, c, k] = sum_t W_spat[f, t, c] * W_temp[t, k]
    b[f]       = sum_{t, c} W_spat[f, t, c] * b_temp[t]

which is exactly the composition of the two stages.
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np

from errors import ShapeError
from numkernel import LOG_FLOOR, ComputeGraph, ParameterSet, Var
from signal_processing import SEGMENT_SECONDS

logger = logging.getLogger("tokenizer")


@dataclass
class TokenizerSpec:
    channels: int = 18
    n_samples: int = 1280
    temporal_filters: int = 40
    spatial_filters: int = 40
    temporal_kernel: int = 40
    pool_window: int = 75
    pool_stride: int = 15
    d_model: int = 64
    segment_pooling: bool = True

    @classmethod
    def from_config(cls, config, channels: Optional[int] = None, n_samples: int = 1280) -> "TokenizerSpec":
        return cls(
            channels=channels if channels is not None else len(config.montage),
            n_samples=n_samples,
            temporal_filters=config.temporal_filters,
            spatial_filters=config.spatial_filters,
            temporal_kernel=config.temporal_kernel,
            pool_window=config.pool_window,
            pool_stride=config.pool_stride,
            d_model=config.d_model,
            segment_pooling=config.segment_pooling,
        )

    @property
    def pooled_steps(self) -> int:
        return token_count(self.n_samples, self.temporal_kernel, self.pool_window, self.pool_stride)

    @property
    def tokens_per_segment(self) -> int:
        return 1 if self.segment_pooling else self.pooled_steps


@dataclass
class TokenSequence:
    tokens: np.ndarray        # (L, d_model)
    t_starts: np.ndarray      # (L,) absolute start time of each token's span
    segment_t_start: float = 0.0


def token_count(n_samples: int, kernel: int = 40, window: int = 75, stride: int = 15) -> int:
    """Number of pooled steps left after a valid temporal conv and average pooling."""
    if n_samples < kernel + window - 1:
        raise ShapeError("token_count", f"{n_samples} samples < kernel {kernel} + window {window} - 1")
    return (n_samples - kernel + 1 - window) // stride + 1


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_tokenizer_params(spec: TokenizerSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    ft, fs, c, k, d = spec.temporal_filters, spec.spatial_filters, spec.channels, spec.temporal_kernel, spec.d_model
    return {
        "tok.w_temp": _glorot(rng, (ft, k), k, ft),
        "tok.b_temp": np.zeros(ft),
        "tok.w_spat": _glorot(rng, (fs, ft, c), ft * c, fs),
        "tok.w_proj": _glorot(rng, (fs, d), fs, d),
        "tok.b_proj": np.zeros(d),
        "norm.mean": np.zeros(c),
        "norm.std": np.ones(c),
    }


def standardize(batch: np.ndarray, params: ParameterSet) -> np.ndarray:
    """Per-channel z-scoring with the training-split statistics stored in params."""
    batch = np.asarray(batch, dtype=np.float64)
    if "norm.mean" not in params:
        return batch
    return (batch - params["norm.mean"][:, None]) / params["norm.std"][:, None]


def tokenizer_graph(graph: ComputeGraph, x: Var, spec: TokenizerSpec, features_output: Optional[str] = None) -> Var:
    """Segments (N, C, T) -> tokens (N, d) with segment pooling, else (N, L, d).

    features_output names an extra graph output holding the (N, Fs, L) log-power
    features before projection.
    """
    n, c, t = x.shape
    if c != spec.channels or t != spec.n_samples:
        raise ShapeError("tokenize", f"expected segments of {spec.channels}x{spec.n_samples}", [x.shape])
    ft, fs, k = spec.temporal_filters, spec.spatial_filters, spec.temporal_kernel
    w_temp = graph.param("tok.w_temp", (ft, k))
    b_temp = graph.param("tok.b_temp", (ft,))
    w_spat = graph.param("tok.w_spat", (fs, ft, c))
    w_proj = graph.param("tok.w_proj", (fs, spec.d_model))
    b_proj = graph.param("tok.b_proj", (spec.d_model,))

    # (Fs, C, Ft) @ (Ft, K) -> (Fs, C, K)
    spat = graph.reshape(graph.transpose(w_spat, (0, 2, 1)), (fs * c, ft))
    kernel = graph.reshape(graph.matmul(spat, w_temp), (fs, c, k))
    bias = graph.reshape(graph.matmul(graph.sum(w_spat, axis=2), graph.reshape(b_temp, (ft, 1))), (fs,))

    z = graph.conv1d(x, kernel, bias)
    power = graph.avgpool(graph.square(z), spec.pool_window, spec.pool_stride)
    log_power = graph.log(power, floor=LOG_FLOOR)
    if features_output:
        graph.output(features_output, log_power)
    features = graph.transpose(log_power, (0, 2, 1))
    tokens = graph.add_bias(graph.matmul(features, w_proj), b_proj)
    if spec.segment_pooling:
        return graph.mean(tokens, axis=1)
    return tokens


def log_power_features(segment: np.ndarray, params: ParameterSet, spec: TokenizerSpec) -> np.ndarray:
    """Pre-projection log-power features (L, Fs) for one standardized segment."""
    graph = ComputeGraph("tokenizer-features")
    x = graph.input("segments", (1, spec.channels, spec.n_samples))
    tokenizer_graph(graph, x, spec, features_output="features")
    out = graph.evaluate({"segments": np.asarray(segment, dtype=np.float64)[None], **params.as_dict()}, ["features"])
    return out["features"][0].T


def tokenize(segment, params: ParameterSet, spec: TokenizerSpec, segment_pooling: Optional[bool] = None) -> TokenSequence:
    """Tokenize one LabeledSegment (or a raw (C, T) array)."""
    data = getattr(segment, "data", segment)
    t_start = float(getattr(segment, "t_start", 0.0))
    data = np.asarray(data, dtype=np.float64)
    if data.shape != (spec.channels, spec.n_samples):
        raise ShapeError("tokenize", f"segment must be {spec.channels}x{spec.n_samples}", [data.shape])
    if segment_pooling is not None and segment_pooling != spec.segment_pooling:
        spec = replace(spec, segment_pooling=segment_pooling)
    graph = ComputeGraph("tokenizer")
    x = graph.input("segments", (1, spec.channels, spec.n_samples))
    graph.output("tokens", tokenizer_graph(graph, x, spec))
    bindings = {"segments": standardize(data, params)[None], **params.as_dict()}
    tokens = graph.evaluate(bindings)["tokens"][0]
    if spec.segment_pooling:
        return TokenSequence(tokens[None, :], np.array([t_start]), t_start)
    fs_hz = spec.n_samples / SEGMENT_SECONDS
    starts = t_start + np.arange(tokens.shape[0]) * spec.pool_stride / fs_hz
    return TokenSequence(tokens, starts, t_start)
