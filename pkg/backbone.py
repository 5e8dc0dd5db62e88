"""Memory-as-a-Gate temporal backbone with a sigmoid classification head.

Per block and token t:

    h_t    = sigmoid(theta) * h_{t-1} + (1 - sigmoid(theta)) * tanh(x_t W_write + b_write)
    z_attn = causal sliding-window multi-head attention over the last S tokens
    z_mem  = h_t W_mem + b_mem
    g_t    = sigmoid([z_attn, z_mem] W_g + b_g)
    y_t    = g_t * z_attn + (1 - g_t) * z_mem

The head maps y_t to p_t = sigmoid(y_t w_cls + b_cls).
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from config import ABLATION_MODES
from errors import CheckpointError, ConfigError, ShapeError, StaleStateError
from numkernel import ComputeGraph, ParameterSet, Var
from tokenizer import TokenizerSpec, init_tokenizer_params, standardize, tokenizer_graph

logger = logging.getLogger("backbone")

PROB_EPS = 1e-12
LOSS_EPS = 1e-7
THETA_INIT = float(np.log(9.0))  # sigmoid(theta) = 0.9


@dataclass
class BackboneSpec:
    d_model: int = 64
    heads: int = 4
    head_dim: int = 16
    window: int = 12
    n_blocks: int = 1
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in ABLATION_MODES:
            raise ConfigError(f"ablation mode must be one of {ABLATION_MODES}, got {self.mode!r}")
        if self.window < 1 or self.n_blocks < 1:
            raise ConfigError("attention window and block count must be >= 1")

    @classmethod
    def from_config(cls, config) -> "BackboneSpec":
        return cls(d_model=config.d_model, heads=config.heads, head_dim=config.head_dim,
                   window=config.window, n_blocks=config.n_blocks, mode=config.ablation_mode)

    @property
    def inner(self) -> int:
        return self.heads * self.head_dim

    @property
    def prefix_capacity(self) -> int:
        return self.window - 1


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_backbone_params(spec: BackboneSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    d, inner = spec.d_model, spec.inner
    params: Dict[str, np.ndarray] = {}
    for b in range(spec.n_blocks):
        p = f"blk{b}."
        params[p + "w_q"] = _glorot(rng, d, inner)
        params[p + "w_k"] = _glorot(rng, d, inner)
        params[p + "w_v"] = _glorot(rng, d, inner)
        params[p + "w_o"] = _glorot(rng, inner, d)
        params[p + "theta"] = np.full(d, THETA_INIT)
        params[p + "w_write"] = _glorot(rng, d, d)
        params[p + "b_write"] = np.zeros(d)
        params[p + "w_mem"] = _glorot(rng, d, d)
        params[p + "b_mem"] = np.zeros(d)
        params[p + "w_g"] = _glorot(rng, 2 * d, d)
        params[p + "b_g"] = np.zeros(d)
    params["head.w_cls"] = _glorot(rng, d, 1)
    params["head.b_cls"] = np.zeros(1)
    return params


@dataclass
class MemoryState:
    """Streaming state: per-block memory vector plus the block inputs of the last S-1 tokens."""
    h: List[np.ndarray]
    prefix: List[np.ndarray]
    step: int = 0
    consumed: bool = False

    @classmethod
    def zeros(cls, spec: BackboneSpec, batch: int = 1) -> "MemoryState":
        return cls(h=[np.zeros((batch, spec.d_model)) for _ in range(spec.n_blocks)],
                   prefix=[np.zeros((batch, 0, spec.d_model)) for _ in range(spec.n_blocks)])

    @property
    def batch(self) -> int:
        return self.h[0].shape[0]

    @property
    def prefix_len(self) -> int:
        return self.prefix[0].shape[1]

    def check(self, start_step: Optional[int] = None):
        if self.consumed:
            raise StaleStateError(f"memory state at step {self.step} was already consumed")
        if start_step is not None and start_step != self.step:
            raise StaleStateError(f"state is at step {self.step}, caller expected {start_step}")


def memory_update(h_prev: np.ndarray, x_t: np.ndarray, params: ParameterSet, block: int = 0,
                  write_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """One step of the decaying memory recurrence (plain numpy)."""
    p = f"blk{block}."
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if h_prev.shape[-1] != params[p + "theta"].shape[0] or x_t.shape[-1] != h_prev.shape[-1]:
        raise ShapeError("memory_update", "h and x must both have d_model entries", [h_prev.shape, x_t.shape])
    decay = expit(params[p + "theta"])
    written = write_fn(x_t) if write_fn is not None else np.tanh(x_t @ params[p + "w_write"] + params[p + "b_write"])
    return decay * h_prev + (1.0 - decay) * written


def attention_mask(length: int, prefix_len: int, window: int) -> np.ndarray:
    """(L, P+L) mask: query i (absolute P+i) sees keys in (P+i-S, P+i]."""
    queries = np.arange(length)[:, None] + prefix_len
    keys = np.arange(prefix_len + length)[None, :]
    return (keys <= queries) & (keys > queries - window)


def attention_branch(graph: ComputeGraph, x: Var, prefix: Optional[Var], spec: BackboneSpec, block: int) -> Var:
    p = f"blk{block}."
    batch, length, d = x.shape
    heads, dk = spec.heads, spec.head_dim
    w_q = graph.param(p + "w_q", (d, spec.inner))
    w_k = graph.param(p + "w_k", (d, spec.inner))
    w_v = graph.param(p + "w_v", (d, spec.inner))
    w_o = graph.param(p + "w_o", (spec.inner, d))

    full = x if prefix is None else graph.concat([prefix, x], axis=1)
    total = full.shape[1]

    def split_heads(v: Var, n: int) -> Var:
        v = graph.reshape(v, (batch, n, heads, dk))
        return graph.reshape(graph.transpose(v, (0, 2, 1, 3)), (batch * heads, n, dk))

    q = split_heads(graph.matmul(x, w_q), length)
    k = split_heads(graph.matmul(full, w_k), total)
    v = split_heads(graph.matmul(full, w_v), total)
    scores = graph.scale(graph.matmul(q, graph.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dk))
    weights = graph.masked_softmax(scores, attention_mask(length, total - length, spec.window))
    context = graph.reshape(graph.matmul(weights, v), (batch, heads, length, dk))
    context = graph.reshape(graph.transpose(context, (0, 2, 1, 3)), (batch, length, spec.inner))
    return graph.matmul(context, w_o)


def memory_branch(graph: ComputeGraph, x: Var, h0: Var, spec: BackboneSpec, block: int) -> Tuple[Var, Var, Var]:
    """Unrolled recurrence; returns (z_mem, stacked states, last state)."""
    p = f"blk{block}."
    batch, length, d = x.shape
    theta = graph.param(p + "theta", (d,))
    w_write = graph.param(p + "w_write", (d, d))
    b_write = graph.param(p + "b_write", (d,))
    w_mem = graph.param(p + "w_mem", (d, d))
    b_mem = graph.param(p + "b_mem", (d,))

    written = graph.tanh(graph.add_bias(graph.matmul(x, w_write), b_write))
    retain = graph.broadcast(graph.sigmoid(theta), (batch,))
    admit = graph.one_minus(retain)
    h = h0
    states = []
    for t in range(length):
        h = graph.add(graph.mul(retain, h), graph.mul(admit, graph.select(written, 1, t)))
        states.append(h)
    stacked = graph.stack(states, axis=1)
    return graph.add_bias(graph.matmul(stacked, w_mem), b_mem), stacked, h


def mag_block(graph: ComputeGraph, x: Var, prefix: Optional[Var], h0: Var, spec: BackboneSpec,
              block: int) -> Tuple[Var, Var, Optional[Var]]:
    """One gated block; returns (y, last memory state, next attention prefix)."""
    d = spec.d_model
    z_attn = attention_branch(graph, x, prefix, spec, block) if spec.mode != "memory_only" else None
    if spec.mode != "attention_only":
        z_mem, _, h_last = memory_branch(graph, x, h0, spec, block)
    else:
        z_mem, h_last = None, h0

    if spec.mode == "attention_only":
        y = z_attn
    elif spec.mode == "memory_only":
        y = z_mem
    else:
        w_g = graph.param(f"blk{block}.w_g", (2 * d, d))
        b_g = graph.param(f"blk{block}.b_g", (d,))
        gate = graph.sigmoid(graph.add_bias(graph.matmul(graph.concat([z_attn, z_mem], axis=-1), w_g), b_g))
        y = graph.add(graph.mul(gate, z_attn), graph.mul(graph.one_minus(gate), z_mem))

    full = x if prefix is None else graph.concat([prefix, x], axis=1)
    keep = min(spec.prefix_capacity, full.shape[1])
    next_prefix = graph.slice(full, 1, full.shape[1] - keep, full.shape[1]) if keep > 0 else None
    return y, h_last, next_prefix


def head(graph: ComputeGraph, y: Var, spec: BackboneSpec) -> Var:
    batch, length, d = y.shape
    w_cls = graph.param("head.w_cls", (d, 1))
    b_cls = graph.param("head.b_cls", (1,))
    logits = graph.reshape(graph.add_bias(graph.matmul(y, w_cls), b_cls), (batch, length))
    return graph.clip(graph.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)


def bce_graph(graph: ComputeGraph, p: Var, labels: Var) -> Var:
    """Mean binary cross-entropy of probabilities p against labels, with p clamped to [1e-7, 1-1e-7]."""
    p = graph.clip(p, LOSS_EPS, 1.0 - LOSS_EPS)
    ll = graph.add(graph.mul(labels, graph.log(p)), graph.mul(graph.one_minus(labels), graph.log(graph.one_minus(p))))
    return graph.scale(graph.mean(ll), -1.0)


def build_graph(spec: BackboneSpec, batch: int, length: int, prefix_len: int = 0,
                tokenizer: Optional[TokenizerSpec] = None, n_segments: int = 0,
                with_loss: bool = False) -> ComputeGraph:
    """Full model graph.

    Without a tokenizer the input is "tokens" (B, L, d). With one, the inputs
    are "segments" (N, C, T) and an "index" (B, L) into them, so segments
    shared by overlapping sequences are tokenized once.
    """
    graph = ComputeGraph(f"mag[B={batch},P={prefix_len},L={length},N={n_segments}]")
    d = spec.d_model
    per_segment = 1
    if tokenizer is None:
        seq = graph.input("tokens", (batch, length, d))
    else:
        if tokenizer.d_model != d:
            raise ShapeError("build_graph", "tokenizer and backbone widths differ", [tokenizer.d_model, d])
        x = graph.input("segments", (n_segments, tokenizer.channels, tokenizer.n_samples))
        index = graph.input("index", (batch, length))
        seq = graph.gather(tokenizer_graph(graph, x, tokenizer), index)
        per_segment = tokenizer.tokens_per_segment
        if per_segment > 1:
            seq = graph.reshape(seq, (batch, length * per_segment, d))
    graph.output("tokens", seq)

    for b in range(spec.n_blocks):
        prefix = graph.input(f"prefix.{b}", (batch, prefix_len, d)) if prefix_len else None
        h0 = graph.input(f"h0.{b}", (batch, d))
        seq, h_last, next_prefix = mag_block(graph, seq, prefix, h0, spec, b)
        graph.output(f"next_h.{b}", h_last)
        if next_prefix is not None:
            graph.output(f"next_prefix.{b}", next_prefix)
    graph.output("outputs", seq)

    probs = graph.output("probs", head(graph, seq, spec))
    if per_segment > 1:
        probs = graph.select(graph.reshape(probs, (batch, length, per_segment)), 2, per_segment - 1)
    graph.output("segment_probs", probs)
    if with_loss:
        labels = graph.input("labels", (batch,))
        graph.output("loss", bce_graph(graph, graph.select(probs, 1, length - 1), labels))
    return graph


class TitansModel:
    """Parameters plus cached graphs for one tokenizer/backbone configuration."""

    def __init__(self, params: ParameterSet, backbone: BackboneSpec, tokenizer: Optional[TokenizerSpec] = None,
                 cache_size: int = 8):
        self.params = params
        self.backbone = backbone
        self.tokenizer = tokenizer
        self.cache_size = cache_size
        self._graphs: "OrderedDict[Tuple, ComputeGraph]" = OrderedDict()

    @classmethod
    def initialize(cls, config, seed: Optional[int] = None, channels: Optional[int] = None,
                   n_samples: int = 1280) -> "TitansModel":
        tok = TokenizerSpec.from_config(config, channels=channels, n_samples=n_samples)
        spec = BackboneSpec.from_config(config)
        rng = np.random.default_rng(config.seed if seed is None else seed)
        params = ParameterSet(init_tokenizer_params(tok, rng))
        params.update(init_backbone_params(spec, rng))
        return cls(params, spec, tok)

    @classmethod
    def from_checkpoint(cls, config, path: str, channels: Optional[int] = None,
                        n_samples: int = 1280) -> "TitansModel":
        params = ParameterSet.load(path)
        tok = TokenizerSpec.from_config(config, channels=channels, n_samples=n_samples)
        model = cls(params, BackboneSpec.from_config(config), tok)
        missing = [name for name in init_backbone_params(model.backbone, np.random.default_rng(0)) if name not in params]
        if missing:
            raise CheckpointError(f"{path} does not match the configured backbone: missing {', '.join(missing)}")
        return model

    @property
    def trainable(self) -> List[str]:
        return [name for name in self.params if not name.startswith("norm.")]

    def graph(self, batch: int, length: int, prefix_len: int = 0, n_segments: int = 0,
              with_loss: bool = False, from_tokens: bool = False) -> ComputeGraph:
        key = (batch, length, prefix_len, n_segments, with_loss, from_tokens)
        graph = self._graphs.get(key)
        if graph is None:
            tokenizer = None if from_tokens else self.tokenizer
            graph = build_graph(self.backbone, batch, length, prefix_len, tokenizer, n_segments, with_loss)
            self._graphs[key] = graph
            if len(self._graphs) > self.cache_size:
                self._graphs.popitem(last=False)
        else:
            self._graphs.move_to_end(key)
        return graph

    def _state_bindings(self, state: MemoryState) -> Dict[str, np.ndarray]:
        bindings = {}
        for b in range(self.backbone.n_blocks):
            bindings[f"h0.{b}"] = state.h[b]
            if state.prefix_len:
                bindings[f"prefix.{b}"] = state.prefix[b]
        return bindings

    def _next_state(self, out: Dict[str, np.ndarray], state: MemoryState, tokens: int) -> MemoryState:
        n = self.backbone.n_blocks
        prefix = [out.get(f"next_prefix.{b}", np.zeros((state.batch, 0, self.backbone.d_model))) for b in range(n)]
        return MemoryState(h=[out[f"next_h.{b}"] for b in range(n)], prefix=prefix, step=state.step + tokens)

    def loss_and_grads(self, segments: np.ndarray, index: np.ndarray, labels: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        """BCE on each sequence's final token; gradients for every trainable tensor (zeros if unused)."""
        batch, length = index.shape
        graph = self.graph(batch, length, 0, segments.shape[0], with_loss=True)
        bindings = dict(self.params.as_dict())
        bindings.update(self._state_bindings(MemoryState.zeros(self.backbone, batch)))
        bindings.update({"segments": standardize(segments, self.params), "index": index, "labels": labels})
        loss = float(graph.evaluate(bindings, ["loss"])["loss"])
        grads = graph.backward("loss")
        graph.release()
        return loss, {name: grads.get(name, np.zeros_like(self.params[name])) for name in self.trainable}

    def loss(self, segments: np.ndarray, index: np.ndarray, labels: np.ndarray) -> float:
        batch, length = index.shape
        graph = self.graph(batch, length, 0, segments.shape[0], with_loss=True)
        bindings = dict(self.params.as_dict())
        bindings.update(self._state_bindings(MemoryState.zeros(self.backbone, batch)))
        bindings.update({"segments": standardize(segments, self.params), "index": index, "labels": labels})
        value = float(graph.evaluate(bindings, ["loss"])["loss"])
        graph.release()
        return value

    def forward_segments(self, segments: np.ndarray, state: MemoryState,
                         start_step: Optional[int] = None) -> Tuple[np.ndarray, MemoryState]:
        """Stream consecutive segments (L, C, T) of one sequence; returns per-segment probabilities."""
        state.check(start_step)
        if state.batch != 1:
            raise ShapeError("forward_segments", "streaming runs one sequence at a time", [state.batch])
        length = segments.shape[0]
        graph = self.graph(1, length, state.prefix_len, length)
        bindings = dict(self.params.as_dict())
        bindings.update(self._state_bindings(state))
        bindings.update({"segments": standardize(segments, self.params), "index": np.arange(length)[None, :]})
        out = graph.evaluate(bindings)
        graph.release()
        state.consumed = True
        tokens = length * (self.tokenizer.tokens_per_segment if self.tokenizer else 1)
        return out["segment_probs"][0], self._next_state(out, state, tokens)

    def mag_forward(self, tokens: np.ndarray, state: MemoryState,
                    start_step: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, MemoryState]:
        """Backbone + head over tokens (L, d) or (B, L, d); returns (outputs, probs, new state)."""
        state.check(start_step)
        tokens = np.asarray(tokens, dtype=np.float64)
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens[None]
        batch, length, d = tokens.shape
        if d != self.backbone.d_model or batch != state.batch:
            raise ShapeError("mag_forward", "tokens do not match d_model or state batch", [tokens.shape, state.batch])
        graph = self.graph(batch, length, state.prefix_len, from_tokens=True)
        bindings = dict(self.params.as_dict())
        bindings.update(self._state_bindings(state))
        bindings["tokens"] = tokens
        out = graph.evaluate(bindings)
        graph.release()
        state.consumed = True
        outputs, probs = out["outputs"], out["probs"]
        if squeeze:
            outputs, probs = outputs[0], probs[0]
        return outputs, probs, self._next_state(out, state, length)


def sliding_attention(tokens: np.ndarray, params: ParameterSet, spec: BackboneSpec, block: int = 0) -> np.ndarray:
    """Attention branch alone over tokens (L, d), no prefix."""
    tokens = np.asarray(tokens, dtype=np.float64)
    graph = ComputeGraph("sliding-attention")
    x = graph.input("tokens", (1,) + tokens.shape)
    graph.output("z", attention_branch(graph, x, None, spec, block))
    return graph.evaluate({"tokens": tokens[None], **params.as_dict()})["z"][0]


def mag_forward(model: TitansModel, tokens: np.ndarray, state: MemoryState,
                start_step: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, MemoryState]:
    return model.mag_forward(tokens, state, start_step)


def ablation_mode(model: TitansModel, mode: str) -> TitansModel:
    """Same parameters with the gate pinned: attention_only g=1, memory_only g=0, full learnable."""
    if mode not in ABLATION_MODES:
        raise ConfigError(f"ablation mode must be one of {ABLATION_MODES}, got {mode!r}")
    return TitansModel(model.params.copy(), replace(model.backbone, mode=mode), model.tokenizer, model.cache_size)
