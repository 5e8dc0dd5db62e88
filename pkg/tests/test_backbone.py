"""
Tests for the gated memory/attention backbone.

The hand-computed cases use d_model=1 with unit weights so every number can
be checked by hand; the rest compare streaming, ablation and gradients
against the unsplit full graph.
"""
import numpy as np
import pytest
from scipy.special import expit

from backbone import (BackboneSpec, MemoryState, TitansModel, ablation_mode, attention_mask, build_graph,
                      init_backbone_params, memory_update, sliding_attention)
from config import PipelineConfig
from errors import CheckpointError, StaleStateError
from numkernel import ParameterSet, gradcheck


def _unit_params(d=1, theta=0.0):
    return ParameterSet({
        "blk0.w_q": np.ones((d, d)), "blk0.w_k": np.ones((d, d)), "blk0.w_v": np.ones((d, d)),
        "blk0.w_o": np.ones((d, d)), "blk0.theta": np.full(d, theta),
        "blk0.w_write": np.eye(d), "blk0.b_write": np.zeros(d),
    })


def test_memory_recurrence_with_half_decay():
    params = _unit_params()
    h = np.zeros(1)
    trace = []
    for _ in range(3):
        h = memory_update(h, np.ones(1), params, write_fn=lambda x: np.ones_like(x))
        trace.append(float(h[0]))
    np.testing.assert_allclose(trace, [0.5, 0.75, 0.875])


def test_memory_decay_limits():
    write = lambda x: np.full_like(x, 0.3)  # noqa: E731
    h_prev = np.array([2.0])
    kept = memory_update(h_prev, np.ones(1), _unit_params(theta=50.0), write_fn=write)
    replaced = memory_update(h_prev, np.ones(1), _unit_params(theta=-50.0), write_fn=write)
    np.testing.assert_allclose(kept, h_prev, rtol=1e-12)
    np.testing.assert_allclose(replaced, [0.3], rtol=1e-12)


def test_memory_update_default_write_uses_tanh():
    params = _unit_params(theta=np.log(3.0))  # retain 0.75
    h = memory_update(np.array([1.0]), np.array([0.5]), params)
    np.testing.assert_allclose(h, 0.75 + 0.25 * np.tanh(0.5))


def test_memory_stays_bounded_over_long_streams(rng):
    d = 6
    for _ in range(3):
        params = ParameterSet({
            "blk0.theta": rng.normal(scale=3.0, size=d),
            "blk0.w_write": rng.normal(scale=3.0, size=(d, d)),
            "blk0.b_write": rng.normal(size=d),
        })
        h = rng.uniform(-4.0, 4.0, size=d)
        bound = max(np.max(np.abs(h)), 1.0)
        for x in rng.normal(scale=5.0, size=(10000, d)):
            h = memory_update(h, x, params)
            assert np.max(np.abs(h)) <= bound + 1e-12


def test_sliding_attention_hand_computed():
    """Tokens 1, 2, 3 with window 2: each query sees itself and its predecessor."""
    spec = BackboneSpec(d_model=1, heads=1, head_dim=1, window=2)
    out = sliding_attention(np.array([[1.0], [2.0], [3.0]]), _unit_params(), spec)
    np.testing.assert_allclose(out[:, 0], [1.0, 1.0 + expit(2.0), 2.0 + expit(3.0)], rtol=1e-12)
    assert out[1, 0] == pytest.approx(1.8808, abs=1e-4)


def test_single_token_attention_is_the_value_projection(rng):
    spec = BackboneSpec(d_model=4, heads=2, head_dim=3, window=5)
    params = ParameterSet(init_backbone_params(spec, rng))
    x = rng.normal(size=(1, 4))
    np.testing.assert_allclose(sliding_attention(x, params, spec), x @ params["blk0.w_v"] @ params["blk0.w_o"])


def test_attention_mask_window():
    mask = attention_mask(3, 2, 3)
    expected = np.array([
        [True, True, True, False, False],
        [False, True, True, True, False],
        [False, False, True, True, True],
    ])
    np.testing.assert_array_equal(mask, expected)


def _small_model(rng, **backbone):
    spec = BackboneSpec(**{"d_model": 4, "heads": 2, "head_dim": 2, "window": 3, **backbone})
    return TitansModel(ParameterSet(init_backbone_params(spec, rng)), spec)


def test_gate_limits_select_one_branch(rng):
    model = _small_model(rng)
    tokens = rng.normal(size=(6, 4))
    model.params["blk0.w_g"] = np.zeros((8, 4))
    model.params["blk0.b_g"] = np.full(4, 50.0)
    full, _, _ = model.mag_forward(tokens, MemoryState.zeros(model.backbone))
    attn, _, _ = ablation_mode(model, "attention_only").mag_forward(tokens, MemoryState.zeros(model.backbone))
    np.testing.assert_allclose(full, attn, atol=1e-12)

    model.params["blk0.b_g"] = np.full(4, -50.0)
    full, _, _ = model.mag_forward(tokens, MemoryState.zeros(model.backbone))
    mem, _, _ = ablation_mode(model, "memory_only").mag_forward(tokens, MemoryState.zeros(model.backbone))
    np.testing.assert_allclose(full, mem, atol=1e-12)


def test_outputs_are_causal(rng):
    """Perturbing token j leaves every output before j bit-for-bit unchanged."""
    model = _small_model(rng, n_blocks=2)
    for _ in range(100):
        tokens = rng.normal(size=(10, 4))
        j = int(rng.integers(1, 10))
        base, probs, _ = model.mag_forward(tokens, MemoryState.zeros(model.backbone))
        changed = tokens.copy()
        changed[j] += rng.normal(scale=10.0, size=4)
        other, other_probs, _ = model.mag_forward(changed, MemoryState.zeros(model.backbone))
        np.testing.assert_array_equal(base[:j], other[:j])
        np.testing.assert_array_equal(probs[:j], other_probs[:j])
        assert not np.allclose(base[j:], other[j:])
        assert np.all((probs > 0.0) & (probs < 1.0))


def test_streaming_split_matches_one_call(rng):
    """4 + 6 tokens with carried state equals 10 tokens at once."""
    model = _small_model(rng, n_blocks=2, window=3)
    tokens = rng.normal(size=(10, 4))
    whole, whole_p, whole_state = model.mag_forward(tokens, MemoryState.zeros(model.backbone))
    first, first_p, state = model.mag_forward(tokens[:4], MemoryState.zeros(model.backbone), start_step=0)
    second, second_p, state = model.mag_forward(tokens[4:], state, start_step=4)
    np.testing.assert_allclose(np.concatenate([first, second]), whole, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(np.concatenate([first_p, second_p]), whole_p, rtol=1e-10, atol=1e-12)
    assert state.step == 10
    for b in range(2):
        np.testing.assert_allclose(state.h[b], whole_state.h[b], rtol=1e-10, atol=1e-12)


def test_two_context_windows_stream_like_one_call(rng):
    """24 tokens in two 12-token calls with a 12-token attention window."""
    model = _small_model(rng, window=12)
    tokens = rng.normal(size=(24, 4))
    whole, whole_p, _ = model.mag_forward(tokens, MemoryState.zeros(model.backbone))
    first, first_p, state = model.mag_forward(tokens[:12], MemoryState.zeros(model.backbone))
    assert state.prefix_len == 11
    second, second_p, _ = model.mag_forward(tokens[12:], state, start_step=12)
    np.testing.assert_allclose(np.concatenate([first, second]), whole, rtol=0, atol=1e-9)
    np.testing.assert_allclose(np.concatenate([first_p, second_p]), whole_p, rtol=0, atol=1e-9)


def test_streaming_state_does_not_grow(rng):
    """The carried state is h plus S-1 prefix tokens at token 10 and at token 10,000 alike."""
    model = _small_model(rng, n_blocks=2, window=5)
    state = MemoryState.zeros(model.backbone)
    _, _, state = model.mag_forward(rng.normal(size=(10, 4)), state)
    early = [(h.shape, p.shape) for h, p in zip(state.h, state.prefix)]
    _, _, stream = model.mag_forward(rng.normal(size=(1, 4)), state)
    step_graph = model.graph(1, 1, state.prefix_len, from_tokens=True)

    for _ in range(20):
        _, _, stream = model.mag_forward(rng.normal(size=(500, 4)), stream)
    assert stream.step == 10011
    late = [(h.shape, p.shape) for h, p in zip(stream.h, stream.prefix)]
    assert late == early == [((1, 4), (1, 4, 4))] * 2
    _, _, final = model.mag_forward(rng.normal(size=(1, 4)), stream)
    assert model.graph(1, 1, stream.prefix_len, from_tokens=True) is step_graph
    assert sum(h.nbytes + p.nbytes for h, p in zip(final.h, final.prefix)) == \
        sum(h.nbytes + p.nbytes for h, p in zip(state.h, state.prefix))


def test_stale_state_is_rejected(rng):
    model = _small_model(rng)
    state = MemoryState.zeros(model.backbone)
    _, _, nxt = model.mag_forward(rng.normal(size=(3, 4)), state)
    with pytest.raises(StaleStateError):
        model.mag_forward(rng.normal(size=(3, 4)), state)
    with pytest.raises(StaleStateError):
        model.mag_forward(rng.normal(size=(3, 4)), nxt, start_step=0)


def _tiny_config(**overrides):
    return PipelineConfig(temporal_filters=2, spatial_filters=2, temporal_kernel=4, pool_window=10, pool_stride=5,
                          d_model=4, heads=2, head_dim=2, **overrides)


ATTENTION = ("w_q", "w_k", "w_v", "w_o")
MEMORY = ("theta", "w_write", "b_write", "w_mem", "b_mem")
GATE = ("w_g", "b_g")


@pytest.mark.parametrize("mode, dead", [
    ("full", ()),
    ("attention_only", MEMORY + GATE),
    ("memory_only", ATTENTION + GATE),
])
def test_ablation_gradients(mode, dead, rng):
    """Pinned gates leave the disabled branch and the gate itself without gradient."""
    model = ablation_mode(TitansModel.initialize(_tiny_config(), seed=3, channels=2, n_samples=64), mode)
    segments = rng.normal(size=(5, 2, 64))
    index = np.array([[0, 1, 2, 3], [1, 2, 3, 4]])
    _, grads = model.loss_and_grads(segments, index, np.array([1.0, 0.0]))
    for name in ATTENTION + MEMORY + GATE:
        g = grads[f"blk0.{name}"]
        if name in dead:
            assert np.all(g == 0.0), name
        else:
            assert np.any(g != 0.0), name
    assert np.any(grads["tok.w_temp"] != 0.0)
    assert "norm.mean" not in grads


def test_backbone_gradients_over_eight_steps(rng):
    spec = BackboneSpec(d_model=3, heads=1, head_dim=2, window=4)
    graph = build_graph(spec, batch=1, length=8)
    point = dict(init_backbone_params(spec, rng))
    point["blk0.b_g"] = rng.normal(size=3)
    point["tokens"] = rng.normal(size=(1, 8, 3))
    point["h0.0"] = rng.normal(scale=0.1, size=(1, 3))
    names = list(init_backbone_params(spec, rng))
    assert gradcheck(graph, point, "probs", epsilon=1e-6, params=names) < 1e-4


def test_checkpoint_must_match_backbone(tmp_path):
    config = _tiny_config()
    with pytest.raises(CheckpointError):
        TitansModel.from_checkpoint(config, str(tmp_path / "missing.teeg"), channels=2, n_samples=64)
    model = TitansModel.initialize(config, channels=2, n_samples=64)
    path = str(tmp_path / "model.teeg")
    model.params.save(path)
    loaded = TitansModel.from_checkpoint(config, path, channels=2, n_samples=64)
    assert loaded.params.equals(model.params)
    with pytest.raises(CheckpointError):
        TitansModel.from_checkpoint(_tiny_config(n_blocks=2), path, channels=2, n_samples=64)
