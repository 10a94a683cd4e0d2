import numpy as np
import pytest

from pfcluster import numkernel as nk
from pfcluster.errors import (
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ConfigError,
    InputError,
)
from pfcluster.model import (
    MAGIC,
    ModelConfig,
    PfnModel,
    build_mask,
    checkpoint_bytes,
    embed,
    embed_tokens,
    encode_context,
    forward,
    forward_packed,
    forward_queries,
    load_checkpoint,
    pad_features,
    param_shapes,
    predict_proba,
    save_checkpoint,
)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(layers=0)
    with pytest.raises(ConfigError, match="laers"):
        ModelConfig.from_dict({"laers": 2})


def test_parameter_names_and_shapes(tiny_model):
    cfg = tiny_model.config
    shapes = param_shapes(cfg)
    assert shapes["label_emb"] == (cfg.c_max + 1, cfg.d_model)
    assert shapes["head.w"] == (cfg.d_model, cfg.c_max)
    assert f"layers.{cfg.layers - 1}.mlp.w2" in shapes
    assert tiny_model.n_parameters() == sum(int(np.prod(s)) for s in shapes.values())


def test_mask_semantics():
    allow = build_mask(5, 2).allow
    expected = np.array([
        [1, 1, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [1, 1, 1, 0, 0],
        [1, 1, 0, 1, 0],
        [1, 1, 0, 0, 1],
    ], dtype=bool)
    assert np.array_equal(allow, expected)
    with pytest.raises(InputError):
        build_mask(3, 3)


def test_embed_marks_queries_unlabeled(tiny_model):
    cfg = tiny_model.config
    X = np.random.default_rng(0).normal(size=(4, 3))
    tokens = embed(tiny_model, X, [1, 0])
    manual = embed_tokens(tiny_model, pad_features(X, cfg.d_max, np.float32), [1, 0, cfg.c_max, cfg.c_max])
    assert np.array_equal(tokens.data, manual.data)
    with pytest.raises(InputError):
        embed(tiny_model, X, [cfg.c_max])
    with pytest.raises(InputError):
        embed(tiny_model, np.zeros((2, cfg.d_max + 1)), [])


def _tokens(model, n, k, seed):
    rng = np.random.default_rng(seed)
    return embed(model, rng.normal(size=(n, 3)), rng.integers(0, 3, size=k))


def test_query_output_ignores_other_queries(tiny_model):
    n, k = 12, 5
    tokens = _tokens(tiny_model, n, k, 1)
    base = forward(tiny_model, tokens, build_mask(n, k)).data
    altered = tokens.data.copy()
    altered[k + 1:] += 3.0   # change every query but the first
    out = forward(tiny_model, nk.Tensor(altered), build_mask(n, k)).data
    assert np.array_equal(out[0], base[0])


def test_cached_context_path_is_bit_identical(tiny_model):
    n, k = 30, 7
    tokens = _tokens(tiny_model, n, k, 2)
    packed = forward_packed(tiny_model, tokens, [(0, n, k)]).data
    cache = encode_context(tiny_model, nk.Tensor(tokens.data[:k]))
    cached = forward_queries(tiny_model, cache, nk.Tensor(tokens.data[k:])).data
    assert np.array_equal(packed, cached)


def test_empty_context_forward(tiny_model):
    tokens = _tokens(tiny_model, 6, 0, 3)
    packed = forward(tiny_model, tokens, build_mask(6, 0)).data
    cache = encode_context(tiny_model, nk.Tensor(tokens.data[:0]))
    assert np.array_equal(forward_queries(tiny_model, cache, tokens).data, packed)


def test_predict_proba_truncates_to_c():
    logits = np.array([[0.0, 0.0, 100.0], [1.0, 2.0, 3.0]])
    p = predict_proba(logits, 2)
    np.testing.assert_allclose(p[0], [0.5, 0.5])
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    with pytest.raises(InputError):
        predict_proba(logits, 4)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_model):
    path = tmp_path / "m.pfc"
    save_checkpoint(tiny_model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == tiny_model.config
    for name, t in tiny_model.params.items():
        assert np.array_equal(loaded.params[name].data, t.data)
    assert checkpoint_bytes(loaded) == path.read_bytes()


def test_checkpoint_errors(tmp_path, tiny_model):
    raw = checkpoint_bytes(tiny_model)
    bad = tmp_path / "bad.pfc"
    bad.write_bytes(b"NOTACKPT" + raw[len(MAGIC):])
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-10])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(bad)
    other = PfnModel.init(ModelConfig(d_max=4, c_max=5, layers=2, heads=2, d_model=8, d_ff=32))
    # splice the other model's tensors under this model's config header
    header_len = len(MAGIC) + 4 + int.from_bytes(raw[len(MAGIC):len(MAGIC) + 4], "little")
    other_raw = checkpoint_bytes(other)
    other_header = len(MAGIC) + 4 + int.from_bytes(other_raw[len(MAGIC):len(MAGIC) + 4], "little")
    bad.write_bytes(raw[:header_len] + other_raw[other_header:])
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(bad)


def test_init_is_seeded():
    cfg = ModelConfig(d_model=16, d_ff=16, heads=2, layers=1)
    a, b = PfnModel.init(cfg, seed=5), PfnModel.init(cfg, seed=5)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(a) != checkpoint_bytes(PfnModel.init(cfg, seed=6))
