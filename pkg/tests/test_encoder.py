from __future__ import annotations

import numpy as np
import pytest

from conftest import gradient_check, random_tagged_input, tiny_model
from demoner.encoder import (
    SEP,
    UNK,
    EncoderConfig,
    EncoderParams,
    Vocab,
    assemble,
    embed,
    transfer_embedder,
)
from demoner.model import MAGIC, NerModel, load_model, save_model


def test_vocab_specials_and_unknowns():
    v = Vocab(["a", "b", "a", SEP])
    assert v.tokens[:3] == ["[PAD]", UNK, SEP] and len(v) == 5
    assert v.encode(["b", "zzz"]).tolist() == [4, v.unk_id]


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, dropout=1.0)


def test_assemble_truncates_demonstration_only():
    ids, b = assemble(np.arange(3, 6), np.arange(10, 20), max_len=7)
    assert b == 3 and ids.tolist() == [3, 4, 5, 10, 11, 12, 13]
    with pytest.raises(ValueError):
        assemble(np.arange(8), np.arange(2), max_len=7)
    with pytest.raises(ValueError):
        assemble(np.zeros(0, dtype=int), np.arange(2), max_len=7)


def test_embed_shapes_and_boundary():
    cfg = EncoderConfig(vocab_size=20, d_model=16, n_heads=4, n_layers=2, max_len=32)
    params = EncoderParams.init(cfg, np.random.default_rng(0))
    hidden, _ = embed(np.array([3, 4, 5, 6, 7]), 2, params)
    assert hidden.states.shape == (5, 16)
    assert hidden.input_states.shape == (2, 16) and hidden.demo_states.shape == (3, 16)


def test_out_of_range_ids_map_to_unk():
    cfg = EncoderConfig(vocab_size=10, d_model=8, n_heads=2, n_layers=1, max_len=8)
    params = EncoderParams.init(cfg, np.random.default_rng(1))
    a, _ = embed(np.array([3, 99]), 2, params)
    b, _ = embed(np.array([3, 1]), 2, params)
    assert np.array_equal(a.states, b.states)


def test_inference_is_deterministic_and_dropout_is_seeded():
    cfg = EncoderConfig(vocab_size=12, d_model=8, n_heads=2, n_layers=1, max_len=8, dropout=0.5)
    params = EncoderParams.init(cfg, np.random.default_rng(2))
    ids = np.array([3, 4, 5])
    assert np.array_equal(embed(ids, 3, params)[0].states, embed(ids, 3, params)[0].states)
    r1 = embed(ids, 3, params, train=True, rng=np.random.default_rng(5))[0].states
    r2 = embed(ids, 3, params, train=True, rng=np.random.default_rng(5))[0].states
    assert np.array_equal(r1, r2)


def test_demonstration_changes_input_states():
    model = tiny_model(0)
    a, _, _ = model.emissions(*model.encode_input(["t1", "t2"]))
    b, _, _ = model.emissions(*model.encode_input(["t1", "t2"], ["t3", "is", "PER", "."]))
    assert a.shape == b.shape and not np.allclose(a, b)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_small_model(seed):
    model = tiny_model(seed, d_model=8)
    rng = np.random.default_rng(100 + seed)
    for arr in model.parameters().values():  # move away from the symmetric init
        arr += rng.normal(0, 0.3, size=arr.shape)
    ids, n, tags = random_tagged_input(model, rng)
    total, per_array = gradient_check(model, ids, n, tags)
    assert total < 1e-4
    assert max(per_array.values()) < 1e-4, per_array


def test_transfer_copies_encoder_only():
    src, dst = tiny_model(0), tiny_model(1)
    crf_before = dst.crf.copy()
    transfer_embedder(src.encoder, dst)
    for k, v in src.encoder.arrays.items():
        assert np.array_equal(dst.encoder[k], v) and dst.encoder[k] is not v
    assert np.array_equal(dst.crf.transitions, crf_before.transitions)
    with pytest.raises(ValueError):
        transfer_embedder(src.encoder, tiny_model(0, d_model=16))


def test_weight_file_round_trip(tmp_path):
    model = NerModel.create(Vocab(["a", "b", "PER"]), ("PER",), 4, constrained=True, d_model=8, n_heads=2, n_layers=1, max_len=16)
    path = tmp_path / "m.bin"
    save_model(model, path)
    assert path.read_bytes().startswith(MAGIC)
    back = load_model(path)
    assert back.vocab.tokens == model.vocab.tokens and back.tagset == model.tagset
    assert back.constrained and back.config == model.config
    for name, arr in model.parameters().items():
        assert np.array_equal(back.parameters()[name], arr)
    assert back.predict(["a", "b"]) == model.predict(["a", "b"])


def test_weight_file_rejects_foreign_bytes(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"not a model")
    with pytest.raises(ValueError):
        load_model(path)
