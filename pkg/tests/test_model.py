import math

import numpy as np
import pytest

from xlchain import tensor as T
from xlchain.errors import CompatibilityError, ConfigError, FormatError, InputError
from xlchain.model import (
    ModelConfig,
    checkpoint_bytes,
    classify_loss,
    forward_classify,
    forward_mlm,
    init_model,
    load_checkpoint,
    mlm_loss,
    parse_checkpoint,
    save_checkpoint,
)
from xlchain.tokenizer import PAD, encode, train_bpe

from oracles import central_difference, relative_error

TINY = ModelConfig(vocab_size=50, max_positions=12, d_model=16, n_heads=2, n_layers=1, d_ff=24, dropout_rate=0.0)


def random_batch(rng, config, batch=3, length=7):
    ids = rng.integers(5, config.vocab_size, size=(batch, length))
    ids[:, 0] = 2
    mask = np.ones_like(ids)
    for row in range(batch):
        n = rng.integers(3, length + 1)
        ids[row, n - 1] = 3
        ids[row, n:] = PAD
        mask[row, n:] = 0
    return ids, mask


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=4)

    def test_binary_only(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_classes=3)

    def test_param_count_matches_hand_sum(self):
        cfg = ModelConfig(vocab_size=1000, max_positions=50, d_model=64, n_heads=4, n_layers=2, d_ff=128)
        # tok 1000*64 + pos 50*64
        # per layer: 2 LN (2*128) + 4 projections 4*(64*64+64) + w1 64*128 + b1 128 + w2 128*64 + b2 64 = 33472
        # final LN 128, MLM head 64*1000+1000, classifier 64*2+2
        hand = 64000 + 3200 + 2 * 33472 + 128 + 65000 + 130
        assert hand == 199402
        assert cfg.param_count() == hand
        assert init_model(cfg, 0).count() == hand


class TestInit:
    def test_deterministic(self):
        a, b = init_model(TINY, 3), init_model(TINY, 3)
        for (na, ta), (nb, tb) in zip(a.items(), b.items()):
            assert na == nb and ta.data.tobytes() == tb.data.tobytes()

    def test_layer_norm_gains_are_one_and_biases_zero(self):
        p = init_model(TINY, 0)
        for name, t in p.items():
            if name.endswith("gamma"):
                assert (t.data == 1.0).all()
            elif t.ndim == 1:
                assert (t.data == 0.0).all()

    def test_weight_scale(self):
        w = init_model(ModelConfig(), 0)["tok_emb"].data
        assert abs(w.std() - 0.02) < 0.001


class TestForward:
    def test_classify_shape(self):
        rng = np.random.default_rng(0)
        p = init_model(TINY, 0)
        assert forward_classify(p, random_batch(rng, TINY, batch=5)).shape == (5, 2)

    def test_mlm_shape(self):
        rng = np.random.default_rng(0)
        p = init_model(TINY, 0)
        assert forward_mlm(p, random_batch(rng, TINY, 2, 6)).shape == (2, 6, 50)

    def test_extra_padding_leaves_logits_unchanged(self):
        rng = np.random.default_rng(1)
        p = init_model(TINY, 0)
        ids, mask = random_batch(rng, TINY, 4, 6)
        wide_ids = np.concatenate([ids, np.full((4, 5), PAD)], axis=1)
        wide_mask = np.concatenate([mask, np.zeros((4, 5), dtype=mask.dtype)], axis=1)
        a = forward_classify(p, (ids, mask)).data
        b = forward_classify(p, (wide_ids, wide_mask)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)
        m1 = forward_mlm(p, (ids, mask)).data
        m2 = forward_mlm(p, (wide_ids, wide_mask)).data[:, :6]
        np.testing.assert_allclose(m1[mask == 1], m2[mask == 1], rtol=0, atol=1e-9)

    def test_eval_mode_is_deterministic(self):
        rng = np.random.default_rng(2)
        p = init_model(ModelConfig(vocab_size=50, d_model=16, n_heads=2, n_layers=1, d_ff=24), 0)
        batch = random_batch(rng, TINY)
        np.testing.assert_array_equal(forward_classify(p, batch).data, forward_classify(p, batch).data)

    def test_dropout_only_in_training(self):
        rng = np.random.default_rng(3)
        p = init_model(ModelConfig(vocab_size=50, d_model=16, n_heads=2, n_layers=1, d_ff=24, dropout_rate=0.5), 0)
        batch = random_batch(rng, TINY)
        a = forward_classify(p, batch, training=True, rng=np.random.default_rng(0)).data
        b = forward_classify(p, batch, training=True, rng=np.random.default_rng(1)).data
        assert not np.allclose(a, b)

    def test_attention_rows_sum_to_one_over_real_keys(self):
        rng = np.random.default_rng(4)
        p = init_model(TINY, 0)
        ids, mask = random_batch(rng, TINY, 3, 7)
        attn = []
        forward_mlm(p, (ids, mask), attention=attn)
        probs = attn[0]
        assert probs.shape == (3, TINY.n_heads, 7, 7)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
        assert (probs[np.broadcast_to((mask == 0)[:, None, None, :], probs.shape)] == 0).all()

    def test_too_long_sequence(self):
        p = init_model(TINY, 0)
        with pytest.raises(InputError):
            forward_classify(p, (np.full((1, 13), 5), np.ones((1, 13))))

    def test_accepts_token_sequences(self):
        vocab = train_bpe(["ab ab cd"], 9)
        cfg = ModelConfig(vocab_size=vocab.size, max_positions=8, d_model=8, n_heads=2, n_layers=1, d_ff=8)
        p = init_model(cfg, 0)
        seqs = [encode(vocab, "ab", 8), encode(vocab, "ab cd", 8)]
        assert forward_classify(p, seqs).shape == (2, 2)

    def test_untrained_mlm_loss_near_log_vocab(self):
        cfg = ModelConfig(vocab_size=1000)
        p = init_model(cfg, 0)
        rng = np.random.default_rng(5)
        ids, mask = random_batch(rng, cfg, 8, 20)
        targets = np.where(mask == 1, ids, -1)
        loss = mlm_loss(p, ids, mask, targets).item()
        assert abs(loss - math.log(1000)) / math.log(1000) < 0.10


def test_full_classifier_gradient_check():
    cfg = ModelConfig(vocab_size=30, max_positions=8, d_model=8, n_heads=2, n_layers=1, d_ff=12, dropout_rate=0.0)
    p = init_model(cfg, 0)
    rng = np.random.default_rng(6)
    for t in p:  # move away from the symmetric initialisation
        t.data += rng.normal(scale=0.3, size=t.shape)
    ids, mask = random_batch(rng, cfg, 3, 6)
    labels = np.array([0, 1, 1])
    T.backward(classify_loss(p, ids, mask, labels))
    for name, t in p.items():
        numeric = central_difference(lambda: classify_loss(p, ids, mask, labels).item(), t.data)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert relative_error(analytic, numeric) < 1e-4, name


def test_mlm_gradient_check():
    cfg = ModelConfig(vocab_size=20, max_positions=8, d_model=8, n_heads=2, n_layers=1, d_ff=8, dropout_rate=0.0)
    p = init_model(cfg, 1)
    rng = np.random.default_rng(7)
    for t in p:
        t.data += rng.normal(scale=0.3, size=t.shape)
    ids, mask = random_batch(rng, cfg, 2, 6)
    targets = np.where((mask == 1) & (rng.random(ids.shape) < 0.5), ids, -1)
    targets[0, 1] = ids[0, 1]
    T.backward(mlm_loss(p, ids, mask, targets))
    for name, t in p.items():
        numeric = central_difference(lambda: mlm_loss(p, ids, mask, targets).item(), t.data)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert relative_error(analytic, numeric) < 1e-4, name


class TestCheckpoint:
    @pytest.fixture
    def model(self):
        vocab = train_bpe(["abc abd abe", "xyz xy"], 20)
        cfg = ModelConfig(vocab_size=vocab.size, max_positions=10, d_model=8, n_heads=2, n_layers=1, d_ff=8)
        return init_model(cfg, 0), vocab

    def test_save_load_save_is_byte_identical(self, model, tmp_path):
        params, vocab = model
        save_checkpoint(params, vocab, tmp_path / "a.ckpt", {"chain": "syn0,syn1"})
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(loaded.params, loaded.vocab, tmp_path / "b.ckpt", loaded.meta)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded.config == params.config
        assert loaded.vocab == vocab
        assert loaded.meta == {"chain": "syn0,syn1"}

    def test_tensors_roundtrip_at_float32(self, model, tmp_path):
        params, vocab = model
        save_checkpoint(params, vocab, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt").params
        for name, t in params.items():
            np.testing.assert_array_equal(loaded[name].data, t.data.astype(np.float32).astype(np.float64))

    def test_logits_match_after_reload(self, model, tmp_path):
        params, vocab = model
        save_checkpoint(params, vocab, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt").params
        batch = [encode(vocab, "abc xyz", 10), encode(vocab, "abd", 10)]
        np.testing.assert_allclose(forward_classify(loaded, batch).data, forward_classify(params, batch).data, rtol=1e-6, atol=1e-7)

    def test_header_layout(self, model):
        params, vocab = model
        raw = checkpoint_bytes(params, vocab)
        assert raw[:4] == b"XCHN"
        assert int.from_bytes(raw[4:8], "little") == 1

    def test_bad_magic(self, model):
        raw = bytearray(checkpoint_bytes(*model))
        raw[0:4] = b"XCHX"
        with pytest.raises(FormatError, match="offset 0"):
            parse_checkpoint(bytes(raw))

    def test_bad_version(self, model):
        raw = bytearray(checkpoint_bytes(*model))
        raw[4] = 9
        with pytest.raises(FormatError, match="offset 4"):
            parse_checkpoint(bytes(raw))

    @pytest.mark.parametrize("cut", [2, 10, 30, 200, -1])
    def test_truncation_names_offset(self, model, cut):
        raw = checkpoint_bytes(*model)
        with pytest.raises(FormatError, match=r"offset \d+"):
            parse_checkpoint(raw[:cut])

    def test_trailing_bytes(self, model):
        with pytest.raises(FormatError, match="trailing"):
            parse_checkpoint(checkpoint_bytes(*model) + b"\0")

    def test_vocab_mismatch(self, model):
        params, _ = model
        other = train_bpe(["completely different corpus here"], 30)
        with pytest.raises(CompatibilityError):
            checkpoint_bytes(params, other)
