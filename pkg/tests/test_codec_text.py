import numpy as np
import pytest
from hypothesis import given, strategies as st

from t2v.codec import CodecConfig, ConvCodec, IdentityCodec, psnr, train_codec
from t2v.rng import Rng
from t2v.text import TextConfig, TextEncoder, Vocabulary, tokenize


def block_constant_clip(rng, F=2, H=16, W=24):
    blocks = rng.uniform((F, H // 8, W // 8, 3), dtype=np.float32)
    return np.repeat(np.repeat(blocks, 8, axis=1), 8, axis=2)


def test_identity_codec_exact_on_block_constant():
    v = block_constant_clip(Rng(0))
    c = IdentityCodec()
    z = c.encode(v)
    assert z.shape == (2, 4, 2, 3)
    np.testing.assert_array_equal(c.decode(z), v)


def test_codec_shape_errors():
    c = IdentityCodec()
    with pytest.raises(ValueError):
        c.encode(np.zeros((2, 12, 16, 3)))
    with pytest.raises(ValueError):
        c.encode(np.zeros((2, 16, 16)))
    with pytest.raises(ValueError):
        c.decode(np.full((1, 4, 2, 2), np.nan))


def test_psnr_values():
    a = np.zeros((4, 4))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_conv_codec_is_framewise_and_decodes_to_unit_range():
    codec = ConvCodec(8, Rng(0))
    v = Rng(1).uniform((3, 16, 16, 3))
    z = codec.encode(v)
    assert z.shape == (3, 4, 2, 2)
    np.testing.assert_array_equal(z[1:2], codec.encode(v[1:2]))
    out = codec.decode(z)
    assert out.shape == v.shape and out.min() >= 0 and out.max() <= 1


def test_short_codec_training_beats_init_and_freezes():
    cfg = CodecConfig(channels=8, steps=30, batch_size=4, height=16, width=16, holdout=8)
    codec, rep = train_codec(cfg, log_every=0)
    assert rep["psnr_final"] > rep["psnr_init"]
    assert codec.frozen and all(not p.requires_grad for p in codec.parameters())
    h = codec.fingerprint()
    codec.encode(np.zeros((1, 16, 16, 3), np.float32))
    assert codec.fingerprint() == h


def test_tokenize_layout():
    vocab = Vocabulary.default()
    ids = tokenize("A Red square zzz", vocab, 8)
    expected = [vocab.bos_id, vocab["a"], vocab["red"], vocab["square"], vocab.unk_id, vocab.eos_id, 0, 0]
    assert ids.tolist() == expected
    # truncation keeps BOS/EOS
    long = tokenize(" ".join(["red"] * 20), vocab, 6)
    assert long[0] == vocab.bos_id and long[-1] == vocab.eos_id and len(long) == 6


def test_vocab_round_trip(tmp_path):
    v = Vocabulary.default()
    v.save(tmp_path / "vocab.tsv")
    assert Vocabulary.load(tmp_path / "vocab.tsv").tokens == v.tokens


@given(st.text(alphabet="abcdefghij ", max_size=60))
def test_tokenize_length_and_padding(prompt):
    vocab = Vocabulary.default()
    ids = tokenize(prompt, vocab, 10)
    assert len(ids) == 10 and ids[0] == vocab.bos_id
    eos = int(np.where(ids == vocab.eos_id)[0][0])
    assert np.all(ids[eos + 1:] == vocab.pad_id)


def test_encoder_shapes_and_determinism():
    cfg = TextConfig(max_len=8, dim=16, layers=1, heads=2)
    enc = TextEncoder(cfg, Vocabulary.default(), Rng(0))
    a = enc.encode("a red square moving right")
    assert a.shape == (8, 16)
    b = TextEncoder(cfg, Vocabulary.default(), Rng(0)).encode("a red square moving right")
    np.testing.assert_array_equal(a.data, b.data)
    batch = enc.encode(["a red square", "a blue circle"])
    assert batch.shape == (2, 8, 16)
    assert not np.array_equal(batch.data[0], batch.data[1])


def test_null_embedding_cached_until_params_change():
    enc = TextEncoder(TextConfig(max_len=8, dim=16, layers=1, heads=2), Vocabulary.default(), Rng(0))
    n1 = enc.null_embedding()
    assert enc.null_embedding() is n1
    np.testing.assert_array_equal(n1.data, enc.encode("").data)
    enc.final_norm.bias.data = enc.final_norm.bias.data + 1.0
    n2 = enc.null_embedding()
    assert not np.array_equal(n1.data, n2.data)


def test_full_scale_text_preset():
    cfg = TextConfig.full_scale()
    assert (cfg.max_len, cfg.dim) == (77, 768)
