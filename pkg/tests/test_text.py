import numpy as np
import pytest

from lawground.errors import DataError
from lawground.params import ParamStore
from lawground.tensor import Tape, layer_norm, take_rows
from lawground.text import (
    CLS_ID,
    PAD_ID,
    UNK_ID,
    TextEncoder,
    Vocabulary,
    tokenize,
)

WORDS = ["red", "green", "blue", "circle", "square", "left", "of", "the"]


@pytest.fixture
def vocab():
    return Vocabulary(WORDS)


def test_vocab_reserved_ids(vocab):
    assert vocab.id_of("[PAD]") == PAD_ID == 0
    assert vocab.id_of("[CLS]") == CLS_ID == 1
    assert vocab.id_of("[UNK]") == UNK_ID == 2
    assert vocab.id_of("red") == 3  # first corpus word after reserved ids


def test_vocab_file_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    assert lines == WORDS  # one token per line, reserved ids not written
    again = Vocabulary.load(path)
    assert again.words == vocab.words


def test_tokenize_basic(vocab):
    seq = tokenize("red circle", vocab, max_len=6)
    assert seq.ids.tolist() == [CLS_ID, vocab.id_of("red"), vocab.id_of("circle"),
                                PAD_ID, PAD_ID, PAD_ID]
    assert seq.mask.tolist() == [True, True, True, False, False, False]


def test_tokenize_unknown_word(vocab):
    seq = tokenize("red dragon", vocab, max_len=6)
    assert seq.ids[2] == UNK_ID


def test_tokenize_truncates_keeping_earliest(vocab):
    words = WORDS * 3  # longer than max_len
    seq = tokenize(" ".join(words), vocab, max_len=8)
    assert len(seq.ids) == 8
    assert seq.mask.all()
    assert seq.ids[0] == CLS_ID
    assert [vocab.word_of(i) for i in seq.ids[1:]] == words[:7]


def test_tokenize_rejects_empty(vocab):
    with pytest.raises(DataError):
        tokenize("   ", vocab)


def test_tokenize_lowercases(vocab):
    a = tokenize("RED Circle", vocab, max_len=6)
    b = tokenize("red circle", vocab, max_len=6)
    assert np.array_equal(a.ids, b.ids)


def build_encoder(vocab, max_len=8, layers=2, width=16, heads=2, seed=0):
    store = ParamStore(seed)
    enc = TextEncoder(store, vocab_size=len(vocab), width=width, layers=layers,
                      heads=heads, max_len=max_len)
    return enc, store


def test_encode_shapes(vocab):
    enc, _ = build_encoder(vocab)
    out = enc.encode(tokenize("red circle", vocab, max_len=8))
    assert out.feats.shape == (8, 16)
    assert out.cls.shape == (16,)


def test_encode_pad_content_invariance(vocab):
    # same real tokens, different junk beyond the mask: real rows identical
    enc, _ = build_encoder(vocab)
    seq_a = tokenize("red circle", vocab, max_len=8)
    seq_b = tokenize("red circle", vocab, max_len=8)
    seq_b.ids[4:] = vocab.id_of("the")  # junk ids in masked region
    out_a = enc.encode(seq_a).feats.data
    out_b = enc.encode(seq_b).feats.data
    assert np.array_equal(out_a[:3], out_b[:3])


def test_encode_determinism(vocab):
    enc, _ = build_encoder(vocab)
    seq = tokenize("blue square left of the red circle", vocab, max_len=8)
    a = enc.encode(seq).feats.data
    b = enc.encode(seq).feats.data
    assert np.array_equal(a, b)


def test_encode_rejects_out_of_range_ids(vocab):
    enc, _ = build_encoder(vocab)
    seq = tokenize("red circle", vocab, max_len=8)
    seq.ids[1] = len(vocab) + 7
    with pytest.raises(DataError):
        enc.encode(seq)


def test_encode_degenerate_config_is_residual_clean(vocab):
    # zeroed residual branches: output is just the normalized embeddings+positions
    enc, store = build_encoder(vocab, layers=1)
    store["text.block0.attn.out.weight"].data[...] = 0.0
    store["text.block0.mlp.fc2.weight"].data[...] = 0.0
    seq = tokenize("red circle", vocab, max_len=8)
    got = enc.encode(seq).feats.data
    want = layer_norm(take_rows(enc.embed, seq.ids) + enc.pos,
                      enc.final_g, enc.final_b).data
    np.testing.assert_allclose(got, want, atol=0)


def test_encode_grad_check_small_config(vocab):
    from lawground.tensor import grad_check

    enc, store = build_encoder(vocab, max_len=4, layers=1, width=8, heads=2)
    seq = tokenize("red circle blue", vocab, max_len=4)
    params = [p for _, p in store.items()]

    def loss_fn(*_):
        out = enc.encode(seq)
        return (out.feats * out.feats).mean()

    assert grad_check(loss_fn, params) <= 1e-4
