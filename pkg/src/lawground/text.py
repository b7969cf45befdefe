"""Expression tokenizer and the small transformer text encoder.

Tokenization is lowercase whitespace splitting against a fixed vocabulary.
Sequences are [CLS]-prefixed and padded/truncated to a fixed length; the
boolean mask marks [CLS] and real tokens. The encoder is a pre-norm
transformer whose attention adds a -1e30 logit bias on padded keys, so pad
content can never leak into real-token rows.
"""

from dataclasses import dataclass

import numpy as np

from .attention import multihead_attention
from .errors import DataError
from .tensor import MASK_NEG, Tensor, gelu, layer_norm, linear, take_rows

PAD_ID, CLS_ID, UNK_ID = 0, 1, 2
RESERVED = ("[PAD]", "[CLS]", "[UNK]")


class Vocabulary:
    """Word -> id map with fixed reserved ids 0=[PAD], 1=[CLS], 2=[UNK]."""

    def __init__(self, words):
        self.words = list(RESERVED) + list(words)
        if len(set(self.words)) != len(self.words):
            raise DataError("vocabulary contains duplicate tokens")
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def id_of(self, word):
        return self._ids.get(word, UNK_ID)

    def word_of(self, idx):
        return self.words[idx]

    def save(self, path):
        # one token per line; line number == id - len(RESERVED)
        with open(path, "w", encoding="utf-8") as fh:
            for w in self.words[len(RESERVED):]:
                fh.write(w + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            words = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(words)


@dataclass
class TokenSequence:
    ids: np.ndarray    # int64, length == max_len, position 0 is [CLS]
    mask: np.ndarray   # bool, True on [CLS] and real tokens only


@dataclass
class LinguisticFeatures:
    feats: Tensor      # (L, d_l)
    mask: np.ndarray   # (L,) bool

    @property
    def cls(self):
        """Summary feature of the whole expression (row 0)."""
        return self.feats[0]


def tokenize(expression, vocab, max_len=40):
    words = expression.strip().lower().split()
    if not words:
        raise DataError("empty expression")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    mask = np.zeros(max_len, dtype=bool)
    ids[0] = CLS_ID
    mask[0] = True
    for pos, word in enumerate(words[:max_len - 1], start=1):
        ids[pos] = vocab.id_of(word)
        mask[pos] = True
    return TokenSequence(ids=ids, mask=mask)


class TextEncoder:
    """Pre-norm transformer encoder producing per-token features."""

    def __init__(self, store, vocab_size, width=64, layers=2, heads=4, max_len=40):
        if width % heads:
            raise DataError(f"text width {width} not divisible by {heads} heads")
        self.vocab_size = vocab_size
        self.width = width
        self.heads = heads
        self.max_len = max_len
        self.embed = store.gaussian("text.embed", (vocab_size, width))
        self.pos = store.gaussian("text.pos", (max_len, width))
        self.blocks = []
        for i in range(layers):
            p = f"text.block{i}."
            self.blocks.append({
                "ln1_g": store.ones(p + "ln1.gain", (width,)),
                "ln1_b": store.zeros(p + "ln1.bias", (width,)),
                "qkv_w": store.gaussian(p + "attn.qkv.weight", (3 * width, width)),
                "qkv_b": store.zeros(p + "attn.qkv.bias", (3 * width,)),
                "out_w": store.gaussian(p + "attn.out.weight", (width, width)),
                "out_b": store.zeros(p + "attn.out.bias", (width,)),
                "ln2_g": store.ones(p + "ln2.gain", (width,)),
                "ln2_b": store.zeros(p + "ln2.bias", (width,)),
                "mlp_w1": store.gaussian(p + "mlp.fc1.weight", (4 * width, width)),
                "mlp_b1": store.zeros(p + "mlp.fc1.bias", (4 * width,)),
                "mlp_w2": store.gaussian(p + "mlp.fc2.weight", (width, 4 * width)),
                "mlp_b2": store.zeros(p + "mlp.fc2.bias", (width,)),
            })
        self.final_g = store.ones("text.final_ln.gain", (width,))
        self.final_b = store.zeros("text.final_ln.bias", (width,))

    def encode(self, tokens):
        ids, mask = tokens.ids, tokens.mask
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise DataError(
                f"token id out of range for vocabulary of {self.vocab_size}")
        key_bias = np.where(mask, 0.0, MASK_NEG)
        x = take_rows(self.embed, ids) + self.pos[:len(ids), :]
        for blk in self.blocks:
            h = layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            attn_out, _ = multihead_attention(
                h, blk["qkv_w"], blk["qkv_b"], blk["out_w"], blk["out_b"],
                self.heads, key_bias=key_bias)
            x = x + attn_out
            h = layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            h = gelu(linear(h, blk["mlp_w1"], blk["mlp_b1"]))
            x = x + linear(h, blk["mlp_w2"], blk["mlp_b2"])
        x = layer_norm(x, self.final_g, self.final_b)
        return LinguisticFeatures(feats=x, mask=mask)
