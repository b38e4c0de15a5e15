"""Toy dual encoder: a patch MLP-mixer for images and a small transformer for text.

Both towers mean-pool their token states, project linearly into the shared
``embed_dim`` space and L2-normalise, so every embedding has unit norm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError, ParameterError
from .tensor import Tensor

PAD_ID = 0
LN_EPS = 1e-5
MASK_BIAS = -1e4


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return T.layer_norm(x, LN_EPS, g, b)


_linear = T.linear


@dataclass
class ImageEncoderParams:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    hidden_dim: int = 64
    num_layers: int = 2
    embed_dim: int = 32
    token_mlp_dim: int = 16
    channel_mlp_dim: int = 64
    weights: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise DimensionError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim <= 0:
            raise ParameterError("embed_dim must be > 0")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def hyperparams(self) -> dict:
        return {k: getattr(self, k) for k in (
            "image_size", "channels", "patch_size", "hidden_dim", "num_layers",
            "embed_dim", "token_mlp_dim", "channel_mlp_dim")}

    def init_weights(self, rng: np.random.Generator) -> ImageEncoderParams:
        p, h, n = self.patch_size, self.hidden_dim, self.num_patches
        pdim = p * p * self.channels
        w = {"patch_w": _uniform(rng, (pdim, h), pdim), "patch_b": _uniform(rng, (h,), pdim)}
        for i in range(self.num_layers):
            t, c = self.token_mlp_dim, self.channel_mlp_dim
            w[f"mix{i}.ln1_g"] = Tensor(np.ones(h), requires_grad=True)
            w[f"mix{i}.ln1_b"] = Tensor(np.zeros(h), requires_grad=True)
            w[f"mix{i}.tok_w1"] = _uniform(rng, (n, t), n)
            w[f"mix{i}.tok_b1"] = _uniform(rng, (t,), n)
            w[f"mix{i}.tok_w2"] = _uniform(rng, (t, n), t)
            w[f"mix{i}.tok_b2"] = _uniform(rng, (n,), t)
            w[f"mix{i}.ln2_g"] = Tensor(np.ones(h), requires_grad=True)
            w[f"mix{i}.ln2_b"] = Tensor(np.zeros(h), requires_grad=True)
            w[f"mix{i}.ch_w1"] = _uniform(rng, (h, c), h)
            w[f"mix{i}.ch_b1"] = _uniform(rng, (c,), h)
            w[f"mix{i}.ch_w2"] = _uniform(rng, (c, h), c)
            w[f"mix{i}.ch_b2"] = _uniform(rng, (h,), c)
        w["ln_f_g"] = Tensor(np.ones(h), requires_grad=True)
        w["ln_f_b"] = Tensor(np.zeros(h), requires_grad=True)
        w["proj_w"] = _uniform(rng, (h, self.embed_dim), h)
        w["proj_b"] = _uniform(rng, (self.embed_dim,), h)
        self.weights = w
        return self


@dataclass
class TextEncoderParams:
    vocab_size: int = 32
    max_len: int = 16
    hidden_dim: int = 64
    num_layers: int = 2
    embed_dim: int = 32
    ff_dim: int = 64
    dropout_p: float = 0.1
    weights: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.embed_dim <= 0:
            raise ParameterError("embed_dim must be > 0")

    def hyperparams(self) -> dict:
        return {k: getattr(self, k) for k in (
            "vocab_size", "max_len", "hidden_dim", "num_layers", "embed_dim", "ff_dim",
            "dropout_p")}

    def init_weights(self, rng: np.random.Generator) -> TextEncoderParams:
        h, f = self.hidden_dim, self.ff_dim
        w = {
            "tok_emb": _uniform(rng, (self.vocab_size, h), 1),
            "pos_emb": _uniform(rng, (self.max_len, h), 1),
        }
        for i in range(self.num_layers):
            w[f"blk{i}.ln1_g"] = Tensor(np.ones(h), requires_grad=True)
            w[f"blk{i}.ln1_b"] = Tensor(np.zeros(h), requires_grad=True)
            w[f"blk{i}.wqkv"] = _uniform(rng, (h, 3 * h), h)
            w[f"blk{i}.wo"] = _uniform(rng, (h, h), h)
            w[f"blk{i}.bo"] = _uniform(rng, (h,), h)
            w[f"blk{i}.ln2_g"] = Tensor(np.ones(h), requires_grad=True)
            w[f"blk{i}.ln2_b"] = Tensor(np.zeros(h), requires_grad=True)
            w[f"blk{i}.ff_w1"] = _uniform(rng, (h, f), h)
            w[f"blk{i}.ff_b1"] = _uniform(rng, (f,), h)
            w[f"blk{i}.ff_w2"] = _uniform(rng, (f, h), f)
            w[f"blk{i}.ff_b2"] = _uniform(rng, (h,), f)
        w["ln_f_g"] = Tensor(np.ones(h), requires_grad=True)
        w["ln_f_b"] = Tensor(np.zeros(h), requires_grad=True)
        w["proj_w"] = _uniform(rng, (h, self.embed_dim), h)
        w["proj_b"] = _uniform(rng, (self.embed_dim,), h)
        self.weights = w
        return self


# ---------------------------------------------------------------- image tower


def _patchify(imgs: np.ndarray, p: int) -> np.ndarray:
    b, hgt, wid, c = imgs.shape
    x = imgs.reshape(b, hgt // p, p, wid // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (hgt // p) * (wid // p), p * p * c)


def encode_images(params: ImageEncoderParams, imgs, train_mode: bool = False) -> Tensor:
    """Embed a B x H x W x C batch; returns a B x D tensor of unit rows.

    The image tower has no stochastic layers, so ``train_mode`` only
    documents intent.
    """
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    s, c = params.image_size, params.channels
    if imgs.ndim != 4 or imgs.shape[1:] != (s, s, c):
        raise DimensionError(f"expected images of shape (B, {s}, {s}, {c}), got {imgs.shape}")
    w = params.weights
    x = _linear(Tensor(_patchify(imgs, params.patch_size)), w["patch_w"], w["patch_b"])
    for i in range(params.num_layers):
        pre = f"mix{i}."
        # token mixing runs across patches, per channel
        y = T.transpose(_ln(x, w[pre + "ln1_g"], w[pre + "ln1_b"]), (0, 2, 1))
        y = _linear(_linear(y, w[pre + "tok_w1"], w[pre + "tok_b1"], relu=True),
                    w[pre + "tok_w2"], w[pre + "tok_b2"])
        x = T.add(x, T.transpose(y, (0, 2, 1)))
        y = _ln(x, w[pre + "ln2_g"], w[pre + "ln2_b"])
        y = _linear(_linear(y, w[pre + "ch_w1"], w[pre + "ch_b1"], relu=True),
                    w[pre + "ch_w2"], w[pre + "ch_b2"])
        x = T.add(x, y)
    x = T.mean(_ln(x, w["ln_f_g"], w["ln_f_b"]), axis=1)
    return T.l2_normalize(_linear(x, w["proj_w"], w["proj_b"]), axis=-1)


def encode_image(params: ImageEncoderParams, img, train_mode: bool = False) -> np.ndarray:
    with T.no_grad():
        return encode_images(params, np.asarray(img)[None], train_mode).data[0]


# ---------------------------------------------------------------- text tower


def pad_tokens(seqs, max_len: int, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token sequences to the longest one; returns (ids, mask)."""
    if not seqs:
        raise DataError("empty text batch")
    longest = max(len(s) for s in seqs)
    if longest > max_len:
        raise DataError(f"token sequence of length {longest} exceeds max_len {max_len}")
    ids = np.full((len(seqs), max(longest, 1)), PAD_ID, dtype=np.int64)
    mask = np.zeros(ids.shape)
    for r, s in enumerate(seqs):
        if len(s) == 0:
            raise DataError(f"text {r} is empty")
        ids[r, :len(s)] = s
        mask[r, :len(s)] = 1.0
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise DataError(f"token id outside vocabulary of size {vocab_size}")
    return ids, mask


def encode_texts(params: TextEncoderParams, seqs, train_mode: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Embed a list of token sequences; returns a B x D tensor of unit rows.

    In train mode every dropout mask is drawn from ``rng``; two calls with
    different rng states give two textual views of the same batch.
    """
    ids, mask = pad_tokens(seqs, params.max_len, params.vocab_size)
    p = params.dropout_p
    if train_mode and p > 0 and rng is None:
        raise ParameterError("train-mode text encoding with dropout needs an rng")
    w = params.weights
    b, n = ids.shape
    h = params.hidden_dim
    # per-token layers run on the real tokens only (packed, T x h); the
    # padded B x L layout is rebuilt just for attention
    real = np.flatnonzero(mask.ravel())
    x = T.add(T.take_rows(w["tok_emb"], ids.ravel()[real]),
              T.take_rows(w["pos_emb"], real % n))
    x = T.dropout(x, p, rng, train_mode)
    key_bias = ((1.0 - mask) * MASK_BIAS)[:, None, :]
    for i in range(params.num_layers):
        pre = f"blk{i}."
        y = _ln(x, w[pre + "ln1_g"], w[pre + "ln1_b"])
        qkv = T.reshape(T.place_rows(T.linear(y, w[pre + "wqkv"]), real, b * n), (b, n, 3 * h))
        att = T.attention(qkv, key_bias, p, rng, train_mode)
        att = T.take_rows(T.reshape(att, (b * n, h)), real)
        y = _linear(att, w[pre + "wo"], w[pre + "bo"])
        x = T.add(x, T.dropout(y, p, rng, train_mode))
        y = _ln(x, w[pre + "ln2_g"], w[pre + "ln2_b"])
        y = _linear(_linear(y, w[pre + "ff_w1"], w[pre + "ff_b1"], relu=True),
                    w[pre + "ff_w2"], w[pre + "ff_b2"])
        x = T.add(x, T.dropout(y, p, rng, train_mode))
    x = _ln(x, w["ln_f_g"], w["ln_f_b"])
    # masked mean over each sequence's tokens as one B x T averaging matrix
    lengths = mask.sum(axis=1)
    avg = np.zeros((b, real.size))
    avg[real // n, np.arange(real.size)] = (1.0 / lengths)[real // n]
    pooled = T.matmul(Tensor(avg), x)
    return T.l2_normalize(_linear(pooled, w["proj_w"], w["proj_b"]), axis=-1)


def encode_text(params: TextEncoderParams, toks, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
    with T.no_grad():
        return encode_texts(params, [list(toks)], train_mode, rng).data[0]


@dataclass
class DualEncoder:
    image: ImageEncoderParams
    text: TextEncoderParams

    @classmethod
    def create(cls, image: ImageEncoderParams, text: TextEncoderParams,
               rng: np.random.Generator) -> DualEncoder:
        if image.embed_dim != text.embed_dim:
            raise DimensionError("image and text towers must share embed_dim")
        image.init_weights(rng)
        text.init_weights(rng)
        return cls(image, text)

    def named_weights(self) -> dict:
        out = {f"image.{k}": v for k, v in self.image.weights.items()}
        out.update({f"text.{k}": v for k, v in self.text.weights.items()})
        return out
