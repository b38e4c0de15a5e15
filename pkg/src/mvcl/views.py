"""Visual and textual view construction.

Images are float arrays of shape (H, W, C) in [0, 1]. Token sequences are
tuples of ints. Random draws always come from an explicit
``numpy.random.Generator`` so the whole pipeline is reproducible.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ParameterError


class TextSource(str, enum.Enum):
    CAPTION = "caption"
    TAG = "tag"


@dataclass
class Sample:
    image: np.ndarray
    caption: tuple
    tags: list = field(default_factory=list)
    # relevance key: samples with equal keys are mutual ground truth
    key: str | None = None

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (np.array_equal(self.image, other.image) and tuple(self.caption) == tuple(other.caption)
                and [tuple(t) for t in self.tags] == [tuple(t) for t in other.tags]
                and self.key == other.key)


@dataclass
class ViewBundle:
    I_v1: np.ndarray
    I_v2: np.ndarray
    T_source: TextSource
    T_tokens: tuple


@dataclass
class AugmentConfig:
    crop_scale_range: tuple = (0.6, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.2
    blur_prob: float = 0.2
    blur_sigma: float = 1.0
    grayscale_prob: float = 0.1

    def __post_init__(self):
        self.crop_scale_range = tuple(float(v) for v in self.crop_scale_range)
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ParameterError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        for name in ("flip_prob", "blur_prob", "grayscale_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ParameterError(f"{name} must be a probability, got {v}")
        if self.jitter_strength < 0 or self.jitter_strength >= 1:
            raise ParameterError("jitter_strength must be in [0, 1)")
        if self.blur_sigma <= 0:
            raise ParameterError("blur_sigma must be > 0")

    @classmethod
    def identity(cls) -> AugmentConfig:
        return cls(crop_scale_range=(1.0, 1.0), flip_prob=0.0, jitter_strength=0.0,
                   blur_prob=0.0, grayscale_prob=0.0)

    def to_dict(self) -> dict:
        return {
            "crop_scale_range": list(self.crop_scale_range),
            "flip_prob": self.flip_prob,
            "jitter_strength": self.jitter_strength,
            "blur_prob": self.blur_prob,
            "blur_sigma": self.blur_sigma,
            "grayscale_prob": self.grayscale_prob,
        }


# ---------------------------------------------------------------- images


def _draw(rng: np.random.Generator, cfg: AugmentConfig, n: int) -> np.ndarray:
    """Per-image parameters, one row each; always 8 uniforms per image so
    streams stay aligned whatever the config."""
    u = rng.random((n, 8))
    lo, hi = cfg.crop_scale_range
    s = cfg.jitter_strength
    return np.stack([
        np.sqrt(lo + (hi - lo) * u[:, 0]),   # side scale of the crop
        u[:, 1], u[:, 2],                    # crop offset fractions (y, x)
        u[:, 3] < cfg.flip_prob,
        1 - s + 2 * s * u[:, 4],             # brightness
        1 - s + 2 * s * u[:, 5],             # contrast
        u[:, 6] < cfg.blur_prob,
        u[:, 7] < cfg.grayscale_prob,
    ], axis=1)


def _interp_matrices(size: int, scale: np.ndarray, frac: np.ndarray) -> np.ndarray:
    """Row i of matrix b holds the bilinear weights that sample output pixel
    i from a crop of side ``scale[b] * size`` starting at ``frac[b]`` of the
    free margin."""
    c = (scale * size)[:, None]
    src = frac[:, None] * (size - c) + (np.arange(size) + 0.5) * c / size - 0.5
    src = np.clip(src, 0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    w = src - lo
    b = np.arange(len(scale))[:, None]
    rows = np.arange(size)[None, :]
    m = np.zeros((len(scale), size, size))
    m[b, rows, lo] += 1 - w
    m[b, rows, hi] += w
    return m


@functools.lru_cache(maxsize=32)
def _blur_matrix(size: int, sigma: float) -> np.ndarray:
    # column j is the reflect-mode gaussian response to a unit impulse at j
    return gaussian_filter1d(np.eye(size), sigma, axis=0, mode="reflect")


def _rowcol(x: np.ndarray, ry: np.ndarray, rx: np.ndarray) -> np.ndarray:
    """Apply ry (B,H,H) along height and rx (B,W,W) along width of (B,H,W,C)."""
    b, h, w, c = x.shape
    x = np.matmul(ry, x.reshape(b, h, w * c)).reshape(b, h, w, c)
    x = np.matmul(rx, x.transpose(0, 2, 1, 3).reshape(b, w, h * c))
    return x.reshape(b, w, h, c).transpose(0, 2, 1, 3)


def _apply(imgs: np.ndarray, params: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    x = imgs.copy()
    _, h, w, _ = x.shape
    crop = np.flatnonzero(params[:, 0] < 1.0)
    if crop.size:
        ry = _interp_matrices(h, params[crop, 0], params[crop, 1])
        rx = _interp_matrices(w, params[crop, 0], params[crop, 2])
        x[crop] = _rowcol(x[crop], ry, rx)
    flip = params[:, 3].astype(bool)
    x[flip] = x[flip][:, :, ::-1]
    if cfg.jitter_strength > 0:
        x = x * params[:, 4, None, None, None]
        m = x.mean(axis=(1, 2, 3), keepdims=True)
        x = (x - m) * params[:, 5, None, None, None] + m
    blur = np.flatnonzero(params[:, 6])
    if blur.size:
        ky = np.broadcast_to(_blur_matrix(h, cfg.blur_sigma), (blur.size, h, h))
        kx = np.broadcast_to(_blur_matrix(w, cfg.blur_sigma), (blur.size, w, w))
        x[blur] = _rowcol(x[blur], ky, kx)
    gray = params[:, 7].astype(bool)
    if gray.any():
        x[gray] = x[gray].mean(axis=-1, keepdims=True)
    return np.clip(x, 0.0, 1.0)


def augment_images(imgs: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment a (B, H, W, C) batch; equal to calling :func:`augment_image`
    on each image in order with the same generator."""
    imgs = np.asarray(imgs, dtype=np.float64)
    params = _draw(rng, cfg, imgs.shape[0])
    return _apply(imgs, params, cfg)


def augment_image(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, horizontal flip, brightness/contrast jitter,
    gaussian blur and grayscale, in that order, then clamp to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ParameterError("empty image")
    return augment_images(img[None], cfg, rng)[0]


def make_visual_views(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    return augment_image(img, cfg, rng), augment_image(img, cfg, rng)


# ---------------------------------------------------------------- text


def build_tag_sequence(tags, prompt, max_len: int, sep_id: int) -> tuple:
    """prompt, then ``sep phrase`` for every phrase in order, cut at max_len."""
    if len(prompt) == 0:
        raise ParameterError("tag prompt must be nonempty")
    seq = list(prompt)
    for phrase in tags:
        seq.append(sep_id)
        seq.extend(phrase)
    return tuple(seq[:max_len])


def sample_textual_source(has_tags: bool, p_tag: float, rng: np.random.Generator) -> TextSource:
    if not 0 <= p_tag <= 1:
        raise ParameterError(f"p_tag must be a probability, got {p_tag}")
    u = rng.random()
    return TextSource.TAG if has_tags and u < p_tag else TextSource.CAPTION


@dataclass
class TextViewConfig:
    """How the textual side of a batch is chosen and the tag prompt."""

    p_tag: float = 0.5
    per_sample_source: bool = False
    prompt: tuple = ()
    sep_id: int = 2
    max_len: int = 16


def build_batch_views(samples, cfg: AugmentConfig, text_cfg: TextViewConfig,
                      rng: np.random.Generator) -> list[ViewBundle]:
    """One bundle per sample. The caption/tag draw is shared by the whole
    batch unless ``text_cfg.per_sample_source``; samples without tags
    always fall back to their caption."""
    if not samples:
        raise ParameterError("empty batch")
    imgs = np.stack([s.image for s in samples])
    v1 = augment_images(imgs, cfg, rng)
    v2 = augment_images(imgs, cfg, rng)
    if text_cfg.per_sample_source:
        sources = [sample_textual_source(bool(s.tags), text_cfg.p_tag, rng) for s in samples]
    else:
        src = sample_textual_source(any(s.tags for s in samples), text_cfg.p_tag, rng)
        sources = [src if s.tags else TextSource.CAPTION for s in samples]
    bundles = []
    for i, (s, src) in enumerate(zip(samples, sources)):
        if src is TextSource.TAG:
            toks = build_tag_sequence(s.tags, text_cfg.prompt, text_cfg.max_len, text_cfg.sep_id)
        else:
            toks = tuple(s.caption)
        bundles.append(ViewBundle(v1[i], v2[i], src, toks))
    return bundles
