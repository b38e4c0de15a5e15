"""Synthetic paired image/caption/tag data and the on-disk corpus format.

Corpus files are JSON lines, one record per sample::

    {"id": "000017", "image": "images/000017.ppm", "caption": "red disc and blue cross",
     "tags": ["red disc", "blue cross", "green square"], "key": "disc:red|cross:blue|square:green"}

``image`` is either a path (relative to the corpus file) to a binary PPM
(P6, maxval 255) or an inline H x W x C nested list of floats. ``tags`` and
``key`` are optional. Vocabulary files hold one token per line; the id of a
token is its 0-based line number.
"""
from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .views import Sample

PAD, UNK, SEP = "<pad>", "<unk>", "<sep>"

SHAPES = ("square", "disc", "triangle", "cross")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
PROMPT = "the picture contains"
FILLER = ("and", "the", "picture", "contains")


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:3] != [PAD, UNK, SEP]:
            raise DataError(f"vocabulary must start with {PAD}, {UNK}, {SEP}")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate token in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    pad_id, unk_id, sep_id = 0, 1, 2

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)

    @classmethod
    def default(cls) -> Vocab:
        return cls([PAD, UNK, SEP, *FILLER, *COLORS, *SHAPES])

    @classmethod
    def load(cls, path) -> Vocab:
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")


def tokenize(text: str, vocab, max_len: int | None = None) -> tuple:
    """Lowercase, split on whitespace, map through ``vocab`` (unknown words
    become the UNK id), truncate to ``max_len``."""
    lookup = vocab.id if isinstance(vocab, Vocab) else (lambda w: vocab.get(w, UNK_ID))
    ids = tuple(lookup(w) for w in text.lower().split())
    return ids if max_len is None else ids[:max_len]


UNK_ID = Vocab.unk_id


# ---------------------------------------------------------------- PPM rasters


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 with maxval 255; values are rounded to the nearest 1/255."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM needs an H x W x 3 image, got {img.shape}")
    h, w, _ = img.shape
    raw = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raw.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported")
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------- synthetic data


@dataclass
class LatentFactor:
    object_id: int
    attribute_id: int
    position: int  # quadrant: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right
    noise: float   # std of the additive pixel noise in this factor's quadrant

    @property
    def phrase(self) -> str:
        return f"{list(COLORS)[self.attribute_id]} {SHAPES[self.object_id]}"


@dataclass
class SynthConfig:
    n_samples: int = 2000
    image_size: int = 16
    n_objects: int = 4
    n_attributes: int = 6
    max_factors: int = 3
    caption_subset_rate: float = 0.7
    caption_noise_rate: float = 0.1
    tag_coverage: float = 1.0
    max_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("caption_subset_rate", "caption_noise_rate", "tag_coverage"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ParameterError(f"{name} must be a probability, got {v}")
        if not 1 <= self.n_objects <= len(SHAPES):
            raise ParameterError(f"n_objects must be in [1, {len(SHAPES)}]")
        if not 1 <= self.n_attributes <= len(COLORS):
            raise ParameterError(f"n_attributes must be in [1, {len(COLORS)}]")
        if not 1 <= self.max_factors <= 4:
            raise ParameterError("max_factors must be in [1, 4] (one glyph per quadrant)")
        if self.image_size % 2 or self.image_size < 8:
            raise ParameterError("image_size must be even and >= 8")
        if self.n_samples < 0 or self.max_noise < 0:
            raise ParameterError("n_samples and max_noise must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def glyph_mask(object_id: int, q: int) -> np.ndarray:
    """Boolean q x q mask of a shape drawn inside one quadrant."""
    c = (np.arange(q) + 0.5) / q * 2 - 1  # cell centres in [-1, 1]
    y, x = np.meshgrid(c, c, indexing="ij")
    r = 0.8
    if object_id == 0:
        return (np.abs(x) <= r) & (np.abs(y) <= r)
    if object_id == 1:
        return x * x + y * y <= r * r
    if object_id == 2:
        return (y <= r) & (y >= -r) & (np.abs(x) <= (y + r) / 2)
    if object_id == 3:
        t = 0.3
        return ((np.abs(x) <= t) & (np.abs(y) <= r)) | ((np.abs(y) <= t) & (np.abs(x) <= r))
    raise ParameterError(f"unknown object id {object_id}")


def render(factors, size: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Glyph layer plus (when ``rng`` is given) the additive noise layer,
    clipped and quantised to multiples of 1/255 so PPM storage is lossless."""
    q = size // 2
    img = np.zeros((size, size, 3))
    noise_std = np.zeros((size, size, 1))
    colors = list(COLORS.values())
    for f in factors:
        r0, c0 = (f.position // 2) * q, (f.position % 2) * q
        m = glyph_mask(f.object_id, q)
        img[r0:r0 + q, c0:c0 + q][m] = colors[f.attribute_id]
        noise_std[r0:r0 + q, c0:c0 + q] = f.noise
    if rng is not None:
        img = img + rng.standard_normal(img.shape) * noise_std
    return np.round(np.clip(img, 0.0, 1.0) * 255) / 255


def factor_key(factors) -> str:
    """Canonical multiset of (object, attribute); position is not part of it."""
    items = sorted((SHAPES[f.object_id], list(COLORS)[f.attribute_id]) for f in factors)
    return "|".join(f"{o}:{a}" for o, a in items)


@dataclass
class SynthDataset:
    samples: list
    factors: list
    caption_factors: list
    tag_factors: list
    vocab: Vocab
    config: SynthConfig = field(default_factory=SynthConfig)

    @property
    def keys(self) -> list:
        return [s.key for s in self.samples]

    @property
    def gt(self):
        from .evaluation import GroundTruth
        return GroundTruth.from_keys(self.keys, self.keys)


def synth_generate(cfg: SynthConfig, vocab: Vocab | None = None) -> SynthDataset:
    """Generate ``cfg.n_samples`` samples with 1..max_factors glyphs each.

    Captions name a random subset of the glyphs (each kept with probability
    ``caption_subset_rate``, at least one) with tokens corrupted at
    ``caption_noise_rate``; tags name each glyph with probability
    ``tag_coverage``.
    """
    vocab = vocab or Vocab.default()
    rng = np.random.default_rng(cfg.seed)
    colors = list(COLORS)
    content = [vocab.id(w) for w in (*colors[:cfg.n_attributes], *SHAPES[:cfg.n_objects])]
    and_id = vocab.id("and")
    samples, all_factors, cap_f, tag_f = [], [], [], []
    for i in range(cfg.n_samples):
        k = int(rng.integers(1, cfg.max_factors + 1))
        positions = rng.permutation(4)[:k]
        factors = [
            LatentFactor(int(rng.integers(cfg.n_objects)), int(rng.integers(cfg.n_attributes)),
                         int(p), float(rng.uniform(0, cfg.max_noise)))
            for p in sorted(positions)
        ]
        img = render(factors, cfg.image_size, rng)

        named = [f for f in factors if rng.random() < cfg.caption_subset_rate]
        if not named:
            named = [factors[int(rng.integers(k))]]
        named = [named[j] for j in rng.permutation(len(named))]
        caption = []
        for j, f in enumerate(named):
            if j:
                caption.append(and_id)
            caption.extend(vocab.id(w) for w in f.phrase.split())
        corrupt = rng.random(len(caption)) < cfg.caption_noise_rate
        repl = rng.integers(len(content), size=len(caption))
        caption = tuple(content[r] if c else t for t, c, r in zip(caption, corrupt, repl))

        tagged = [f for f in factors if rng.random() < cfg.tag_coverage]
        tags = [tuple(vocab.id(w) for w in f.phrase.split()) for f in tagged]

        samples.append(Sample(img, caption, tags, factor_key(factors)))
        all_factors.append(factors)
        cap_f.append(named)
        tag_f.append(tagged)
    return SynthDataset(samples, all_factors, cap_f, tag_f, vocab, cfg)


def split_indices(n: int, holdout_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, held-out) partition of range(n)."""
    if not 0 <= holdout_frac < 1:
        raise ParameterError("holdout fraction must be in [0, 1)")
    perm = np.random.default_rng([seed, 7919]).permutation(n)
    n_hold = int(round(n * holdout_frac))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def make_prompt(vocab: Vocab) -> tuple:
    return tokenize(PROMPT, vocab)


# ---------------------------------------------------------------- corpus files

CORPUS_FIELDS = {"id", "image", "caption", "tags", "key"}


def save_corpus(samples, path, vocab: Vocab, inline_images: bool = False) -> None:
    """Write ``samples`` as a corpus file (images as PPM files under
    ``images/`` next to it unless ``inline_images``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img_dir = path.parent / "images"
    if not inline_images and samples:
        img_dir.mkdir(exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            sid = f"{i:06d}"
            if inline_images:
                image = s.image.tolist()
            else:
                write_ppm(img_dir / f"{sid}.ppm", s.image)
                image = f"images/{sid}.ppm"
            rec = {"id": sid, "image": image, "caption": vocab.decode(s.caption),
                   "tags": [vocab.decode(t) for t in s.tags]}
            if s.key is not None:
                rec["key"] = s.key
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_corpus(path, vocab: Vocab, max_len: int | None = None, truncate: bool = True,
                with_ids: bool = False):
    """Parse a corpus file into Samples.

    Problems are collected over the whole file and raised together as one
    :class:`DataError` whose lines are ``line N: reason``.
    """
    path = Path(path)
    samples, ids, errors = [], [], []
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(f"line {lineno}: malformed JSON ({exc.msg})")
            continue
        if not isinstance(rec, dict):
            errors.append(f"line {lineno}: record is not an object")
            continue
        bad = []
        unknown = set(rec) - CORPUS_FIELDS
        if unknown:
            bad.append(f"unknown field(s) {sorted(unknown)}")
        for req in ("image", "caption"):
            if req not in rec:
                bad.append(f"missing field '{req}'")
        img = None
        if "image" in rec:
            try:
                img = _load_image(rec["image"], path.parent)
            except (DataError, OSError, ValueError) as exc:
                bad.append(str(exc))
        caption = tags = None
        if isinstance(rec.get("caption"), str):
            caption = tokenize(rec["caption"], vocab)
            if not caption:
                bad.append("empty caption")
            tags = []
            raw_tags = rec.get("tags", [])
            if not isinstance(raw_tags, list) or not all(isinstance(t, str) for t in raw_tags):
                bad.append("'tags' must be a list of strings")
                raw_tags = []
            tags = [tokenize(t, vocab) for t in raw_tags]
            if max_len is not None:
                if len(caption) > max_len:
                    if truncate:
                        caption = caption[:max_len]
                    else:
                        bad.append(f"caption has {len(caption)} tokens > max_len {max_len}")
        elif "caption" in rec:
            bad.append("'caption' must be a string")
        if bad:
            errors.extend(f"line {lineno}: {b}" for b in bad)
            continue
        key = rec.get("key")
        samples.append(Sample(img, caption, tags, None if key is None else str(key)))
        ids.append(str(rec.get("id", len(ids))))
    if errors:
        n_bad = len({e.split(":", 1)[0] for e in errors})
        raise DataError(f"{path}: {n_bad} bad record(s)\n" + "\n".join(errors))
    return (samples, ids) if with_ids else samples


def _load_image(ref, base: Path) -> np.ndarray:
    if isinstance(ref, str):
        p = base / ref
        if not p.exists():
            raise DataError(f"image file not found: {ref}")
        return read_ppm(p)
    arr = np.asarray(ref, dtype=np.float64)
    if arr.ndim != 3:
        raise DataError(f"inline image must be H x W x C, got shape {arr.shape}")
    return arr


def corpus_stats(samples) -> dict:
    c = Counter(len(s.tags) for s in samples)
    return {"samples": len(samples), "tag_count_histogram": dict(sorted(c.items()))}
