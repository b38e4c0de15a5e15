"""Training loop: view construction, multi-view loss, Adam with linear warmup
and cosine decay, checkpointing and resume.

All randomness of step ``s`` comes from generators seeded with
``(seed, s, stream)`` and batch order from ``(seed, epoch)``, so a run
resumed from a checkpoint replays exactly what an uninterrupted run does.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from ._runtime import gc_paused, keep_heap_warm
from .config import RunConfig, TrainConfig, from_dict, to_dict
from .data import Vocab, make_prompt
from .encoders import DualEncoder, ImageEncoderParams, TextEncoderParams, encode_images, encode_texts
from .errors import DataError, NumericError, RangeError, SchemaError
from .loss import LossBreakdown, PairType, multi_view_loss_tensor, similarity_matrix
from .tensor import Tensor
from .views import TextViewConfig, build_batch_views

log = logging.getLogger(__name__)

STREAM_SHUFFLE, STREAM_VIEWS, STREAM_DROP1, STREAM_DROP2, STREAM_INIT = range(5)
LOG_COLUMNS = ["step", "lr", "loss_total", "loss_II", "loss_TT", "loss_IT", "loss_TI", "tau"]
CHECKPOINT_FORMAT = 1


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``final_lr`` at
    ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise RangeError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    c = 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span)) if span else 1.0
    # convex-combination form hits both endpoints exactly
    return cfg.base_lr * c + cfg.final_lr * (1.0 - c)


@dataclass
class TrainState:
    step: int
    model: DualEncoder
    tau: dict  # name -> Tensor; empty when the temperature is fixed
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    seed: int = 0
    # flat (params, m, v) buffers the per-name arrays are views of
    _flat: tuple | None = field(default=None, repr=False, compare=False)

    def params(self) -> dict:
        out = self.model.named_weights()
        out.update(self.tau)
        return out


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def init_state(cfg: RunConfig, vocab_size: int) -> TrainState:
    seed = cfg.train.seed
    image = ImageEncoderParams(**cfg.image.hyperparams())
    text = TextEncoderParams(**{**cfg.text.hyperparams(), "vocab_size": vocab_size})
    model = DualEncoder.create(image, text, _rng(seed, STREAM_INIT))
    tau = {}
    if cfg.loss.learnable_tau:
        names = [f"tau.{p.value}" for p in PairType] if cfg.loss.per_pair_tau else ["tau"]
        tau = {n: Tensor(np.array(cfg.loss.tau), requires_grad=True) for n in names}
    state = TrainState(0, model, tau, seed=seed)
    state.m = {k: np.zeros_like(t.data) for k, t in state.params().items()}
    state.v = {k: np.zeros_like(t.data) for k, t in state.params().items()}
    return state


def _tau_arg(state: TrainState, cfg: RunConfig):
    if not state.tau:
        return cfg.loss.tau
    if cfg.loss.per_pair_tau:
        return {p: state.tau[f"tau.{p.value}"] for p in PairType}
    return state.tau["tau"]


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Indices of the samples used at ``step`` (seeded epoch shuffles, last
    partial batch dropped)."""
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise DataError(f"dataset of {n} samples is smaller than one batch of {batch_size}")
    epoch, pos = divmod(step, per_epoch)
    perm = _rng(seed, STREAM_SHUFFLE, epoch).permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def text_view_config(cfg: RunConfig, vocab: Vocab) -> TextViewConfig:
    return TextViewConfig(p_tag=cfg.views.p_tag, per_sample_source=cfg.views.per_sample_source,
                          prompt=make_prompt(vocab), sep_id=vocab.sep_id, max_len=cfg.data.max_len)


def compute_loss(state: TrainState, samples, cfg: RunConfig, vocab: Vocab):
    """Forward pass of one training step; returns (loss tensor, breakdown,
    embeddings)."""
    step, seed = state.step, state.seed
    bundles = build_batch_views(samples, cfg.views.augment, text_view_config(cfg, vocab),
                                _rng(seed, STREAM_VIEWS, step))
    lam = cfg.loss.lambdas
    extra = cfg.loss.extra_pairs
    toks = [b.T_tokens for b in bundles]
    emb = {
        "I_v1": encode_images(state.model.image, np.stack([b.I_v1 for b in bundles]), True),
        "T_v1": encode_texts(state.model.text, toks, True, _rng(seed, STREAM_DROP1, step)),
    }
    # views that only feed zero-weight pairs are not encoded
    if lam[PairType.II] > 0 or extra:
        emb["I_v2"] = encode_images(state.model.image, np.stack([b.I_v2 for b in bundles]), True)
    if lam[PairType.TT] > 0 or extra:
        emb["T_v2"] = encode_texts(state.model.text, toks, True, _rng(seed, STREAM_DROP2, step))
    total, breakdown = multi_view_loss_tensor(emb, cfg.loss, _tau_arg(state, cfg))
    return total, breakdown, emb


def train_step(state: TrainState, samples, cfg: RunConfig, vocab: Vocab):
    """One Adam update on one batch. Returns (state, breakdown, lr)."""
    if len(samples) != cfg.train.batch_size:
        raise DataError(f"batch has {len(samples)} samples, expected {cfg.train.batch_size}")
    total, breakdown, emb = compute_loss(state, samples, cfg, vocab)
    if not np.isfinite(total.data).all():
        raise NumericError(_diagnose(state, emb, cfg))
    params = state.params()
    for t in params.values():
        t.zero_grad()
    total.backward()
    _, P, M, V = _flat_buffers(state, params)
    g = np.concatenate([np.zeros(t.data.size) if t.grad is None else t.grad.ravel()
                        for t in params.values()])

    tc = cfg.train
    norm = math.sqrt(float(g @ g))
    if norm > tc.grad_clip:
        g *= tc.grad_clip / norm
    lr = lr_schedule(state.step + 1, tc)
    t = state.step + 1
    bc1 = 1.0 - tc.beta1 ** t
    bc2 = 1.0 - tc.beta2 ** t
    # in place on the flat buffers, so every named weight updates at once
    M *= tc.beta1
    M += (1 - tc.beta1) * g
    V *= tc.beta2
    V += (1 - tc.beta2) * (g * g)
    P -= lr * (M / bc1) / (np.sqrt(V / bc2) + tc.adam_eps)
    for tau in state.tau.values():
        np.clip(tau.data, cfg.loss.tau_min, cfg.loss.tau_max, out=tau.data)
    state.step += 1
    return state, breakdown, lr


def _flat_buffers(state: TrainState, params: dict):
    """Pack weights and Adam moments into three flat arrays (once) and
    rebind each named array as a view into them."""
    if state._flat is not None:
        names, P, M, V = state._flat
        if list(params) == names and all(
                params[k].data.base is P and state.m[k].base is M and state.v[k].base is V
                for k in names):
            return state._flat
    names = list(params)
    sizes = [params[k].data.size for k in names]
    P = np.concatenate([params[k].data.ravel() for k in names])
    M = np.concatenate([np.asarray(state.m[k], dtype=np.float64).ravel() for k in names])
    V = np.concatenate([np.asarray(state.v[k], dtype=np.float64).ravel() for k in names])
    off = 0
    for k, n in zip(names, sizes):
        shape = params[k].data.shape
        params[k].data = P[off:off + n].reshape(shape)
        state.m[k] = M[off:off + n].reshape(shape)
        state.v[k] = V[off:off + n].reshape(shape)
        off += n
    state._flat = (names, P, M, V)
    return state._flat


def _diagnose(state: TrainState, emb: dict, cfg: RunConfig) -> str:
    tau = {k: float(v.data) for k, v in state.tau.items()} or {"tau": cfg.loss.tau}
    ranges = []
    with T.no_grad():
        for a, b in (("I_v1", "T_v1"), ("I_v1", "I_v2"), ("T_v1", "T_v2")):
            if a in emb and b in emb:
                s = similarity_matrix(emb[a], emb[b]).data
                ranges.append(f"{a}.{b} sim in [{np.nanmin(s):.4g}, {np.nanmax(s):.4g}]")
    return f"non-finite loss at step {state.step}: " + "; ".join(ranges) + f"; tau={tau}"


def current_tau(state: TrainState, cfg: RunConfig) -> float:
    if not state.tau:
        return cfg.loss.tau
    return float(np.mean([float(t.data) for t in state.tau.values()]))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state: TrainState, cfg: RunConfig, vocab: Vocab, path) -> Path:
    """Write atomically: a temporary file in the target directory is renamed
    over ``path`` only once fully written."""
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "library": "mvcl",
        "version": __version__,
        "step": state.step,
        "seed": state.seed,
        "config": to_dict(cfg),
        "image_encoder": state.model.image.hyperparams(),
        "text_encoder": state.model.text.hyperparams(),
        "vocab": vocab.tokens,
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for k, t in state.params().items():
        arrays[f"param/{k}"] = t.data
        arrays[f"adam_m/{k}"] = state.m[k]
        arrays[f"adam_v/{k}"] = state.v[k]
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", suffix=".npz", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


@dataclass
class Checkpoint:
    state: TrainState
    config: RunConfig
    vocab: Vocab
    header: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT or header.get("library") != "mvcl":
            raise SchemaError(f"{path}: not an mvcl checkpoint of format {CHECKPOINT_FORMAT}")
        cfg = from_dict(RunConfig, header["config"])
        vocab = Vocab(header["vocab"])
        image = ImageEncoderParams(**header["image_encoder"])
        text = TextEncoderParams(**header["text_encoder"])
        params, m, v = {}, {}, {}
        for name in z.files:
            kind, _, k = name.partition("/")
            if kind == "param":
                params[k] = np.array(z[name])
                m[k] = np.array(z[f"adam_m/{k}"])
                v[k] = np.array(z[f"adam_v/{k}"])
    image.weights = {k[6:]: Tensor(a, requires_grad=True) for k, a in params.items()
                     if k.startswith("image.")}
    text.weights = {k[5:]: Tensor(a, requires_grad=True) for k, a in params.items()
                    if k.startswith("text.")}
    tau = {k: Tensor(a, requires_grad=True) for k, a in params.items() if k.startswith("tau")}
    state = TrainState(header["step"], DualEncoder(image, text), tau, m, v, header["seed"])
    return Checkpoint(state, cfg, vocab, header)


# ---------------------------------------------------------------- loop


def _log_row(step: int, lr: float, br: LossBreakdown, tau: float) -> dict:
    row = {"step": step, "lr": lr, **br.as_row(), "tau": tau}
    return {c: row[c] for c in LOG_COLUMNS}


def train(cfg: RunConfig, samples, vocab: Vocab, out_dir=None, state: TrainState | None = None,
          stop_at: int | None = None, progress=None):
    """Run (or resume) training up to ``cfg.train.total_steps``.

    Writes ``step_XXXXXX.npz`` every ``checkpoint_every`` steps, ``final.npz``
    and ``loss_log.csv`` into ``out_dir`` when given. Returns
    ``(state, log_rows)``.
    """
    tc = cfg.train
    if not samples:
        raise DataError("empty training set")
    keep_heap_warm()
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise OSError(f"checkpoint directory not writable: {out}")
    if state is None:
        state = init_state(cfg, len(vocab))
    end = tc.total_steps if stop_at is None else min(stop_at, tc.total_steps)
    rows = []
    log_path = out / "loss_log.csv" if out else None
    if log_path is not None:
        resuming = state.step > 0 and log_path.exists()
        fh = open(log_path, "a" if resuming else "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if not resuming:
            writer.writeheader()
    try:
        with gc_paused():
            _loop(state, samples, cfg, vocab, end, rows, writer if log_path else None, out, progress)
    finally:
        if log_path is not None:
            fh.close()
    if out is not None:
        save_checkpoint(state, cfg, vocab, out / "final.npz")
    return state, rows


def _loop(state, samples, cfg, vocab, end, rows, writer, out, progress):
    tc = cfg.train
    while state.step < end:
        idx = batch_indices(state.step, len(samples), tc.batch_size, state.seed)
        state, br, lr = train_step(state, [samples[i] for i in idx], cfg, vocab)
        row = _log_row(state.step, lr, br, current_tau(state, cfg))
        rows.append(row)
        if writer is not None:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        if progress is not None:
            progress(row)
        if out is not None and state.step % tc.checkpoint_every == 0:
            save_checkpoint(state, cfg, vocab, out / f"step_{state.step:06d}.npz")
