"""Retrieval metrics and the A-E ablation harness."""
from __future__ import annotations

import copy
import json
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import MODELS, RunConfig, apply_model
from .data import Vocab
from .encoders import DualEncoder, encode_images, encode_texts
from .errors import DataError, ParameterError
from .loss import PairType

log = logging.getLogger(__name__)

DIRECTIONS = ("I2T", "T2I", "I2I", "T2T")
KS = (1, 5, 10)


@dataclass
class GroundTruth:
    """``relevant[q]`` is the set of gallery indices relevant to query q;
    ``excluded[q]`` (optional) are gallery items hidden from query q."""

    relevant: list
    gallery_size: int
    excluded: list | None = None

    def __post_init__(self):
        self.relevant = [frozenset(int(i) for i in r) for r in self.relevant]
        for q, r in enumerate(self.relevant):
            if not r:
                raise DataError(f"query {q} has no relevant gallery item")
            if min(r) < 0 or max(r) >= self.gallery_size:
                raise DataError(f"query {q} has a relevant index outside the gallery")
        if self.excluded is not None:
            self.excluded = [frozenset(int(i) for i in e) for e in self.excluded]

    def __len__(self):
        return len(self.relevant)

    @classmethod
    def from_keys(cls, query_keys, gallery_keys, leave_self_out: bool = False):
        """Items with equal (non-None) keys are relevant to each other; a
        None key is relevant only to the same index. With ``leave_self_out``
        query i never retrieves gallery i, and queries left without any
        relevant item are dropped. Returns the GroundTruth, or with
        ``leave_self_out`` a (GroundTruth, kept query indices) pair."""
        groups: dict = {}
        for j, k in enumerate(gallery_keys):
            if k is not None:
                groups.setdefault(k, set()).add(j)
        relevant, excluded, kept = [], [], []
        for i, k in enumerate(query_keys):
            rel = set(groups.get(k, ())) if k is not None else {i}
            if leave_self_out:
                rel.discard(i)
                if not rel:
                    continue
                excluded.append({i})
            relevant.append(rel)
            kept.append(i)
        gt = cls(relevant, len(gallery_keys), excluded if leave_self_out else None)
        return (gt, np.array(kept, dtype=int)) if leave_self_out else gt


def _first_hit_ranks(sim: np.ndarray, gt: GroundTruth) -> tuple[np.ndarray, int]:
    """0-based rank of the best-ranked relevant item per query, ordering by
    descending similarity with ties broken by ascending gallery index."""
    sim = np.asarray(sim, dtype=np.float64)
    q, g = sim.shape
    if q != len(gt) or g != gt.gallery_size:
        raise ParameterError(f"similarity {sim.shape} does not match ground truth "
                             f"({len(gt)} queries, gallery {gt.gallery_size})")
    scores = sim.copy()
    n_excl = 0
    if gt.excluded is not None:
        n_excl = max(len(e) for e in gt.excluded) if gt.excluded else 0
        for i, e in enumerate(gt.excluded):
            scores[i, list(e)] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty(q, dtype=int)
    for i in range(q):
        rel = np.zeros(g, dtype=bool)
        rel[list(gt.relevant[i])] = True
        if gt.excluded is not None:
            rel[list(gt.excluded[i])] = False
        hit = rel[order[i]]
        ranks[i] = int(np.argmax(hit)) if hit.any() else g
    return ranks, g - n_excl


def recall_at_k(sim, gt: GroundTruth, k: int) -> float:
    """Fraction of queries with a relevant item among their top ``k``."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    ranks, g_eff = _first_hit_ranks(sim, gt)
    if k > g_eff:
        warnings.warn(f"k={k} exceeds gallery size {g_eff}; clamped", stacklevel=2)
        k = g_eff
    return float(np.mean(ranks < k))


def recalls(sim, gt: GroundTruth, ks=KS) -> dict:
    """R@k for several k from one ranking pass (k clamped to the gallery)."""
    ranks, g_eff = _first_hit_ranks(sim, gt)
    return {k: float(np.mean(ranks < min(k, g_eff))) for k in ks}


def mean_recall(r1: float, r5: float, r10: float) -> float:
    for r in (r1, r5, r10):
        if not 0 <= r <= 1:
            raise ParameterError(f"recall {r} outside [0, 1]")
    return (r1 + r5 + r10) / 3


@dataclass
class DirectionResult:
    queries: int
    r1: float | None = None
    r5: float | None = None
    r10: float | None = None

    @property
    def mean_recall(self) -> float | None:
        return None if self.r1 is None else mean_recall(self.r1, self.r5, self.r10)

    def to_dict(self) -> dict:
        return {"queries": self.queries, "R@1": self.r1, "R@5": self.r5, "R@10": self.r10,
                "mR": self.mean_recall}


@dataclass
class RetrievalReport:
    directions: dict = field(default_factory=dict)

    @property
    def overall(self) -> float | None:
        """Mean of the cross-modal (I2T, T2I) meanRecalls."""
        vals = [self.directions[d].mean_recall for d in ("I2T", "T2I")]
        return None if None in vals else float(np.mean(vals))

    @property
    def intra(self) -> float | None:
        vals = [self.directions[d].mean_recall for d in ("I2I", "T2T")]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {"directions": {d: self.directions[d].to_dict() for d in DIRECTIONS},
                "overall_mR": self.overall, "intra_mR": self.intra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = [f"{'dir':<5}{'queries':>8}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'mR':>8}"]

        def f(x):
            return f"{100 * x:8.2f}" if x is not None else f"{'-':>8}"

        for d in DIRECTIONS:
            r = self.directions[d]
            lines.append(f"{d:<5}{r.queries:>8}{f(r.r1)}{f(r.r5)}{f(r.r10)}{f(r.mean_recall)}")
        lines.append(f"overall cross-modal mR: {f(self.overall).strip()}")
        return "\n".join(lines) + "\n"


def _direction(sim: np.ndarray, gt: GroundTruth) -> DirectionResult:
    if len(gt) == 0:
        return DirectionResult(0)
    r = recalls(sim, gt)
    return DirectionResult(len(gt), r[1], r[5], r[10])


def embed_images(model: DualEncoder, images, chunk: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    with T.no_grad():
        parts = [encode_images(model.image, images[i:i + chunk], False).data
                 for i in range(0, len(images), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, model.image.embed_dim))


def embed_texts(model: DualEncoder, seqs, chunk: int = 256) -> np.ndarray:
    with T.no_grad():
        parts = [encode_texts(model.text, seqs[i:i + chunk], False).data
                 for i in range(0, len(seqs), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, model.text.embed_dim))


def zero_shot_retrieval(model: DualEncoder, samples) -> RetrievalReport:
    """Inference-mode retrieval between images and captions (no augmentation,
    no dropout, no tag views). Intra-modal directions leave the query out of
    its own gallery."""
    if not samples:
        raise DataError("empty evaluation set")
    keys = [s.key for s in samples]
    img = embed_images(model, np.stack([s.image for s in samples]))
    txt = embed_texts(model, [tuple(s.caption) for s in samples])
    gt = GroundTruth.from_keys(keys, keys)
    rep = RetrievalReport()
    rep.directions["I2T"] = _direction(img @ txt.T, gt)
    rep.directions["T2I"] = _direction(txt @ img.T, gt)
    for d, e in (("I2I", img), ("T2T", txt)):
        gti, kept = GroundTruth.from_keys(keys, keys, leave_self_out=True)
        rep.directions[d] = _direction((e @ e.T)[kept], gti)
    return rep


# ---------------------------------------------------------------- ablation


def finetune_config(cfg: RunConfig, steps: int) -> RunConfig:
    """Continue-training config that uses conventional views only."""
    ft = copy.deepcopy(cfg)
    ft.loss.lambdas = {**ft.loss.lambdas, PairType.II: 0.0, PairType.TT: 0.0}
    ft.views.p_tag = 0.0
    ft.train.total_steps = cfg.train.total_steps + steps
    return ft


def train_and_evaluate(cfg: RunConfig, train_samples, eval_samples, vocab: Vocab,
                       out_dir=None) -> tuple[RetrievalReport, list]:
    from .trainer import train

    state, rows = train(cfg, train_samples, vocab, out_dir)
    if cfg.eval.finetune_steps:
        ft = finetune_config(cfg, cfg.eval.finetune_steps)
        # cosine schedule restarts over the extension
        ft.train.warmup_steps = cfg.train.total_steps
        state, more = train(ft, train_samples, vocab, None, state=state)
        rows += more
    return zero_shot_retrieval(state.model, eval_samples), rows


@dataclass
class AblationResult:
    seeds: list
    reports: dict  # model -> list of RetrievalReport (one per seed)
    seconds: dict

    def summary(self) -> dict:
        out = {}
        for m, reps in self.reports.items():
            ov = [100 * r.overall for r in reps]
            i2t = [100 * r.directions["I2T"].mean_recall for r in reps]
            t2i = [100 * r.directions["T2I"].mean_recall for r in reps]
            out[m] = {
                "mR_per_seed": ov,
                "mR_mean": float(np.mean(ov)),
                "mR_std": float(np.std(ov, ddof=1)) if len(ov) > 1 else 0.0,
                "I2T_mR_mean": float(np.mean(i2t)),
                "T2I_mR_mean": float(np.mean(t2i)),
                "seconds": self.seconds[m],
            }
        return out

    def to_json(self) -> str:
        return json.dumps({"seeds": self.seeds, "models": self.summary()}, indent=2,
                          sort_keys=True) + "\n"

    def to_table(self) -> str:
        s = self.summary()
        lines = [f"{'model':<6}{'I2T mR':>9}{'T2I mR':>9}{'mR mean':>9}{'mR std':>8}{'seeds':>6}"]
        for m, r in s.items():
            lines.append(f"{m:<6}{r['I2T_mR_mean']:9.2f}{r['T2I_mR_mean']:9.2f}"
                         f"{r['mR_mean']:9.2f}{r['mR_std']:8.2f}{len(self.seeds):6d}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["model,seed,I2T_mR,T2I_mR,overall_mR"]
        for m, reps in self.reports.items():
            for seed, r in zip(self.seeds, reps):
                lines.append(f"{m},{seed},{100 * r.directions['I2T'].mean_recall!r},"
                             f"{100 * r.directions['T2I'].mean_recall!r},{100 * r.overall!r}")
        return "\n".join(lines) + "\n"


def run_ablation(base: RunConfig, train_samples, eval_samples, vocab: Vocab, seeds,
                 models=MODELS, progress=None) -> AblationResult:
    """Train every model on every seed and evaluate zero-shot retrieval on
    the held-out samples."""
    reports = {m: [] for m in models}
    seconds = {m: 0.0 for m in models}
    for m in models:
        for seed in seeds:
            cfg = apply_model(base, m)
            cfg.train.seed = int(seed)
            t0 = time.perf_counter()
            rep, _ = train_and_evaluate(cfg, train_samples, eval_samples, vocab)
            seconds[m] += time.perf_counter() - t0
            reports[m].append(rep)
            if progress is not None:
                progress(m, seed, rep)
            log.info("model %s seed %s: mR %.2f", m, seed, 100 * rep.overall)
    return AblationResult(list(seeds), reports, seconds)
