"""``mvcl`` command-line interface.

Every command writes ``config.resolved.json`` (all defaults filled in) next
to its outputs. Errors print one line ``error: <code>: <message>`` to
stderr and exit with status 2 (usage) or 1 (anything else).
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import MODELS, RunConfig, apply_model, dump_config, load_config
from .data import Vocab, load_corpus, save_corpus, split_indices, synth_generate
from .errors import DataError, MVCLError, ParameterError
from .evaluation import embed_images, embed_texts, run_ablation, zero_shot_retrieval
from .store import EmbeddingStore, load_store, retrieve, save_store
from .trainer import load_checkpoint, train

log = logging.getLogger("mvcl")

WORKERS_ENV = "MVCL_WORKERS"
RESOLVED = "config.resolved.json"


class UsageError(MVCLError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> RunConfig:
    """Config file, then ``--set`` overrides, then the dedicated flags."""
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
        if args.command == "synth":
            overrides["data.synth.seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["train.total_steps"] = args.steps
    if getattr(args, "model", None) is not None:
        overrides["model"] = args.model
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    return load_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory not writable: {out}")
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _vocab(cfg: RunConfig) -> Vocab:
    return Vocab.load(cfg.data.vocab) if cfg.data.vocab else Vocab.default()


def _dataset(cfg: RunConfig, vocab: Vocab, with_ids: bool = False):
    """All samples of the configured source (and their ids)."""
    if cfg.data.source == "synth":
        samples = synth_generate(cfg.data.synth, vocab).samples
        ids = [f"{i:06d}" for i in range(len(samples))]
    else:
        samples, ids = load_corpus(cfg.data.corpus, vocab, cfg.data.max_len, with_ids=True)
    return (samples, ids) if with_ids else samples


def _split(cfg: RunConfig, samples):
    tr, ho = split_indices(len(samples), cfg.eval.holdout_frac, cfg.eval.split_seed)
    return [samples[i] for i in tr], [samples[i] for i in ho]


def workers() -> int:
    """Worker-pool size: CPU count, capped by ``MVCL_WORKERS`` when set."""
    n = os.cpu_count() or 1
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ParameterError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ParameterError(f"{WORKERS_ENV} must be >= 1")
        n = min(n, cap)
    return n


def _embed_parallel(fn, items, chunk: int = 256) -> np.ndarray:
    """Apply ``fn`` to consecutive chunks on a thread pool; output rows keep
    input order whatever the pool size."""
    parts = [items[i:i + chunk] for i in range(0, len(items), chunk)]
    with T.no_grad(), ThreadPoolExecutor(max_workers=workers()) as pool:
        out = list(pool.map(fn, parts))
    return np.concatenate(out) if out else None


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    vocab = _vocab(cfg)
    ds = synth_generate(cfg.data.synth, vocab)
    save_corpus(ds.samples, out / "corpus.jsonl", vocab)
    vocab.save(out / "vocab.txt")
    ids = [f"{i:06d}" for i in range(len(ds.samples))]
    groups: dict = {}
    for sid, key in zip(ids, ds.keys):
        groups.setdefault(key, []).append(sid)
    _write_json(out / "gt.json", {
        "relevance": "records with equal keys are mutually relevant",
        "keys": dict(zip(ids, ds.keys)),
        "groups": sorted(groups.values()),
    })
    dump_config(cfg, out / RESOLVED)
    print(f"wrote {len(ds.samples)} records, {len(groups)} relevance groups, "
          f"{len(vocab)} vocabulary tokens to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    dump_config(cfg, out / RESOLVED)
    vocab = _vocab(cfg)
    train_set, held = _split(cfg, _dataset(cfg, vocab))
    log.info("training model %s on %d samples (%d held out)", cfg.model or "-", len(train_set),
             len(held))

    def progress(row):
        if row["step"] % max(1, cfg.train.total_steps // 20) == 0:
            log.info("step %d lr %.3g loss %.4f tau %.4f", row["step"], row["lr"],
                     row["loss_total"], row["tau"])

    state, _ = train(cfg, train_set, vocab, out, progress=progress)
    print(f"trained {state.step} steps; checkpoint {out / 'final.npz'}")
    return 0


def _checkpoint_config(args, default_sub: str):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = copy.deepcopy(ckpt.config)
    cfg.out_dir = args.out or str(Path(args.checkpoint).parent / default_sub)
    if getattr(args, "corpus", None):
        cfg.data.source = "corpus"
        cfg.data.corpus = args.corpus
    return ckpt, cfg


def cmd_eval(args) -> int:
    ckpt, cfg = _checkpoint_config(args, "eval")
    out = _out_dir(cfg)
    samples = _dataset(cfg, ckpt.vocab)
    # a dataset given explicitly is evaluated whole; otherwise the held-out split
    held = samples if args.corpus else _split(cfg, samples)[1]
    if not held:
        raise DataError("no evaluation samples")
    report = zero_shot_retrieval(ckpt.state.model, held)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    dump_config(cfg, out / RESOLVED)
    sys.stdout.write(report.to_table())
    return 0


def cmd_ablation(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    dump_config(cfg, out / RESOLVED)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    models = tuple(args.models.split(",")) if args.models else MODELS
    for m in models:
        apply_model(cfg, m)  # validates the label
    vocab = _vocab(cfg)
    train_set, held = _split(cfg, _dataset(cfg, vocab))

    def progress(m, seed, rep):
        log.info("model %s seed %d: overall mR %.2f", m, seed, 100 * rep.overall)

    res = run_ablation(cfg, train_set, held, vocab, seeds, models, progress=progress)
    (out / "ablation.json").write_text(res.to_json(), encoding="utf-8")
    (out / "ablation.csv").write_text(res.to_csv(), encoding="utf-8")
    (out / "ablation.txt").write_text(res.to_table(), encoding="utf-8")
    sys.stdout.write(res.to_table())
    return 0


def cmd_embed(args) -> int:
    ckpt, cfg = _checkpoint_config(args, "embed")
    out = _out_dir(cfg)
    samples, ids = _dataset(cfg, ckpt.vocab, with_ids=True)
    model = ckpt.state.model
    dim = model.image.embed_dim
    img = _embed_parallel(lambda part: embed_images(model, np.stack([s.image for s in part])),
                          samples)
    txt = _embed_parallel(lambda part: embed_texts(model, [tuple(s.caption) for s in part]),
                          samples)
    empty = np.zeros((0, dim))
    save_store(EmbeddingStore(ids, empty if img is None else img), out / "images.emb")
    save_store(EmbeddingStore(ids, empty if txt is None else txt), out / "captions.emb")
    dump_config(cfg, out / RESOLVED)
    print(f"embedded {len(ids)} items (dim {dim}) into {out / 'images.emb'} and "
          f"{out / 'captions.emb'}")
    return 0


def cmd_retrieve(args) -> int:
    queries = load_store(args.store)
    gallery = load_store(args.gallery) if args.gallery else queries
    if queries.dim != gallery.dim:
        raise DataError(f"query store dim {queries.dim} != gallery dim {gallery.dim}")
    vec = queries.vector(args.query)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        hits = retrieve(gallery, vec, args.k, exclude=args.query if args.exclude_self else None)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    for rank, (item, sim) in enumerate(hits, start=1):
        print(f"{rank}\t{item}\t{sim:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "retrieval.json", {
            "query": args.query, "store": str(args.store),
            "gallery": str(args.gallery or args.store), "k": args.k,
            "hits": [{"rank": r, "id": i, "similarity": s}
                     for r, (i, s) in enumerate(hits, start=1)]})
        _write_json(out / RESOLVED, {"command": "retrieve", "store": str(args.store),
                                     "gallery": str(args.gallery or args.store),
                                     "query": args.query, "k": args.k,
                                     "exclude_self": args.exclude_self})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvcl", description="Multi-view contrastive image-text training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True):
        sp.add_argument("--config", help="YAML or JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.base_lr=5e-4 (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (config out_dir)")
        if model:
            sp.add_argument("--model", choices=MODELS)
            sp.add_argument("--steps", type=int)

    sp = sub.add_parser("synth", help="write a synthetic corpus, vocabulary and ground truth")
    common(sp, model=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one model; writes checkpoints and loss_log.csv")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="zero-shot retrieval report for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", help="evaluate this corpus file instead of the held-out split")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablation", help="train and compare models A-E over seeds")
    common(sp, model=False)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    sp.add_argument("--models", help="comma-separated subset of A,B,C,D,E")
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("embed", help="write image and caption embedding stores")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", help="corpus file (default: the checkpoint's data source)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("retrieve", help="top-k neighbours of a stored item")
    sp.add_argument("--store", required=True, help="store holding the query item")
    sp.add_argument("--query", required=True, help="id of the query item")
    sp.add_argument("--gallery", help="store to search (default: --store)")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--exclude-self", action="store_true",
                    help="drop the query id from the results")
    sp.add_argument("--out", help="also write retrieval.json here")
    sp.set_defaults(func=cmd_retrieve)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        return args.func(args)
    except MVCLError as exc:
        msg = " | ".join(line for line in str(exc).splitlines() if line)
        print(f"error: {exc.code}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        print(f"error: io: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
