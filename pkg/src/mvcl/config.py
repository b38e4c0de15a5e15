"""Run configuration: nested dataclasses, dict/YAML loading with field-path
diagnostics, and the A-E ablation presets."""
from __future__ import annotations

import copy
import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SynthConfig
from .encoders import ImageEncoderParams, TextEncoderParams
from .errors import ConfigError, MVCLError
from .loss import LossConfig, PairType
from .views import AugmentConfig


@dataclass
class TrainConfig:
    total_steps: int = 3000
    warmup_steps: int = 150
    base_lr: float = 1e-3
    final_lr: float = 1e-5
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("total_steps", "step counts must be >= 0")
        # total_steps == 0 is the "initial checkpoint only" run
        if self.total_steps > 0 and not self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps", "must be < total_steps")
        if not self.base_lr > self.final_lr > 0:
            raise ConfigError("base_lr", "need base_lr > final_lr > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size", "must be >= 2")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("beta1", "Adam betas must be in [0, 1) and eps > 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every", "must be >= 1")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip", "must be > 0")


@dataclass
class ViewsConfig:
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    p_tag: float = 0.5
    per_sample_source: bool = False

    def __post_init__(self):
        if not 0 <= self.p_tag <= 1:
            raise ConfigError("p_tag", "must be a probability")


@dataclass
class DataConfig:
    source: str = "synth"  # "synth" or "corpus"
    synth: SynthConfig = field(default_factory=SynthConfig)
    corpus: str | None = None
    vocab: str | None = None
    max_len: int = 16

    def __post_init__(self):
        if self.source not in ("synth", "corpus"):
            raise ConfigError("source", "must be 'synth' or 'corpus'")
        if self.source == "corpus" and not self.corpus:
            raise ConfigError("corpus", "required when source is 'corpus'")
        if self.max_len < 1:
            raise ConfigError("max_len", "must be >= 1")


@dataclass
class EvalConfig:
    holdout_frac: float = 0.2
    split_seed: int = 0
    # >0: continue training with conventional views only before evaluating
    finetune_steps: int = 0

    def __post_init__(self):
        if not 0 <= self.holdout_frac < 1:
            raise ConfigError("holdout_frac", "must be in [0, 1)")
        if self.finetune_steps < 0:
            raise ConfigError("finetune_steps", "must be >= 0")


@dataclass
class RunConfig:
    model: str | None = None
    image: ImageEncoderParams = field(default_factory=ImageEncoderParams)
    text: TextEncoderParams = field(default_factory=TextEncoderParams)
    views: ViewsConfig = field(default_factory=ViewsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.image.embed_dim != self.text.embed_dim:
            raise ConfigError("text.embed_dim", "must equal image.embed_dim")
        if self.data.source == "synth" and self.data.synth.image_size != self.image.image_size:
            raise ConfigError("data.synth.image_size", "must equal image.image_size")
        if self.image.image_size % self.image.patch_size:
            raise ConfigError("image.patch_size", "must divide image.image_size")
        if self.text.max_len < self.data.max_len:
            raise ConfigError("text.max_len", "must be >= data.max_len")

    def to_dict(self) -> dict:
        return to_dict(self)


NESTED = {
    RunConfig: {"image": ImageEncoderParams, "text": TextEncoderParams, "views": ViewsConfig,
                "loss": LossConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig},
    ViewsConfig: {"augment": AugmentConfig},
    DataConfig: {"synth": SynthConfig},
}
SKIP = {"weights"}


def to_dict(obj) -> dict:
    if isinstance(obj, LossConfig):
        return obj.to_dict()
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in SKIP:
            continue
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def from_dict(cls, data: dict | None, path: str = ""):
    """Build ``cls`` from a (partial) dict; unknown or invalid fields raise
    ConfigError naming the dotted field path."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)} - SKIP
    for k in data:
        if k not in names:
            raise ConfigError(_join(path, k), "unknown field")
    kwargs = {}
    nested = NESTED.get(cls, {})
    for k, v in data.items():
        if k in nested:
            kwargs[k] = from_dict(nested[k], v, _join(path, k))
        elif cls is LossConfig and k == "lambdas":
            if not isinstance(v, dict):
                raise ConfigError(_join(path, k), "expected a mapping of pair type to weight")
            for pk in v:
                if pk not in PairType.__members__:
                    raise ConfigError(_join(path, f"lambdas.{pk}"), "unknown pair type")
            kwargs[k] = v
        else:
            kwargs[k] = v
    if cls is LossConfig and "lambdas" in kwargs:
        merged = LossConfig().to_dict()["lambdas"]
        merged.update(kwargs["lambdas"])
        kwargs["lambdas"] = merged
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(_join(path, exc.path), str(exc).split(": ", 1)[1]) from None
    except (MVCLError, TypeError, ValueError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def _join(a: str, b: str) -> str:
    return f"{a}.{b}" if a else b


MODELS = ("A", "B", "C", "D", "E")


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (1e-3)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def apply_model(cfg: RunConfig, label: str) -> RunConfig:
    """Return a copy of ``cfg`` set up as ablation model A..E.

    A: image-caption pairs only. B: A plus tag views. C: A plus image-image.
    D: A plus text-text. E: everything. Positive weights and p_tag take their
    library defaults.
    """
    if label not in MODELS:
        raise ConfigError("model", f"must be one of {', '.join(MODELS)}")
    cfg = copy.deepcopy(cfg)
    lam_defaults = LossConfig().lambdas
    p_tag_default = ViewsConfig().p_tag
    lam = {PairType.IT: lam_defaults[PairType.IT], PairType.TI: lam_defaults[PairType.TI],
           PairType.II: 0.0, PairType.TT: 0.0}
    p_tag = 0.0
    if label in ("B", "E"):
        p_tag = p_tag_default
    if label in ("C", "E"):
        lam[PairType.II] = lam_defaults[PairType.II]
    if label in ("D", "E"):
        lam[PairType.TT] = lam_defaults[PairType.TT]
    cfg.loss.lambdas = lam
    cfg.views.p_tag = p_tag
    cfg.model = label
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML/JSON config (or defaults when ``path`` is None) and apply
    dotted-key overrides, e.g. ``{"train.total_steps": 0}``."""
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        try:
            data = yaml.load(text, Loader=_Loader) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"invalid YAML/JSON: {exc}") from None
    data = copy.deepcopy(data)
    for dotted, value in (overrides or {}).items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    model = data.get("model")
    cfg = from_dict(RunConfig, data)
    if model is not None:
        cfg = apply_model(cfg, model)
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
