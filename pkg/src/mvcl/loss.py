"""InfoNCE and the weighted multi-view contrastive objective."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor


class PairType(str, enum.Enum):
    II = "II"  # (I_v1, I_v2)
    TT = "TT"  # (T_v1, T_v2)
    IT = "IT"  # (I_v1, T_v1)
    TI = "TI"  # (T_v1, I_v1)


# (query view, key view) per pair type
PAIR_VIEWS = {
    PairType.II: ("I_v1", "I_v2"),
    PairType.TT: ("T_v1", "T_v2"),
    PairType.IT: ("I_v1", "T_v1"),
    PairType.TI: ("T_v1", "I_v1"),
}
# symmetric extras, enabled by LossConfig.extra_pairs
EXTRA_VIEWS = {"I2T2": ("I_v2", "T_v2"), "T2I2": ("T_v2", "I_v2")}

DEFAULT_LAMBDAS = {PairType.II: 0.5, PairType.TT: 0.5, PairType.IT: 1.0, PairType.TI: 1.0}


@dataclass
class LossConfig:
    tau: float = 0.07
    learnable_tau: bool = True
    tau_min: float = 0.005
    tau_max: float = 0.5
    lambdas: dict = field(default_factory=lambda: dict(DEFAULT_LAMBDAS))
    # one temperature shared by all pairs, or one per pair type
    per_pair_tau: bool = False
    # adds (I_v2,T_v2) and (T_v2,I_v2) at the inter-modal weights
    extra_pairs: bool = False

    def __post_init__(self):
        self.lambdas = {PairType(k): float(v) for k, v in self.lambdas.items()}
        for p in PairType:
            self.lambdas.setdefault(p, 0.0)
        self.validate()

    def validate(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if not 0 < self.tau_min <= self.tau <= self.tau_max:
            raise ParameterError("need 0 < tau_min <= tau <= tau_max")
        for p, v in self.lambdas.items():
            if v < 0:
                raise ParameterError(f"lambda[{p.value}] must be >= 0")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "learnable_tau": self.learnable_tau,
            "tau_min": self.tau_min,
            "tau_max": self.tau_max,
            "lambdas": {p.value: self.lambdas[p] for p in PairType},
            "per_pair_tau": self.per_pair_tau,
            "extra_pairs": self.extra_pairs,
        }


@dataclass
class LossBreakdown:
    per_pair: dict
    lambdas: dict
    total: float

    def as_row(self) -> dict:
        row = {f"loss_{p.value}": self.per_pair.get(p, 0.0) for p in PairType}
        row["loss_total"] = self.total
        return row


def similarity_matrix(hx, hy) -> Tensor:
    """All pairwise dot products; cosine similarity for unit-norm rows."""
    hx, hy = T._as_tensor(hx), T._as_tensor(hy)
    if hx.data.ndim != 2 or hy.data.ndim != 2 or hx.shape != hy.shape:
        raise DimensionError(f"similarity needs two N x D matrices, got {hx.shape}, {hy.shape}")
    return T.matmul(hx, T.transpose(hy))


def info_nce_tensor(hx, hy, tau) -> Tensor:
    """Differentiable InfoNCE: row i of ``hx`` must pick column i of ``hy``."""
    tau = T._as_tensor(tau)
    if np.any(tau.data <= 0):
        raise ParameterError(f"tau must be > 0, got {tau.data}")
    sim = similarity_matrix(hx, hy)
    n = sim.shape[0]
    logp = T.log_softmax(T.div(sim, tau), axis=1)
    return T.mul(T.sum(T.mul(logp, np.eye(n))), -1.0 / n)


def info_nce(hx, hy, tau) -> float:
    return info_nce_tensor(hx, hy, tau).item()


def multi_view_loss_tensor(emb: dict, cfg: LossConfig, tau=None) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum over the pair set.

    ``emb`` maps I_v1, I_v2, T_v1, T_v2 to N x D embedding tensors. Views
    whose pairs all carry zero weight may be omitted. ``tau`` is a Tensor
    (learnable temperature), a dict PairType -> Tensor when temperatures are
    per pair, or None to use ``cfg.tau``.
    """
    if tau is None:
        tau = cfg.tau
    shapes = {k: T._as_tensor(v).shape for k, v in emb.items()}
    if len(set(shapes.values())) > 1:
        raise DimensionError(f"view embeddings disagree in shape: {shapes}")

    def tau_for(p):
        return tau[p] if isinstance(tau, dict) else tau

    total = None
    per_pair = {}
    terms = [(p, PAIR_VIEWS[p], cfg.lambdas[p]) for p in PairType]
    if cfg.extra_pairs:
        terms.append((PairType.IT, EXTRA_VIEWS["I2T2"], cfg.lambdas[PairType.IT]))
        terms.append((PairType.TI, EXTRA_VIEWS["T2I2"], cfg.lambdas[PairType.TI]))
    for p, (x, y), lam in terms:
        if lam == 0.0 and (x not in emb or y not in emb):
            continue
        for k in (x, y):
            if k not in emb:
                raise DimensionError(f"missing view {k} for pair {p.value}")
        term = info_nce_tensor(emb[x], emb[y], tau_for(p))
        per_pair[p] = per_pair.get(p, 0.0) + term.item()
        weighted = T.mul(term, lam)
        total = weighted if total is None else T.add(total, weighted)
    if total is None:
        total = Tensor(0.0)
    value = float(np.sum([cfg.lambdas[p] * v for p, v in per_pair.items()]))
    return total, LossBreakdown(per_pair=per_pair, lambdas=dict(cfg.lambdas), total=value)


def multi_view_loss(emb: dict, cfg: LossConfig) -> LossBreakdown:
    return multi_view_loss_tensor(emb, cfg)[1]
