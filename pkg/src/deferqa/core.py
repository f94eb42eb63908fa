"""Domain types: spans, agent prediction records, and the cost model.

Agent 0 is always the main model; agents 1..J are experts.  Every cost
quantity is indexed ``[head, agent]`` with head 0 = start, head 1 = end.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NegativeCost, NegativeEntry, TauOutOfRange, ZeroVector

START, END = 0, 1
HEADS = ("start", "end")
STRICT, PERMISSIVE = "strict", "permissive"


class TauRangeWarning(UserWarning):
    """Some expert has alpha + beta > 1, so tau can go negative."""


@dataclass(frozen=True, order=True)
class SpanPair:
    start: int
    end: int

    def __post_init__(self):
        s, e = self.start, self.end
        if s < -1 or e < -1:
            raise ValueError(f"span indices must be >= -1, got ({s}, {e})")
        if (s == -1) != (e == -1):
            raise ValueError(f"-1 is reserved for the (-1, -1) no-answer span, got ({s}, {e})")

    def __getitem__(self, head: int) -> int:
        return (self.start, self.end)[head]

    def __iter__(self):
        return iter((self.start, self.end))

    @property
    def is_no_answer(self) -> bool:
        return self.start == -1

    @classmethod
    def of(cls, pair: Sequence[int]) -> "SpanPair":
        s, e = pair
        return cls(int(s), int(e))


NO_ANSWER = SpanPair(-1, -1)


def composite_span(start_from: SpanPair, end_from: SpanPair) -> SpanPair:
    """Start index of one prediction joined with the end index of another.

    If exactly one side says "no answer" the composite is no answer too.
    """
    if start_from.is_no_answer or end_from.is_no_answer:
        return NO_ANSWER
    return SpanPair(start_from.start, end_from.end)


@dataclass(frozen=True)
class AgentPredictionRecord:
    query_id: str
    features: tuple[float, ...]
    gold: SpanPair
    predictions: tuple[SpanPair, ...]

    def __post_init__(self):
        if len(self.predictions) < 2:
            raise ValueError("need the main model plus at least one expert")
        if not all(math.isfinite(v) for v in self.features):
            raise ValueError(f"{self.query_id}: non-finite feature")

    @property
    def num_agents(self) -> int:
        return len(self.predictions)

    @property
    def dim(self) -> int:
        return len(self.features)

    def correct(self, agent: int, head: int) -> bool:
        return self.predictions[agent][head] == self.gold[head]


@dataclass(frozen=True)
class CostParams:
    """Per-expert ``alpha``/``beta`` (length J) and per-agent GFLOPs (length J+1).

    ``gflops`` and ``rejector_gflops`` only feed the efficiency metrics.
    """

    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    gflops: tuple[float, ...] = ()
    rejector_gflops: float = 0.0
    tau_warning: bool = False

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "gflops", tuple(float(g) for g in self.gflops))
        if len(self.alpha) != len(self.beta):
            raise ValueError("alpha and beta must have one entry per expert")
        if self.gflops and len(self.gflops) != len(self.alpha) + 1:
            raise ValueError("gflops needs one entry per agent (J+1)")

    @property
    def num_experts(self) -> int:
        return len(self.alpha)

    @property
    def num_agents(self) -> int:
        return len(self.alpha) + 1

    @property
    def is_strict(self) -> bool:
        return all(a + b <= 1.0 for a, b in zip(self.alpha, self.beta))

    def with_beta(self, beta: Sequence[float]) -> "CostParams":
        return dataclasses.replace(self, beta=tuple(beta), tau_warning=False)

    @classmethod
    def uniform(cls, num_experts: int, alpha=1.0, beta=0.0, **kw) -> "CostParams":
        return cls((alpha,) * num_experts, (beta,) * num_experts, **kw)


def validate_cost_params(params: CostParams, mode: str = STRICT) -> CostParams:
    """Check nonnegativity and, in strict mode, ``alpha_j + beta_j <= 1``.

    Permissive mode accepts ``alpha_j + beta_j > 1`` but returns a copy with
    ``tau_warning`` set (and emits a :class:`TauRangeWarning`).
    """
    if mode not in (STRICT, PERMISSIVE):
        raise ValueError(f"unknown validation mode {mode!r}")
    for j, (a, b) in enumerate(zip(params.alpha, params.beta), start=1):
        if a < 0 or b < 0:
            raise NegativeCost(f"expert {j}: alpha={a}, beta={b}")
    if any(g < 0 for g in params.gflops) or params.rejector_gflops < 0:
        raise NegativeCost("GFLOPs must be nonnegative")
    if params.is_strict:
        return params
    if mode == STRICT:
        bad = [j for j, (a, b) in enumerate(zip(params.alpha, params.beta), 1) if a + b > 1]
        raise TauOutOfRange(f"alpha + beta > 1 for experts {bad}")
    warnings.warn("alpha + beta > 1: tau weights can be negative", TauRangeWarning, stacklevel=2)
    return dataclasses.replace(params, tau_warning=True)


def agent_cost(j: int, prediction: int, gold: int, params: CostParams) -> float:
    """Single-head cost of trusting agent ``j``."""
    wrong = float(prediction != gold)
    if j == 0:
        return wrong
    return params.alpha[j - 1] * wrong + params.beta[j - 1]


def tau_weights(costs) -> np.ndarray:
    return 1.0 - np.asarray(costs, dtype=float)


def normalize_cost_vector(tau_bar) -> np.ndarray:
    """L1-normalize a nonnegative vector onto the probability simplex."""
    v = np.asarray(tau_bar, dtype=float)
    if np.any(v < 0):
        raise NegativeEntry(f"negative entry in {v}")
    total = v.sum()
    if total == 0:
        raise ZeroVector("cannot normalize the zero vector")
    return v / total


# -- array views ---------------------------------------------------------


@dataclass(frozen=True)
class LogArrays:
    """Dense view of a list of records.

    ``correct[n, i, j]`` is True when agent ``j`` gets head ``i`` right on
    record ``n``.
    """

    query_ids: tuple[str, ...]
    features: np.ndarray  # (N, d)
    gold: np.ndarray  # (N, 2)
    predictions: np.ndarray  # (N, J+1, 2)
    correct: np.ndarray  # (N, 2, J+1) bool

    def __len__(self):
        return len(self.query_ids)

    @property
    def num_agents(self) -> int:
        return self.predictions.shape[1]

    @classmethod
    def from_records(cls, records: Sequence[AgentPredictionRecord]) -> "LogArrays":
        feats = np.array([r.features for r in records], dtype=float)
        gold = np.array([tuple(r.gold) for r in records], dtype=np.int64)
        preds = np.array([[tuple(p) for p in r.predictions] for r in records], dtype=np.int64)
        correct = (preds == gold[:, None, :]).transpose(0, 2, 1)
        return cls(tuple(r.query_id for r in records), feats, gold, preds, correct)


def cost_tensor(correct: np.ndarray, params: CostParams) -> np.ndarray:
    """Costs ``c[..., i, j]`` from a correctness tensor shaped ``(..., 2, J+1)``."""
    wrong = 1.0 - np.asarray(correct, dtype=float)
    alpha = np.array(params.alpha)
    beta = np.array(params.beta)
    costs = np.empty_like(wrong)
    costs[..., 0] = wrong[..., 0]
    costs[..., 1:] = alpha * wrong[..., 1:] + beta
    return costs


def record_costs(record: AgentPredictionRecord, params: CostParams) -> np.ndarray:
    """The (2, J+1) cost matrix of one record, computed head by head."""
    out = np.empty((2, record.num_agents))
    for i in (START, END):
        for j in range(record.num_agents):
            out[i, j] = agent_cost(j, record.predictions[j][i], record.gold[i], params)
    return out
