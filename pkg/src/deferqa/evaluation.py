"""System-level metrics, cost sweeps, and the majority-vote ensemble baseline."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import AgentPredictionRecord, CostParams, SpanPair, composite_span
from .errors import DeferError, DimensionMismatch, EmptyLog, IoError
from .rejector import JOINT, PER_HEAD, decide_batch

log = logging.getLogger(__name__)

DEFAULT_COST_RATIO_DIVISOR = 20.0


def exact_match(pred: SpanPair, gold: SpanPair) -> int:
    return int(pred.start == gold.start and pred.end == gold.end)


def gflops_per_em(mean_gflops_per_query: float, em_percent: float) -> float:
    """Compute per query divided by EM percentage; ``inf`` when EM is 0."""
    if em_percent <= 0:
        return math.inf
    return mean_gflops_per_query / em_percent


@dataclass(frozen=True)
class MetricsReport:
    em_percent: float
    allocation: tuple[float, ...]
    expert_allocation_percent: float
    mean_gflops_per_query: float
    gflops_per_em: float
    tpr: float
    fpr: float
    confusion: tuple[float, ...] | None
    beta: tuple[float, ...]
    num_records: int
    mode: str
    tpr_undefined: bool = False
    fpr_undefined: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class _Tally:
    """Integer counts over one chunk of records; merging is order-free."""

    em: int
    head_alloc: np.ndarray  # (J+1,) heads routed to each agent
    consulted: np.ndarray  # (J+1,) queries consulting each agent
    model_wrong: int
    model_right: int
    tp: int
    fp: int

    def __add__(self, other: "_Tally") -> "_Tally":
        return _Tally(
            self.em + other.em,
            self.head_alloc + other.head_alloc,
            self.consulted + other.consulted,
            self.model_wrong + other.model_wrong,
            self.model_right + other.model_right,
            self.tp + other.tp,
            self.fp + other.fp,
        )


def _chosen_spans(records, decisions) -> list[SpanPair]:
    return [
        composite_span(r.predictions[ds], r.predictions[de])
        for r, (ds, de) in zip(records, decisions.tolist())
    ]


def _decisions(model, records, mode) -> np.ndarray:
    if not records:
        return np.zeros((0, 2), dtype=np.int64)
    feats = np.array([r.features for r in records], dtype=float)
    return decide_batch(model.score_batch(feats), mode)


def _tally(records: Sequence[AgentPredictionRecord], model, mode: str, num_agents: int) -> _Tally:
    decisions = _decisions(model, records, mode)
    head_alloc = np.zeros(num_agents, dtype=np.int64)
    consulted = np.zeros(num_agents, dtype=np.int64)
    em = model_wrong = model_right = tp = fp = 0
    for r, span, (ds, de) in zip(records, _chosen_spans(records, decisions), decisions.tolist()):
        hit = exact_match(span, r.gold)
        em += hit
        head_alloc[ds] += 1
        head_alloc[de] += 1
        for j in {ds, de}:
            consulted[j] += 1
        main_ok = exact_match(r.predictions[0], r.gold)
        deferred = ds != 0 or de != 0
        if main_ok:
            model_right += 1
            fp += int(deferred and not hit)
        else:
            model_wrong += 1
            tp += int(deferred and hit)
    return _Tally(em, head_alloc, consulted, model_wrong, model_right, tp, fp)


def _check(records, model, params: CostParams) -> int:
    if not records:
        raise EmptyLog("cannot evaluate an empty log")
    n = records[0].num_agents
    if model.num_agents != n or params.num_agents != n:
        raise DimensionMismatch(
            f"agents: log {n}, model {model.num_agents}, costs {params.num_agents}"
        )
    dim = getattr(model, "input_dim", None)
    for r in records:
        if r.num_agents != n:
            raise DimensionMismatch(f"{r.query_id}: {r.num_agents} agents, expected {n}")
        if dim is not None and r.dim != dim:
            raise DimensionMismatch(f"{r.query_id}: {r.dim} features, model expects {dim}")
    return n


def evaluate_system(
    records: Sequence[AgentPredictionRecord],
    model,
    params: CostParams,
    mode: str = JOINT,
    workers: int = 1,
    chunk_size: int = 4096,
    expert_of_interest: int | None = 1,
) -> MetricsReport:
    """Route every record through ``model`` and tally the system metrics.

    Per-head mode counts each head's decision with weight 1/2 in the
    allocation and charges every distinct consulted agent once per query.
    Chunks may be scored on ``workers`` threads; all tallies are integers,
    so the report does not depend on scheduling.
    """
    n_agents = _check(records, model, params)
    chunks = [records[i : i + chunk_size] for i in range(0, len(records), chunk_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _tally(c, model, mode, n_agents), chunks))
    else:
        parts = [_tally(c, model, mode, n_agents) for c in chunks]
    total = parts[0]
    for p in parts[1:]:
        total = total + p

    n = len(records)
    allocation = tuple(float(c) / (2 * n) for c in total.head_alloc)
    em = 100.0 * total.em / n
    gflops = _mean_gflops(total.consulted, n, params)
    confusion = None
    if expert_of_interest is not None and expert_of_interest < n_agents:
        confusion = confusion_matrix(records, model, expert_of_interest).mean
    return MetricsReport(
        em_percent=em,
        allocation=allocation,
        expert_allocation_percent=100.0 * (1.0 - allocation[0]),
        mean_gflops_per_query=gflops,
        gflops_per_em=gflops_per_em(gflops, em),
        tpr=total.tp / total.model_wrong if total.model_wrong else 0.0,
        fpr=total.fp / total.model_right if total.model_right else 0.0,
        confusion=confusion,
        beta=params.beta,
        num_records=n,
        mode=mode,
        tpr_undefined=total.model_wrong == 0,
        fpr_undefined=total.model_right == 0,
    )


def _mean_gflops(consulted: np.ndarray, n: int, params: CostParams) -> float:
    if not params.gflops:
        return params.rejector_gflops
    # c / n is exactly 1.0 when every query uses one agent
    return params.rejector_gflops + sum(g * (int(c) / n) for c, g in zip(consulted, params.gflops))


def tpr_fpr(records: Sequence[AgentPredictionRecord], model, mode: str = JOINT) -> tuple[float, float]:
    """Deferral true/false positive rates at the query level.

    TPR = (main model wrong, deferred, answer right) / (main model wrong);
    FPR = (main model right, deferred, answer wrong) / (main model right).
    An empty denominator gives 0; use :func:`evaluate_system` for the flags.
    """
    if not records:
        raise EmptyLog("cannot score an empty log")
    t = _tally(records, model, mode, records[0].num_agents)
    tpr = t.tp / t.model_wrong if t.model_wrong else 0.0
    fpr = t.fp / t.model_right if t.model_right else 0.0
    return tpr, fpr


@dataclass(frozen=True)
class ConfusionMatrix:
    """Bucket fractions t1..t8 per head and averaged over heads.

    t1-t4: kept by the main model; t5-t8: deferred.  Within each half the
    order is (main, expert) = (right, right), (right, wrong), (wrong, right),
    (wrong, wrong).
    """

    start: tuple[float, ...]
    end: tuple[float, ...]
    mean: tuple[float, ...]


def confusion_matrix(records: Sequence[AgentPredictionRecord], model, expert_of_interest: int) -> ConfusionMatrix:
    if not records:
        raise EmptyLog("cannot score an empty log")
    if not 1 <= expert_of_interest < records[0].num_agents:
        raise ValueError(f"expert_of_interest must be an expert index, got {expert_of_interest}")
    decisions = _decisions(model, records, PER_HEAD)
    counts = np.zeros((2, 8), dtype=np.int64)
    for r, dec in zip(records, decisions.tolist()):
        for head in (0, 1):
            deferred = dec[head] != 0
            main_ok = r.correct(0, head)
            exp_ok = r.correct(expert_of_interest, head)
            counts[head, 4 * deferred + 2 * (not main_ok) + (not exp_ok)] += 1
    frac = counts / len(records)
    return ConfusionMatrix(tuple(frac[0]), tuple(frac[1]), tuple(frac.mean(axis=0)))


# -- ensemble ----------------------------------------------------------------


def _vote(values: Sequence[int]) -> int:
    counts = Counter(values)
    top = max(counts.values())
    # values are listed in agent order, so the first tied value belongs to
    # the lowest-index agent (agent 0 when it is among the leaders)
    return next(v for v in values if counts[v] == top)


def ensemble_vote(record: AgentPredictionRecord) -> SpanPair:
    start = _vote([p.start for p in record.predictions])
    end = _vote([p.end for p in record.predictions])
    if (start == -1) != (end == -1):
        # heads voted inconsistently on "no answer"; fall back to the whole
        # span most agents gave
        return SpanPair.of(_vote_pairs(record.predictions))
    return SpanPair(start, end)


def _vote_pairs(preds: Sequence[SpanPair]) -> tuple[int, int]:
    pairs = [tuple(p) for p in preds]
    return _vote(pairs)


def ensemble_baseline(records: Sequence[AgentPredictionRecord], params: CostParams) -> MetricsReport:
    """Per-head plurality vote over every agent, every agent queried.

    The allocation is reported as an equal share per agent since the
    ensemble consults all of them on every query.
    """
    if not records:
        raise EmptyLog("cannot score an empty log")
    n_agents = records[0].num_agents
    if n_agents < 2:
        raise DimensionMismatch("ensemble needs at least two agents")
    hits = sum(exact_match(ensemble_vote(r), r.gold) for r in records)
    em = 100.0 * hits / len(records)
    gflops = float(sum(params.gflops)) if params.gflops else 0.0
    share = 1.0 / n_agents
    return MetricsReport(
        em_percent=em,
        allocation=(share,) * n_agents,
        expert_allocation_percent=100.0 * (1.0 - share),
        mean_gflops_per_query=gflops,
        gflops_per_em=gflops_per_em(gflops, em),
        tpr=0.0,
        fpr=0.0,
        confusion=None,
        beta=params.beta,
        num_records=len(records),
        mode="ensemble",
        tpr_undefined=True,
        fpr_undefined=True,
    )


# -- cost sweeps -------------------------------------------------------------


def cost_ratio(params: CostParams, divisor: float = DEFAULT_COST_RATIO_DIVISOR) -> float:
    """``gflops(M2) / (divisor * gflops(M1))``, the scale tying beta_2 to beta_1."""
    if len(params.gflops) < 3:
        raise ValueError("cost ratio needs GFLOPs for the main model and two experts")
    return params.gflops[2] / (divisor * params.gflops[1])


def sweep_betas(params: CostParams, beta1: float, divisor: float = DEFAULT_COST_RATIO_DIVISOR) -> tuple[float, ...]:
    """Expert costs for one sweep point: ``beta_j = beta1 * gflops(M_j) / (divisor * gflops(M_1))`` for j >= 2."""
    if params.num_experts == 1:
        return (beta1,)
    g1 = params.gflops[1]
    return (beta1,) + tuple(beta1 * g / (divisor * g1) for g in params.gflops[2:])


@dataclass(frozen=True)
class CurveRow:
    beta1: float
    em: float
    expert_alloc: float
    alloc: tuple[float, ...]
    gflops_per_em: float
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def beta_sweep(
    records: Sequence[AgentPredictionRecord],
    model_factory: Callable[[], object],
    params_base: CostParams,
    beta1_grid: Sequence[float],
    train_config,
    mode: str = JOINT,
    divisor: float = DEFAULT_COST_RATIO_DIVISOR,
    eval_records: Sequence[AgentPredictionRecord] | None = None,
) -> list[CurveRow]:
    """Train and evaluate a fresh rejector for every ``beta1`` in the grid.

    A grid point whose training fails yields a row with NaN metrics and the
    error message; the sweep carries on.
    """
    from .training import train

    grid = list(beta1_grid)
    if not grid:
        raise ValueError("beta grid is empty")
    if any(b > a for a, b in zip(grid[1:], grid)):
        raise ValueError("beta grid must be ascending")
    eval_records = records if eval_records is None else eval_records
    rows = []
    for b1 in grid:
        params = params_base.with_beta(sweep_betas(params_base, b1, divisor))
        cfg = dataclasses.replace(train_config, costs=params)
        try:
            model, _ = train(records, model_factory(), cfg)
        except DeferError as exc:
            log.warning("sweep point beta1=%s failed: %s", b1, exc)
            nan = float("nan")
            rows.append(CurveRow(b1, nan, nan, (nan,) * params.num_agents, nan, str(exc)))
            continue
        rep = evaluate_system(eval_records, model, params, mode)
        rows.append(CurveRow(b1, rep.em_percent, rep.expert_allocation_percent, rep.allocation, rep.gflops_per_em))
    return rows


def oracle_allocation_curve(world, params_base: CostParams, beta1_grid: Sequence[float], mode: str = JOINT,
                            divisor: float = DEFAULT_COST_RATIO_DIVISOR) -> list[tuple[float, np.ndarray]]:
    """Bayes-rule allocation fractions across the beta grid on a synthetic world."""
    from .oracle import allocation_fractions, bayes_decisions

    out = []
    for b1 in beta1_grid:
        params = params_base.with_beta(sweep_betas(params_base, b1, divisor))
        dec = bayes_decisions(world, mode, params)
        out.append((b1, allocation_fractions(dec, world.mass, world.num_agents)))
    return out


def curve_header(num_agents: int) -> list[str]:
    return ["beta1", "em", "expert_alloc", *(f"alloc_agent{j}" for j in range(num_agents)), "gflops_per_em"]


def write_curve(rows: Sequence[CurveRow], path, num_agents: int | None = None, comment: str | None = None) -> None:
    if num_agents is None:
        num_agents = len(rows[0].alloc) if rows else 0
    try:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(curve_header(num_agents))
            for r in rows:
                w.writerow([repr(float(v)) for v in (r.beta1, r.em, r.expert_alloc, *r.alloc, r.gflops_per_em)])
    except OSError as exc:
        raise IoError(f"cannot write curve to {path}: {exc}") from exc


def read_curve(path) -> list[CurveRow]:
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise IoError(f"cannot read curve from {path}: {exc}") from exc
    reader = csv.reader(lines)
    header = next(reader)
    n_alloc = len(header) - 4
    rows = []
    for rec in reader:
        vals = [float(v) for v in rec]
        rows.append(CurveRow(vals[0], vals[1], vals[2], tuple(vals[3 : 3 + n_alloc]), vals[-1]))
    return rows
