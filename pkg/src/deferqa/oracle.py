"""Finite synthetic worlds with known error rates, and exact oracles over them.

A world stores, for every point, the raw probability that each agent gets
each head wrong.  Expert costs ``alpha_j * err + beta_j`` are derived on
demand so the same world can be re-priced under different ``beta``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import AgentPredictionRecord, CostParams, LogArrays, SpanPair, cost_tensor
from .errors import BadSpec, DomainError, NonNegativeTauViolated, OutOfRange
from .losses import comp_sum_all
from .rejector import JOINT, PER_HEAD, decide_batch

CONTEXT_LEN = 64
_BISECT_ITERS = 200


@dataclass(frozen=True)
class SyntheticWorld:
    features: np.ndarray  # (P, d)
    mass: np.ndarray  # (P,)
    error: np.ndarray  # (P, 2, J+1) raw error probabilities
    gold: np.ndarray  # (P, 2) gold spans
    costs: CostParams
    seed: int = 0
    beta_per_head: bool = True
    cluster: np.ndarray | None = None  # (P,) nearest-center membership

    def __post_init__(self):
        if abs(self.mass.sum() - 1.0) > 1e-12 or np.any(self.mass < 0):
            raise BadSpec("point masses must be nonnegative and sum to 1")
        if np.any(self.error < 0) or np.any(self.error > 1):
            raise BadSpec("error probabilities must lie in [0, 1]")
        if self.error.shape[2] != self.costs.num_agents:
            raise BadSpec("cost params do not match the world's agent count")

    @property
    def num_points(self) -> int:
        return len(self.mass)

    @property
    def num_agents(self) -> int:
        return self.error.shape[2]

    def with_costs(self, costs: CostParams) -> "SyntheticWorld":
        return SyntheticWorld(
            self.features, self.mass, self.error, self.gold, costs, self.seed, self.beta_per_head, self.cluster
        )

    def eta(self, costs: CostParams | None = None) -> np.ndarray:
        """Expected per-head cost of each agent, ``(P, 2, J+1)``."""
        costs = costs or self.costs
        out = self.error.copy()
        out[..., 1:] = np.array(costs.alpha) * self.error[..., 1:] + np.array(costs.beta)
        return out

    def joint_eta(self, costs: CostParams | None = None) -> np.ndarray:
        """Expected query cost of sending both heads to one agent, ``(P, J+1)``."""
        costs = costs or self.costs
        total = self.eta(costs).sum(axis=1)
        if not self.beta_per_head:
            total[:, 1:] -= np.array(costs.beta)
        return total


@dataclass(frozen=True)
class ClusterSpec:
    """Gaussian clusters where each expert is competent on a subset.

    ``main_error`` is a scalar or one rate per cluster; ``competent[j]``
    lists the clusters expert ``j+1`` handles well.
    """

    num_clusters: int
    competent: tuple[tuple[int, ...], ...]
    in_error: float = 0.05
    out_error: float = 0.6
    main_error: float | tuple[float, ...] = 0.3
    dim: int = 2
    points_per_cluster: int = 100
    spread: float = 0.5
    radius: float = 3.0
    centers: tuple[tuple[float, ...], ...] | None = None

    def validate(self) -> None:
        if self.num_clusters < 1 or self.dim < 1 or self.points_per_cluster < 1:
            raise BadSpec("need at least one cluster, dimension and point")
        if not self.competent:
            raise BadSpec("need at least one expert")
        rates = [self.in_error, self.out_error, *np.atleast_1d(self.main_error)]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise BadSpec("error rates must lie in [0, 1]")
        if np.ndim(self.main_error) and len(self.main_error) != self.num_clusters:
            raise BadSpec("main_error needs one entry per cluster")
        for comp in self.competent:
            if any(not 0 <= k < self.num_clusters for k in comp):
                raise BadSpec(f"competent set {comp} not within the {self.num_clusters} clusters")
        if self.centers is not None and np.shape(self.centers) != (self.num_clusters, self.dim):
            raise BadSpec("centers must be (num_clusters, dim)")

    def cluster_centers(self, rng: np.random.Generator) -> np.ndarray:
        if self.centers is not None:
            return np.array(self.centers, dtype=float)
        if self.dim >= 2:
            angles = 2 * np.pi * np.arange(self.num_clusters) / self.num_clusters
            c = np.zeros((self.num_clusters, self.dim))
            c[:, 0] = self.radius * np.cos(angles)
            c[:, 1] = self.radius * np.sin(angles)
            return c
        return rng.normal(scale=self.radius, size=(self.num_clusters, self.dim))


def nearest_center(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


def generate_world(
    spec: ClusterSpec, costs: CostParams, seed: int = 0, beta_per_head: bool = True
) -> SyntheticWorld:
    """Sample clustered points with uniform mass and cluster-driven error rates.

    Membership is decided by the nearest center, not by the cluster a point
    was drawn from, so error regions are Voronoi cells.
    """
    spec.validate()
    if costs.num_experts != len(spec.competent):
        raise BadSpec("costs and competent sets disagree on the number of experts")
    rng = np.random.default_rng(seed)
    centers = spec.cluster_centers(rng)
    m = spec.points_per_cluster
    feats = np.concatenate(
        [c + spec.spread * rng.standard_normal((m, spec.dim)) for c in centers], axis=0
    )
    member = nearest_center(feats, centers)
    p = len(feats)
    num_agents = len(spec.competent) + 1
    main = np.broadcast_to(np.asarray(spec.main_error, dtype=float), (spec.num_clusters,))
    error = np.empty((p, 2, num_agents))
    error[:, :, 0] = main[member][:, None]
    for j, comp in enumerate(spec.competent, start=1):
        good = np.isin(member, comp)
        error[:, :, j] = np.where(good, spec.in_error, spec.out_error)[:, None]
    starts = rng.integers(0, CONTEXT_LEN - 8, size=p)
    gold = np.stack([starts, starts + rng.integers(0, 8, size=p)], axis=1)
    return SyntheticWorld(feats, np.full(p, 1.0 / p), error, gold, costs, seed, beta_per_head, member)


def sample_log(world: SyntheticWorld, n: int, seed: int = 0) -> list[AgentPredictionRecord]:
    """Draw ``n`` records; each agent/head is right with probability ``1 - error``.

    A wrong head is the gold index plus one, wrapped inside the context.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    points = rng.choice(world.num_points, size=n, p=world.mass)
    wrong = rng.random((n, 2, world.num_agents)) < world.error[points]
    records = []
    for k, pt in enumerate(points):
        gold = world.gold[pt]
        preds = []
        for j in range(world.num_agents):
            s, e = (
                int((gold[i] + 1) % CONTEXT_LEN) if wrong[k, i, j] else int(gold[i]) for i in (0, 1)
            )
            preds.append(SpanPair(s, e))
        records.append(
            AgentPredictionRecord(
                f"q{k:07d}",
                tuple(float(v) for v in world.features[pt]),
                SpanPair(int(gold[0]), int(gold[1])),
                tuple(preds),
            )
        )
    return records


# -- Bayes rule ------------------------------------------------------------


def _eta_row(err_row, params: CostParams) -> np.ndarray:
    err = np.asarray(err_row, dtype=float)
    if err.shape != (params.num_agents,):
        raise ValueError(f"need {params.num_agents} error probabilities, got {err.shape}")
    return np.concatenate([[err[0]], np.array(params.alpha) * err[1:] + np.array(params.beta)])


def bayes_decide(err_row, params: CostParams) -> int:
    """Keep the main model unless some expert is strictly cheaper in expectation."""
    eta = _eta_row(err_row, params)
    best_expert = int(np.argmin(eta[1:]))
    if eta[0] <= eta[1 + best_expert]:
        return 0
    return best_expert + 1


def brute_force_conditional_min(err_row, params: CostParams) -> tuple[int, float]:
    """Enumerate every agent's conditional risk and keep the first minimum."""
    risks = [float(err_row[0])]
    for j in range(1, len(err_row)):
        risks.append(params.alpha[j - 1] * float(err_row[j]) + params.beta[j - 1])
    best = 0
    for j, r in enumerate(risks):
        if r < risks[best]:
            best = j
    return best, risks[best]


def bayes_decisions(world: SyntheticWorld, mode: str = PER_HEAD, costs: CostParams | None = None) -> np.ndarray:
    """Bayes agent per point and head, ``(P, 2)``."""
    if mode == PER_HEAD:
        return np.argmin(world.eta(costs), axis=-1)
    if mode == JOINT:
        j = np.argmin(world.joint_eta(costs), axis=-1)
        return np.stack([j, j], axis=1)
    raise ValueError(f"unknown mode {mode!r}")


def bayes_risk(world: SyntheticWorld, params: CostParams | None = None, mode: str = PER_HEAD) -> float:
    if mode == PER_HEAD:
        pointwise = world.eta(params).min(axis=-1).sum(axis=1)
    elif mode == JOINT:
        pointwise = world.joint_eta(params).min(axis=-1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(world.mass @ pointwise)


def allocation_fractions(decisions: np.ndarray, mass: np.ndarray, num_agents: int) -> np.ndarray:
    """Mass routed to each agent, counting each head with weight 1/2."""
    out = np.zeros(num_agents)
    for i in (0, 1):
        np.add.at(out, decisions[:, i], 0.5 * mass)
    return out


class BayesRejector:
    """Scores ``-eta`` at the world's points, so argmax reproduces the Bayes rule."""

    def __init__(self, world: SyntheticWorld, params: CostParams | None = None, mode: str = PER_HEAD):
        self.num_agents = world.num_agents
        self.input_dim = world.features.shape[1]
        self._index = {world.features[p].tobytes(): p for p in range(world.num_points)}
        eta = world.eta(params)
        if mode == JOINT and not world.beta_per_head:
            # joint sums then charge beta once; split it across the heads
            eta = eta.copy()
            eta[..., 1:] -= 0.5 * np.array((params or world.costs).beta)
        self._scores = -eta

    def score_batch(self, features) -> np.ndarray:
        x = np.ascontiguousarray(np.asarray(features, dtype=float))
        try:
            rows = [self._index[row.tobytes()] for row in x]
        except KeyError as exc:
            raise KeyError("features are not a point of this world") from exc
        return self._scores[rows]

    def score(self, features):
        out = self.score_batch(np.asarray(features, dtype=float)[None, :])[0]
        return out[0], out[1]


def empirical_deferral_risk(model, source, params: CostParams | None = None, mode: str = JOINT) -> float:
    """Expected true deferral loss of ``model`` on a world, or its mean on a log."""
    if isinstance(source, SyntheticWorld):
        decisions = decide_batch(model.score_batch(source.features), mode)
        eta = source.eta(params)
        cost = np.take_along_axis(eta, decisions[:, :, None], axis=-1)[..., 0].sum(axis=1)
        if mode == JOINT and not source.beta_per_head:
            beta = np.concatenate([[0.0], (params or source.costs).beta])
            cost -= beta[decisions[:, 0]]
        return float(source.mass @ cost)
    if params is None:
        raise ValueError("a log needs explicit cost params")
    arrays = LogArrays.from_records(source)
    decisions = decide_batch(model.score_batch(arrays.features), mode)
    costs = cost_tensor(arrays.correct, params)
    chosen = np.take_along_axis(costs, decisions[:, :, None], axis=-1)[..., 0]
    return float(chosen.sum(axis=1).mean())


# -- consistency transform ---------------------------------------------------


def gamma_transform(u: float, nu: float, n: int) -> float:
    """The comp-sum consistency transform ``T^nu(u)`` on ``[0, 1]``.

    ``n`` is the number of classes; it only enters for ``nu > 1``.
    """
    if not 0.0 <= u <= 1.0:
        raise DomainError(f"u={u} outside [0, 1]")
    if n < 2:
        raise ValueError("n must be >= 2")
    if abs(nu - 1.0) < 1e-9:
        tail = 0.0 if u == 1.0 else (1 - u) / 2 * math.log1p(-u)
        return (1 + u) / 2 * math.log1p(u) + tail
    if nu >= 2.0:
        return u / ((nu - 1) * n ** (nu - 1))
    e = 1.0 / (2.0 - nu)
    # power mean of (1+u, 1-u) with (1+u) factored out so it cannot overflow as nu -> 2
    mean_pow = (1 + u) * ((1 + ((1 - u) / (1 + u)) ** e) / 2) ** (2 - nu)
    if nu < 1.0:
        return 2 ** (1 - nu) / (1 - nu) * (1 - mean_pow)
    return (mean_pow - 1) / ((nu - 1) * n ** (nu - 1))


def _bisect_transform(t: float, nu: float, n: int, tol: float) -> tuple[float, float, float]:
    lo, hi = 0.0, 1.0
    mid = 0.5
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        val = gamma_transform(mid, nu, n)
        if abs(val - t) <= tol:
            break
        if val < t:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps:
            break
    return lo, mid, hi


def gamma_inverse(t: float, nu: float, n: int, tol: float = 1e-12) -> float:
    """Invert ``T^nu`` by bisection; ``|T(u) - t| <= tol`` on return."""
    if tol <= 0:
        raise ValueError("tol must be > 0")
    top = gamma_transform(1.0, nu, n)
    if t < 0 or t > top + tol:
        raise OutOfRange(f"t={t} outside [0, {top}]")
    if t <= 0:
        return 0.0
    if t >= top:
        return 1.0
    return _bisect_transform(t, nu, n, tol)[1]


def gamma_upper(t: float, nu: float, n: int) -> float:
    """A value never below ``T^{-1}(t)``, extended by 1 past ``T(1)``.

    The 0-1 excess on the simplex never exceeds 1, which makes the
    extension valid for the consistency bound.
    """
    if t <= 0:
        return 0.0
    if t >= gamma_transform(1.0, nu, n):
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if gamma_transform(mid, nu, n) < t:
            lo = mid
        else:
            hi = mid
    return hi


def surrogate_conditional_infimum(tau_bar, nu: float) -> float:
    """``inf_s sum_j tau_bar_j Phi^nu(s, j)`` over all score vectors ``s``.

    Closed form: for ``nu < 2`` the optimal softmax is proportional to
    ``tau_bar ** (1 / (2 - nu))``; for ``nu >= 2`` it approaches the vertex
    at the largest weight.
    """
    w = np.asarray(tau_bar, dtype=float)
    total = w.sum()
    if total <= 0:
        return 0.0
    p = w / total
    if nu >= 2.0:
        return float(total * (1.0 - p.max()) / (nu - 1.0))
    q = p ** (1.0 / (2.0 - nu))
    q /= q.sum()
    live = p > 0
    if abs(nu - 1.0) < 1e-9:
        phi = -np.log(q[live])
    else:
        phi = np.expm1(-(1.0 - nu) * np.log(q[live])) / (1.0 - nu)
    return float(total * (p[live] @ phi))


@dataclass(frozen=True)
class BoundReport:
    left: float
    right: float
    right_global: float
    surrogate_excess: float
    tau_mass: float
    holds: bool
    nu: float


def bound_check(world: SyntheticWorld, model, params: CostParams | None = None, nu: float = 1.0) -> BoundReport:
    """Evaluate both sides of the surrogate-to-true excess risk bound exactly.

    The main model is treated as the best possible one, so its c0-excess
    term is zero and every minimizability gap vanishes on a finite world.
    ``right`` applies the rescaled inverse transform point by point before
    averaging; ``right_global`` applies it once to the averaged excess.
    """
    params = params or world.costs
    eta = world.eta(params)
    tau_bar = 1.0 - eta
    if not params.is_strict or np.any(tau_bar < -1e-15):
        raise NonNegativeTauViolated("bound check needs alpha + beta <= 1 for every expert")
    tau_bar = np.clip(tau_bar, 0.0, None)
    n = world.num_agents
    scores = model.score_batch(world.features)
    decisions = decide_batch(scores, PER_HEAD)

    chosen = np.take_along_axis(eta, decisions[:, :, None], axis=-1)[..., 0]
    true_excess = (chosen - eta.min(axis=-1)).sum(axis=1)

    sur = np.einsum("pij,pij->pi", tau_bar, comp_sum_all(scores, nu))
    inf = np.array(
        [[surrogate_conditional_infimum(tau_bar[p, i], nu) for i in (0, 1)] for p in range(world.num_points)]
    )
    sur_excess = np.clip(sur - inf, 0.0, None).sum(axis=1)
    scale = tau_bar.sum(axis=(1, 2))

    right_pts = np.array(
        [s * gamma_upper(u / s, nu, n) if s > 0 else 0.0 for u, s in zip(sur_excess, scale)]
    )
    left = float(world.mass @ true_excess)
    right = float(world.mass @ right_pts)
    mean_scale = float(world.mass @ scale)
    mean_sur = float(world.mass @ sur_excess)
    right_global = mean_scale * gamma_upper(mean_sur / mean_scale, nu, n) if mean_scale > 0 else 0.0
    return BoundReport(left, right, right_global, mean_sur, mean_scale, left <= right + 1e-9, nu)


# -- serialization ---------------------------------------------------------


def world_to_dict(world: SyntheticWorld) -> dict:
    c = world.costs
    return {
        "features": world.features.tolist(),
        "mass": world.mass.tolist(),
        "error": world.error.tolist(),
        "gold": world.gold.tolist(),
        "costs": {"alpha": list(c.alpha), "beta": list(c.beta), "gflops": list(c.gflops),
                  "rejector_gflops": c.rejector_gflops},
        "seed": world.seed,
        "beta_per_head": world.beta_per_head,
        "cluster": None if world.cluster is None else world.cluster.tolist(),
    }


def world_from_dict(d: dict) -> SyntheticWorld:
    c = d["costs"]
    return SyntheticWorld(
        np.array(d["features"], dtype=float),
        np.array(d["mass"], dtype=float),
        np.array(d["error"], dtype=float),
        np.array(d["gold"], dtype=np.int64),
        CostParams(c["alpha"], c["beta"], c.get("gflops", ()), c.get("rejector_gflops", 0.0)),
        d.get("seed", 0),
        d.get("beta_per_head", True),
        None if d.get("cluster") is None else np.array(d["cluster"], dtype=np.int64),
    )


def save_world(world: SyntheticWorld, path) -> None:
    with open(path, "w") as fh:
        json.dump(world_to_dict(world), fh)


def load_world(path) -> SyntheticWorld:
    with open(path) as fh:
        return world_from_dict(json.load(fh))
