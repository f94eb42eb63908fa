"""Comp-sum surrogate family and the true/surrogate deferral losses.

Scores passed here are always the "r-bar" convention: larger means the
agent is more preferred.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import AgentPredictionRecord, CostParams, START, END, agent_cost, record_costs
from .errors import DimensionMismatch

_NU_SNAP = 1e-9


@dataclass(frozen=True)
class SurrogateSpec:
    nu: float = 1.0
    num_classes: int = 2

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError(f"nu must be >= 0, got {self.nu}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if abs(self.nu - 1.0) < _NU_SNAP:
            object.__setattr__(self, "nu", 1.0)


def _snap(nu: float) -> float:
    return 1.0 if abs(nu - 1.0) < _NU_SNAP else float(nu)


def log_psi(scores) -> np.ndarray:
    """``log Psi(s, y)`` for every target ``y`` along the last axis.

    ``Psi(s, y) = sum_y' exp(s_y' - s_y)``, so ``log Psi = logsumexp(s) - s_y``.
    """
    s = np.asarray(scores, dtype=float)
    return logsumexp(s, axis=-1, keepdims=True) - s


def comp_sum_all(scores, nu: float) -> np.ndarray:
    """Surrogate values for every possible target, shape of ``scores``."""
    nu = _snap(nu)
    lp = log_psi(scores)
    if nu == 1.0:
        return lp
    return np.expm1((1.0 - nu) * lp) / (1.0 - nu)


def comp_sum_grad_all(scores, nu: float) -> np.ndarray:
    """``grad[..., y, k] = d Phi(s, y) / d s_k``; adds one trailing axis."""
    nu = _snap(nu)
    s = np.asarray(scores, dtype=float)
    lp = log_psi(s)
    soft = np.exp(s - logsumexp(s, axis=-1, keepdims=True))
    n = s.shape[-1]
    # d Psi^{1-nu} / (1-nu) = Psi^{1-nu} (softmax - onehot)
    scale = np.exp((1.0 - nu) * lp)[..., :, None]
    return scale * (soft[..., None, :] - np.eye(n))


def comp_sum_surrogate(scores, target: int, spec: SurrogateSpec) -> float:
    return float(comp_sum_all(scores, spec.nu)[target])


def comp_sum_gradient(scores, target: int, spec: SurrogateSpec) -> np.ndarray:
    return comp_sum_grad_all(scores, spec.nu)[target]


def true_deferral_loss(
    decision_start: int, decision_end: int, record: AgentPredictionRecord, params: CostParams
) -> float:
    total = 0.0
    for head, j in ((START, decision_start), (END, decision_end)):
        total += agent_cost(j, record.predictions[j][head], record.gold[head], params)
    return total


def deferral_loss_and_grad(rbar: np.ndarray, tau: np.ndarray, nu: float):
    """Batched surrogate deferral loss.

    ``rbar`` and ``tau`` are shaped ``(N, 2, J+1)``.  Returns the per-record
    loss ``(N,)`` and its gradient with respect to ``rbar``.
    """
    phi = comp_sum_all(rbar, nu)
    loss = np.einsum("nij,nij->n", tau, phi)
    grad = np.einsum("nij,nijk->nik", tau, comp_sum_grad_all(rbar, nu))
    return loss, grad


def _check_classes(record, spec: SurrogateSpec) -> None:
    if spec.num_classes != record.num_agents:
        raise DimensionMismatch(f"surrogate has {spec.num_classes} classes, record {record.num_agents} agents")


def surrogate_deferral_loss(rbar_start, rbar_end, record, params, spec: SurrogateSpec) -> float:
    _check_classes(record, spec)
    tau = 1.0 - record_costs(record, params)
    rbar = np.stack([np.asarray(rbar_start, float), np.asarray(rbar_end, float)])
    return float(np.sum(tau * comp_sum_all(rbar, spec.nu)))


def surrogate_deferral_gradient(rbar_start, rbar_end, record, params, spec: SurrogateSpec):
    _check_classes(record, spec)
    tau = 1.0 - record_costs(record, params)
    grads = []
    for i, rb in ((START, rbar_start), (END, rbar_end)):
        g = comp_sum_grad_all(np.asarray(rb, float), spec.nu)
        grads.append(tau[i] @ g)
    return grads[0], grads[1]
