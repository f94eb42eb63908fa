"""Learning which agent should answer an extractive QA query.

A small rejector scores the main model and each expert per answer head;
training minimizes a cost-weighted comp-sum surrogate, and exact oracles
on synthetic worlds check the learned allocation against the Bayes rule.
"""

from .core import (
    NO_ANSWER,
    AgentPredictionRecord,
    CostParams,
    SpanPair,
    agent_cost,
    normalize_cost_vector,
    tau_weights,
    validate_cost_params,
)
from .losses import (
    SurrogateSpec,
    comp_sum_gradient,
    comp_sum_surrogate,
    surrogate_deferral_gradient,
    surrogate_deferral_loss,
    true_deferral_loss,
)
from .rejector import RejectorModel, allocate, decide_joint, decide_per_head, init_model, load_model, save_model
from .training import TrainConfig, grad_check, schedule_lr, train

__version__ = "0.1.0"
