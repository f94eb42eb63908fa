"""Reference numbers and the standard synthetic world used across the suite."""

from .core import CostParams
from .oracle import ClusterSpec

# GFLOPs per query at sequence length 384
GFLOPS = {
    "llama-3.2-1b": 373.66,
    "albert-base": 32.68,
    "albert-xxl": 928.08,
    "llama-3-8b": 2680.06,
    "rejector": 0.15,
    "ensemble": 1334.42,
}

# SQuADv2 exact match (%)
SQUAD_V2_EM = {
    "albert-base": 77.10,
    "albert-xxl": 84.07,
    "llama-3.2-1b": 35.00,
    "llama-3-8b": 59.47,
    "ensemble": 81.06,
}

# main model Llama-3.2-1B, experts ALBERT-Base (M1) and ALBERT-XXL (M2)
AGENT_NAMES = ("llama-3.2-1b", "albert-base", "albert-xxl")
AGENT_GFLOPS = tuple(GFLOPS[a] for a in AGENT_NAMES)

COST_RATIO = GFLOPS["albert-xxl"] / (20 * GFLOPS["albert-base"])

# Two clusters, expert 1 good on cluster 0 and expert 2 on cluster 1.
ACCEPTANCE_SPEC = ClusterSpec(
    num_clusters=2,
    competent=((0,), (1,)),
    in_error=0.05,
    out_error=0.6,
    main_error=0.3,
    dim=2,
    points_per_cluster=200,
    spread=0.6,
)
ACCEPTANCE_SEED = 7
ACCEPTANCE_BETA1 = 0.05
ACCEPTANCE_COSTS = CostParams(
    alpha=(0.9, 0.9),
    beta=(ACCEPTANCE_BETA1, round(COST_RATIO * ACCEPTANCE_BETA1, 6)),
    gflops=AGENT_GFLOPS,
    rejector_gflops=GFLOPS["rejector"],
)


def acceptance_world(costs: CostParams = ACCEPTANCE_COSTS, seed: int = ACCEPTANCE_SEED):
    from .oracle import generate_world

    return generate_world(ACCEPTANCE_SPEC, costs, seed=seed)
