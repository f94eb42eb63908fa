"""JSON Lines agent logs and run configuration files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import STRICT, AgentPredictionRecord, CostParams, SpanPair
from .errors import ConfigError, DuplicateQueryId, InconsistentDims, IoError, ParseError

_FIELDS = ("query_id", "features", "gold", "predictions")
_OUTPUT_KEYS = ("output_dir", "model_out")


def _span(value, what: str) -> SpanPair:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValueError(f"{what} must be a [start, end] pair")
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ValueError(f"{what} indices must be integers")
    return SpanPair(value[0], value[1])


def record_from_json(obj: dict) -> AgentPredictionRecord:
    missing = [k for k in _FIELDS if k not in obj]
    if missing:
        raise ValueError(f"missing field(s) {missing}")
    qid = obj["query_id"]
    if not isinstance(qid, str):
        raise ValueError("query_id must be a string")
    feats = obj["features"]
    if not isinstance(feats, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in feats
    ):
        raise ValueError("features must be a list of numbers")
    if not all(math.isfinite(v) for v in feats):
        raise ValueError("features must be finite")
    preds = obj["predictions"]
    if not isinstance(preds, list):
        raise ValueError("predictions must be a list of [start, end] pairs")
    return AgentPredictionRecord(
        qid,
        tuple(float(v) for v in feats),
        _span(obj["gold"], "gold"),
        tuple(_span(p, f"predictions[{j}]") for j, p in enumerate(preds)),
    )


def record_to_json(record: AgentPredictionRecord) -> dict:
    return {
        "query_id": record.query_id,
        "features": list(record.features),
        "gold": list(record.gold),
        "predictions": [list(p) for p in record.predictions],
    }


def load_agent_log(path, num_agents: int | None = None) -> list[AgentPredictionRecord]:
    """Parse one record per line, in file order.

    Every record must have the same number of agents (``num_agents`` when
    given) and the same feature dimension.  Blank lines are skipped.
    """
    records: list[AgentPredictionRecord] = []
    seen: set[str] = set()
    dim = None
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read log {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("each line must be a JSON object")
                preds = obj.get("predictions")
                if num_agents is not None and isinstance(preds, list) and len(preds) != num_agents:
                    raise InconsistentDims(lineno, f"{len(preds)} prediction pairs, expected {num_agents}")
                rec = record_from_json(obj)
            except ParseError:
                raise
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from exc
            if num_agents is None:
                num_agents = rec.num_agents
            elif rec.num_agents != num_agents:
                raise InconsistentDims(lineno, f"{rec.num_agents} prediction pairs, expected {num_agents}")
            if dim is None:
                dim = rec.dim
            elif rec.dim != dim:
                raise InconsistentDims(lineno, f"{rec.dim} features, expected {dim}")
            if rec.query_id in seen:
                raise DuplicateQueryId(lineno, f"duplicate query_id {rec.query_id!r}")
            seen.add(rec.query_id)
            records.append(rec)
    return records


def dump_agent_log(records: Iterable[AgentPredictionRecord], path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(record_to_json(r)) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write log {path}: {exc}") from exc


# -- run configuration -------------------------------------------------------


@dataclass(frozen=True)
class AgentDecl:
    name: str
    gflops: float = 0.0
    alpha: float = 1.0
    beta: float = 0.0


def _default_agents() -> tuple[AgentDecl, ...]:
    from .presets import ACCEPTANCE_COSTS, AGENT_NAMES

    c = ACCEPTANCE_COSTS
    agents = [AgentDecl(AGENT_NAMES[0], c.gflops[0], 0.0, 0.0)]
    for j in range(c.num_experts):
        agents.append(AgentDecl(AGENT_NAMES[j + 1], c.gflops[j + 1], c.alpha[j], c.beta[j]))
    return tuple(agents)


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs; every field has a default.

    Agent 0 is the main model; its ``alpha``/``beta`` are ignored.
    """

    log: str | None = None
    eval_log: str | None = None
    model_in: str | None = None
    model_out: str | None = None
    world: str | None = None
    output_dir: str = "."
    agents: tuple[AgentDecl, ...] = field(default_factory=_default_agents)
    rejector_gflops: float = 0.15
    architecture: str = "linear"
    hidden: int = 64
    pin_zero: bool = False
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    schedule: str = "linear-decay"
    momentum: float = 0.9
    nu: float = 1.0
    mode: str = "joint"
    cost_mode: str = STRICT
    beta_per_head: bool = True
    cost_ratio_divisor: float = 20.0
    grid: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5)
    num_records: int = 20000
    workers: int = 1
    seed: int = 0

    @property
    def cost_params(self) -> CostParams:
        if len(self.agents) < 2:
            raise ConfigError("declare the main model and at least one expert")
        experts = self.agents[1:]
        return CostParams(
            tuple(a.alpha for a in experts),
            tuple(a.beta for a in experts),
            tuple(a.gflops for a in self.agents),
            self.rejector_gflops,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Short content hash of the resolved configuration.

        Output destinations are left out: they do not affect any result.
        """
        content = {k: v for k, v in self.to_dict().items() if k not in _OUTPUT_KEYS}
        blob = json.dumps(content, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self) -> str:
        return f"config_hash={self.digest()} seed={self.seed}"


def config_from_dict(d: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    d = dict(d)
    if "agents" in d:
        try:
            d["agents"] = tuple(AgentDecl(**a) for a in d["agents"])
        except TypeError as exc:
            raise ConfigError(f"bad agent declaration: {exc}") from exc
    if "grid" in d:
        d["grid"] = tuple(float(b) for b in d["grid"])
    return RunConfig(**d)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)


def write_json(obj, path, provenance: str | None = None) -> None:
    if provenance is not None:
        obj = {"provenance": provenance, **obj}
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _jsonable(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def records_equal(a: Sequence[AgentPredictionRecord], b: Sequence[AgentPredictionRecord]) -> bool:
    return list(a) == list(b)
