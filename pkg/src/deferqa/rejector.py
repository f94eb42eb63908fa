"""Dual-head rejector: scoring, allocation rules, and a binary model format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .core import AgentPredictionRecord, SpanPair, composite_span
from .errors import (
    BadDimension,
    ChecksumMismatch,
    DimensionMismatch,
    FormatVersionMismatch,
    IoError,
)

LINEAR, MLP = "linear", "mlp"
PER_HEAD, JOINT = "per-head", "joint"
FORMAT_VERSION = 1
_MAGIC = b"DEFERQA-REJECTOR\n"


@dataclass
class RejectorModel:
    """Start and end heads, each mapping a d-vector to J+1 preference scores.

    Treat instances as immutable; training works on a copy.  With
    ``pin_zero`` the main model's score is held at 0 on both heads.
    """

    architecture: str
    input_dim: int
    num_agents: int
    weights: dict[str, np.ndarray]
    seed: int = 0
    hidden: int = 0
    pin_zero: bool = False

    def __post_init__(self):
        for name, w in self.weights.items():
            if not np.all(np.isfinite(w)):
                raise ValueError(f"non-finite weights in {name}")

    # arrays are ordered so the file format and flat views agree
    @property
    def param_names(self) -> tuple[str, ...]:
        return ("W", "b") if self.architecture == LINEAR else ("W1", "b1", "W2", "b2")

    def copy(self) -> "RejectorModel":
        return RejectorModel(
            self.architecture,
            self.input_dim,
            self.num_agents,
            {k: v.copy() for k, v in self.weights.items()},
            self.seed,
            self.hidden,
            self.pin_zero,
        )

    def score_batch(self, features) -> np.ndarray:
        """Scores shaped ``(N, 2, J+1)`` for an ``(N, d)`` feature matrix."""
        x = np.asarray(features, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected (N, {self.input_dim}) features, got {x.shape}")
        w = self.weights
        if self.architecture == LINEAR:
            out = np.einsum("ikd,nd->nik", w["W"], x) + w["b"]
        else:
            hid = np.maximum(0.0, np.einsum("ihd,nd->nih", w["W1"], x) + w["b1"])
            out = np.einsum("ikh,nih->nik", w["W2"], hid) + w["b2"]
        if self.pin_zero:
            out[..., 0] = 0.0
        return out

    def score(self, features):
        x = np.asarray(features, dtype=float)
        if x.shape != (self.input_dim,):
            raise DimensionMismatch(f"expected {self.input_dim} features, got {x.shape}")
        out = self.score_batch(x[None, :])[0]
        return out[0], out[1]

    def backward(self, features, grad_scores) -> dict[str, np.ndarray]:
        """Gradient of ``sum(grad_scores * scores)`` with respect to each weight array."""
        x = np.asarray(features, dtype=float)
        g = np.array(grad_scores, dtype=float)
        if self.pin_zero:
            g[..., 0] = 0.0
        w = self.weights
        if self.architecture == LINEAR:
            return {"W": np.einsum("nik,nd->ikd", g, x), "b": g.sum(axis=0)}
        pre = np.einsum("ihd,nd->nih", w["W1"], x) + w["b1"]
        hid = np.maximum(0.0, pre)
        g_hid = np.einsum("nik,ikh->nih", g, w["W2"]) * (pre > 0)
        return {
            "W1": np.einsum("nih,nd->ihd", g_hid, x),
            "b1": g_hid.sum(axis=0),
            "W2": np.einsum("nik,nih->ikh", g, hid),
            "b2": g.sum(axis=0),
        }

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in self.param_names])

    def with_flat(self, vec) -> "RejectorModel":
        m = self.copy()
        pos = 0
        for k in self.param_names:
            size = m.weights[k].size
            m.weights[k] = np.asarray(vec[pos : pos + size], dtype=float).reshape(m.weights[k].shape)
            pos += size
        return m


def init_model(
    architecture: str, d: int, num_agents: int, seed: int, hidden: int = 64, pin_zero: bool = False
) -> RejectorModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if d < 1 or num_agents < 2:
        raise BadDimension(f"need d >= 1 and at least 2 agents, got d={d}, agents={num_agents}")
    if architecture not in (LINEAR, MLP):
        raise ValueError(f"unknown architecture {architecture!r}")
    rng = np.random.default_rng(seed)
    n = num_agents
    if architecture == LINEAR:
        lim = 1.0 / np.sqrt(d)
        weights = {"W": rng.uniform(-lim, lim, (2, n, d)), "b": np.zeros((2, n))}
        hidden = 0
    else:
        if hidden < 1:
            raise BadDimension("hidden width must be >= 1")
        lim1, lim2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(hidden)
        weights = {
            "W1": rng.uniform(-lim1, lim1, (2, hidden, d)),
            "b1": np.zeros((2, hidden)),
            "W2": rng.uniform(-lim2, lim2, (2, n, hidden)),
            "b2": np.zeros((2, n)),
        }
    model = RejectorModel(architecture, d, n, weights, seed, hidden, pin_zero)
    if pin_zero:
        _zero_main_row(model)
    return model


def _zero_main_row(model: RejectorModel) -> None:
    last = "W" if model.architecture == LINEAR else "W2"
    bias = "b" if model.architecture == LINEAR else "b2"
    model.weights[last][:, 0, :] = 0.0
    model.weights[bias][:, 0] = 0.0


class ConstantRejector:
    """Routes every query to one fixed agent (used for endpoint checks)."""

    def __init__(self, agent: int, num_agents: int, input_dim: int | None = None):
        if not 0 <= agent < num_agents:
            raise ValueError(f"agent {agent} outside 0..{num_agents - 1}")
        self.agent = agent
        self.num_agents = num_agents
        self.input_dim = input_dim

    def score_batch(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if self.input_dim is not None and x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected {self.input_dim} features, got {x.shape[1]}")
        out = np.zeros((len(x), 2, self.num_agents))
        out[:, :, self.agent] = 1.0
        return out

    def score(self, features):
        out = self.score_batch(np.asarray(features, dtype=float)[None, :])[0]
        return out[0], out[1]


# -- decisions -------------------------------------------------------------


def decide_per_head(rbar) -> int:
    # np.argmax returns the first maximum, i.e. the lowest agent index on ties
    return int(np.argmax(np.asarray(rbar, dtype=float)))


def decide_joint(rbar_start, rbar_end) -> int:
    rs, re = np.asarray(rbar_start, dtype=float), np.asarray(rbar_end, dtype=float)
    if rs.shape != re.shape:
        raise DimensionMismatch(f"head shapes differ: {rs.shape} vs {re.shape}")
    return int(np.argmax(rs + re))


def decide_batch(scores: np.ndarray, mode: str) -> np.ndarray:
    """Agent choices shaped ``(N, 2)`` from ``(N, 2, J+1)`` scores."""
    if mode == PER_HEAD:
        return np.argmax(scores, axis=-1)
    if mode == JOINT:
        j = np.argmax(scores.sum(axis=1), axis=-1)
        return np.stack([j, j], axis=1)
    raise ValueError(f"unknown allocation mode {mode!r}")


@dataclass(frozen=True)
class Allocation:
    agents: tuple[int, int]
    span: SpanPair

    @property
    def joint(self) -> bool:
        return self.agents[0] == self.agents[1]


def allocate(model, record: AgentPredictionRecord, mode: str = JOINT) -> Allocation:
    if record.num_agents != model.num_agents:
        raise DimensionMismatch(f"record has {record.num_agents} agents, model {model.num_agents}")
    rs, re = model.score(record.features)
    if mode == JOINT:
        j = decide_joint(rs, re)
        return Allocation((j, j), record.predictions[j])
    if mode == PER_HEAD:
        js, je = decide_per_head(rs), decide_per_head(re)
        return Allocation((js, je), composite_span(record.predictions[js], record.predictions[je]))
    raise ValueError(f"unknown allocation mode {mode!r}")


# -- persistence -----------------------------------------------------------
#
# Layout: magic line, one JSON header line, float64 little-endian payload in
# row-major order, then the 32-byte SHA-256 digest of the payload.


def save_model(model: RejectorModel, path, meta: dict | None = None) -> None:
    """Write ``model``; ``meta`` is stored in the header and ignored on load."""
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture,
        "d": model.input_dim,
        "num_agents": model.num_agents,
        "hidden": model.hidden,
        "seed": model.seed,
        "pin_zero": model.pin_zero,
        "arrays": [[k, list(model.weights[k].shape)] for k in model.param_names],
    }
    if meta:
        header["meta"] = meta
    payload = b"".join(
        np.ascontiguousarray(model.weights[k], dtype="<f8").tobytes() for k in model.param_names
    )
    blob = _MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    blob += hashlib.sha256(payload).digest()
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write model to {path}: {exc}") from exc


def load_model(path) -> RejectorModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read model from {path}: {exc}") from exc
    if not blob.startswith(_MAGIC):
        raise FormatVersionMismatch(f"{path}: not a rejector model file")
    nl = blob.find(b"\n", len(_MAGIC))
    if nl < 0:
        raise FormatVersionMismatch(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(_MAGIC) : nl])
    except ValueError as exc:
        raise FormatVersionMismatch(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"{path}: format version {header.get('format_version')}, expected {FORMAT_VERSION}"
        )
    body = blob[nl + 1 :]
    payload, digest = body[:-32], body[-32:]
    if len(body) < 32 or hashlib.sha256(payload).digest() != digest:
        raise ChecksumMismatch(f"{path}: payload checksum mismatch")
    weights, pos = {}, 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        chunk = payload[pos : pos + 8 * count]
        if len(chunk) != 8 * count:
            raise ChecksumMismatch(f"{path}: payload shorter than header declares")
        weights[name] = np.frombuffer(chunk, dtype="<f8").astype(float).reshape(shape)
        pos += 8 * count
    if pos != len(payload):
        raise ChecksumMismatch(f"{path}: trailing bytes in payload")
    return RejectorModel(
        header["architecture"],
        header["d"],
        header["num_agents"],
        weights,
        header["seed"],
        header["hidden"],
        header["pin_zero"],
    )


def models_equal(a: RejectorModel, b: RejectorModel) -> bool:
    if (a.architecture, a.input_dim, a.num_agents, a.seed, a.hidden, a.pin_zero) != (
        b.architecture,
        b.input_dim,
        b.num_agents,
        b.seed,
        b.hidden,
        b.pin_zero,
    ):
        return False
    return all(np.array_equal(a.weights[k], b.weights[k]) for k in a.param_names)
