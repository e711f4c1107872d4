"""Discrete softmax policies: exact log-probabilities, gradients, KL, checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Mapping

import numpy as np

FORMAT_VERSION = 1
PROB_FLOOR = 1e-12


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ActionSpace:
    surfaces: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if len(self.surfaces) < 2:
            raise ValueError("action space needs k >= 2")
        if len(set(self.surfaces)) != len(self.surfaces):
            raise ValueError("action surfaces must be unique")

    @property
    def k(self) -> int:
        return len(self.surfaces)

    def __len__(self) -> int:
        return len(self.surfaces)

    def index(self, surface: str) -> int:
        return self.surfaces.index(surface)


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class SoftmaxPolicy:
    """Base class; subclasses define how a state maps to a logit vector."""

    parameterization: str = ""

    def __init__(self, action_space: ActionSpace, temperature: float = 1.0):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.action_space = action_space
        self.temperature = temperature

    @property
    def k(self) -> int:
        return self.action_space.k

    def logits(self, state) -> np.ndarray:
        raise NotImplementedError

    def distribution(self, state) -> np.ndarray:
        return softmax(self.logits(state), self.temperature)

    def log_prob(self, state, action: int) -> float:
        return float(log_softmax(self.logits(state), self.temperature)[action])

    def sample(self, state, rng: np.random.Generator) -> tuple[int, float]:
        logp = log_softmax(self.logits(state), self.temperature)
        p = np.exp(logp)
        # inverse-CDF on one uniform draw keeps the rng consumption fixed per call
        u = rng.random()
        action = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
        action = min(action, self.k - 1)
        return action, float(logp[action])

    def grad_log_prob(self, state, action: int):
        raise NotImplementedError

    def parameters(self) -> dict:
        raise NotImplementedError

    def load_parameters(self, params: dict) -> None:
        raise NotImplementedError

    def digest(self) -> str:
        return parameter_digest(self.parameterization, self.action_space, self.parameters())

    def copy(self) -> "SoftmaxPolicy":
        return copy.deepcopy(self)


class TabularSoftmaxPolicy(SoftmaxPolicy):
    """One logit vector per hashable state key; unseen keys are uniform."""

    parameterization = "tabular"

    def __init__(self, action_space: ActionSpace, temperature: float = 1.0):
        super().__init__(action_space, temperature)
        self.table: dict[str, np.ndarray] = {}

    @staticmethod
    def key(state: Hashable) -> str:
        return state if isinstance(state, str) else repr(state)

    def logits(self, state) -> np.ndarray:
        row = self.table.get(self.key(state))
        return np.zeros(self.k) if row is None else row.copy()

    def grad_log_prob(self, state, action: int) -> tuple[str, np.ndarray]:
        """(state key, d log pi(action|state) / d logits of that state)."""
        g = -self.distribution(state)
        g[action] += 1.0
        return self.key(state), g / self.temperature

    def add_to_row(self, state, delta: np.ndarray) -> None:
        key = self.key(state)
        row = self.table.get(key)
        self.table[key] = (np.zeros(self.k) if row is None else row) + delta

    def apply_gradient(self, grad: Mapping[str, np.ndarray], lr: float) -> None:
        for key, g in grad.items():
            self.add_to_row(key, lr * g)

    def parameters(self) -> dict:
        return {k: [float(x) for x in v] for k, v in sorted(self.table.items())}

    def load_parameters(self, params: dict) -> None:
        self.table = {k: np.array(v, dtype=float) for k, v in params.items()}


class LinearSoftmaxPolicy(SoftmaxPolicy):
    """Logits = W @ features with W of shape (k, dim)."""

    parameterization = "linear"

    def __init__(self, action_space: ActionSpace, dim: int, temperature: float = 1.0):
        super().__init__(action_space, temperature)
        self.dim = dim
        self.weights = np.zeros((action_space.k, dim))

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"feature length {x.shape[-1]} != {self.dim}")
        return x

    def logits(self, state) -> np.ndarray:
        return self.weights @ self._check(state)

    def batch_logits(self, X: np.ndarray) -> np.ndarray:
        return self._check(X) @ self.weights.T

    def grad_log_prob(self, state, action: int) -> np.ndarray:
        x = self._check(state)
        g = -self.distribution(x)
        g[action] += 1.0
        return np.outer(g / self.temperature, x)

    def apply_gradient(self, grad: np.ndarray, lr: float) -> None:
        self.weights += lr * grad

    def parameters(self) -> dict:
        return {"dim": self.dim, "weights": [[float(x) for x in row] for row in self.weights]}

    def load_parameters(self, params: dict) -> None:
        w = np.array(params["weights"], dtype=float).reshape(self.k, int(params["dim"]))
        self.dim = int(params["dim"])
        self.weights = w


def action_distribution(policy: SoftmaxPolicy, state) -> np.ndarray:
    return policy.distribution(state)


def sample_action(policy: SoftmaxPolicy, state, rng: np.random.Generator) -> tuple[int, float]:
    return policy.sample(state, rng)


def grad_log_prob(policy: SoftmaxPolicy, state, action: int):
    return policy.grad_log_prob(state, action)


def kl(p, q) -> float:
    """KL(p || q) with 0 log 0 = 0 and q clamped from below at 1e-12."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionMismatch(f"{p.shape} vs {q.shape}")
    q = np.maximum(q, PROB_FLOOR)
    mask = p > 0
    return float(max(0.0, np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


def kl_grad_logits(logits: np.ndarray, ref_probs: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """d KL(softmax(logits) || ref) / d logits = p * (log p - log ref - KL) / T."""
    p = softmax(logits, temperature)
    d = np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(ref_probs, PROB_FLOOR))
    return p * (d - np.sum(p * d, axis=-1, keepdims=True)) / temperature


# --- digests, snapshots, checkpoints ------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def parameter_digest(parameterization: str, action_space: ActionSpace, params: dict) -> str:
    body = _canonical({"p": parameterization, "a": list(action_space.surfaces), "w": params})
    return hashlib.sha256(body.encode()).hexdigest()


class PolicySnapshot:
    """Frozen copy of a policy. Read-only arrays; the digest is fixed at creation."""

    def __init__(self, policy: SoftmaxPolicy):
        self._policy = policy.copy()
        if isinstance(self._policy, LinearSoftmaxPolicy):
            self._policy.weights.setflags(write=False)
        else:
            for v in self._policy.table.values():
                v.setflags(write=False)
        self.digest = self._policy.digest()

    @property
    def action_space(self) -> ActionSpace:
        return self._policy.action_space

    def distribution(self, state) -> np.ndarray:
        return self._policy.distribution(state)

    def log_prob(self, state, action: int) -> float:
        return self._policy.log_prob(state, action)

    def restore(self) -> SoftmaxPolicy:
        fresh = self._policy.copy()
        if isinstance(fresh, LinearSoftmaxPolicy):
            fresh.weights = np.array(fresh.weights)
        else:
            fresh.table = {k: np.array(v) for k, v in fresh.table.items()}
        return fresh


def snapshot(policy: SoftmaxPolicy) -> PolicySnapshot:
    return PolicySnapshot(policy)


def restore(snap: PolicySnapshot) -> SoftmaxPolicy:
    return snap.restore()


def policy_to_dict(policy: SoftmaxPolicy) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "action_space": list(policy.action_space.surfaces),
        "parameterization": policy.parameterization,
        "temperature": policy.temperature,
        "parameters": policy.parameters(),
        "digest": policy.digest(),
    }


class CorruptCheckpoint(ValueError):
    pass


def policy_from_dict(d: dict) -> SoftmaxPolicy:
    if d.get("format_version") != FORMAT_VERSION:
        raise CorruptCheckpoint(f"unsupported format_version {d.get('format_version')!r}")
    space = ActionSpace(tuple(d["action_space"]))
    if d["parameterization"] == "tabular":
        pol: SoftmaxPolicy = TabularSoftmaxPolicy(space, d.get("temperature", 1.0))
    elif d["parameterization"] == "linear":
        pol = LinearSoftmaxPolicy(space, int(d["parameters"]["dim"]), d.get("temperature", 1.0))
    else:
        raise CorruptCheckpoint(f"unknown parameterization {d['parameterization']!r}")
    pol.load_parameters(d["parameters"])
    if pol.digest() != d["digest"]:
        raise CorruptCheckpoint("digest mismatch")
    return pol


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_checkpoint(policy: SoftmaxPolicy, path: str | os.PathLike) -> str:
    d = policy_to_dict(policy)
    atomic_write_text(path, _canonical(d) + "\n")
    return d["digest"]


def _read_json(path: str | os.PathLike) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise CorruptCheckpoint(f"{path}: expected a JSON object")
    return d


def load_checkpoint(path: str | os.PathLike) -> SoftmaxPolicy:
    d = _read_json(path)
    try:
        return policy_from_dict(d)
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: missing or malformed field {exc}") from exc


class PolicyBundle:
    """Named softmax heads that together make one agent's policy (e.g. query + answer heads)."""

    def __init__(self, role: str, heads: Mapping[str, SoftmaxPolicy]):
        self.role = role
        self.heads: dict[str, SoftmaxPolicy] = dict(heads)

    def __getitem__(self, name: str) -> SoftmaxPolicy:
        return self.heads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.heads

    def digest(self) -> str:
        body = _canonical({"role": self.role, "heads": {k: h.digest() for k, h in sorted(self.heads.items())}})
        return hashlib.sha256(body.encode()).hexdigest()

    def copy(self) -> "PolicyBundle":
        return PolicyBundle(self.role, {k: h.copy() for k, h in self.heads.items()})

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "role": self.role,
            "heads": {k: policy_to_dict(h) for k, h in sorted(self.heads.items())},
            "digest": self.digest(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyBundle":
        if d.get("format_version") != FORMAT_VERSION:
            raise CorruptCheckpoint(f"unsupported format_version {d.get('format_version')!r}")
        bundle = cls(d["role"], {k: policy_from_dict(v) for k, v in d["heads"].items()})
        if bundle.digest() != d["digest"]:
            raise CorruptCheckpoint("bundle digest mismatch")
        return bundle

    def save(self, path: str | os.PathLike) -> str:
        d = self.to_dict()
        atomic_write_text(path, _canonical(d) + "\n")
        return d["digest"]

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PolicyBundle":
        d = _read_json(path)
        try:
            return cls.from_dict(d)
        except (KeyError, TypeError) as exc:
            raise CorruptCheckpoint(f"{path}: missing or malformed field {exc}") from exc


class BundleSnapshot:
    """Frozen per-head snapshots of a bundle (the KL anchor)."""

    def __init__(self, bundle: PolicyBundle):
        self.role = bundle.role
        self.heads = {k: PolicySnapshot(h) for k, h in bundle.heads.items()}
        self.digest = bundle.digest()

    def __getitem__(self, name: str) -> PolicySnapshot:
        return self.heads[name]

    def restore(self) -> PolicyBundle:
        return PolicyBundle(self.role, {k: s.restore() for k, s in self.heads.items()})
