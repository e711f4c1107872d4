"""Episode reward: exact match on the final answer, minus a weighted KL penalty."""

from __future__ import annotations

from dataclasses import dataclass


def normalize(token: str) -> str:
    return token.strip().lower()


def exact_match(a_f: str, g: str) -> int:
    return int(normalize(a_f) == normalize(g))


def final_reward(r: float, kl_term: float, beta: float) -> float:
    # penalty: larger divergence from the anchor lowers the reward
    return r - beta * kl_term


@dataclass(frozen=True)
class RewardBreakdown:
    r: int
    kl_term: float
    R: float

    def __post_init__(self):
        if self.r not in (0, 1):
            raise ValueError("r must be 0 or 1")
        if self.kl_term < 0:
            raise ValueError("kl_term must be non-negative")

    @classmethod
    def compute(cls, a_f: str, g: str, kl_term: float = 0.0, beta: float = 0.0) -> "RewardBreakdown":
        r = exact_match(a_f, g)
        return cls(r, kl_term, final_reward(r, kl_term, beta))

    def to_dict(self) -> dict:
        return {"r": self.r, "kl": self.kl_term, "R": self.R}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardBreakdown":
        return cls(int(d["r"]), float(d["kl"]), float(d["R"]))
