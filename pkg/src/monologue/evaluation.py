"""Held-out accuracy evaluation and the turn-count ablation."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import sceneworld as sw
from .protocol import EpisodeConfig, EpisodeTranscript, run_episode

# Training problems use seeds below this offset; held-out sets are generated above it.
HELD_OUT_SEED_OFFSET = 1_000_003


@dataclass
class EvalReport:
    accuracy: float
    n: int
    correct: int
    per_template: dict[str, float]
    turns: int
    epsilon: float
    seed: int
    transcripts: list[EpisodeTranscript] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("an evaluation needs n > 0 episodes")
        if self.accuracy != self.correct / self.n:
            raise ValueError("accuracy must equal correct / n")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("transcripts")
        return d


def held_out_instances(n: int, seed: int) -> list[tuple[sw.Scene, sw.Problem]]:
    return sw.generate_instances(n, HELD_OUT_SEED_OFFSET + seed)


def evaluate(
    reasoner,
    observer,
    instances: Sequence[tuple[sw.Scene, sw.Problem]],
    turns: int,
    epsilon: float,
    seed: int,
    keep_transcripts: bool = False,
) -> EvalReport:
    """Run one episode per instance; episode seeds derive from (seed, index)."""
    transcripts = []
    hits: dict[str, list[int]] = {}
    for i, (scene, prob) in enumerate(instances):
        ep_seed = int(np.random.SeedSequence([seed, i]).generate_state(1, dtype=np.uint64)[0])
        tr = run_episode(reasoner, observer, prob, scene, EpisodeConfig(turns, ep_seed))
        hits.setdefault(prob.template_id, []).append(tr.reward.r)
        if keep_transcripts:
            transcripts.append(tr)
    correct = sum(sum(v) for v in hits.values())
    n = len(instances)
    return EvalReport(
        accuracy=correct / n,
        n=n,
        correct=correct,
        per_template={k: float(np.mean(v)) for k, v in sorted(hits.items())},
        turns=turns,
        epsilon=epsilon,
        seed=seed,
        transcripts=transcripts,
    )


@dataclass
class AblationRow:
    turns: int
    mean_accuracy: float
    std_accuracy: float
    per_seed: tuple[float, ...]


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def __post_init__(self):
        ts = [r.turns for r in self.rows]
        if ts != sorted(set(ts)):
            raise ValueError("turn values must be distinct and sorted")

    def accuracy(self, turns: int) -> float:
        for r in self.rows:
            if r.turns == turns:
                return r.mean_accuracy
        raise KeyError(turns)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["turns", "mean_accuracy", "std_accuracy", *[f"seed{i}" for i in range(len(self.rows[0].per_seed))]])
        for r in self.rows:
            w.writerow([r.turns, f"{r.mean_accuracy:.6f}", f"{r.std_accuracy:.6f}", *[f"{a:.6f}" for a in r.per_seed]])
        return buf.getvalue()

    def render(self) -> str:
        lines = ["turns  accuracy  std"]
        lines += [f"{r.turns:>5}  {r.mean_accuracy:8.4f}  {r.std_accuracy:.4f}" for r in self.rows]
        return "\n".join(lines)


def ablate_turns(
    reasoner,
    observer,
    turn_values: Sequence[int],
    seeds: Sequence[int],
    n: int,
    epsilon: float,
) -> AblationTable:
    """One evaluation per (turns, seed); every turn setting sees the same problems per seed."""
    per = {t: [] for t in turn_values}
    for seed in seeds:
        instances = held_out_instances(n, seed)
        for t in turn_values:
            per[t].append(evaluate(reasoner, observer, instances, t, epsilon, seed).accuracy)
    rows = [AblationRow(t, float(np.mean(v)), float(np.std(v)), tuple(v)) for t, v in sorted(per.items())]
    return AblationTable(rows)
