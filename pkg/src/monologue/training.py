"""Two-stage optimization: behavior cloning on gold dialogues, then alternating PPO.

Stage 2 follows the alternating schedule: odd epochs update the Reasoner while the
Observer stays frozen, even epochs the reverse. The reward is exact match minus
``beta`` times the mean per-state KL between the active policy and its anchor
(the policy as it stood when that role first became active).
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import sceneworld as sw
from .agents import (
    CAPTION_HEAD,
    OracleObserver,
    PolicyObserver,
    PolicyReasoner,
    answer_head,
    featurize_observer_state,
    featurize_reasoner_state,
    final_head,
    query_head,
)
from .policy import (
    BundleSnapshot,
    LinearSoftmaxPolicy,
    PolicyBundle,
    SoftmaxPolicy,
    TabularSoftmaxPolicy,
    atomic_write_text,
    kl,
    kl_grad_logits,
    log_softmax,
    softmax,
)
from .protocol import EpisodeConfig, EpisodeContext, InnerMonologue, StepRecord, init_monologue, run_episode
from .reward import RewardBreakdown, exact_match, final_reward

logger = logging.getLogger(__name__)

__all__ = [
    "exact_match",
    "final_reward",
    "RewardBreakdown",
    "SLConfig",
    "RLConfig",
    "RolloutBatch",
    "behavior_clone",
    "collect_rollouts",
    "compute_advantages",
    "ppo_update",
    "train_alternating",
]

REASONER = "reasoner"
OBSERVER = "observer"
GAMMA = 1.0


class EmptyDataset(ValueError):
    pass


class NonFiniteRatio(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class SLConfig:
    epochs: int = 40
    learning_rate: float = 1.0
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, learning_rate and batch_size must be positive")


@dataclass(frozen=True)
class RLConfig:
    num_epochs: int = 200
    episodes_per_epoch: int = 1024
    max_turns: int = 2
    beta: float = 0.02
    clip_ratio: float = 0.2
    ppo_epochs_per_batch: int = 4
    learning_rate: float = 100.0
    baseline: str = "mean"  # "mean" or "per_state"
    epsilon: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_epochs <= 0 or self.episodes_per_epoch <= 0 or self.ppo_epochs_per_batch <= 0:
            raise ValueError("epoch and episode counts must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0 < self.clip_ratio < 1:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.baseline not in ("mean", "per_state"):
            raise ValueError("baseline must be 'mean' or 'per_state'")
        EpisodeConfig(self.max_turns)

    @property
    def gamma(self) -> float:
        return GAMMA

    def to_dict(self) -> dict:
        return {**asdict(self), "gamma": GAMMA}


# --- stage 1: behavior cloning ----------------------------------------------------


def behavior_clone(
    policy: SoftmaxPolicy,
    dataset: Sequence[tuple[object, int]],
    cfg: SLConfig,
) -> tuple[SoftmaxPolicy, list[float]]:
    """Minibatch gradient descent on the mean negative log-likelihood of the gold actions.

    Returns the (in-place) trained policy and the full-dataset loss after each epoch.
    """
    if not dataset:
        raise EmptyDataset("behavior cloning needs at least one example")
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    actions = np.array([a for _, a in dataset])
    linear = isinstance(policy, LinearSoftmaxPolicy)
    if linear:
        X = np.stack([np.asarray(s, dtype=float) for s, _ in dataset])
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if linear:
                xb = X[idx]
                p = softmax(policy.batch_logits(xb), policy.temperature)
                p[np.arange(len(idx)), actions[idx]] -= 1.0
                # d mean(log p) / dW = -(p - onehot)^T X / B
                policy.apply_gradient(-(p.T @ xb) / (len(idx) * policy.temperature), cfg.learning_rate)
            else:
                grads: dict[str, np.ndarray] = {}
                for i in idx:
                    key, g = policy.grad_log_prob(dataset[i][0], int(actions[i]))
                    grads[key] = grads.get(key, 0.0) + g / len(idx)
                policy.apply_gradient(grads, cfg.learning_rate)
        losses.append(dataset_nll(policy, dataset, X if linear else None))
        if not math.isfinite(losses[-1]):
            raise TrainingDiverged(f"non-finite SL loss {losses[-1]}")
    return policy, losses


def dataset_nll(policy: SoftmaxPolicy, dataset, X: np.ndarray | None = None) -> float:
    actions = np.array([a for _, a in dataset])
    if isinstance(policy, LinearSoftmaxPolicy):
        if X is None:
            X = np.stack([np.asarray(s, dtype=float) for s, _ in dataset])
        logp = log_softmax(policy.batch_logits(X), policy.temperature)
        return float(-logp[np.arange(len(actions)), actions].mean())
    return float(-np.mean([policy.log_prob(s, int(a)) for (s, _), a in zip(dataset, actions)]))


def _replay_states(problem: sw.Problem, scene: sw.Scene, turns: Sequence[sw.DialogueTurn], final: str):
    """Reasoner (head, features, action) triples along a fixed noiseless dialogue."""
    from .protocol import Kind, observer_says, reasoner_says

    im = InnerMonologue((observer_says(Kind.CAPTION, sw.caption(scene)),))
    out = []
    for turn in turns:
        out.append((query_head(), featurize_reasoner_state(problem, im), turn.query.index))
        im = im.extend(
            reasoner_says(Kind.QUERY, turn.query.surface, turn.query.index),
            observer_says(Kind.ANSWER, turn.answer),
        )
    out.append((final_head(problem.template_id), featurize_reasoner_state(problem, im), problem.vocab.index(final)))
    return out


def reasoner_sl_data(records: Sequence[sw.RationaleRecord], single_turn: Sequence[tuple[sw.Scene, sw.Problem]] = ()) -> dict:
    """Per-head (features, action) examples from converted two-turn dialogues plus
    minimal single-query trajectories for 1-hop problems."""
    data: dict[str, list] = {}
    for rec in records:
        if rec.gold_dialogue is None:
            raise ValueError("record has no gold dialogue; run convert_rationale first")
        for head, x, a in _replay_states(rec.problem, rec.scene, rec.gold_dialogue, rec.final_answer):
            data.setdefault(head, []).append((x, a))
    for scene, prob in single_turn:
        if prob.hops != 1:
            continue
        turns = [sw.DialogueTurn(q, sw.oracle_answer(scene, q)) for q in sw.gold_queries(scene, prob)]
        for head, x, a in _replay_states(prob, scene, turns, prob.ground_truth):
            data.setdefault(head, []).append((x, a))
    return data


def observer_sl_data(records: Sequence[sw.RationaleRecord], rng: np.random.Generator, extra_queries: int = 2) -> dict:
    """Caption targets, gold-dialogue answers, and a few random single-turn queries per scene."""
    data: dict[str, list] = {}
    for rec in records:
        scene = rec.scene
        first = scene.objects[0]
        data.setdefault(CAPTION_HEAD, []).append(
            (featurize_observer_state(scene, None), sw.CAPTION_CHOICES.index((first.color, first.shape)))
        )
        queries = [t.query for t in rec.gold_dialogue or ()]
        queries += [sw.QUERY_ACTIONS[int(i)] for i in rng.integers(len(sw.QUERY_ACTIONS), size=extra_queries)]
        for q in queries:
            truth = sw.oracle_answer(scene, q)
            data.setdefault(answer_head(q.kind), []).append((featurize_observer_state(scene, q, truth), q.vocab.index(truth)))
    return data


def clone_bundle(bundle: PolicyBundle, data: dict, cfg: SLConfig) -> dict[str, list[float]]:
    curves = {}
    for i, (head, examples) in enumerate(sorted(data.items())):
        sub = SLConfig(cfg.epochs, cfg.learning_rate, cfg.batch_size, cfg.seed + i)
        _, curves[head] = behavior_clone(bundle[head], examples, sub)
    return curves


def build_sl_corpus(n: int, seed: int) -> tuple[list[sw.RationaleRecord], list[tuple[sw.Scene, sw.Problem]]]:
    """Converted rationale records plus single-turn samples, all from one seed."""
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        scene, prob = sw.generate_instance(rng)
        records.append(sw.convert_rationale(sw.RationaleRecord(scene, prob, sw.make_rationale(scene, prob))))
    singles = [sw.generate_instance(rng) for _ in range(n)]
    return records, singles


# --- stage 2: rollouts, advantages, PPO -------------------------------------------


@dataclass
class Rollout:
    """Minimal episode record (steps + reward) for environments other than the monologue."""

    steps: tuple[StepRecord, ...]
    reward: RewardBreakdown


@dataclass
class RolloutBatch:
    episodes: list
    active_role: str

    def active_steps(self) -> list[tuple[int, StepRecord]]:
        out = []
        for i, ep in enumerate(self.episodes):
            for s in ep.steps:
                if s.role == self.active_role and s.head is not None:
                    out.append((i, s))
        return out


def _step_state(step: StepRecord):
    return step.features if step.features is not None else step.state


def mean_state_kl(policy: PolicyBundle, anchor: BundleSnapshot | None, steps: Sequence[StepRecord]) -> float:
    if anchor is None or not steps:
        return 0.0
    vals = [kl(policy[s.head].distribution(_step_state(s)), anchor[s.head].distribution(_step_state(s))) for s in steps]
    return float(np.mean(vals))


def collect_rollouts(
    reasoner: PolicyReasoner,
    observer,
    problems: Sequence[tuple[sw.Scene, sw.Problem]],
    cfg: RLConfig,
    active_role: str,
    anchor: BundleSnapshot | None = None,
    rng: np.random.Generator | None = None,
) -> RolloutBatch:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    active_policy = reasoner.policy if active_role == REASONER else observer.policy
    episodes = []
    picks = rng.integers(len(problems), size=cfg.episodes_per_epoch)
    seeds = rng.integers(0, 2**63, size=cfg.episodes_per_epoch, dtype=np.uint64)
    for pick, seed in zip(picks, seeds):
        scene, prob = problems[int(pick)]
        tr = run_episode(reasoner, observer, prob, scene, EpisodeConfig(cfg.max_turns, int(seed)))
        steps = [s for s in tr.steps if s.role == active_role and s.head is not None]
        k = mean_state_kl(active_policy, anchor, steps)
        episodes.append(tr.with_reward(RewardBreakdown.compute(tr.final_answer.text, tr.ground_truth, k, cfg.beta)))
    return RolloutBatch(episodes, active_role)


class ValueTable:
    """Running mean return per (head, state) key."""

    def __init__(self):
        self.sums: dict[tuple, float] = {}
        self.counts: dict[tuple, int] = {}

    @staticmethod
    def key(step: StepRecord) -> tuple:
        st = _step_state(step)
        return (step.head, st.tobytes() if isinstance(st, np.ndarray) else st)

    def value(self, step: StepRecord, default: float) -> float:
        k = self.key(step)
        return self.sums[k] / self.counts[k] if k in self.counts else default

    def update(self, step: StepRecord, ret: float) -> None:
        k = self.key(step)
        self.sums[k] = self.sums.get(k, 0.0) + ret
        self.counts[k] = self.counts.get(k, 0) + 1


def compute_advantages(batch: RolloutBatch, baseline: str = "mean", table: ValueTable | None = None) -> np.ndarray:
    """Per-step advantages for the active role, aligned with ``batch.active_steps()``.

    With gamma = 1 and one terminal reward, each step's return is its episode's R.
    """
    steps = batch.active_steps()
    returns = np.array([batch.episodes[i].reward.R for i, _ in steps], dtype=float)
    if not len(returns):
        return returns
    if baseline == "mean":
        return returns - returns.mean()
    if baseline != "per_state":
        raise ValueError(f"unknown baseline {baseline!r}")
    table = table if table is not None else ValueTable()
    fallback = float(returns.mean())
    adv = np.array([ret - table.value(s, fallback) for (_, s), ret in zip(steps, returns)])
    for (_, s), ret in zip(steps, returns):
        table.update(s, ret)
    return adv


def clipped_objective(ratio, advantage, clip: float):
    """Per-step PPO surrogate min(rho * A, clip(rho, 1-c, 1+c) * A)."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantage)


@dataclass
class PPOStats:
    mean_surrogate: float
    mean_kl: float
    clip_fraction: float
    n_steps: int
    per_step_objective: np.ndarray = field(repr=False, default=None)
    ratios: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"mean_surrogate": self.mean_surrogate, "mean_kl": self.mean_kl, "clip_fraction": self.clip_fraction}


def ppo_update(
    active_policy: PolicyBundle,
    batch: RolloutBatch,
    anchor: BundleSnapshot | None,
    cfg: RLConfig,
    advantages: np.ndarray | None = None,
) -> PPOStats:
    """Clipped-surrogate ascent on the active role's heads, in place.

    The reward's KL term depends on the parameters directly as well as through
    sampling, so besides the surrogate the update also follows
    ``-beta * grad(mean state KL to the anchor)``.
    """
    steps = batch.active_steps()
    if advantages is None:
        advantages = compute_advantages(batch, cfg.baseline)
    if len(advantages) != len(steps):
        raise ValueError("advantages do not align with the active steps")
    if not steps:
        return PPOStats(0.0, 0.0, 0.0, 0)
    for _, s in steps:
        if s.log_prob is None or not math.isfinite(s.log_prob):
            raise NonFiniteRatio(f"stored log_prob {s.log_prob!r} for head {s.head} at turn {s.turn}")

    groups: dict[str, list[int]] = {}
    for j, (_, s) in enumerate(steps):
        groups.setdefault(s.head, []).append(j)
    n = len(steps)
    prepared = {}
    for head, idx in groups.items():
        pol = active_policy[head]
        states = [_step_state(steps[j][1]) for j in idx]
        acts = np.array([steps[j][1].action_id for j in idx])
        old = np.array([steps[j][1].log_prob for j in idx])
        X = np.stack(states) if isinstance(pol, LinearSoftmaxPolicy) else None
        ref = None
        if anchor is not None and cfg.beta > 0:
            ref = np.stack([anchor[head].distribution(st) for st in states])
        prepared[head] = (pol, states, X, acts, old, advantages[idx], ref, idx)

    objective = np.zeros(n)
    ratios = np.ones(n)
    for _ in range(cfg.ppo_epochs_per_batch):
        for head, (pol, states, X, acts, old, adv, ref, idx) in prepared.items():
            logits = pol.batch_logits(X) if X is not None else np.stack([pol.logits(st) for st in states])
            logp = log_softmax(logits, pol.temperature)
            rows = np.arange(len(acts))
            ratio = np.exp(logp[rows, acts] - old)
            if not np.all(np.isfinite(ratio)):
                raise NonFiniteRatio(f"ratio overflow on head {head}")
            obj = clipped_objective(ratio, adv, cfg.clip_ratio)
            objective[idx] = obj
            ratios[idx] = ratio
            # gradient flows only where the unclipped branch is the minimum
            live = (ratio * adv) <= (np.clip(ratio, 1 - cfg.clip_ratio, 1 + cfg.clip_ratio) * adv)
            coef = np.where(live, ratio * adv, 0.0) / n
            g = -np.exp(logp) * coef[:, None]
            g[rows, acts] += coef
            g /= pol.temperature
            if ref is not None:
                g -= cfg.beta / n * kl_grad_logits(logits, ref, pol.temperature)
            if X is not None:
                pol.apply_gradient(g.T @ X, cfg.learning_rate)
            else:
                grads: dict[str, np.ndarray] = {}
                for st, gi in zip(states, g):
                    key = pol.key(st)
                    grads[key] = grads.get(key, 0.0) + gi
                pol.apply_gradient(grads, cfg.learning_rate)

    clipped = np.abs(ratios - 1.0) > cfg.clip_ratio
    return PPOStats(
        mean_surrogate=float(objective.mean()),
        mean_kl=mean_state_kl(active_policy, anchor, [s for _, s in steps]),
        clip_fraction=float(clipped.mean()),
        n_steps=n,
        per_step_objective=objective,
        ratios=ratios,
    )


# --- alternating schedule ------------------------------------------------------------


def active_role_for(epoch: int) -> str:
    """Epochs count from 1: odd -> Reasoner, even -> Observer."""
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    return OBSERVER if epoch % 2 == 0 else REASONER


@dataclass
class EpochMetrics:
    epoch: int
    active_role: str
    mean_R: float
    mean_r: float
    mean_kl: float
    clip_fraction: float
    eval_accuracy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class RunDirectory:
    """config.json, metrics.jsonl and per-epoch checkpoints of both roles."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    def write_config(self, cfg: dict) -> None:
        atomic_write_text(self.path / "config.json", json.dumps(cfg, sort_keys=True, indent=2) + "\n")

    def checkpoint(self, role: str, epoch: int) -> Path:
        return self.path / f"{role}_epoch{epoch}.json"

    def anchor(self, role: str) -> Path:
        return self.path / f"{role}_anchor.json"

    def metrics_path(self) -> Path:
        return self.path / "metrics.jsonl"

    def read_metrics(self) -> list[dict]:
        p = self.metrics_path()
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]

    def write_metrics(self, rows: Sequence[dict]) -> None:
        atomic_write_text(self.metrics_path(), "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))

    def last_complete_epoch(self) -> int:
        done = 0
        for row in self.read_metrics():
            e = row["epoch"]
            if self.checkpoint(REASONER, e).exists() and self.checkpoint(OBSERVER, e).exists():
                done = max(done, e)
        return done


def train_alternating(
    reasoner_policy: PolicyBundle,
    observer_policy: PolicyBundle,
    problems: Sequence[tuple[sw.Scene, sw.Problem]],
    cfg: RLConfig,
    eval_fn: Callable[[PolicyBundle, PolicyBundle], float] | None = None,
    run_dir: RunDirectory | None = None,
    resume: bool = False,
) -> tuple[PolicyBundle, PolicyBundle, list[EpochMetrics]]:
    """Alternating PPO. Each epoch draws ``episodes_per_epoch`` problems, rolls out,
    and applies one PPO update to the active role only."""
    anchors: dict[str, BundleSnapshot] = {}
    metrics: list[EpochMetrics] = []
    start = 1
    if run_dir is not None:
        run_dir.write_config({"rl": cfg.to_dict()})
        if resume and run_dir.last_complete_epoch() > 0:
            done = run_dir.last_complete_epoch()
            reasoner_policy = PolicyBundle.load(run_dir.checkpoint(REASONER, done))
            observer_policy = PolicyBundle.load(run_dir.checkpoint(OBSERVER, done))
            for role in (REASONER, OBSERVER):
                if run_dir.anchor(role).exists():
                    anchors[role] = BundleSnapshot(PolicyBundle.load(run_dir.anchor(role)))
            metrics = [EpochMetrics(**r) for r in run_dir.read_metrics() if r["epoch"] <= done]
            start = done + 1
            logger.info("resuming after epoch %d", done)

    value_tables = {REASONER: ValueTable(), OBSERVER: ValueTable()}
    for epoch in range(start, cfg.num_epochs + 1):
        role = active_role_for(epoch)
        active = reasoner_policy if role == REASONER else observer_policy
        frozen = observer_policy if role == REASONER else reasoner_policy
        if role not in anchors:
            anchors[role] = BundleSnapshot(active)
            if run_dir is not None:
                active.save(run_dir.anchor(role))
        frozen_digest = frozen.digest()

        rng = np.random.default_rng([cfg.seed, epoch])
        reasoner = PolicyReasoner(reasoner_policy)
        observer = PolicyObserver(observer_policy, cfg.epsilon)
        batch = collect_rollouts(reasoner, observer, problems, cfg, role, anchors[role], rng)
        adv = compute_advantages(batch, cfg.baseline, value_tables[role])
        stats = ppo_update(active, batch, anchors[role], cfg, adv)
        if frozen.digest() != frozen_digest:
            raise RuntimeError(f"frozen {frozen.role} changed during epoch {epoch}")
        if not all(np.all(np.isfinite(h.weights)) for h in active.heads.values() if isinstance(h, LinearSoftmaxPolicy)):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")

        row = EpochMetrics(
            epoch=epoch,
            active_role=role,
            mean_R=float(np.mean([e.reward.R for e in batch.episodes])),
            mean_r=float(np.mean([e.reward.r for e in batch.episodes])),
            mean_kl=stats.mean_kl,
            clip_fraction=stats.clip_fraction,
            eval_accuracy=eval_fn(reasoner_policy, observer_policy) if eval_fn is not None else None,
        )
        metrics.append(row)
        logger.info("epoch %d %s R=%.3f r=%.3f kl=%.4f", epoch, role, row.mean_R, row.mean_r, row.mean_kl)
        if run_dir is not None:
            reasoner_policy.save(run_dir.checkpoint(REASONER, epoch))
            observer_policy.save(run_dir.checkpoint(OBSERVER, epoch))
            run_dir.write_metrics([m.to_dict() for m in metrics])
    return reasoner_policy, observer_policy, metrics


# --- bandit harness --------------------------------------------------------------


def bandit_policy(init_logits: Sequence[float]) -> PolicyBundle:
    from .policy import ActionSpace

    head = TabularSoftmaxPolicy(ActionSpace(tuple(f"arm{i}" for i in range(len(init_logits)))))
    head.table["bandit"] = np.array(init_logits, dtype=float)
    return PolicyBundle("bandit", {"arm": head})


def train_bandit(
    success_probs: Sequence[float],
    beta: float = 0.0,
    updates: int = 2000,
    seed: int = 0,
    batch_size: int = 16,
    learning_rate: float = 0.5,
    init_logits: Sequence[float] | None = None,
    ppo_epochs: int = 4,
    clip_ratio: float = 0.2,
    stop_at: float | None = None,
) -> tuple[PolicyBundle, BundleSnapshot, list[dict]]:
    """Single-state bandit trained with the same ppo_update used for the monologue.

    Arm ``i`` pays r = 1 with probability ``success_probs[i]``. ``stop_at`` ends
    training once p(best arm) exceeds it.
    """
    k = len(success_probs)
    bundle = bandit_policy(init_logits if init_logits is not None else [0.0] * k)
    anchor = BundleSnapshot(bundle)
    cfg = RLConfig(
        num_epochs=1,
        episodes_per_epoch=batch_size,
        beta=beta,
        clip_ratio=clip_ratio,
        ppo_epochs_per_batch=ppo_epochs,
        learning_rate=learning_rate,
        seed=seed,
    )
    rng = np.random.default_rng(seed)
    best = int(np.argmax(success_probs))
    head = bundle["arm"]
    history = []
    for u in range(1, updates + 1):
        episodes = []
        kl_now = kl(head.distribution("bandit"), anchor["arm"].distribution("bandit"))
        for _ in range(batch_size):
            a, lp = head.sample("bandit", rng)
            r = int(rng.random() < success_probs[a])
            step = StepRecord("bandit", 1, "arm", None, a, lp, state="bandit")
            episodes.append(Rollout((step,), RewardBreakdown(r, kl_now, final_reward(r, kl_now, beta))))
        stats = ppo_update(bundle, RolloutBatch(episodes, "bandit"), anchor, cfg)
        p_best = float(head.distribution("bandit")[best])
        history.append({"update": u, "p_best": p_best, "kl": stats.mean_kl})
        if stop_at is not None and p_best > stop_at:
            break
    return bundle, anchor, history
