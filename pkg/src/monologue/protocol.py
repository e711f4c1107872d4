"""The Reasoner/Observer inner-monologue loop.

An episode starts with the Observer's caption, runs ``max_turns`` query/answer
exchanges, then asks the Reasoner for its final answer. The Observer only ever
sees the scene and the current query; the Reasoner sees the problem and the
whole monologue so far.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Protocol

import numpy as np

from .policy import atomic_write_text
from .reward import RewardBreakdown, normalize
from .sceneworld import Problem, Scene

HARD_TURN_CAP = 8


class Speaker(str, enum.Enum):
    OBSERVER = "Observer"
    REASONER = "Reasoner"


class Kind(str, enum.Enum):
    CAPTION = "Caption"
    QUERY = "Query"
    ANSWER = "Answer"
    FINAL_ANSWER = "FinalAnswer"


_SPEAKER_OF = {
    Kind.CAPTION: Speaker.OBSERVER,
    Kind.ANSWER: Speaker.OBSERVER,
    Kind.QUERY: Speaker.REASONER,
    Kind.FINAL_ANSWER: Speaker.REASONER,
}


class EmptyUtterance(ValueError):
    pass


class AnswerOutOfVocabulary(ValueError):
    pass


class MonologueError(ValueError):
    pass


class AgentError(RuntimeError):
    """An agent call failed mid-episode; ``turn`` is 0 for the caption, t+1 for the final answer."""

    def __init__(self, role: str, turn: int, cause: BaseException):
        super().__init__(f"{role} failed at turn {turn}: {cause!r}")
        self.role = role
        self.turn = turn
        self.cause = cause


@dataclass
class StepRecord:
    """One agent decision: which head acted, on what state, and how likely it was."""

    role: str
    turn: int
    head: str | None = None
    features: np.ndarray | None = None
    action_id: int | None = None
    log_prob: float | None = None
    state: str | None = None  # key for tabular heads; feature-vector heads leave it None

    def to_dict(self) -> dict:
        feats = None
        if self.features is not None:
            idx = np.flatnonzero(self.features)
            feats = {"dim": int(self.features.shape[0]), "index": idx.tolist(), "value": self.features[idx].tolist()}
        return {
            "role": self.role,
            "turn": self.turn,
            "head": self.head,
            "features": feats,
            "action_id": self.action_id,
            "log_prob": self.log_prob,
            "state": self.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        feats = None
        if d.get("features") is not None:
            f = d["features"]
            feats = np.zeros(f["dim"])
            feats[f["index"]] = f["value"]
        return cls(d["role"], d["turn"], d.get("head"), feats, d.get("action_id"), d.get("log_prob"), d.get("state"))

    def __eq__(self, other):
        if not isinstance(other, StepRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class Utterance:
    speaker: Speaker
    kind: Kind
    text: str
    action_id: int | None = None
    step: StepRecord | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "speaker", Speaker(self.speaker))
        object.__setattr__(self, "kind", Kind(self.kind))
        if not isinstance(self.text, str) or not self.text.strip():
            raise EmptyUtterance(f"{self.kind.value} utterance has empty text")
        if _SPEAKER_OF[self.kind] is not self.speaker:
            raise MonologueError(f"{self.kind.value} must come from {_SPEAKER_OF[self.kind].value}")
        if self.action_id is not None and self.action_id < 0:
            raise ValueError("action_id must be non-negative")

    def to_dict(self) -> dict:
        return {"speaker": self.speaker.value, "kind": self.kind.value, "text": self.text, "action_id": self.action_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Utterance":
        return cls(Speaker(d["speaker"]), Kind(d["kind"]), d["text"], d.get("action_id"))


def observer_says(kind: Kind, text: str, action_id: int | None = None, step: StepRecord | None = None) -> Utterance:
    return Utterance(Speaker.OBSERVER, kind, text, action_id, step)


def reasoner_says(kind: Kind, text: str, action_id: int | None = None, step: StepRecord | None = None) -> Utterance:
    return Utterance(Speaker.REASONER, kind, text, action_id, step)


@dataclass(frozen=True)
class InnerMonologue:
    entries: tuple[Utterance, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries or entries[0].kind is not Kind.CAPTION:
            raise MonologueError("monologue must start with a caption")
        for i, u in enumerate(entries[1:]):
            want = Kind.QUERY if i % 2 == 0 else Kind.ANSWER
            if u.kind is not want:
                raise MonologueError(f"entry {i + 1} is {u.kind.value}, expected {want.value}")
        if len(entries) % 2 == 0:
            raise MonologueError("monologue ends mid-turn")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def caption(self) -> Utterance:
        return self.entries[0]

    @property
    def turns(self) -> int:
        return (len(self.entries) - 1) // 2

    def pairs(self) -> list[tuple[Utterance, Utterance]]:
        e = self.entries
        return [(e[i], e[i + 1]) for i in range(1, len(e), 2)]

    def extend(self, query: Utterance, answer: Utterance) -> "InnerMonologue":
        return InnerMonologue(self.entries + (query, answer))

    def to_list(self) -> list[dict]:
        return [u.to_dict() for u in self.entries]

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> "InnerMonologue":
        return cls(tuple(Utterance.from_dict(d) for d in items))


@dataclass(frozen=True)
class EpisodeConfig:
    max_turns: int = 2
    seed: int = 0
    hard_cap: int = HARD_TURN_CAP

    def __post_init__(self):
        if not 0 <= self.max_turns <= self.hard_cap:
            raise ValueError(f"max_turns must lie in [0, {self.hard_cap}]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


class EpisodeContext:
    """Per-episode randomness: separate sampling streams per role and a noise key."""

    def __init__(self, seed: int):
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        r_seq, o_seq, n_seq = ss.spawn(3)
        self.reasoner_rng = np.random.default_rng(r_seq)
        self.observer_rng = np.random.default_rng(o_seq)
        self.noise_seed = int(n_seq.generate_state(1, dtype=np.uint64)[0])


class ObserverAgent(Protocol):
    def caption(self, scene: Scene, *, episode: EpisodeContext) -> Utterance: ...

    def answer(self, scene: Scene, query: Utterance, *, episode: EpisodeContext) -> Utterance: ...


class ReasonerAgent(Protocol):
    def next_query(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance: ...

    def final_answer(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance: ...


def _checked(u: Utterance, kind: Kind) -> Utterance:
    if not isinstance(u, Utterance) or u.kind is not kind:
        raise MonologueError(f"agent returned {getattr(u, 'kind', type(u))}, expected {kind.value}")
    return u


def init_monologue(observer: ObserverAgent, scene: Scene, episode: EpisodeContext | None = None) -> InnerMonologue:
    episode = episode or EpisodeContext(0)
    return InnerMonologue((_checked(observer.caption(scene, episode=episode), Kind.CAPTION),))


def run_turn(
    reasoner: ReasonerAgent,
    observer: ObserverAgent,
    problem: Problem,
    scene: Scene,
    im: InnerMonologue,
    episode: EpisodeContext | None = None,
    max_turns: int = HARD_TURN_CAP,
) -> InnerMonologue:
    if im.turns >= max_turns:
        raise MonologueError(f"already completed {im.turns} of {max_turns} turns")
    episode = episode or EpisodeContext(0)
    turn = im.turns + 1
    try:
        query = _checked(reasoner.next_query(problem, im, episode=episode), Kind.QUERY)
    except Exception as exc:
        raise AgentError("Reasoner", turn, exc) from exc
    try:
        answer = _checked(observer.answer(scene, query, episode=episode), Kind.ANSWER)
    except Exception as exc:
        raise AgentError("Observer", turn, exc) from exc
    return im.extend(query, answer)


def finalize(reasoner: ReasonerAgent, problem: Problem, im: InnerMonologue, episode: EpisodeContext | None = None) -> Utterance:
    episode = episode or EpisodeContext(0)
    a_f = _checked(reasoner.final_answer(problem, im, episode=episode), Kind.FINAL_ANSWER)
    if normalize(a_f.text) not in problem.vocab:
        raise AnswerOutOfVocabulary(f"{a_f.text!r} not in {problem.vocab}")
    return a_f


@dataclass(frozen=True)
class EpisodeTranscript:
    problem: Problem
    scene_id: str
    im: InnerMonologue
    final_answer: Utterance
    ground_truth: str
    reward: RewardBreakdown
    steps: tuple[StepRecord, ...]

    def steps_for(self, role: str) -> list[StepRecord]:
        return [s for s in self.steps if s.role == role]

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "problem": self.problem.to_dict(),
            "im": self.im.to_list(),
            "final_answer": self.final_answer.to_dict(),
            "ground_truth": self.ground_truth,
            "reward": self.reward.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeTranscript":
        return cls(
            problem=Problem.from_dict(d["problem"]),
            scene_id=d["scene_id"],
            im=InnerMonologue.from_list(d["im"]),
            final_answer=Utterance.from_dict(d["final_answer"]),
            ground_truth=d["ground_truth"],
            reward=RewardBreakdown.from_dict(d["reward"]),
            steps=tuple(StepRecord.from_dict(s) for s in d["steps"]),
        )

    @classmethod
    def from_json(cls, line: str) -> "EpisodeTranscript":
        return cls.from_dict(json.loads(line))

    def with_reward(self, reward: RewardBreakdown) -> "EpisodeTranscript":
        return replace(self, reward=reward)


def _step_of(u: Utterance, role: str, turn: int) -> StepRecord:
    if u.step is not None:
        u.step.turn = turn
        return u.step
    return StepRecord(role=role, turn=turn, action_id=u.action_id)


def run_episode(
    reasoner: ReasonerAgent,
    observer: ObserverAgent,
    problem: Problem,
    scene: Scene,
    cfg: EpisodeConfig,
) -> EpisodeTranscript:
    episode = EpisodeContext(cfg.seed)
    try:
        im = init_monologue(observer, scene, episode)
    except Exception as exc:
        raise AgentError("Observer", 0, exc) from exc
    for _ in range(cfg.max_turns):
        im = run_turn(reasoner, observer, problem, scene, im, episode, cfg.max_turns)
    try:
        a_f = finalize(reasoner, problem, im, episode)
    except Exception as exc:
        raise AgentError("Reasoner", cfg.max_turns + 1, exc) from exc

    steps = [_step_of(im.caption, "observer", 0)]
    for i, (q, a) in enumerate(im.pairs(), start=1):
        steps.append(_step_of(q, "reasoner", i))
        steps.append(_step_of(a, "observer", i))
    steps.append(_step_of(a_f, "reasoner", cfg.max_turns + 1))
    return EpisodeTranscript(
        problem=problem,
        scene_id=scene.id,
        im=im,
        final_answer=a_f,
        ground_truth=problem.ground_truth,
        reward=RewardBreakdown.compute(a_f.text, problem.ground_truth),
        steps=tuple(steps),
    )


def write_transcripts(path, transcripts: Iterable[EpisodeTranscript]) -> None:
    atomic_write_text(path, "".join(t.to_json() + "\n" for t in transcripts))


def read_transcripts(path) -> list[EpisodeTranscript]:
    with open(path) as fh:
        return [EpisodeTranscript.from_json(line) for line in fh if line.strip()]
