"""Observer and Reasoner implementations: oracle, scripted, policy-backed, remote.

Policy agents encode their input as a fixed-length feature vector and sample one
discrete action per utterance, recording the features and log-probability so the
trainer can recompute ratios later.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import requests

from . import sceneworld as sw
from .policy import ActionSpace, LinearSoftmaxPolicy, PolicyBundle
from .protocol import (
    HARD_TURN_CAP,
    AnswerOutOfVocabulary,
    EpisodeContext,
    InnerMonologue,
    Kind,
    StepRecord,
    Utterance,
    observer_says,
    reasoner_says,
)
from .reward import normalize
from .sceneworld import Problem, QueryAction, Scene

logger = logging.getLogger(__name__)

# --- featurization -------------------------------------------------------------

SLOT_TOKENS = sw.SHAPES + sw.COLORS
PAIRS: tuple[tuple[QueryAction, str], ...] = tuple((q, tok) for q in sw.QUERY_ACTIONS for tok in q.vocab)
PAIR_INDEX = {p: i for i, p in enumerate(PAIRS)}
CAPTION_INDEX = {c: i for i, c in enumerate(sw.CAPTION_CHOICES)}

N_TEMPLATES = len(sw.TEMPLATE_IDS)
N_SLOTS = len(SLOT_TOKENS)
N_CAPTION = len(sw.CAPTION_CHOICES)
N_PAIRS = len(PAIRS)
N_TURNS = HARD_TURN_CAP + 1
# caption crossed with: some answer names its shape / its color, some query slot names its shape / its color
N_MATCH_FLAGS = 4
# per-context block: bias, caption, history, turn, caption-match
SHARED_WIDTH = N_CAPTION + N_PAIRS + N_TURNS
CONTEXT_WIDTH = 1 + SHARED_WIDTH + N_CAPTION * N_MATCH_FLAGS

TEMPLATE_OFFSET = 0
SLOT_OFFSET = TEMPLATE_OFFSET + N_TEMPLATES
CAPTION_OFFSET = SLOT_OFFSET + N_SLOTS
HISTORY_OFFSET = CAPTION_OFFSET + N_CAPTION
TURN_OFFSET = HISTORY_OFFSET + N_PAIRS
CONTEXT_OFFSET = TURN_OFFSET + N_TURNS
REASONER_DIM = CONTEXT_OFFSET + len(sw.CONTEXTS) * CONTEXT_WIDTH

OBJECT_WIDTH = 1 + len(sw.SHAPES) + len(sw.COLORS) + len(sw.SIZES)
SCENE_WIDTH = sw.MAX_OBJECTS * OBJECT_WIDTH
QUERY_KIND_OFFSET = SCENE_WIDTH
QUERY_SLOT_OFFSET = QUERY_KIND_OFFSET + len(sw.QUERY_KINDS)
PERCEIVED_OFFSET = QUERY_SLOT_OFFSET + N_SLOTS
OBSERVER_DIM = PERCEIVED_OFFSET + len(sw.ANSWER_TOKENS)


def query_of(u: Utterance) -> QueryAction | None:
    if u.action_id is not None and u.action_id < len(sw.QUERY_ACTIONS):
        q = sw.QUERY_ACTIONS[u.action_id]
        if q.surface == u.text:
            return q
    return QueryAction.from_surface(u.text)


def history_pairs(im: InnerMonologue) -> list[tuple[QueryAction, str]]:
    out = []
    for q_utt, a_utt in im.pairs():
        q = query_of(q_utt)
        if q is not None:
            out.append((q, normalize(a_utt.text)))
    return out


def featurize_reasoner_state(problem: Problem, im: InnerMonologue) -> np.ndarray:
    """Template ⊕ slot ⊕ caption ⊕ history bag ⊕ turn, then the last three blocks again
    inside the (template, slot) context slice so answer logits can depend on the referent.

    The history bag marks which (query, answer token) pairs have been seen; order and
    repetition are dropped. The context slice also carries caption-match flags: for the
    captioned object, whether any answer or query slot named its shape or its color. These
    let a linear head tie a dialogue answer back to the one object the caption pins down.
    """
    x = np.zeros(REASONER_DIM)
    x[TEMPLATE_OFFSET + sw.TEMPLATE_IDS.index(problem.template_id)] = 1.0
    x[SLOT_OFFSET + SLOT_TOKENS.index(problem.slots[0])] = 1.0

    local = np.zeros(CONTEXT_WIDTH)
    local[0] = 1.0
    parsed = sw.parse_caption(im.caption.text)
    pairs = history_pairs(im)
    if parsed is not None:
        _, color, shape = parsed
        ci = CAPTION_INDEX[(color, shape)]
        local[1 + ci] = 1.0
        flags = (
            any(a == shape for _, a in pairs),
            any(a == color for _, a in pairs),
            any(q.slot == shape for q, _ in pairs),
            any(q.slot == color for q, _ in pairs),
        )
        match_start = 1 + SHARED_WIDTH + ci * N_MATCH_FLAGS
        local[match_start : match_start + N_MATCH_FLAGS] = flags
    for pair in pairs:
        pi = PAIR_INDEX.get(pair)
        if pi is not None:
            local[1 + N_CAPTION + pi] = 1.0
    local[1 + N_CAPTION + N_PAIRS + min(im.turns, HARD_TURN_CAP)] = 1.0

    x[CAPTION_OFFSET:CONTEXT_OFFSET] = local[1 : 1 + SHARED_WIDTH]
    ctx = sw.CONTEXT_INDEX[problem.context]
    start = CONTEXT_OFFSET + ctx * CONTEXT_WIDTH
    x[start : start + CONTEXT_WIDTH] = local
    return x


def featurize_observer_state(scene: Scene, query: QueryAction | None, perceived: str | None = None) -> np.ndarray:
    """Caption state (``query=None``): position-keyed scene attributes.
    Answer state: query kind/slot ⊕ the perceived answer token, and no scene block,
    so answers pass through the noisy perception channel.

    ``perceived`` defaults to the noiseless reading.
    """
    x = np.zeros(OBSERVER_DIM)
    if query is None:
        for o in scene.objects:
            base = o.position * OBJECT_WIDTH
            x[base] = 1.0
            x[base + 1 + sw.SHAPES.index(o.shape)] = 1.0
            x[base + 4 + sw.COLORS.index(o.color)] = 1.0
            x[base + 7 + sw.SIZES.index(o.size)] = 1.0
    else:
        x[QUERY_KIND_OFFSET + sw.QUERY_KINDS.index(query.kind)] = 1.0
        x[QUERY_SLOT_OFFSET + SLOT_TOKENS.index(query.slot)] = 1.0
        tok = sw.oracle_answer(scene, query) if perceived is None else perceived
        x[PERCEIVED_OFFSET + sw.ANSWER_TOKENS.index(tok)] = 1.0
    return x


# --- policies ------------------------------------------------------------------


def query_head() -> str:
    return "query"


def final_head(template_id: str) -> str:
    return f"final:{template_id}"


def answer_head(kind: str) -> str:
    return f"answer:{kind}"


CAPTION_HEAD = "caption"


def new_reasoner_policy() -> PolicyBundle:
    heads = {query_head(): LinearSoftmaxPolicy(ActionSpace(tuple(q.surface for q in sw.QUERY_ACTIONS)), REASONER_DIM)}
    for tid, t in sw.TEMPLATES.items():
        heads[final_head(tid)] = LinearSoftmaxPolicy(ActionSpace(t.vocab), REASONER_DIM)
    return PolicyBundle("reasoner", heads)


def new_observer_policy() -> PolicyBundle:
    heads = {CAPTION_HEAD: LinearSoftmaxPolicy(ActionSpace(tuple(f"{c} {s}" for c, s in sw.CAPTION_CHOICES)), OBSERVER_DIM)}
    for kind in sw.QUERY_KINDS:
        heads[answer_head(kind)] = LinearSoftmaxPolicy(ActionSpace(sw.KIND_VOCAB[kind]), OBSERVER_DIM)
    return PolicyBundle("observer", heads)


# --- oracle and scripted agents ------------------------------------------------


class OracleObserver:
    """Ground-truth Observer; with epsilon > 0 answers go through the wrong-token noise model.

    Noise is keyed on (episode, scene, query), so asking the same question twice in
    one episode returns the same answer.
    """

    def __init__(self, epsilon: float = 0.0):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        self.epsilon = epsilon

    def caption(self, scene: Scene, *, episode: EpisodeContext) -> Utterance:
        return observer_says(Kind.CAPTION, sw.caption(scene))

    def answer(self, scene: Scene, query: Utterance, *, episode: EpisodeContext) -> Utterance:
        q = query_of(query)
        if q is None:
            return observer_says(Kind.ANSWER, sw.NONE)
        tok = sw.noisy_answer(scene, q, self.epsilon, sw.noise_rng(episode.noise_seed, scene, q))
        return observer_says(Kind.ANSWER, tok)


def _facts(im: InnerMonologue) -> list[sw.DialogueTurn]:
    return [sw.DialogueTurn(q, a) for q, a in history_pairs(im)]


def _caption_guess(problem: Problem, im: InnerMonologue) -> str:
    parsed = sw.parse_caption(im.caption.text)
    slot = problem.slots[0]
    if parsed is not None:
        _, color, shape = parsed
        if problem.template_id == "color_of" and shape == slot:
            return color
        if problem.template_id == "shape_of" and color == slot:
            return shape
    return problem.vocab[0]


def _query_utterance(q: QueryAction) -> Utterance:
    return reasoner_says(Kind.QUERY, q.surface, sw.QUERY_INDEX[q])


class OracleReasoner:
    """Asks the gold queries (the 2-hop follow-up uses the observed answer), then
    repeats the last one as a confirmation; answers from the collected facts."""

    def next_query(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        slot = problem.slots[0]
        tid = problem.template_id
        if tid in ("color_of", "size_of"):
            plan = [sw.ask_color_of(slot) if tid == "color_of" else sw.ask_size_of(slot)]
        elif tid == "shape_of":
            plan = [sw.ask_shape_of(slot)]
        else:
            plan = [sw.ask_left_of(slot)]
            facts = dict(history_pairs(im))
            left = facts.get(plan[0])
            if left in sw.SHAPES:
                plan.append(sw.ask_color_of(left) if tid == "color_left_of" else sw.ask_size_of(left))
        q = plan[min(im.turns, len(plan) - 1)]
        return _query_utterance(q)

    def final_answer(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        ans = sw.resolve_answer(problem, _facts(im))
        if ans not in problem.vocab:
            ans = _caption_guess(problem, im)
        return reasoner_says(Kind.FINAL_ANSWER, ans, problem.vocab.index(ans))


class ScriptedReasoner:
    """Follows a fixed query plan (last entry repeats) and a fixed or fact-derived answer."""

    def __init__(self, plan: Sequence[QueryAction], answer: str | None = None):
        if not plan:
            raise ValueError("plan must hold at least one query")
        self.plan = list(plan)
        self.answer = answer

    def next_query(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        return _query_utterance(self.plan[min(im.turns, len(self.plan) - 1)])

    def final_answer(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        ans = self.answer
        if ans is None:
            ans = sw.resolve_answer(problem, _facts(im)) or problem.vocab[0]
        aid = problem.vocab.index(ans) if ans in problem.vocab else None
        return reasoner_says(Kind.FINAL_ANSWER, ans, aid)


class DialogueReasoner:
    """Replays a fixed gold dialogue's queries and final answer (for SL state collection)."""

    def __init__(self, turns: Sequence[sw.DialogueTurn], final_answer: str):
        self.turns = list(turns)
        self.final = final_answer

    def next_query(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        return _query_utterance(self.turns[min(im.turns, len(self.turns) - 1)].query)

    def final_answer(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        return reasoner_says(Kind.FINAL_ANSWER, self.final, problem.vocab.index(self.final))


# --- spies -----------------------------------------------------------------------


class SpyObserver:
    """Delegates to ``inner`` and records every input it receives."""

    def __init__(self, inner):
        self.inner = inner
        self.calls: list[tuple] = []

    def caption(self, scene: Scene, *, episode: EpisodeContext) -> Utterance:
        self.calls.append(("caption", scene))
        return self.inner.caption(scene, episode=episode)

    def answer(self, scene: Scene, query: Utterance, *, episode: EpisodeContext) -> Utterance:
        self.calls.append(("answer", scene, query))
        return self.inner.answer(scene, query, episode=episode)


class SpyReasoner:
    def __init__(self, inner):
        self.inner = inner
        self.calls: list[tuple] = []

    def next_query(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        self.calls.append(("query", problem, im))
        return self.inner.next_query(problem, im, episode=episode)

    def final_answer(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        self.calls.append(("final", problem, im))
        return self.inner.final_answer(problem, im, episode=episode)


# --- policy agents -------------------------------------------------------------


class PolicyReasoner:
    def __init__(self, policy: PolicyBundle, temperature: float | None = None):
        self.policy = policy
        self.temperature = temperature

    def _act(self, head_name: str, x: np.ndarray, rng: np.random.Generator) -> tuple[int, StepRecord]:
        head = self.policy[head_name]
        if self.temperature is not None and self.temperature != head.temperature:
            head = head.copy()
            head.temperature = self.temperature
        a, lp = head.sample(x, rng)
        return a, StepRecord("reasoner", 0, head_name, x, a, lp)

    def next_query(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        x = featurize_reasoner_state(problem, im)
        a, step = self._act(query_head(), x, episode.reasoner_rng)
        q = sw.QUERY_ACTIONS[a]
        return reasoner_says(Kind.QUERY, q.surface, a, step)

    def final_answer(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        name = final_head(problem.template_id)
        if name not in self.policy:
            raise AnswerOutOfVocabulary(f"no answer head for template {problem.template_id!r}")
        x = featurize_reasoner_state(problem, im)
        a, step = self._act(name, x, episode.reasoner_rng)
        tok = self.policy[name].action_space.surfaces[a]
        if tok not in problem.vocab:
            raise AnswerOutOfVocabulary(f"action {a} -> {tok!r} outside {problem.vocab}")
        return reasoner_says(Kind.FINAL_ANSWER, tok, a, step)


class PolicyObserver:
    """Trainable Observer on top of a (possibly noisy) perception of the scene.

    Perception of a query's answer follows the same keyed wrong-token noise as
    ``OracleObserver``; the policy decides what to report given scene and percept.
    """

    def __init__(self, policy: PolicyBundle, epsilon: float = 0.0, temperature: float | None = None):
        self.policy = policy
        self.epsilon = epsilon
        self.temperature = temperature

    def _act(self, head_name: str, x: np.ndarray, rng: np.random.Generator) -> tuple[int, StepRecord]:
        head = self.policy[head_name]
        if self.temperature is not None and self.temperature != head.temperature:
            head = head.copy()
            head.temperature = self.temperature
        a, lp = head.sample(x, rng)
        return a, StepRecord("observer", 0, head_name, x, a, lp)

    def caption(self, scene: Scene, *, episode: EpisodeContext) -> Utterance:
        x = featurize_observer_state(scene, None)
        a, step = self._act(CAPTION_HEAD, x, episode.observer_rng)
        color, shape = sw.CAPTION_CHOICES[a]
        return observer_says(Kind.CAPTION, sw.render_caption(len(scene.objects), color, shape), a, step)

    def answer(self, scene: Scene, query: Utterance, *, episode: EpisodeContext) -> Utterance:
        q = query_of(query)
        if q is None:
            return observer_says(Kind.ANSWER, sw.NONE)
        perceived = sw.noisy_answer(scene, q, self.epsilon, sw.noise_rng(episode.noise_seed, scene, q))
        x = featurize_observer_state(scene, q, perceived)
        a, step = self._act(answer_head(q.kind), x, episode.observer_rng)
        return observer_says(Kind.ANSWER, q.vocab[a], a, step)


# --- remote endpoints ------------------------------------------------------------


class RemoteError(RuntimeError):
    pass


class Timeout(RemoteError):
    pass


class TransportError(RemoteError):
    pass


class MalformedResponse(RemoteError):
    pass


_MODE_KIND = {"caption": Kind.CAPTION, "answer": Kind.ANSWER, "query": Kind.QUERY, "final": Kind.FINAL_ANSWER}


@dataclass(frozen=True)
class RemoteEndpointConfig:
    base_url: str
    timeout: int = 10_000  # milliseconds
    max_retries: int = 2
    role: str = "observer"
    backoff: float = 0.05  # seconds before the first retry, doubled each time

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if not 0 <= self.max_retries <= 5:
            raise ValueError("max_retries must lie in [0, 5]")
        if self.role not in ("observer", "reasoner"):
            raise ValueError("role must be 'observer' or 'reasoner'")


def build_request(role: str, mode: str, problem: str | None, history: Sequence[Utterance], scene_ref: str | None) -> dict:
    return {
        "role": role,
        "mode": mode,
        "problem": problem,
        "history": [{"speaker": u.speaker.value, "kind": u.kind.value, "text": u.text} for u in history],
        "scene_ref": scene_ref,
    }


def remote_call(cfg: RemoteEndpointConfig, request: dict, session=None, stats: dict | None = None, sleep=time.sleep) -> Utterance:
    """POST one wire request; retry transport failures only, with exponential backoff."""
    kind = _MODE_KIND.get(request.get("mode"))
    if kind is None:
        raise ValueError(f"unknown mode {request.get('mode')!r}")
    http = session or requests
    timeout_s = cfg.timeout / 1000.0
    retries = 0
    while True:
        try:
            resp = http.post(cfg.base_url, json=request, timeout=timeout_s)
            if resp.status_code >= 500:
                raise TransportError(f"server error {resp.status_code}")
            if resp.status_code >= 400:
                raise MalformedResponse(f"request rejected with {resp.status_code}")
            break
        except (requests.Timeout, requests.ConnectionError, TransportError) as exc:
            last: RemoteError = Timeout(str(exc)) if isinstance(exc, requests.Timeout) else TransportError(str(exc))
            if retries >= cfg.max_retries:
                if stats is not None:
                    stats["retries"] = retries
                raise last from exc
            sleep(cfg.backoff * (2**retries))
            retries += 1
            logger.debug("retrying %s (%d/%d): %s", cfg.base_url, retries, cfg.max_retries, exc)
    if stats is not None:
        stats["retries"] = retries
    try:
        body = resp.json()
    except ValueError as exc:
        raise MalformedResponse("response body is not JSON") from exc
    if not isinstance(body, dict) or not isinstance(body.get("text"), str):
        raise MalformedResponse(f"response lacks a string 'text' field: {body!r}")
    speaker = "Observer" if kind in (Kind.CAPTION, Kind.ANSWER) else "Reasoner"
    return Utterance(speaker, kind, body["text"])


class RemoteObserver:
    """Inference-only Observer behind an HTTP endpoint. Sends only the current query."""

    def __init__(self, cfg: RemoteEndpointConfig, session=None):
        self.cfg = cfg
        self.session = session

    def caption(self, scene: Scene, *, episode: EpisodeContext) -> Utterance:
        return remote_call(self.cfg, build_request("observer", "caption", None, [], scene.id), self.session)

    def answer(self, scene: Scene, query: Utterance, *, episode: EpisodeContext) -> Utterance:
        return remote_call(self.cfg, build_request("observer", "answer", None, [query], scene.id), self.session)


class RemoteReasoner:
    def __init__(self, cfg: RemoteEndpointConfig, session=None):
        self.cfg = cfg
        self.session = session

    def next_query(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        return remote_call(self.cfg, build_request("reasoner", "query", problem.surface, im.entries, None), self.session)

    def final_answer(self, problem: Problem, im: InnerMonologue, *, episode: EpisodeContext) -> Utterance:
        return remote_call(self.cfg, build_request("reasoner", "final", problem.surface, im.entries, None), self.session)
