"""Symbolic scene/question world used in place of images and VQA items.

A scene is a left-to-right row of 2-5 objects. Problems are templated 1- and
2-hop questions whose answer is pinned down by the scene. The module also
holds the Observer's ground-truth semantics (``oracle_answer``), a noisy
variant, caption rendering, rationale generation/conversion, gold query
sequences, and an exact Bayes-optimal accuracy oracle.
"""

from __future__ import annotations

import hashlib
import itertools
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green")
SIZES = ("small", "large")
COUNTS = ("0", "1", "2", "3", "4", "5")
NONE = "none"

MIN_OBJECTS = 2
MAX_OBJECTS = 5


class NoValidProblem(Exception):
    """No template can be instantiated unambiguously on the scene."""


class UnparseableRationale(ValueError):
    pass


class StrategyBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    size: str
    position: int

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.size not in SIZES:
            raise ValueError(f"bad object attributes: {self}")
        if self.position < 0:
            raise ValueError("position must be non-negative")

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "size": self.size, "position": self.position}


@dataclass(frozen=True)
class Scene:
    id: str
    objects: tuple[ObjectSpec, ...]

    def __post_init__(self):
        objs = tuple(sorted(self.objects, key=lambda o: o.position))
        object.__setattr__(self, "objects", objs)
        if not MIN_OBJECTS <= len(objs) <= MAX_OBJECTS:
            raise ValueError(f"scene must hold {MIN_OBJECTS}-{MAX_OBJECTS} objects, got {len(objs)}")
        if [o.position for o in objs] != list(range(len(objs))):
            raise ValueError("positions must be exactly 0..n-1")

    @classmethod
    def from_objects(cls, objects: Iterable[ObjectSpec]) -> "Scene":
        objs = tuple(sorted(objects, key=lambda o: o.position))
        return cls(id=scene_digest(objs), objects=objs)

    def with_shape(self, shape: str) -> list[ObjectSpec]:
        return [o for o in self.objects if o.shape == shape]

    def with_color(self, color: str) -> list[ObjectSpec]:
        return [o for o in self.objects if o.color == color]

    def to_dict(self) -> dict:
        return {"id": self.id, "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(id=d["id"], objects=tuple(ObjectSpec(**o) for o in d["objects"]))


def scene_digest(objects: Sequence[ObjectSpec]) -> str:
    body = ";".join(f"{o.position}:{o.shape}:{o.color}:{o.size}" for o in sorted(objects, key=lambda o: o.position))
    return "scene-" + hashlib.sha1(body.encode()).hexdigest()[:12]


# --- queries -----------------------------------------------------------------

QUERY_KINDS = ("color_of", "shape_of", "left_of", "size_of", "count")

# answer vocabulary per query kind, "none" included where a referent can be missing
KIND_VOCAB = {
    "color_of": COLORS + (NONE,),
    "shape_of": SHAPES + (NONE,),
    "left_of": SHAPES + (NONE,),
    "size_of": SIZES + (NONE,),
    "count": COUNTS,
}

_SURFACE = {
    "color_of": "What color is the {}?",
    "shape_of": "What shape is the {} object?",
    "left_of": "What is left of the {}?",
    "size_of": "What size is the {}?",
    "count": "How many {}s are there?",
}


@dataclass(frozen=True)
class QueryAction:
    kind: str
    slot: str

    @property
    def surface(self) -> str:
        return _SURFACE[self.kind].format(self.slot)

    @property
    def vocab(self) -> tuple[str, ...]:
        return KIND_VOCAB[self.kind]

    @property
    def index(self) -> int:
        return QUERY_INDEX[self]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "slot": self.slot, "surface": self.surface}

    @classmethod
    def from_dict(cls, d: dict) -> "QueryAction":
        return cls(d["kind"], d["slot"])

    @classmethod
    def from_surface(cls, text: str) -> "QueryAction | None":
        return _BY_SURFACE.get(text.strip().lower())


def ask_color_of(shape: str) -> QueryAction:
    return QueryAction("color_of", shape)


def ask_shape_of(color: str) -> QueryAction:
    return QueryAction("shape_of", color)


def ask_left_of(shape: str) -> QueryAction:
    return QueryAction("left_of", shape)


def ask_size_of(shape: str) -> QueryAction:
    return QueryAction("size_of", shape)


def ask_count(shape: str) -> QueryAction:
    return QueryAction("count", shape)


QUERY_ACTIONS: tuple[QueryAction, ...] = tuple(
    QueryAction(kind, slot)
    for kind in QUERY_KINDS
    for slot in (COLORS if kind == "shape_of" else SHAPES)
)
QUERY_INDEX = {q: i for i, q in enumerate(QUERY_ACTIONS)}
_BY_SURFACE = {q.surface.lower(): q for q in QUERY_ACTIONS}


def oracle_answer(scene: Scene, query: QueryAction) -> str:
    if query.kind == "count":
        return str(len(scene.with_shape(query.slot)))
    if query.kind == "shape_of":
        hits = scene.with_color(query.slot)
        return hits[0].shape if len(hits) == 1 else NONE
    hits = scene.with_shape(query.slot)
    if len(hits) != 1:
        return NONE
    obj = hits[0]
    if query.kind == "color_of":
        return obj.color
    if query.kind == "size_of":
        return obj.size
    if query.kind == "left_of":
        return scene.objects[obj.position - 1].shape if obj.position > 0 else NONE
    raise ValueError(f"unknown query kind {query.kind!r}")


def noisy_answer(scene: Scene, query: QueryAction, epsilon: float, rng: np.random.Generator) -> str:
    """Oracle answer, replaced w.p. ``epsilon`` by a uniformly drawn wrong token."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    truth = oracle_answer(scene, query)
    flip = rng.random() < epsilon
    wrong = [tok for tok in query.vocab if tok != truth]
    pick = wrong[int(rng.integers(len(wrong)))]
    return pick if flip else truth


def noise_rng(noise_seed: int, scene: Scene, query: QueryAction) -> np.random.Generator:
    """Per-(episode, scene, query) stream: a repeated query gets the same answer."""
    scene_key = int(scene.id.rsplit("-", 1)[-1], 16)
    return np.random.default_rng([noise_seed & 0xFFFFFFFFFFFFFFFF, scene_key, query.index])


# --- scenes and captions ----------------------------------------------------


def generate_scene(rng: np.random.Generator, min_objects: int = MIN_OBJECTS, max_objects: int = MAX_OBJECTS) -> Scene:
    if not MIN_OBJECTS <= min_objects <= max_objects <= MAX_OBJECTS:
        raise ValueError(f"need {MIN_OBJECTS} <= min <= max <= {MAX_OBJECTS}")
    n = int(rng.integers(min_objects, max_objects + 1))
    objs = []
    for pos in range(n):
        objs.append(
            ObjectSpec(
                shape=SHAPES[rng.integers(3)],
                color=COLORS[rng.integers(3)],
                size=SIZES[rng.integers(2)],
                position=pos,
            )
        )
    return Scene.from_objects(objs)


CAPTION_TEMPLATE = "a scene with {n} objects including a {color} {shape}"
_CAPTION_RE = re.compile(r"^a scene with (\d+) objects including an? (\w+) (\w+)$")

# caption content the Observer chooses among: (color, shape) of the described object
CAPTION_CHOICES: tuple[tuple[str, str], ...] = tuple((c, s) for c in COLORS for s in SHAPES)


def render_caption(n: int, color: str, shape: str) -> str:
    return CAPTION_TEMPLATE.format(n=n, color=color, shape=shape)


def caption(scene: Scene) -> str:
    first = scene.objects[0]
    return render_caption(len(scene.objects), first.color, first.shape)


def parse_caption(text: str) -> tuple[int, str, str] | None:
    m = _CAPTION_RE.match(text.strip().lower())
    if not m or m.group(2) not in COLORS or m.group(3) not in SHAPES:
        return None
    return int(m.group(1)), m.group(2), m.group(3)


# --- problems -----------------------------------------------------------------


@dataclass(frozen=True)
class Template:
    id: str
    hops: int
    slot_kind: str  # "shape" or "color"
    vocab: tuple[str, ...]
    surface: str


TEMPLATES: dict[str, Template] = {
    t.id: t
    for t in (
        Template("color_of", 1, "shape", COLORS, "What is the color of the {}?"),
        Template("shape_of", 1, "color", SHAPES, "What shape is the {} object?"),
        Template("size_of", 1, "shape", SIZES, "What size is the {}?"),
        Template("color_left_of", 2, "shape", COLORS, "What is the color of the object left of the {}?"),
        Template("size_left_of", 2, "shape", SIZES, "What size is the object left of the {}?"),
    )
}
TEMPLATE_IDS = tuple(TEMPLATES)

# (template, slot) pairs; the Reasoner's state is conditioned on this context
CONTEXTS: tuple[tuple[str, str], ...] = tuple(
    (tid, slot)
    for tid, t in TEMPLATES.items()
    for slot in (SHAPES if t.slot_kind == "shape" else COLORS)
)
CONTEXT_INDEX = {c: i for i, c in enumerate(CONTEXTS)}


@dataclass(frozen=True)
class Problem:
    template_id: str
    slots: tuple[str, ...]
    surface: str
    ground_truth: str
    hops: int

    @property
    def template(self) -> Template:
        return TEMPLATES[self.template_id]

    @property
    def vocab(self) -> tuple[str, ...]:
        return TEMPLATES[self.template_id].vocab

    @property
    def context(self) -> tuple[str, str]:
        return (self.template_id, self.slots[0])

    def to_dict(self) -> dict:
        return {
            "template_id": self.template_id,
            "slots": list(self.slots),
            "surface": self.surface,
            "ground_truth": self.ground_truth,
            "hops": self.hops,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Problem":
        return cls(d["template_id"], tuple(d["slots"]), d["surface"], d["ground_truth"], int(d["hops"]))


def _unique(items: list) -> bool:
    return len(items) == 1


def instantiate(scene: Scene, template_id: str, slot: str) -> Problem | None:
    """Problem for (template, slot) on this scene, or None if ambiguous/undefined."""
    t = TEMPLATES[template_id]
    if t.slot_kind == "color":
        hits = scene.with_color(slot)
        if not _unique(hits):
            return None
        answer = hits[0].shape
    else:
        hits = scene.with_shape(slot)
        if not _unique(hits):
            return None
        target = hits[0]
        if t.hops == 2:
            if target.position == 0:
                return None
            target = scene.objects[target.position - 1]
            if not _unique(scene.with_shape(target.shape)):
                return None
        answer = target.color if t.vocab == COLORS else target.size
    return Problem(template_id, (slot,), t.surface.format(slot), answer, t.hops)


def valid_problems(scene: Scene) -> list[Problem]:
    out = []
    for tid, slot in CONTEXTS:
        p = instantiate(scene, tid, slot)
        if p is not None:
            out.append(p)
    return out


def generate_problem(scene: Scene, rng: np.random.Generator, hops: int | None = None) -> Problem:
    """Template drawn uniformly among those that instantiate (optionally restricted
    to one hop count), then a slot uniformly."""
    by_template: dict[str, list[Problem]] = {}
    for p in valid_problems(scene):
        if hops is None or p.hops == hops:
            by_template.setdefault(p.template_id, []).append(p)
    if not by_template:
        raise NoValidProblem(scene.id)
    tids = sorted(by_template, key=TEMPLATE_IDS.index)
    choices = by_template[tids[int(rng.integers(len(tids)))]]
    return choices[int(rng.integers(len(choices)))]


def generate_instance(rng: np.random.Generator, min_objects: int = MIN_OBJECTS, max_objects: int = MAX_OBJECTS) -> tuple[Scene, Problem]:
    """Hop count first (1 or 2, equally likely), then scenes until one admits it.

    Two-hop problems instantiate on few scenes, so drawing the hop count up front
    keeps the mix balanced.
    """
    hops = 1 + int(rng.integers(2))
    while True:
        scene = generate_scene(rng, min_objects, max_objects)
        try:
            return scene, generate_problem(scene, rng, hops)
        except NoValidProblem:
            continue


def generate_instances(n: int, seed: int) -> list[tuple[Scene, Problem]]:
    rng = np.random.default_rng(seed)
    return [generate_instance(rng) for _ in range(n)]


_ATTRIBUTE_KINDS = {COLORS: "color_of", SIZES: "size_of", SHAPES: "shape_of"}


def is_solvable(scene: Scene, problem: Problem, max_queries: int = 2) -> bool:
    """Exhaustive search for a grounded chain of <= max_queries oracle queries ending in G.

    A chain is grounded when each query's slot is a problem slot or an earlier answer,
    and it determines G when its last query asks for the template's attribute and
    returns G.
    """
    final_kind = _ATTRIBUTE_KINDS[problem.vocab]

    def search(known: frozenset, depth: int) -> bool:
        if depth == 0:
            return False
        for q in QUERY_ACTIONS:
            if q.slot not in known:
                continue
            ans = oracle_answer(scene, q)
            if q.kind == final_kind and ans == problem.ground_truth:
                return True
            if ans != NONE and search(known | {ans}, depth - 1):
                return True
        return False

    return search(frozenset(problem.slots), max_queries)


# --- rationales -------------------------------------------------------------


@dataclass(frozen=True)
class DialogueTurn:
    query: QueryAction
    answer: str

    def to_dict(self) -> dict:
        return {"query": self.query.to_dict(), "answer": self.answer}

    @classmethod
    def from_dict(cls, d: dict) -> "DialogueTurn":
        return cls(QueryAction.from_dict(d["query"]), d["answer"])


@dataclass(frozen=True)
class RationaleRecord:
    scene: Scene
    problem: Problem
    rationale: str
    gold_dialogue: tuple[DialogueTurn, ...] | None = None
    final_answer: str | None = None

    def to_dict(self) -> dict:
        gold = None
        if self.gold_dialogue is not None:
            gold = {"turns": [t.to_dict() for t in self.gold_dialogue], "final_answer": self.final_answer}
        return {
            "scene": self.scene.to_dict(),
            "problem": self.problem.to_dict(),
            "rationale": self.rationale,
            "gold_dialogue": gold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RationaleRecord":
        gold = d.get("gold_dialogue")
        turns = final = None
        if gold:
            turns = tuple(DialogueTurn.from_dict(t) for t in gold["turns"])
            final = gold["final_answer"]
        return cls(Scene.from_dict(d["scene"]), Problem.from_dict(d["problem"]), d["rationale"], turns, final)


def _count_sentence(scene: Scene, shape: str) -> str:
    k = len(scene.with_shape(shape))
    return f"There is 1 {shape}." if k == 1 else f"There are {k} {shape}s."


def make_rationale(scene: Scene, problem: Problem) -> str:
    """Two declarative sentences: the fact(s) that settle G, then a confirming side fact."""
    slot, g = problem.slots[0], problem.ground_truth
    tid = problem.template_id
    if tid == "color_of":
        side = f"The {g} object is the {slot}." if _unique(scene.with_color(g)) else _count_sentence(scene, slot)
        return f"The {slot} is {g}. {side}"
    if tid == "shape_of":
        side = f"The {g} is {slot}." if _unique(scene.with_shape(g)) else _count_sentence(scene, g)
        return f"The {slot} object is the {g}. {side}"
    if tid == "size_of":
        return f"The {slot} is {g}. {_count_sentence(scene, slot)}"
    if tid in ("color_left_of", "size_left_of"):
        left = scene.objects[scene.with_shape(slot)[0].position - 1].shape
        return f"The object left of the {slot} is the {left}. The {left} is {g}."
    raise ValueError(f"unknown template {tid!r}")


_WORD = r"(\w+)"
_SENTENCE_RULES: list[tuple[re.Pattern, callable]] = [
    (re.compile(rf"^the object left of the {_WORD} is the {_WORD}$"), lambda a, b: (ask_left_of(a), b)),
    (re.compile(rf"^the {_WORD} object is the {_WORD}$"), lambda a, b: (ask_shape_of(a), b)),
    (re.compile(rf"^there is (1) {_WORD}$"), lambda n, s: (ask_count(s), n)),
    (re.compile(rf"^there are (\d) {_WORD}s$"), lambda n, s: (ask_count(s), n)),
    (re.compile(rf"^the {_WORD} is {_WORD}$"), None),  # color or size, decided by the token
]


def _parse_sentence(sentence: str) -> DialogueTurn:
    s = sentence.strip().lower()
    for pattern, build in _SENTENCE_RULES:
        m = pattern.match(s)
        if not m:
            continue
        a, b = m.groups()
        if build is None:
            if b in COLORS:
                q, ans = ask_color_of(a), b
            elif b in SIZES:
                q, ans = ask_size_of(a), b
            else:
                raise UnparseableRationale(f"unknown attribute {b!r} in {sentence!r}")
        else:
            q, ans = build(a, b)
        if q.slot not in (COLORS if q.kind == "shape_of" else SHAPES) or ans not in q.vocab:
            raise UnparseableRationale(f"out-of-vocabulary token in {sentence!r}")
        return DialogueTurn(q, ans)
    raise UnparseableRationale(f"no rule matches {sentence!r}")


def resolve_answer(problem: Problem, turns: Sequence[DialogueTurn]) -> str | None:
    """Answer to the problem implied by a set of query/answer facts, if any."""
    facts = {t.query: t.answer for t in turns}
    slot = problem.slots[0]
    tid = problem.template_id
    if tid == "color_of":
        return facts.get(ask_color_of(slot))
    if tid == "shape_of":
        return facts.get(ask_shape_of(slot))
    if tid == "size_of":
        return facts.get(ask_size_of(slot))
    left = facts.get(ask_left_of(slot))
    if left is None or left == NONE:
        return None
    ask = ask_color_of if tid == "color_left_of" else ask_size_of
    return facts.get(ask(left))


def convert_rationale(record: RationaleRecord) -> RationaleRecord:
    """Rule-based rewrite of a declarative rationale into two query/answer turns."""
    text = record.rationale.strip()
    sentences = [s for s in text.split(".") if s.strip()]
    if len(sentences) != 2:
        raise UnparseableRationale(f"expected two sentences, got {len(sentences)}")
    turns = tuple(_parse_sentence(s) for s in sentences)
    final = resolve_answer(record.problem, turns)
    if final is None or final not in record.problem.vocab:
        raise UnparseableRationale("rationale does not settle the question")
    return RationaleRecord(record.scene, record.problem, record.rationale, turns, final)


def dialogue_consistent(scene: Scene, turns: Iterable[DialogueTurn]) -> bool:
    return all(oracle_answer(scene, t.query) == t.answer for t in turns)


def gold_dialogue_turns(scene: Scene, problem: Problem) -> tuple[DialogueTurn, ...]:
    return convert_rationale(RationaleRecord(scene, problem, make_rationale(scene, problem))).gold_dialogue


# --- gold trajectories ---------------------------------------------------------


def gold_queries(scene: Scene, problem: Problem) -> list[QueryAction]:
    slot = problem.slots[0]
    tid = problem.template_id
    if tid == "color_of":
        return [ask_color_of(slot)]
    if tid == "shape_of":
        return [ask_shape_of(slot)]
    if tid == "size_of":
        return [ask_size_of(slot)]
    left = oracle_answer(scene, ask_left_of(slot))
    second = ask_color_of(left) if tid == "color_left_of" else ask_size_of(left)
    return [ask_left_of(slot), second]


def gold_trajectory(scene: Scene, problem: Problem) -> list[tuple[str, int]]:
    """Minimal query sequence (length = hops) then the correct final-answer action.

    Items are ``("query", query index)`` and ``("final", index into the template vocab)``.
    """
    steps = [("query", q.index) for q in gold_queries(scene, problem)]
    steps.append(("final", problem.vocab.index(problem.ground_truth)))
    return steps


def replay_gold(scene: Scene, problem: Problem) -> bool:
    """Replay the gold trajectory against the noiseless oracle; True when it yields G."""
    traj = gold_trajectory(scene, problem)
    turns = [DialogueTurn(QUERY_ACTIONS[i], oracle_answer(scene, QUERY_ACTIONS[i])) for role, i in traj if role == "query"]
    final = problem.vocab[traj[-1][1]]
    return resolve_answer(problem, turns) == final == problem.ground_truth


# --- optimality oracle ---------------------------------------------------------

STRATEGY_BUDGET = 10**6


def _likelihood(truth: np.ndarray, vocab: tuple[str, ...], epsilon: float) -> np.ndarray:
    """(|vocab|, n) matrix of P(reported token | true token) for each instance."""
    onehot = (np.asarray(vocab)[:, None] == truth[None, :]).astype(float)
    if len(vocab) == 1:
        return onehot
    return onehot * (1.0 - epsilon) + (1.0 - onehot) * (epsilon / (len(vocab) - 1))


def brute_force_ceiling(
    problems: Sequence[tuple[Scene, Problem]],
    t: int,
    epsilon: float,
    budget: int = STRATEGY_BUDGET,
    per_template: bool = False,
):
    """Exact best expected accuracy over deterministic adaptive query strategies.

    The Reasoner's information is (template, slot, caption, answers so far); the
    instance distribution is the empirical one over ``problems``. Observer errors
    follow the wrong-token model and are fixed per (episode, query), so a repeated
    query reveals nothing new. Noise is summed out exactly, and the best strategy
    is found by exhaustive expectimax over query choices at every information state.
    Raises StrategyBudgetExceeded once more than ``budget`` nodes are evaluated.
    """
    if not problems:
        raise ValueError("need at least one problem")
    groups: dict[tuple, list[tuple[Scene, Problem]]] = {}
    for scene, prob in problems:
        first = scene.objects[0]
        groups.setdefault((prob.template_id, prob.slots[0], first.color, first.shape), []).append((scene, prob))

    evaluations = 0
    correct_by_template: dict[str, float] = {}
    count_by_template: dict[str, int] = {}

    for (tid, _slot, _c, _s), members in groups.items():
        vocab = TEMPLATES[tid].vocab
        gt = np.array([vocab.index(p.ground_truth) for _, p in members])
        goal = np.zeros((len(vocab), len(members)))
        goal[gt, np.arange(len(members))] = 1.0
        truths = [np.array([oracle_answer(sc, q) for sc, _ in members]) for q in QUERY_ACTIONS]
        liks = [_likelihood(truths[i], q.vocab, epsilon) for i, q in enumerate(QUERY_ACTIONS)]
        informative = [i for i in range(len(QUERY_ACTIONS)) if len(set(truths[i].tolist())) > 1]

        def value(weights: np.ndarray, asked: frozenset, depth: int) -> float:
            nonlocal evaluations
            evaluations += 1
            if evaluations > budget:
                raise StrategyBudgetExceeded(f"more than {budget} strategy nodes")
            best = float((goal @ weights).max())
            if depth == 0:
                return best
            for qi in informative:
                if qi in asked:
                    continue
                total = 0.0
                for row in liks[qi]:
                    w = weights * row
                    if w.sum() > 0.0:
                        total += value(w, asked | {qi}, depth - 1)
                best = max(best, total)
            return best

        v = value(np.ones(len(members)), frozenset(), t)
        correct_by_template[tid] = correct_by_template.get(tid, 0.0) + v
        count_by_template[tid] = count_by_template.get(tid, 0) + len(members)

    overall = sum(correct_by_template.values()) / len(problems)
    if per_template:
        return overall, {k: correct_by_template[k] / count_by_template[k] for k in correct_by_template}
    return overall


def strategy_accuracy(
    problems: Sequence[tuple[Scene, Problem]],
    strategy,
    epsilon: float,
) -> float:
    """Expected accuracy of an explicit strategy, by enumerating every noise outcome.

    ``strategy(problem, caption, history) -> QueryAction | str``: a query to ask, or
    a final answer token. Used to cross-check the expectimax oracle.
    """
    total = 0.0
    for scene, prob in problems:

        def walk(history: tuple[DialogueTurn, ...], prob_mass: float) -> float:
            move = strategy(prob, caption(scene), history)
            if isinstance(move, str):
                return prob_mass * (move == prob.ground_truth)
            prior = {t.query: t.answer for t in history}
            if move in prior:
                return walk(history + (DialogueTurn(move, prior[move]),), prob_mass)
            truth = oracle_answer(scene, move)
            acc = 0.0
            for tok in move.vocab:
                if len(move.vocab) == 1:
                    p = 1.0
                else:
                    p = (1.0 - epsilon) if tok == truth else epsilon / (len(move.vocab) - 1)
                if p > 0.0:
                    acc += walk(history + (DialogueTurn(move, tok),), prob_mass * p)
            return acc

        total += walk((), 1.0)
    return total / len(problems)


def all_strategies_ceiling(problems, t: int, epsilon: float) -> float:
    """Slow enumeration of every non-adaptive query sequence plus Bayes decoding.

    Only valid as an oracle for t <= 1 (adaptivity is irrelevant there); kept for
    cross-checking ``brute_force_ceiling`` on small sets.
    """
    if t > 1:
        raise ValueError("enumeration oracle supports t <= 1")
    groups: dict[tuple, list] = {}
    for scene, prob in problems:
        first = scene.objects[0]
        groups.setdefault((prob.template_id, prob.slots[0], first.color, first.shape), []).append((scene, prob))
    total = 0.0
    for (tid, *_), members in groups.items():
        vocab = TEMPLATES[tid].vocab
        best = 0.0
        seqs = [()] + [(q,) for q in QUERY_ACTIONS] if t == 1 else [()]
        for seq in seqs:
            # joint mass of (observed answers, ground truth), noise enumerated
            joint: dict[tuple, np.ndarray] = {}
            for scene, prob in members:
                outcomes = [((), 1.0)]
                for q in seq:
                    truth = oracle_answer(scene, q)
                    nxt = []
                    for obs, p in outcomes:
                        for tok in q.vocab:
                            pt = (1 - epsilon) if tok == truth else epsilon / (len(q.vocab) - 1)
                            nxt.append((obs + (tok,), p * pt))
                    outcomes = nxt
                for obs, p in outcomes:
                    joint.setdefault(obs, np.zeros(len(vocab)))[vocab.index(prob.ground_truth)] += p
            best = max(best, sum(v.max() for v in joint.values()))
        total += best
    return total / len(problems)


def answer_token_set() -> tuple[str, ...]:
    seen: list[str] = []
    for tok in itertools.chain(COLORS, SHAPES, SIZES, COUNTS, (NONE,)):
        if tok not in seen:
            seen.append(tok)
    return tuple(seen)


ANSWER_TOKENS = answer_token_set()
