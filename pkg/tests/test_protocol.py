import json

import numpy as np
import pytest

from monologue import sceneworld as sw
from monologue.agents import (
    OracleObserver,
    OracleReasoner,
    PolicyObserver,
    PolicyReasoner,
    ScriptedReasoner,
    SpyObserver,
    SpyReasoner,
    new_observer_policy,
    new_reasoner_policy,
)
from monologue.protocol import (
    AgentError,
    AnswerOutOfVocabulary,
    EmptyUtterance,
    EpisodeConfig,
    EpisodeContext,
    EpisodeTranscript,
    InnerMonologue,
    Kind,
    MonologueError,
    Speaker,
    Utterance,
    finalize,
    init_monologue,
    observer_says,
    read_transcripts,
    reasoner_says,
    run_episode,
    run_turn,
    write_transcripts,
)
from monologue.sceneworld import ObjectSpec, Scene


def make_scene(*objs):
    return Scene.from_objects(ObjectSpec(shape, color, size, pos) for pos, (shape, color, size) in enumerate(objs))


@pytest.fixture
def blue_square_scene():
    return make_scene(("circle", "red", "small"), ("square", "blue", "large"), ("triangle", "green", "small"))


@pytest.fixture
def color_problem(blue_square_scene):
    return sw.instantiate(blue_square_scene, "color_of", "square")


class EmptyCaptionObserver(OracleObserver):
    def caption(self, scene, *, episode):
        return Utterance(Speaker.OBSERVER, Kind.CAPTION, "")


class FailingObserver(OracleObserver):
    def answer(self, scene, query, *, episode):
        raise TimeoutError("endpoint went away")


class OffVocabReasoner(OracleReasoner):
    def final_answer(self, problem, im, *, episode):
        return reasoner_says(Kind.FINAL_ANSWER, "purple")


# --- utterances and monologues --------------------------------------------------------


@pytest.mark.parametrize(
    "speaker,kind",
    [(Speaker.REASONER, Kind.CAPTION), (Speaker.REASONER, Kind.ANSWER), (Speaker.OBSERVER, Kind.QUERY), (Speaker.OBSERVER, Kind.FINAL_ANSWER)],
)
def test_speaker_kind_pairing(speaker, kind):
    with pytest.raises(MonologueError):
        Utterance(speaker, kind, "text")


@pytest.mark.parametrize("text", ["", "   "])
def test_empty_text_rejected(text):
    with pytest.raises(EmptyUtterance):
        observer_says(Kind.ANSWER, text)


def test_monologue_requires_caption_first():
    with pytest.raises(MonologueError):
        InnerMonologue((reasoner_says(Kind.QUERY, "q"), observer_says(Kind.ANSWER, "a")))


def test_monologue_requires_alternation():
    cap = observer_says(Kind.CAPTION, "c")
    q = reasoner_says(Kind.QUERY, "q")
    with pytest.raises(MonologueError):
        InnerMonologue((cap, q, q))
    with pytest.raises(MonologueError):
        InnerMonologue((cap, q))


def test_monologue_json_round_trip():
    im = InnerMonologue((observer_says(Kind.CAPTION, "c"), reasoner_says(Kind.QUERY, "q", 3), observer_says(Kind.ANSWER, "a")))
    assert InnerMonologue.from_list(json.loads(json.dumps(im.to_list()))) == im


@pytest.mark.parametrize("t", [-1, 9])
def test_episode_config_bounds(t):
    with pytest.raises(ValueError):
        EpisodeConfig(max_turns=t)


# --- init_monologue / run_turn / finalize -----------------------------------------------


def test_init_monologue_caption(blue_square_scene):
    im = init_monologue(OracleObserver(), blue_square_scene)
    assert len(im) == 1
    assert im.caption.text == "a scene with 3 objects including a red circle"


def test_init_monologue_empty_caption(blue_square_scene):
    with pytest.raises(EmptyUtterance):
        init_monologue(EmptyCaptionObserver(), blue_square_scene)


def test_run_turn_lengths_and_prefix(blue_square_scene, color_problem):
    reasoner = ScriptedReasoner([sw.ask_color_of("square")])
    im0 = init_monologue(OracleObserver(), blue_square_scene)
    im1 = run_turn(reasoner, OracleObserver(), color_problem, blue_square_scene, im0)
    im2 = run_turn(reasoner, OracleObserver(), color_problem, blue_square_scene, im1)
    assert (len(im0), len(im1), len(im2)) == (1, 3, 5)
    assert im2.entries[:3] == im1.entries
    assert im1.entries[2].text == "blue"


def test_run_turn_respects_budget(blue_square_scene, color_problem):
    reasoner = ScriptedReasoner([sw.ask_color_of("square")])
    im = init_monologue(OracleObserver(), blue_square_scene)
    im = run_turn(reasoner, OracleObserver(), color_problem, blue_square_scene, im, max_turns=1)
    with pytest.raises(MonologueError):
        run_turn(reasoner, OracleObserver(), color_problem, blue_square_scene, im, max_turns=1)


def test_run_turn_attaches_turn_index(blue_square_scene, color_problem):
    reasoner = ScriptedReasoner([sw.ask_color_of("square")])
    im = init_monologue(OracleObserver(), blue_square_scene)
    im = run_turn(reasoner, OracleObserver(), color_problem, blue_square_scene, im)
    with pytest.raises(AgentError) as info:
        run_turn(reasoner, FailingObserver(), color_problem, blue_square_scene, im)
    assert info.value.turn == 2 and info.value.role == "Observer"
    assert isinstance(info.value.cause, TimeoutError)


def test_finalize_caption_only(blue_square_scene):
    problem = sw.instantiate(blue_square_scene, "color_of", "circle")
    im = init_monologue(OracleObserver(), blue_square_scene)
    a_f = finalize(OracleReasoner(), problem, im)
    assert a_f.kind is Kind.FINAL_ANSWER and a_f.text == "red"


def test_finalize_scripted_constant(blue_square_scene, color_problem):
    im = init_monologue(OracleObserver(), blue_square_scene)
    assert finalize(ScriptedReasoner([sw.ask_count("circle")], "red"), color_problem, im).text == "red"


def test_finalize_out_of_vocabulary(blue_square_scene, color_problem):
    im = init_monologue(OracleObserver(), blue_square_scene)
    with pytest.raises(AnswerOutOfVocabulary):
        finalize(OffVocabReasoner(), color_problem, im)


def test_policy_finalize_deterministic(blue_square_scene, color_problem):
    reasoner = PolicyReasoner(new_reasoner_policy())
    im = init_monologue(OracleObserver(), blue_square_scene)
    answers = {finalize(reasoner, color_problem, im, EpisodeContext(77)).text for _ in range(5)}
    assert len(answers) == 1


# --- run_episode --------------------------------------------------------------------------


def test_episode_counts(blue_square_scene, color_problem):
    tr = run_episode(OracleReasoner(), OracleObserver(), color_problem, blue_square_scene, EpisodeConfig(2, 5))
    assert len(tr.im) == 5
    assert len(tr.steps_for("reasoner")) == 3 and len(tr.steps_for("observer")) == 3


def test_two_hop_oracle_episode_correct():
    scene = make_scene(("triangle", "green", "large"), ("circle", "red", "small"))
    problem = sw.instantiate(scene, "color_left_of", "circle")
    tr = run_episode(OracleReasoner(), OracleObserver(), problem, scene, EpisodeConfig(2, 0))
    assert tr.reward.r == 1 and tr.reward.R == 1


def test_episode_byte_identical(blue_square_scene, color_problem):
    r, o = PolicyReasoner(new_reasoner_policy()), PolicyObserver(new_observer_policy(), 0.3)
    a = run_episode(r, o, color_problem, blue_square_scene, EpisodeConfig(3, 11)).to_json()
    b = run_episode(r, o, color_problem, blue_square_scene, EpisodeConfig(3, 11)).to_json()
    assert a == b


def test_failed_episode_raises(blue_square_scene, color_problem):
    with pytest.raises(AgentError):
        run_episode(OracleReasoner(), FailingObserver(), color_problem, blue_square_scene, EpisodeConfig(2, 0))


def test_transcript_format_fields(blue_square_scene, color_problem):
    tr = run_episode(OracleReasoner(), OracleObserver(), color_problem, blue_square_scene, EpisodeConfig(1, 0))
    d = json.loads(tr.to_json())
    assert set(d) == {"scene_id", "problem", "im", "final_answer", "ground_truth", "reward", "steps"}
    assert set(d["reward"]) == {"r", "kl", "R"}
    assert set(d["im"][0]) == {"speaker", "kind", "text", "action_id"}


def test_transcript_file_round_trip(tmp_path, blue_square_scene, color_problem):
    r, o = PolicyReasoner(new_reasoner_policy()), PolicyObserver(new_observer_policy(), 0.3)
    trs = [run_episode(r, o, color_problem, blue_square_scene, EpisodeConfig(2, s)) for s in range(3)]
    write_transcripts(tmp_path / "t.jsonl", trs)
    back = read_transcripts(tmp_path / "t.jsonl")
    assert [b.to_json() for b in back] == [t.to_json() for t in trs]
    np.testing.assert_array_equal(back[0].steps[1].features, trs[0].steps[1].features)


# --- invariants over random episodes ------------------------------------------------------


def check_episode(scene, problem, t, seed, epsilon):
    spy_o = SpyObserver(OracleObserver(epsilon))
    spy_r = SpyReasoner(PolicyReasoner(new_reasoner_policy()))
    tr = run_episode(spy_r, spy_o, problem, scene, EpisodeConfig(t, seed))
    violations = []
    if len(tr.im) != 1 + 2 * t:
        violations.append("length")
    queries = [c for c in spy_r.calls if c[0] == "query"]
    for i, (_, prob, im) in enumerate(queries):
        if prob != problem or len(im) != 1 + 2 * i or im.entries != tr.im.entries[: 1 + 2 * i]:
            violations.append(f"reasoner view at turn {i + 1}")
    final = [c for c in spy_r.calls if c[0] == "final"]
    if len(final) != 1 or final[0][2].entries != tr.im.entries:
        violations.append("final view")
    answers = [c for c in spy_o.calls if c[0] == "answer"]
    for i, (_, seen_scene, query) in enumerate(answers):
        if seen_scene != scene or query != tr.im.entries[1 + 2 * i]:
            violations.append(f"observer view at turn {i + 1}")
    if len(answers) != t or spy_o.calls[0][0] != "caption":
        violations.append("observer call pattern")
    return violations


def test_random_episode_invariants():
    rng = np.random.default_rng(0)
    instances = sw.generate_instances(200, 31)
    bad = []
    for i in range(200):
        scene, problem = instances[i]
        bad += check_episode(scene, problem, int(rng.integers(0, 6)), i, float(rng.choice([0.0, 0.3])))
    assert bad == []
