"""Command-line entry point: data generation, training, evaluation and inspection.

Exit codes: 0 success, 2 usage error, 3 data validation failure, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sceneworld as sw
from .agents import (
    OracleObserver,
    OracleReasoner,
    PolicyObserver,
    PolicyReasoner,
    new_observer_policy,
    new_reasoner_policy,
)
from .evaluation import AblationTable, EvalReport, ablate_turns, evaluate, held_out_instances
from .policy import CorruptCheckpoint, PolicyBundle, atomic_write_text
from .protocol import HARD_TURN_CAP, EpisodeConfig, EpisodeTranscript, run_episode, write_transcripts
from .training import (
    NonFiniteRatio,
    RLConfig,
    RunDirectory,
    SLConfig,
    TrainingDiverged,
    build_sl_corpus,
    clone_bundle,
    observer_sl_data,
    reasoner_sl_data,
    train_alternating,
)

__all__ = ["main", "EvalReport", "AblationTable"]

logger = logging.getLogger("monologue")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- data files --------------------------------------------------------------------


def read_records(path: str | Path) -> list[sw.RationaleRecord]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    out = []
    for i, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(sw.RationaleRecord.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{p}:{i}: {exc}") from exc
    return out


def write_records(path: str | Path, records: Sequence[sw.RationaleRecord]) -> None:
    atomic_write_text(path, "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records))


def load_bundle(source: str, role: str) -> PolicyBundle | str:
    """A checkpoint path, or one of the built-in agents 'oracle' and 'uniform'."""
    if source in ("oracle", "uniform"):
        return source
    p = Path(source)
    if not p.exists():
        raise UsageError(f"{role} checkpoint not found: {p}")
    try:
        bundle = PolicyBundle.load(p)
    except (CorruptCheckpoint, ValueError, KeyError) as exc:
        raise DataError(f"{p}: {exc}") from exc
    if bundle.role != role:
        raise DataError(f"{p} holds a {bundle.role} policy, expected {role}")
    return bundle


def make_agents(args) -> tuple[object, object]:
    r = load_bundle(args.ckpt_reasoner, "reasoner")
    o = load_bundle(args.ckpt_observer, "observer")
    temp = args.temperature
    if r == "oracle":
        reasoner = OracleReasoner()
    else:
        reasoner = PolicyReasoner(new_reasoner_policy() if r == "uniform" else r, temp)
    if o == "oracle":
        observer = OracleObserver(args.epsilon)
    else:
        observer = PolicyObserver(new_observer_policy() if o == "uniform" else o, args.epsilon, temp)
    return reasoner, observer


def out_path(args, name: str) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


# --- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.scenes <= 0:
        raise UsageError("--scenes must be positive")
    instances = sw.generate_instances(args.scenes, args.seed)
    records = []
    for scene, prob in instances:
        if not sw.is_solvable(scene, prob):
            raise DataError(f"generated problem on {scene.id} fails the solvability check")
        records.append(sw.RationaleRecord(scene, prob, sw.make_rationale(scene, prob)))
    path = Path(args.out) if args.out else out_path(args, "dataset.jsonl")
    write_records(path, records)
    meta = {"scenes": args.scenes, "seed": args.seed, "epsilon": args.epsilon}
    atomic_write_text(str(path) + ".meta.json", json.dumps(meta, sort_keys=True) + "\n")
    print(f"wrote {len(records)} records to {path}")
    return EXIT_OK


def cmd_convert_rationale(args) -> int:
    src = Path(args.inp)
    if not src.exists():
        raise DataError(f"no such file: {src}")
    converted, rejects = [], []
    for i, line in enumerate(src.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = sw.convert_rationale(sw.RationaleRecord.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            rejects.append({"line": i, "reason": f"{type(exc).__name__}: {exc}", "raw": line})
            continue
        if not sw.dialogue_consistent(rec.scene, rec.gold_dialogue):
            rejects.append({"line": i, "reason": "dialogue contradicts the scene", "raw": line})
            continue
        converted.append(rec)
    dst = Path(args.out) if args.out else out_path(args, "converted.jsonl")
    write_records(dst, converted)
    rej_path = Path(str(dst) + ".rejects.jsonl")
    atomic_write_text(rej_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rejects))
    print(f"converted {len(converted)} records, rejected {len(rejects)} (see {rej_path})")
    return EXIT_OK


def cmd_train_sl(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.data:
        records = read_records(args.data)
        bad = [r for r in records if r.gold_dialogue is None]
        if bad:
            raise DataError(f"{len(bad)} records lack gold_dialogue; run convert-rationale first")
        singles = sw.generate_instances(len(records), args.seed + 1)
    else:
        records, singles = build_sl_corpus(args.scenes, args.seed)
    if not records:
        raise DataError("no training records")
    cfg = SLConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed)
    reasoner, observer = new_reasoner_policy(), new_observer_policy()
    curves = {
        "reasoner": clone_bundle(reasoner, reasoner_sl_data(records, singles), cfg),
        "observer": clone_bundle(observer, observer_sl_data(records, rng), cfg),
    }
    run = RunDirectory(args.out_dir)
    atomic_write_text(run.path / "sl_config.json", json.dumps({"sl": vars(cfg), "records": len(records)}, sort_keys=True, indent=2) + "\n")
    atomic_write_text(run.path / "sl_losses.json", json.dumps(curves, sort_keys=True) + "\n")
    reasoner.save(run.path / "reasoner_sl.json")
    observer.save(run.path / "observer_sl.json")
    print(f"saved SL checkpoints to {run.path}")
    return EXIT_OK


def cmd_train_rl(args) -> int:
    run = RunDirectory(args.out_dir)
    init_r = Path(args.init_reasoner) if args.init_reasoner else run.path / "reasoner_sl.json"
    init_o = Path(args.init_observer) if args.init_observer else run.path / "observer_sl.json"
    if args.from_scratch:
        reasoner, observer = new_reasoner_policy(), new_observer_policy()
    else:
        if not (init_r.exists() and init_o.exists()):
            raise UsageError(f"initial checkpoints {init_r} / {init_o} not found; run train-sl or pass --from-scratch")
        reasoner, observer = load_bundle(str(init_r), "reasoner"), load_bundle(str(init_o), "observer")
    cfg = RLConfig(
        num_epochs=args.epochs,
        episodes_per_epoch=args.episodes,
        max_turns=args.turns,
        beta=args.beta,
        clip_ratio=args.clip,
        ppo_epochs_per_batch=args.ppo_epochs,
        learning_rate=args.lr,
        baseline=args.baseline,
        epsilon=args.epsilon,
        seed=args.seed,
    )
    problems = sw.generate_instances(args.problems, args.seed)
    eval_fn = None
    if args.eval_n > 0:
        held = held_out_instances(args.eval_n, args.seed)

        def eval_fn(r, o):
            return evaluate(PolicyReasoner(r), PolicyObserver(o, cfg.epsilon), held, cfg.max_turns, cfg.epsilon, args.seed).accuracy

    reasoner, observer, metrics = train_alternating(reasoner, observer, problems, cfg, eval_fn, run, resume=args.resume)
    reasoner.save(run.path / "reasoner_final.json")
    observer.save(run.path / "observer_final.json")
    last = metrics[-1] if metrics else None
    if last is not None:
        print(f"epoch {last.epoch}: mean_r={last.mean_r:.4f} mean_R={last.mean_R:.4f} mean_kl={last.mean_kl:.5f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.n <= 0:
        raise UsageError("--n must be positive")
    reasoner, observer = make_agents(args)
    report = evaluate(reasoner, observer, held_out_instances(args.n, args.seed), args.turns, args.epsilon, args.seed, keep_transcripts=True)
    atomic_write_text(out_path(args, "eval_report.json"), json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    write_transcripts(args.transcripts or out_path(args, "eval_transcripts.jsonl"), report.transcripts)
    print(f"accuracy {report.accuracy:.4f} ({report.correct}/{report.n}) turns={report.turns} epsilon={report.epsilon}")
    for tid, acc in report.per_template.items():
        print(f"  {tid:<14} {acc:.4f}")
    return EXIT_OK


def parse_turns(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..")
        vals = list(range(int(lo), int(hi) + 1))
    else:
        vals = [int(v) for v in text.split(",") if v.strip()]
    if not vals or any(not 0 <= v <= HARD_TURN_CAP for v in vals):
        raise UsageError(f"invalid turn list {text!r}")
    return sorted(set(vals))


def cmd_ablate_turns(args) -> int:
    reasoner, observer = make_agents(args)
    seeds = [args.seed + i for i in range(args.seeds)]
    table = ablate_turns(reasoner, observer, parse_turns(args.turns), seeds, args.n, args.epsilon)
    atomic_write_text(out_path(args, "ablation.csv"), table.to_csv())
    print(table.render())
    return EXIT_OK


def render_transcript(tr: EpisodeTranscript, beta: float) -> str:
    lines = [f"problem:  {tr.problem.surface}", f"caption:  {tr.im.caption.text}"]
    for i, (q, a) in enumerate(tr.im.pairs(), 1):
        lines.append(f"Q{i}:       {q.text}")
        lines.append(f"A{i}:       {a.text}")
    rw = tr.reward
    lines += [
        f"final:    {tr.final_answer.text}",
        f"truth:    {tr.ground_truth}",
        f"reward:   r={rw.r} kl_term={rw.kl_term:.6f} R={rw.R:.6f} (beta={beta})",
    ]
    return "\n".join(lines)


def cmd_run(args) -> int:
    reasoner, observer = make_agents(args)
    if args.scene_id:
        if not args.data:
            raise UsageError("--scene-id needs --data to look the scene up")
        matches = [r for r in read_records(args.data) if r.scene.id == args.scene_id]
        if not matches:
            raise DataError(f"scene {args.scene_id} not in {args.data}")
        scene, prob = matches[0].scene, matches[0].problem
    else:
        scene, prob = held_out_instances(1, args.seed)[0]
    tr = run_episode(reasoner, observer, prob, scene, EpisodeConfig(args.turns, args.seed))
    print(render_transcript(tr, beta=0.0))
    if args.transcript:
        write_transcripts(args.transcript, [tr])
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def _agent_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt-reasoner", required=True, help="checkpoint path, or 'oracle' / 'uniform'")
    p.add_argument("--ckpt-observer", required=True, help="checkpoint path, or 'oracle' / 'uniform'")
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--temperature", type=float, default=None, help="sampling temperature override")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="runs")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="monologue", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate scenes, problems and rationales")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("convert-rationale", parents=[common], help="rewrite rationales into gold dialogues")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_convert_rationale)

    p = sub.add_parser("train-sl", parents=[common], help="behavior cloning on gold dialogues")
    p.add_argument("--data", help="converted dataset; generated on the fly when omitted")
    p.add_argument("--scenes", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_train_sl)

    p = sub.add_parser("train-rl", parents=[common], help="alternating PPO")
    p.add_argument("--init-reasoner")
    p.add_argument("--init-observer")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--episodes", type=int, default=1024)
    p.add_argument("--turns", type=int, default=2)
    p.add_argument("--beta", type=float, default=0.02)
    p.add_argument("--clip", type=float, default=0.2)
    p.add_argument("--ppo-epochs", type=int, default=4)
    p.add_argument("--lr", type=float, default=100.0)
    p.add_argument("--baseline", choices=["mean", "per_state"], default="mean")
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--problems", type=int, default=4000)
    p.add_argument("--eval-n", type=int, default=0, help="held-out episodes evaluated after every epoch")
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("eval", parents=[common], help="held-out accuracy")
    _agent_flags(p)
    p.add_argument("--turns", type=int, default=2)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--transcripts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-turns", parents=[common], help="accuracy against the turn budget")
    _agent_flags(p)
    p.add_argument("--turns", default="0..5")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--n", type=int, default=1000)
    p.set_defaults(func=cmd_ablate_turns)

    p = sub.add_parser("run", parents=[common], help="render one episode")
    _agent_flags(p)
    p.add_argument("--turns", type=int, default=2)
    p.add_argument("--scene-id")
    p.add_argument("--data")
    p.add_argument("--transcript")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorruptCheckpoint) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteRatio) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
