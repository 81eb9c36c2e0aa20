"""``mutual-eend`` command line.

Commands compose through files only: a corpus directory, checkpoints and
RTTM files.  Every command writes ``run_manifest.json`` into its output
directory before doing any work.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import platform
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .corpus import load_split
from .experiment import ExperimentResult, directional_checks, run_experiment
from .model import EEND
from .report import render
from .scoring import (DEFAULT_COLLAR, DERReport, der, evaluate_grid, posteriors_to_annotation,
                      read_rttm, write_rttm)
from .simulate import CorpusConfig, generate_corpus
from .training import (TrainConfig, TrainLog, config_from_dict, distill_round, finetune_round,
                       parse_config_text, train_baseline)

log = logging.getLogger("mutual_eend")

# keys of a run config that configure the simulator; ``corpus_seed`` maps to its seed
CORPUS_KEYS = {f.name: f.name for f in dataclasses.fields(CorpusConfig) if f.name != "seed"}
CORPUS_KEYS["corpus_seed"] = "seed"


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    corpus: CorpusConfig
    train: TrainConfig
    rounds: int = 2
    seeds: tuple = (0,)


def preset_path(name: str = "demo") -> Path:
    return Path(str(resources.files("mutual_eend") / "presets" / f"{name}.conf"))


def load_run_config(path=None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    corpus_kinds = {f.name: f.type for f in dataclasses.fields(CorpusConfig)}
    corpus, train = {}, {}
    rounds, seeds = 2, None
    for key, value in values.items():
        if key in CORPUS_KEYS:
            name = CORPUS_KEYS[key]
            kind = {"int": int, "float": float}[corpus_kinds[name]]
            corpus[name] = kind(value)
        elif key == "rounds":
            rounds = int(value)
        elif key == "seeds":
            seeds = tuple(int(s) for s in value.split(","))
        else:
            train[key] = value
    tcfg = config_from_dict(train)
    return RunConfig(CorpusConfig(**corpus), tcfg, rounds, seeds or (tcfg.seed,))


def _build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, args, rc: RunConfig, argv) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config_path": str(Path(args.config).resolve()) if args.config else None,
        "resolved": {
            "train": dataclasses.asdict(rc.train),
            "corpus": dataclasses.asdict(rc.corpus),
            "rounds": rc.rounds,
            "seeds": list(rc.seeds),
        },
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()},
        "seed": rc.train.seed,
        "build": _build_id(),
        "python": platform.python_version(),
        "output_dir": str(out.resolve()),
        "started": _now(),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _finish_manifest(path: Path, status: str) -> None:
    manifest = json.loads(path.read_text())
    manifest["finished"] = _now()
    manifest["status"] = status
    path.write_text(json.dumps(manifest, indent=2))


def config_from_manifest(resolved: dict) -> RunConfig:
    return RunConfig(CorpusConfig(**resolved["corpus"]),
                     config_from_dict(resolved["train"]), resolved["rounds"],
                     tuple(resolved["seeds"]))


def _replay_args(args, parser):
    """Rebuild the namespace and resolved config recorded in a run manifest."""
    manifest = json.loads(_require(args.manifest, "run manifest").read_text())
    recorded = manifest["arguments"]
    replayed = parser.parse_args([recorded["command"], *_positionals(recorded)])
    for key, value in recorded.items():
        setattr(replayed, key, value)
    replayed.out = args.out or Path(manifest["output_dir"])
    replayed.config = None
    replayed.replayed_from = str(Path(args.manifest).resolve())
    return replayed, config_from_manifest(manifest["resolved"])


def _positionals(recorded: dict) -> list:
    if recorded["command"] == "eval":
        return [recorded["checkpoint"], recorded["corpus"]]
    if recorded["command"] == "score":
        return [recorded["ref"], recorded["hyp"]]
    if recorded["command"] == "train":
        return ["--mode", recorded["mode"]]
    if recorded["command"] == "distill":
        return ["--teacher", recorded["teacher"]]
    if recorded["command"] == "finetune":
        return ["--init", recorded["init"]]
    return []


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _corpus(args, rc: RunConfig, out: Path) -> Path:
    if args.corpus:
        return _require(args.corpus, "corpus directory")
    target = out / "corpus"
    if not (target / "train" / "manifest.txt").exists():
        log.info("simulating corpus into %s", target)
        generate_corpus(rc.corpus, target)
    return target


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args, rc, out):
    path = generate_corpus(rc.corpus, out)
    print(f"corpus written to {path} ({rc.corpus.n_train} train, {rc.corpus.n_eval} eval)")


def _save_training(result, out: Path, train_log: TrainLog, name: str) -> None:
    result.model.save(out / name)
    train_log.write_csv(out / "train_log.csv")
    print(f"{out / name}: best epoch {result.best_epoch}, validation loss "
          f"{result.best_val_loss:.6f}")


def cmd_train(args, rc, out):
    sessions = load_split(_corpus(args, rc, out), "train", rc.train.n_speakers)
    train_log = TrainLog()
    result = train_baseline(sessions, rc.train, args.mode, train_log)
    _save_training(result, out, train_log, f"{args.mode}.ckpt")


def cmd_distill(args, rc, out):
    teacher_path = _require(args.teacher, "teacher checkpoint")
    sessions = load_split(_corpus(args, rc, out), "train", rc.train.n_speakers)
    teacher = EEND.load(teacher_path, rc.train.model_config(sessions[0].features.shape[1]))
    train_log = TrainLog()
    result = distill_round(sessions, teacher, rc.train, "distill", train_log)
    _save_training(result, out, train_log, "student.ckpt")


def cmd_finetune(args, rc, out):
    init_path = _require(args.init, "initial checkpoint")
    sessions = load_split(_corpus(args, rc, out), "train", rc.train.n_speakers)
    init = EEND.load(init_path, rc.train.model_config(sessions[0].features.shape[1]))
    train_log = TrainLog()
    result = finetune_round(sessions, init, rc.train, "finetune", train_log)
    _save_training(result, out, train_log, "finetuned.ckpt")


def _experiment_worker(job):
    corpus_dir, train_cfg, rounds, out_dir, threads = job
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    with threadpool_limits(limits=threads):
        train = load_split(corpus_dir, "train", train_cfg.n_speakers)
        evals = load_split(corpus_dir, "eval", train_cfg.n_speakers)
        return run_experiment(train, evals, train_cfg, rounds, out_dir).to_dict()


def cmd_mutual(args, rc, out):
    corpus = _corpus(args, rc, out)
    rounds = args.rounds if args.rounds is not None else rc.rounds
    if rounds < 0:
        raise UsageError("--rounds must be >= 0")
    seeds = (args.seed,) if args.seed is not None else rc.seeds
    jobs = [(str(corpus), rc.train.replace(seed=s), rounds, str(out / f"seed{s}"), 1)
            for s in seeds]
    workers = max(1, min(args.threads or 1, len(jobs)))
    if workers == 1:
        dicts = [_experiment_worker(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            dicts = list(pool.map(_experiment_worker, jobs))
    results = [ExperimentResult.from_dict(d) for d in dicts]
    checks = directional_checks(results) if rounds >= 1 else []
    render(results, checks, out, [(s, out / f"seed{s}" / "train_log.csv") for s in seeds])
    print((out / "table.txt").read_text(), end="")


def cmd_eval(args, rc, out):
    ckpt = _require(args.checkpoint, "checkpoint")
    split_dir = _require(args.corpus, "corpus directory")
    sessions = load_split(split_dir, args.split, rc.train.n_speakers)
    model = EEND.load(ckpt, rc.train.model_config(sessions[0].features.shape[1]))
    channels = args.channels or sessions[0].features.shape[0]
    if channels > sessions[0].features.shape[0]:
        raise UsageError(f"--channels {channels} exceeds the corpus's "
                         f"{sessions[0].features.shape[0]} channels")
    result = evaluate_grid(model, sessions, [channels], collar=args.collar)[
        (channels, args.median)]
    hyps = {s.session_id: posteriors_to_annotation(model.infer(s.features[None, :channels])[0],
                                                   args.median)
            for s in sessions}
    write_rttm(out / "hyp.rttm", hyps)
    report = {"checkpoint": str(ckpt), "channels": channels, "median": args.median,
              "collar": args.collar, "aggregate": result.aggregate.to_dict(),
              "sessions": {k: v.to_dict() for k, v in result.sessions.items()}}
    (out / "eval.json").write_text(json.dumps(report, indent=2))
    print(f"DER {100 * result.der:.2f}% over {len(sessions)} sessions "
          f"({channels} ch{', median' if args.median else ''})")


def cmd_score(args, rc, out):
    refs = read_rttm(_require(args.ref, "reference RTTM"), "reference")
    hyps = read_rttm(_require(args.hyp, "hypothesis RTTM"), "hypothesis")
    if not refs:
        raise UsageError(f"no SPEAKER lines in {args.ref}")
    reports = {}
    for file_id, ref in refs.items():
        hyp = hyps.get(file_id)
        if hyp is None:
            hyp = type(ref)({}, "hypothesis")
        reports[file_id] = der(ref, hyp, args.collar)
    total = DERReport.pooled(reports.values())
    for file_id, r in reports.items():
        print(f"{file_id}\t{r.der:.3f}")
    print(f"TOTAL\t{total.der:.3f}\tmiss {total.miss_seconds:.3f}s  fa "
          f"{total.falsealarm_seconds:.3f}s  conf {total.confusion_seconds:.3f}s  scored "
          f"{total.scored_speech_seconds:.3f}s")
    (out / "score.json").write_text(json.dumps(
        {"total": total.to_dict(), "files": {k: v.to_dict() for k, v in reports.items()}},
        indent=2))


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "distill": cmd_distill,
            "finetune": cmd_finetune, "mutual": cmd_mutual, "eval": cmd_eval,
            "score": cmd_score}  # plus ``replay``, handled in main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (see presets/demo.conf)")
    common.add_argument("--seed", type=int, help="master seed; overrides the config")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mutual-eend", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="write a synthetic corpus")
    p = sub.add_parser("train", parents=[common], help="train a baseline model")
    p.add_argument("--mode", choices=("single", "multi"), required=True)
    p.add_argument("--corpus")
    p = sub.add_parser("distill", parents=[common], help="distill a single-channel student")
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus")
    p = sub.add_parser("finetune", parents=[common], help="multi-channel finetuning")
    p.add_argument("--init", required=True)
    p.add_argument("--corpus")
    p = sub.add_parser("mutual", parents=[common], help="full mutual-learning experiment")
    p.add_argument("--rounds", type=int)
    p.add_argument("--corpus")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a corpus split")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--split", default="eval")
    p.add_argument("--channels", type=int)
    p.add_argument("--median", action="store_true")
    p.add_argument("--collar", type=float, default=DEFAULT_COLLAR)
    p = sub.add_parser("score", parents=[common], help="DER between two RTTM files")
    p.add_argument("ref")
    p.add_argument("hyp")
    p.add_argument("--collar", type=float, default=DEFAULT_COLLAR)
    p = sub.add_parser("replay", help="re-run a command from its run_manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", type=Path, help="output directory (default: the recorded one)")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    replayed = None
    if args.command == "replay":
        try:
            args, replayed = _replay_args(args, parser)
        except (UsageError, KeyError, ValueError) as exc:
            parser.error(f"cannot replay: {exc}")
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "mutual"
                        else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        if args.config:
            _require(args.config, "config file")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if getattr(args, "collar", 0.0) < 0:
            raise UsageError("--collar must be >= 0")
        if getattr(args, "channels", None) is not None and args.channels < 1:
            raise UsageError("--channels must be >= 1")
        rc = replayed or load_run_config(args.config)
    except UsageError as exc:
        parser.error(str(exc))
    except ValueError as exc:
        parser.error(f"bad config: {exc}")
    if args.seed is not None and replayed is None:
        rc.train = rc.train.replace(seed=args.seed)
        if args.command == "simulate":
            rc.corpus = dataclasses.replace(rc.corpus, seed=args.seed)
    out = Path(args.out) if args.out is not None else Path(f"runs/{args.command}")
    manifest = write_manifest(out, args, rc, argv)
    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, rc, out)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # runtime failure: diagnostic and exit 1
        log.debug("failure", exc_info=True)
        print(f"mutual-eend {args.command}: error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        _finish_manifest(manifest, "failed")
        return 1
    _finish_manifest(manifest, "ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
