"""Command-line entry points: gen-data, train, eval, ablate, simulate, inspect-checkpoint.

Settings come from a key-value config file (``--config`` or $SUBGOAL_PLANNER_CONFIG), then
command-line flags, which win. Every command writes its resolved settings next to its outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, inspect_checkpoint, load_checkpoint, save_checkpoint
from .config import ABLATION_ROWS, ModelConfig, TrainConfig
from .dataset import (
    SPLITS,
    CorpusConfig,
    EpisodeError,
    EpisodeFormatError,
    generate_corpus,
    read_episodes,
    split_of,
    write_episodes,
)
from .encoders import ValidationError
from .simulator import (
    FailureInjector,
    PlannerPolicy,
    default_step_limit,
    recovery_policy,
    oracle_policy,
    recovery_rate,
    run_episode,
    write_trajectory,
)
from .trainer import (
    CHECKPOINT_NAME,
    TRACE_NAME,
    TrainingDiverged,
    ablation_grid,
    build_vocab,
    evaluate,
    format_ablation,
    format_reports,
    make_checkpoint,
    model_from_checkpoint,
    train,
)
from .world import SceneGenerationError

CONFIG_ENV = "SUBGOAL_PLANNER_CONFIG"
RESOLVED_NAME = "resolved_config.txt"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- key-value config ----------------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; dotted keys address nested settings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"config line {lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, current: Any):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def _set(obj, dotted: str, value: str):
    head, _, rest = dotted.partition(".")
    names = {f.name for f in dataclasses.fields(obj)}
    if head not in names:
        raise UsageError(f"unknown setting {dotted!r}")
    current = getattr(obj, head)
    if rest:
        if not dataclasses.is_dataclass(current):
            raise UsageError(f"{head!r} has no field {rest!r}")
        return dataclasses.replace(obj, **{head: _set(current, rest, value)})
    if dataclasses.is_dataclass(current):
        if head == "mask" and value in ABLATION_ROWS:
            return dataclasses.replace(obj, mask=ABLATION_ROWS[value])
        raise UsageError(f"{head!r} needs a sub-key")
    try:
        return dataclasses.replace(obj, **{head: _coerce(value, current)})
    except ValueError as exc:
        raise UsageError(f"bad value for {dotted}: {exc}") from None


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, prefix + f.name + "."))
        else:
            out[prefix + f.name] = value
    return out


@dataclasses.dataclass
class RunConfig:
    """Everything a command may read: training, corpus and simulation settings."""

    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    corpus: CorpusConfig = dataclasses.field(default_factory=CorpusConfig)
    step_limit: int = 0  # 0 means three times the ground-truth plan length

    def apply(self, settings: dict[str, str]) -> RunConfig:
        out = self
        for key, value in settings.items():
            # bare training keys (epochs, lr, model.d, mask...) are accepted without the prefix
            head = key.split(".", 1)[0]
            if head not in ("train", "corpus", "step_limit"):
                key = "train." + key
            out = _set(out, key, value)
        return out

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(
            self,
            train=dataclasses.replace(self.train, seed=seed),
            corpus=dataclasses.replace(self.corpus, seed=seed),
        )

    def to_text(self) -> str:
        lines = []
        for key, value in flatten(self).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        cfg = cfg.apply(parse_config_text(text))
    pairs = {}
    for kv in args.set or []:
        key, sep, value = kv.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
        pairs[key.strip()] = value.strip()
    cfg = cfg.apply(pairs)
    overrides = {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr": getattr(args, "lr", None),
        "mask": getattr(args, "mask", None),
        "step_limit": getattr(args, "step_limit", None),
    }
    cfg = cfg.apply({k: str(v) for k, v in overrides.items() if v is not None})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def write_resolved(cfg: RunConfig, out_dir: Path, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text()
    for key, value in (extra or {}).items():
        text += f"{key} = {value}\n"
    (out_dir / RESOLVED_NAME).write_text(text, encoding="utf-8")


# -- data helpers ------------------------------------------------------------------------


def split_path(data_dir: Path, split: str) -> Path:
    return data_dir / f"{split}.jsonl"


def load_corpus(data_dir, splits=SPLITS) -> list:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"corpus directory {data_dir} does not exist")
    episodes = []
    for split in splits:
        path = split_path(data_dir, split)
        if path.exists():
            episodes.extend(read_episodes(path))
    if not episodes:
        raise FileNotFoundError(f"no episode files in {data_dir}")
    return episodes


class OracleModel:
    """Stub whose logits put all mass on the ground-truth targets."""

    def __init__(self, vocab, max_len: int = 32):
        from .heads import Vocabs

        self.vocab = vocab
        self.vocabs = Vocabs()
        self.cfg = ModelConfig(max_len=max_len)

    def predict_batch(self, batch, mask=None):
        sizes = (len(self.vocabs.actions), len(self.vocabs.objects), len(self.vocabs.receptacles))
        out = []
        for head, n in enumerate(sizes):
            logits = np.zeros((batch.n_steps, n))
            logits[np.arange(batch.n_steps), batch.targets[:, head]] = 1.0
            out.append(logits)
        return tuple(out)


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# -- commands ------------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    corpus_cfg = cfg.corpus
    if args.scenes is not None:
        corpus_cfg = dataclasses.replace(corpus_cfg, n_scenes=args.scenes)
    if args.unseen is not None:
        corpus_cfg = dataclasses.replace(corpus_cfg, n_unseen=args.unseen)
    if args.episodes_per_scene is not None:
        corpus_cfg = dataclasses.replace(corpus_cfg, episodes_per_scene=args.episodes_per_scene)
    cfg = dataclasses.replace(cfg, corpus=corpus_cfg)
    episodes = generate_corpus(corpus_cfg)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in SPLITS:
        chosen = split_of(episodes, split)
        write_episodes(chosen, split_path(out, split))
        counts[split] = len(chosen)
    write_resolved(cfg, out)
    _emit(json.dumps({"episodes": counts, "steps": sum(len(e.steps) for e in episodes)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    corpus = load_corpus(args.data, ("train",))
    resume = None
    if args.resume:
        resume = load_checkpoint(out / CHECKPOINT_NAME)
    result = train(corpus, cfg.train, checkpoint_dir=out, resume=resume)
    if cfg.train.epochs == 0 or result.epochs_done == 0:
        meta = {"epoch": result.epochs_done, "step": 0, "train_config": cfg.train.to_dict()}
        save_checkpoint(out / CHECKPOINT_NAME, make_checkpoint(result.model, result.optimizer, meta))
    write_resolved(cfg, out, {"data": args.data})
    summary = {
        "epochs_done": result.epochs_done,
        "steps": result.trace[-1][0] if result.trace else 0,
        "epoch_losses": result.epoch_losses,
        "checkpoint": str(out / CHECKPOINT_NAME),
        "trace": str(out / TRACE_NAME),
    }
    _emit(json.dumps(summary, indent=2 if args.pretty else None, sort_keys=True))
    return EXIT_OK


def _load_model(args, corpus):
    if args.oracle:
        return OracleModel(build_vocab(split_of(corpus, "train") or corpus))
    if not args.checkpoint:
        raise UsageError("either --checkpoint or --oracle is required")
    return model_from_checkpoint(load_checkpoint(args.checkpoint))


def cmd_eval(args, cfg: RunConfig) -> int:
    corpus = load_corpus(args.data)
    model = _load_model(args, corpus)
    splits = args.split or [s for s in SPLITS if split_of(corpus, s)]
    reports = [evaluate(model, corpus, s, cfg.train.mask) for s in splits]
    text = format_reports(reports, args.pretty)
    if args.out:
        out = Path(args.out)
        write_resolved(cfg, out, {"data": args.data, "checkpoint": args.checkpoint or "oracle"})
        (out / "eval.json").write_text(json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=1))
    _emit(text)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    corpus = load_corpus(args.data)
    names = args.rows.split(",") if args.rows else list(ABLATION_ROWS)
    unknown = [n for n in names if n not in ABLATION_ROWS]
    if unknown:
        raise UsageError(f"unknown ablation rows {unknown}; choose from {sorted(ABLATION_ROWS)}")
    rows = ablation_grid(corpus, cfg.train, {n: ABLATION_ROWS[n] for n in names})
    text = format_ablation(rows, args.pretty)
    if args.out:
        out = Path(args.out)
        write_resolved(cfg, out, {"data": args.data, "rows": ",".join(names)})
        (out / "ablation.tsv").write_text(format_ablation(rows), encoding="utf-8")
        (out / "ablation.json").write_text(json.dumps([r.to_dict() for r in rows], sort_keys=True, indent=1))
    _emit(text)
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    corpus = load_corpus(args.data)
    episodes = split_of(corpus, args.split)
    if not episodes:
        raise FileNotFoundError(f"split {args.split} is empty in {args.data}")
    if args.episode is not None:
        if not 0 <= args.episode < len(episodes):
            raise UsageError(f"--episode must be in [0, {len(episodes)})")
        chosen = [episodes[args.episode]]
    else:
        rng = np.random.default_rng(cfg.train.seed)
        count = min(args.runs, len(episodes))
        chosen = [episodes[i] for i in sorted(rng.choice(len(episodes), size=count, replace=False))]
    model = None
    if args.policy == "model":
        if not args.checkpoint:
            raise UsageError("--policy model needs --checkpoint")
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    trajs = []
    for i, ep in enumerate(chosen):
        if args.policy == "model":
            policy = PlannerPolicy(model, cfg.train.mask)
        elif args.policy == "recovery":
            policy = recovery_policy(ep)
        else:
            policy = oracle_policy(ep)
        injector = FailureInjector.parse(args.inject or [], seed=int(cfg.train.seed) * 1000 + i)
        limit = cfg.step_limit or default_step_limit(len(ep.steps))
        traj = run_episode(policy, ep, injector, limit)
        trajs.append(traj)
        _emit(f"run={i} scene={ep.scene_id} {traj.summary()}")
    if args.inject:
        _emit(f"recovery_rate={recovery_rate(trajs):.4f}")
    if args.out:
        out = Path(args.out)
        write_resolved(cfg, out, {"data": args.data, "policy": args.policy, "inject": ",".join(args.inject or [])})
        write_trajectory(trajs, out / "trajectories.jsonl")
    return EXIT_OK


def cmd_inspect(args, cfg: RunConfig) -> int:
    info = inspect_checkpoint(args.checkpoint)
    if not args.params:
        info.pop("params")
    _emit(json.dumps(info, indent=2 if args.pretty else None, sort_keys=True))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="subgoal-planner", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, training=False):
        p.add_argument("--config", help=f"key-value config file (default: ${CONFIG_ENV})")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="the single source of randomness for this command")
        p.add_argument("--pretty", action="store_true", help="human-readable output")
        if training:
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--lr", type=float)
        p.add_argument("--mask", choices=sorted(ABLATION_ROWS), help="modality mask row")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int)
    p.add_argument("--unseen", type=int)
    p.add_argument("--episodes-per-scene", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a planner on the train split")
    common(p, training=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help=f"continue from OUT/{CHECKPOINT_NAME}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="teacher-forced accuracy per split")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="score a stub that always predicts the targets")
    p.add_argument("--split", action="append", choices=SPLITS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate one model per modality mask")
    common(p, training=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rows", help="comma-separated mask rows (default: all)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("simulate", help="closed-loop rollouts with failure injection")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--policy", choices=("model", "oracle", "recovery"), default="model")
    p.add_argument("--split", choices=SPLITS, default="valid_seen")
    p.add_argument("--episode", type=int)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--inject", action="append", metavar="KIND@STEP")
    p.add_argument("--step-limit", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint header summary")
    p.add_argument("checkpoint")
    p.add_argument("--pretty", action="store_true")
    p.add_argument("--params", action="store_true", help="list every tensor")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_run_config(args) if hasattr(args, "config") else RunConfig()
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, T.NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        OSError,
        EpisodeFormatError,
        EpisodeError,
        CheckpointError,
        ValidationError,
        SceneGenerationError,
        ValueError,
        KeyError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
