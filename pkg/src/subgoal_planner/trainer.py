"""Teacher-forced training, step-level evaluation and the modality ablation grid."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import OPTIM_PREFIX, Checkpoint, load_checkpoint, save_checkpoint
from .config import ABLATION_ROWS, ModalityMask, TrainConfig
from .dataset import Episode, split_of
from .heads import decode_batch
from .model import PlannerModel, collate, encode_episode
from .vocab import TextVocab

HEADS = ("action", "object", "receptacle")
CHECKPOINT_NAME = "last.ckpt"
TRACE_NAME = "loss_trace.csv"


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, step: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, optimiser step {step}: {detail}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainResult:
    model: PlannerModel
    optimizer: T.Adam
    trace: list[tuple[int, float]] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epochs_done: int = 0


def build_vocab(episodes: Iterable[Episode]) -> TextVocab:
    return TextVocab.build(ep.instruction for ep in episodes)


def batch_plan(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle episodes and group them until each group holds at least ``batch_size`` steps."""
    order = rng.permutation(len(lengths))
    batches, current, steps = [], [], 0
    for i in order:
        current.append(int(i))
        steps += lengths[i]
        if steps >= batch_size:
            batches.append(current)
            current, steps = [], 0
    if current:
        batches.append(current)
    return batches


def new_model(config: TrainConfig, vocab: TextVocab) -> PlannerModel:
    cfg = dataclasses.replace(config.model, text_vocab_size=len(vocab), seed=config.seed)
    return PlannerModel(cfg, vocab)


def model_from_checkpoint(ckpt: Checkpoint) -> PlannerModel:
    model = PlannerModel(ckpt.config, ckpt.vocab, ckpt.vocabs)
    model.load_state_dict(ckpt.model_params)
    return model


def make_checkpoint(model: PlannerModel, optimizer: T.Adam | None = None, meta: dict | None = None) -> Checkpoint:
    params = dict(model.state_dict())
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        state = optimizer.state_arrays()
        params[OPTIM_PREFIX + "t"] = state["t"]
        for i, name in enumerate(names):
            params[f"{OPTIM_PREFIX}m.{name}"] = state[f"m.{i}"]
            params[f"{OPTIM_PREFIX}v.{name}"] = state[f"v.{i}"]
    return Checkpoint(model.cfg, model.vocab, model.vocabs, params, dict(meta or {}))


def restore_optimizer(ckpt: Checkpoint, model: PlannerModel, optimizer: T.Adam) -> None:
    state = ckpt.optim_params
    if not state:
        return
    names = [n for n, _ in model.named_parameters()]
    arrays = {"t": state["t"]}
    for i, name in enumerate(names):
        arrays[f"m.{i}"] = state[f"m.{name}"]
        arrays[f"v.{i}"] = state[f"v.{name}"]
    optimizer.load_state_arrays(arrays)


def write_trace(path, trace: Iterable[tuple[int, float]], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for step, loss in trace:
            fh.write(f"{step},{loss!r}\n")


def read_trace(path) -> list[tuple[int, float]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            step, loss = line.split(",")
            out.append((int(step), float(loss)))
    return out


def train(
    episodes: Sequence[Episode],
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    vocab: TextVocab | None = None,
    on_epoch: Callable[[int, TrainResult], bool | None] | None = None,
) -> TrainResult:
    """Teacher-forced Adam training over all steps of ``episodes``.

    Each epoch reshuffles with an rng seeded by ``(config.seed, epoch)``, so a run resumed
    from a checkpoint sees the same batches as an uninterrupted one. ``on_epoch`` may return
    True to stop early (used by callers probing convergence; the default budget is fixed).
    """
    episodes = list(episodes)
    if not episodes:
        raise ValueError("training corpus is empty")
    if config.epochs < 0 or config.batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch size >= 1")
    if resume is not None:
        model = model_from_checkpoint(resume)
        start_epoch = int(resume.meta.get("epoch", 0))
        step = int(resume.meta.get("step", 0))
    else:
        model = new_model(config, vocab or build_vocab(episodes))
        start_epoch, step = 0, 0
    optimizer = T.Adam(model.parameters(), lr=config.lr)
    if resume is not None:
        restore_optimizer(resume, model, optimizer)
    result = TrainResult(model, optimizer, epochs_done=start_epoch)

    encoded = [encode_episode(ep, model.vocab, model.cfg.max_len, model.vocabs) for ep in episodes]
    lengths = [len(e.targets) for e in encoded]
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        if resume is None:
            write_trace(ckpt_dir / TRACE_NAME, [])

    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        epoch_trace = []
        weighted, count = 0.0, 0
        for group in batch_plan(lengths, config.batch_size, rng):
            batch = collate([encoded[i] for i in group])
            optimizer.zero_grad()
            try:
                loss = model.loss(batch, config.mask)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(epoch, step + 1, str(exc)) from None
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, step + 1, f"loss = {value}")
            T.backward(loss)
            optimizer.step()
            step += 1
            epoch_trace.append((step, value))
            weighted += value * batch.n_steps
            count += batch.n_steps
        result.trace.extend(epoch_trace)
        result.epoch_losses.append(weighted / count)
        result.epochs_done = epoch + 1
        if ckpt_dir is not None:
            meta = {"epoch": epoch + 1, "step": step, "train_config": config.to_dict()}
            save_checkpoint(ckpt_dir / CHECKPOINT_NAME, make_checkpoint(model, optimizer, meta))
            write_trace(ckpt_dir / TRACE_NAME, epoch_trace, append=True)
        if on_epoch is not None and on_epoch(epoch + 1, result):
            break
    return result


def resume_from_dir(checkpoint_dir) -> Checkpoint:
    return load_checkpoint(Path(checkpoint_dir) / CHECKPOINT_NAME)


# -- evaluation ------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Step counts of correct predictions for one split under one modality mask."""

    split: str
    n_steps: int
    action: int
    object: int
    receptacle: int
    total: int
    mask: dict = field(default_factory=lambda: ModalityMask().to_dict())

    def accuracy(self, head: str) -> float:
        """Percentage; an empty split scores 0."""
        return 100.0 * getattr(self, head) / self.n_steps if self.n_steps else 0.0

    @property
    def accuracies(self) -> dict[str, float]:
        return {h: self.accuracy(h) for h in HEADS + ("total",)}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"accuracy": self.accuracies}


def score(predictions: np.ndarray, targets: np.ndarray) -> dict[str, int]:
    """Per-head and all-heads-correct counts for (S, 3) index arrays."""
    predictions = np.asarray(predictions).reshape(-1, 3)
    targets = np.asarray(targets).reshape(-1, 3)
    hit = predictions == targets
    counts = {h: int(hit[:, i].sum()) for i, h in enumerate(HEADS)}
    counts["total"] = int(hit.all(axis=1).sum())
    return counts


def evaluate(
    model,
    corpus: Sequence[Episode],
    split: str | None,
    mask: ModalityMask | None = None,
    episodes_per_batch: int = 32,
) -> EvalReport:
    """Teacher-forced step-level accuracy on ``split`` (all episodes when None).

    ``model`` needs ``vocab``, ``vocabs``, ``cfg.max_len`` and ``predict_batch(batch, mask)``.
    """
    mask = mask or ModalityMask()
    episodes = list(corpus) if split is None else split_of(corpus, split)
    counts = dict.fromkeys(HEADS + ("total",), 0)
    n = 0
    for start in range(0, len(episodes), episodes_per_batch):
        group = episodes[start : start + episodes_per_batch]
        batch = collate([encode_episode(ep, model.vocab, model.cfg.max_len, model.vocabs) for ep in group])
        logits = model.predict_batch(batch, mask)
        for k, v in score(decode_batch(logits), batch.targets).items():
            counts[k] += v
        n += batch.n_steps
    return EvalReport(split or "all", n, mask=mask.to_dict(), **counts)


def format_reports(reports: Sequence[EvalReport], pretty: bool = False) -> str:
    header = ["split", "steps", "action", "object", "receptacle", "total"]
    rows = [
        [r.split, str(r.n_steps)] + [f"{r.accuracy(h):.2f}" for h in HEADS + ("total",)] for r in reports
    ]
    return _table(header, rows, pretty)


# -- ablation ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    name: str
    mask: ModalityMask
    reports: dict[str, EvalReport]
    final_loss: float

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mask": self.mask.to_dict(),
            "final_loss": self.final_loss,
            "reports": {k: v.to_dict() for k, v in self.reports.items()},
        }


def ablation_grid(
    corpus: Sequence[Episode],
    base_config: TrainConfig,
    rows: dict[str, ModalityMask] | None = None,
    splits: Sequence[str] = ("valid_seen", "valid_unseen"),
) -> list[AblationRow]:
    """Train on the train split once per mask row (shared seed and dimensions) and evaluate."""
    rows = ABLATION_ROWS if rows is None else rows
    train_eps = split_of(corpus, "train")
    vocab = build_vocab(train_eps)
    out = []
    for name, mask in rows.items():
        cfg = dataclasses.replace(base_config, mask=mask)
        result = train(train_eps, cfg, vocab=vocab)
        reports = {s: evaluate(result.model, corpus, s, mask) for s in splits}
        loss = result.epoch_losses[-1] if result.epoch_losses else float("nan")
        out.append(AblationRow(name, mask, reports, loss))
    return out


MASK_COLUMNS = ("use_O_n", "use_B_n", "use_O_hist", "use_B_hist", "use_S_hist", "use_I")


def format_ablation(rows: Sequence[AblationRow], pretty: bool = False) -> str:
    """One line per mask row: modality flags, then four accuracy columns per split."""
    splits = list(rows[0].reports) if rows else []
    header = ["row", *MASK_COLUMNS] + [f"{s}.{h}" for s in splits for h in HEADS + ("total",)]
    body = []
    for row in rows:
        flags = row.mask.to_dict()
        cells = [row.name] + [("x" if pretty else "1") if flags[c] else ("" if pretty else "0") for c in MASK_COLUMNS]
        for s in splits:
            cells += [f"{row.reports[s].accuracy(h):.2f}" for h in HEADS + ("total",)]
        body.append(cells)
    return _table(header, body, pretty)


def _table(header: list[str], rows: list[list[str]], pretty: bool) -> str:
    if not pretty:
        return "\n".join("\t".join(r) for r in [header, *rows]) + "\n"
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
