"""Per-modality histories and their integration into visual / linguistic features."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vocab import EMPTY

if TYPE_CHECKING:
    from .heads import SubGoal


@dataclass
class VisualHistory:
    """The last ``window`` (rgb embedding, bbox embedding) pairs, oldest first."""

    window: int = 4
    buffer: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("history window must be at least 1")
        self.buffer = deque(self.buffer, maxlen=self.window)

    def __len__(self) -> int:
        return len(self.buffer)

    def snapshot(self) -> list[tuple[Tensor, Tensor]]:
        return list(self.buffer)


def push_visual(history: VisualHistory, rgb_emb: Tensor, bbox_emb: Tensor) -> VisualHistory:
    history.buffer.append((rgb_emb, bbox_emb))
    return history


def integrate_visual(history: VisualHistory, current: tuple[Tensor, Tensor]) -> Tensor:
    """Two-token visual feature: [mean of stored rgb + mean of stored bbox ; current rgb + bbox].

    The mean runs over the frames actually stored (zero vector when none are).
    """
    rgb, bbox = current
    d = rgb.shape[-1]
    if rgb.shape != (d,) or bbox.shape != (d,):
        raise T.ShapeError(f"current embeddings must both be width-{d} vectors, got {rgb.shape}, {bbox.shape}")
    pairs = history.snapshot()
    if pairs:
        for o, b in pairs:
            if o.shape != (d,) or b.shape != (d,):
                raise T.ShapeError(f"stored embedding width differs from current width {d}")
        scale = 1.0 / len(pairs)
        mean_rgb = T.stack([o for o, _ in pairs]).sum(axis=0) * scale
        mean_bbox = T.stack([b for _, b in pairs]).sum(axis=0) * scale
        past = mean_rgb + mean_bbox
    else:
        past = Tensor(np.zeros(d))
    return T.stack([past, rgb + bbox])


def history_weights(lengths: list[int], window: int) -> tuple[np.ndarray, np.ndarray]:
    """Averaging matrix for a batch of episodes stored frame-contiguously.

    For episodes with ``lengths`` steps, returns ``(weights, current)`` where
    ``weights @ frames`` gives each step's mean over its (up to) ``window``
    preceding frames and ``current[i]`` indexes step i's own frame.
    """
    total = sum(lengths)
    weights = np.zeros((total, total))
    current = np.arange(total)
    start = 0
    for n_steps in lengths:
        for n in range(n_steps):
            lo = max(0, n - window)
            if n > lo:
                weights[start + n, start + lo : start + n] = 1.0 / (n - lo)
        start += n_steps
    return weights, current


@dataclass
class SubGoalHistory:
    steps: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.steps)

    def append(self, subgoal: SubGoal) -> SubGoalHistory:
        self.steps.append(subgoal)
        return self


def render_subgoal(subgoal: SubGoal) -> str:
    parts = [subgoal.action, subgoal.object]
    if subgoal.receptacle != EMPTY:
        parts.append(subgoal.receptacle)
    return " ".join(parts)


def render_subgoal_history(history: SubGoalHistory | list) -> str:
    steps = history.steps if isinstance(history, SubGoalHistory) else history
    return " ".join(render_subgoal(s) for s in steps)


def integrate_linguistic(instruction: Tensor, subgoals: Tensor) -> Tensor:
    if instruction.shape != subgoals.shape:
        raise T.ShapeError(f"instruction {instruction.shape} and sub-goal {subgoals.shape} features differ")
    return instruction + subgoals
