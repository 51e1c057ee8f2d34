"""Three perceptron heads (action, object, receptacle) and sub-goal decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import MLP, Module
from .tensor import Tensor
from .vocab import ACTION_VOCAB, EMPTY, NO_OBJECT, OBJECT_VOCAB, RECEPTACLE_VOCAB, ClassVocab


@dataclass(frozen=True)
class SubGoal:
    action: str
    object: str = NO_OBJECT
    receptacle: str = EMPTY

    @property
    def destination(self) -> str | None:
        """For Navigate the object slot names where to go."""
        return self.object if self.action == "Navigate" else None

    @property
    def inert(self) -> bool:
        """Stop carries object/receptacle predictions that have no effect."""
        return self.action == "Stop"

    def indices(self, vocabs: Vocabs | None = None) -> tuple[int, int, int]:
        v = vocabs or Vocabs()
        return v.actions.index(self.action), v.objects.index(self.object), v.receptacles.index(self.receptacle)

    def __str__(self) -> str:
        parts = [self.action, self.object] + ([self.receptacle] if self.receptacle != EMPTY else [])
        return " ".join(parts)


@dataclass(frozen=True)
class Vocabs:
    actions: ClassVocab = ACTION_VOCAB
    objects: ClassVocab = OBJECT_VOCAB
    receptacles: ClassVocab = RECEPTACLE_VOCAB

    @classmethod
    def for_config(cls, cfg: ModelConfig) -> Vocabs:
        return cls(
            ACTION_VOCAB.padded(cfg.n_actions, "Action"),
            OBJECT_VOCAB.padded(cfg.n_objects, "Object"),
            RECEPTACLE_VOCAB.padded(cfg.n_receptacles, "Receptacle"),
        )

    def to_dict(self) -> dict[str, list[str]]:
        return {
            "actions": list(self.actions.names),
            "objects": list(self.objects.names),
            "receptacles": list(self.receptacles.names),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Vocabs:
        return cls(
            ClassVocab(tuple(data["actions"])),
            ClassVocab(tuple(data["objects"])),
            ClassVocab(tuple(data["receptacles"])),
        )


class Heads(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        width, hidden = 2 * cfg.d, cfg.head_hidden
        self.width = width
        self.action = MLP([width, hidden, hidden, cfg.n_actions], rng)
        self.object = MLP([width, hidden, hidden, cfg.n_objects], rng)
        self.receptacle = MLP([width, hidden, hidden, cfg.n_receptacles], rng)

    def __call__(self, F: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if F.shape[-1] != self.width:
            raise T.ShapeError(f"fused feature width {F.shape[-1]} != {self.width}")
        return self.action(F), self.object(F), self.receptacle(F)


def predict_logits(F: Tensor, params: Heads) -> tuple[Tensor, Tensor, Tensor]:
    return params(F)


def decode_subgoal(logits, vocabs: Vocabs | None = None) -> SubGoal:
    """Per-head argmax; ties go to the lowest index."""
    v = vocabs or Vocabs()
    a, o, r = (int(np.argmax(_array(x))) for x in logits)
    return SubGoal(v.actions.name(a), v.objects.name(o), v.receptacles.name(r))


def decode_batch(logits) -> np.ndarray:
    """(B, 3) array of argmax indices."""
    return np.stack([np.argmax(_array(x), axis=-1) for x in logits], axis=-1)


def subgoal_loss(logits, targets) -> Tensor:
    """Sum of the three cross-entropies (each a mean over the batch).

    ``targets`` is a SubGoal, an (a, o, r) index triple, or a (B, 3) index array.
    """
    if isinstance(targets, SubGoal):
        targets = targets.indices()
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 3)
    a, o, r = logits
    return (
        T.cross_entropy(a, targets[:, 0])
        + T.cross_entropy(o, targets[:, 1])
        + T.cross_entropy(r, targets[:, 2])
    )


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)
