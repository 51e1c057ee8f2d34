"""Class vocabularies of the toy world and the word-level text tokenizer."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

ACTIONS = ("PickUp", "Put", "Open", "Close", "ToggleOn", "ToggleOff", "Slice", "Navigate", "Stop")

PORTABLE = ("Pencil", "Knife", "Apple", "Tomato", "Potato", "Bread", "Lettuce", "Egg", "Mug", "Plate", "Cup")
FIXTURES = ("Faucet",)
RECEPTACLES = ("DiningTable", "CounterTop", "SideTable", "Shelf", "Desk", "Dresser", "SinkBasin", "Microwave")
PLACEMENT_RECEPTACLES = ("DiningTable", "CounterTop", "SideTable", "Shelf", "Desk", "Dresser")
SLICEABLE = ("Apple", "Tomato", "Potato", "Bread", "Lettuce")
OPENABLE = ("Microwave",)
TOGGLEABLE = ("Microwave", "Faucet")

NO_OBJECT = "None"
EMPTY = "empty"

# Object vocabulary index doubles as the bounding-box class id (0 = no object).
OBJECTS = (NO_OBJECT,) + PORTABLE + FIXTURES + RECEPTACLES
RECEPTACLE_CLASSES = (EMPTY,) + RECEPTACLES
NUM_OBJECT_CLASSES = len(OBJECTS) - 1

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
RESERVED = (PAD, UNK, CLS)
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2


@dataclass(frozen=True)
class ClassVocab:
    names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not in the vocabulary") from None

    def name(self, idx: int) -> str:
        return self.names[idx]

    def padded(self, size: int, stem: str) -> ClassVocab:
        """Extend with placeholder classes so the head width can follow a larger config."""
        if size < len(self.names):
            raise ValueError(f"cannot shrink a {len(self.names)}-class vocabulary to {size}")
        extra = tuple(f"{stem}{i}" for i in range(len(self.names), size))
        return ClassVocab(self.names + extra)


ACTION_VOCAB = ClassVocab(ACTIONS)
OBJECT_VOCAB = ClassVocab(OBJECTS)
RECEPTACLE_VOCAB = ClassVocab(RECEPTACLE_CLASSES)

_WORD = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


class TextVocab:
    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError("ids 0-2 must be [PAD], [UNK], [CLS]")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, TextVocab) and self.tokens == other.tokens

    @classmethod
    def build(cls, texts: Iterable[str]) -> TextVocab:
        base = [n.lower() for n in ACTIONS + OBJECTS + RECEPTACLE_CLASSES]
        seen = dict.fromkeys(base)
        corpus = sorted({w for text in texts for w in words(text)} - set(seen))
        return cls(list(RESERVED) + list(seen) + corpus)

    def tokenize(self, text: str, length: int) -> list[int]:
        """[CLS] + word ids, right-truncated to ``length`` and padded with [PAD]."""
        ids = [CLS_ID] + [self.ids.get(w, UNK_ID) for w in words(text)]
        ids = ids[:length]
        return ids + [PAD_ID] * (length - len(ids))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> TextVocab:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)


def tokenize(text: str, vocab: TextVocab, length: int) -> list[int]:
    return vocab.tokenize(text, length)
