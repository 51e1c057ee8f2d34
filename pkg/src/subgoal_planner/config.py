from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .vocab import ACTIONS, NUM_OBJECT_CLASSES, OBJECTS, RECEPTACLE_CLASSES


@dataclass
class ModelConfig:
    image_size: int = 32
    patch: int = 8
    d: int = 64
    heads: int = 4
    depth_visual: int = 2
    depth_text: int = 2
    max_len: int = 32
    mlp_ratio: int = 2
    history: int = 4
    fusion_stages: int = 2
    n_actions: int = len(ACTIONS)
    n_objects: int = len(OBJECTS)
    n_receptacles: int = len(RECEPTACLE_CLASSES)
    num_object_classes: int = NUM_OBJECT_CLASSES
    text_vocab_size: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ValueError(f"image size {self.image_size} is not divisible by patch {self.patch}")
        if self.d % self.heads:
            raise ValueError(f"width {self.d} is not divisible by {self.heads} heads")
        if self.history < 1:
            raise ValueError("history window must be at least 1")
        if self.fusion_stages < 1:
            raise ValueError("need at least one fusion stage")
        if self.text_vocab_size <= 3:
            raise ValueError("text vocabulary must be set before building a model")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def head_hidden(self) -> int:
        return 2 * self.d


@dataclass
class ModalityMask:
    """Which inputs a model may see. Disabled inputs are replaced by zeros."""

    use_O_n: bool = True
    use_B_n: bool = True
    use_O_hist: bool = True
    use_B_hist: bool = True
    use_S_hist: bool = True
    use_I: bool = True

    def __post_init__(self):
        if not self.use_I:
            raise ValueError("the instruction is always used")

    def to_dict(self) -> dict[str, bool]:
        return dataclasses.asdict(self)


ABLATION_ROWS: dict[str, ModalityMask] = {
    "full": ModalityMask(),
    "no_vision": ModalityMask(use_O_n=False, use_B_n=False, use_O_hist=False, use_B_hist=False),
    "no_history": ModalityMask(use_O_hist=False, use_B_hist=False, use_S_hist=False),
    "no_bbox": ModalityMask(use_B_n=False, use_B_hist=False),
}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    mask: ModalityMask = field(default_factory=ModalityMask)
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        data = dict(data)
        mask = ModalityMask(**data.pop("mask", {}))
        model = ModelConfig(**data.pop("model", {}))
        return cls(mask=mask, model=model, **data)
