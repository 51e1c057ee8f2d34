"""Vision (RGB and bounding-box mask) and text encoders, trained from scratch."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import LayerNorm, Linear, Module, TransformerBlock
from .tensor import Tensor
from .vocab import PAD_ID

Box = tuple[int, int, int, int, int]  # (class_id, x0, y0, x1, y1), inclusive pixel bounds


class ValidationError(ValueError):
    pass


def build_bbox_mask(boxes: Sequence[Box], height: int, width: int) -> np.ndarray:
    """Paint each box's class id into a zero image; later boxes win on overlap."""
    mask = np.zeros((height, width), dtype=np.int64)
    for class_id, x0, y0, x1, y1 in boxes:
        if class_id <= 0:
            raise ValidationError(f"box class id must be positive, got {class_id}")
        if not (0 <= x0 <= x1 < width and 0 <= y0 <= y1 < height):
            raise ValidationError(f"box ({x0},{y0})-({x1},{y1}) outside {width}x{height} or inverted")
        mask[y0 : y1 + 1, x0 : x1 + 1] = class_id
    return mask


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H/p * W/p, p*p*C), patches in row-major order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValidationError(f"image {h}x{w} is not divisible by patch size {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def scale_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=T.DTYPE) / 255.0


def scale_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > num_classes):
        raise ValidationError(f"mask values must lie in [0, {num_classes}]")
    return mask.astype(T.DTYPE)[..., None] / num_classes


class VisualEncoder(Module):
    """Patch projection + CLS + learned positions + pre-norm blocks; returns the CLS feature."""

    def __init__(self, channels: int, cfg: ModelConfig, rng: np.random.Generator):
        self.patch = cfg.patch
        self.channels = channels
        d = cfg.d
        self.proj = Linear(cfg.patch * cfg.patch * channels, d, rng)
        self.cls = T.parameter(rng.normal(0.0, 0.02, size=d))
        self.pos = T.parameter(rng.normal(0.0, 0.02, size=(cfg.n_patches + 1, d)))
        self.blocks = [TransformerBlock(d, cfg.heads, cfg.mlp_ratio * d, rng) for _ in range(cfg.depth_visual)]
        self.norm = LayerNorm(d)

    def __call__(self, images: np.ndarray) -> Tensor:
        """``images``: (B, H, W, C) floats in [0, 1] -> (B, d)."""
        if images.shape[-1] != self.channels:
            raise ValidationError(f"expected {self.channels} channels, got {images.shape[-1]}")
        patches = patchify(images, self.patch)
        b, n, _ = patches.shape
        if n + 1 != self.pos.shape[0]:
            raise ValidationError(f"{n} patches do not match {self.pos.shape[0] - 1} position slots")
        tokens = self.proj(Tensor(patches))
        d = tokens.shape[-1]
        cls = T.mul(T.reshape(self.cls, (1, 1, d)), np.ones((b, 1, 1)))
        x = T.concat([cls, tokens], axis=1) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.norm(x[:, 0, :])


class TextEncoder(Module):
    """Word embeddings + learned positions + pre-norm blocks with padding masked out."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d
        self.vocab_size = cfg.text_vocab_size
        self.embed = T.parameter(rng.normal(0.0, 0.02, size=(cfg.text_vocab_size, d)))
        self.pos = T.parameter(rng.normal(0.0, 0.02, size=(cfg.max_len, d)))
        self.blocks = [TransformerBlock(d, cfg.heads, cfg.mlp_ratio * d, rng) for _ in range(cfg.depth_text)]
        self.norm = LayerNorm(d)

    def __call__(self, ids: np.ndarray) -> Tensor:
        """``ids``: (B, T) ints -> (B, T, d)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValidationError(f"token id outside vocabulary of size {self.vocab_size}")
        length = ids.shape[1]
        if length > self.pos.shape[0]:
            raise ValidationError(f"sequence length {length} exceeds maximum {self.pos.shape[0]}")
        x = T.take_rows(self.embed, ids) + T.take_rows(self.pos, np.arange(length))
        key_mask = ids != PAD_ID
        for block in self.blocks:
            x = block(x, key_mask)
        return self.norm(x)


def encode_rgb(encoder: VisualEncoder, rgb: np.ndarray) -> Tensor:
    """One H×W×3 uint8 image -> d-vector."""
    return encoder(scale_rgb(rgb)[None])[0]


def encode_bbox(encoder: VisualEncoder, mask: np.ndarray, num_classes: int) -> Tensor:
    """One H×W class-id mask -> d-vector."""
    return encoder(scale_mask(mask, num_classes)[None])[0]


def encode_text(encoder: TextEncoder, ids: Sequence[int]) -> Tensor:
    """One token-id sequence of length T -> T×d."""
    return encoder(np.asarray(ids, dtype=np.int64)[None])[0]
