"""Mutually attentive fusion of the visual and linguistic token streams.

Both streams share one attention map per head. Rows of the map (visual
queries over language keys) weight the language values and update the
visual stream; rows of its transpose weight the visual values and update
the language stream. Each update enters through an output projection and a
residual connection, so zero projections make the exchange the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import Module, TransformerBlock, merge_heads, split_heads
from .tensor import Tensor


class XMHA(Module):
    """Bidirectional cross-attention; weight matrices only, no biases."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        bound = 1.0 / math.sqrt(d)

        def mat():
            return T.parameter(rng.uniform(-bound, bound, size=(d, d)))

        self.W_q = mat()
        self.W_k = mat()
        self.W_v_vis = mat()
        self.W_v_lang = mat()
        self.W_p_vis = mat()
        self.W_p_lang = mat()
        self.last_weights: np.ndarray | None = None
        self.last_weights_t: np.ndarray | None = None

    def __call__(self, V: Tensor, L: Tensor, lang_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """``V``: (B, Nv, d), ``L``: (B, Nl, d), ``lang_mask``: (B, Nl) True on real tokens."""
        d = self.W_q.shape[0]
        if V.shape[-1] != d or L.shape[-1] != d:
            raise T.ShapeError(f"stream widths {V.shape[-1]}, {L.shape[-1]} differ from {d}")
        h = self.heads
        dh = d // h
        q = split_heads(V @ self.W_q, h)
        k = split_heads(L @ self.W_k, h)
        v_vis = split_heads(V @ self.W_v_vis, h)
        v_lang = split_heads(L @ self.W_v_lang, h)
        scores = (q @ T.swap_last(k)) * (1.0 / math.sqrt(dh))  # (B, h, Nv, Nl)
        col_mask = None if lang_mask is None else lang_mask[:, None, None, :]
        to_vis = T.softmax(scores, col_mask)
        to_lang = T.softmax(T.swap_last(scores))  # (B, h, Nl, Nv)
        self.last_weights = to_vis.data
        self.last_weights_t = to_lang.data
        lang_update = merge_heads(to_vis @ v_lang)
        vis_update = merge_heads(to_lang @ v_vis)
        V_f = lang_update @ self.W_p_lang + V
        L_f = vis_update @ self.W_p_vis + L
        return V_f, L_f


@dataclass
class FusedFeature:
    F: Tensor
    V_f1: Tensor
    L_f1: Tensor
    V_f2: Tensor | None
    L_f2: Tensor | None


def masked_mean(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean over axis 1 of (B, N, d), restricted to positions where ``mask`` is True."""
    if mask is None:
        return x.mean(axis=1)
    weights = mask.astype(T.DTYPE)
    weights = weights / weights.sum(axis=1, keepdims=True)
    return (x * weights[:, :, None]).sum(axis=1)


class FusionStack(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, h = cfg.d, cfg.heads
        hidden = cfg.mlp_ratio * d
        self.stages = [XMHA(d, h, rng)]
        self.vit_blocks: list[TransformerBlock] = []
        self.bert_blocks: list[TransformerBlock] = []
        for _ in range(cfg.fusion_stages - 1):
            self.vit_blocks.append(TransformerBlock(d, h, hidden, rng))
            self.bert_blocks.append(TransformerBlock(d, h, hidden, rng))
            self.stages.append(XMHA(d, h, rng))

    def __call__(self, V: Tensor, L: Tensor, lang_mask: np.ndarray | None = None) -> FusedFeature:
        """Batched: ``V`` (B, 2, d), ``L`` (B, T, d) -> ``F`` (B, 2d)."""
        V_f1, L_f1 = self.stages[0](V, L, lang_mask)
        v, l = V_f1, L_f1
        V_f2 = L_f2 = None
        for vit, bert, stage in zip(self.vit_blocks, self.bert_blocks, self.stages[1:]):
            v, l = stage(vit(v), bert(l, lang_mask), lang_mask)
            V_f2, L_f2 = v, l
        F = T.concat([v.mean(axis=1), masked_mean(l, lang_mask)], axis=-1)
        return FusedFeature(F, V_f1, L_f1, V_f2, L_f2)


def x_mha(V: Tensor, L: Tensor, params: XMHA, lang_mask=None) -> tuple[Tensor, Tensor]:
    """Unbatched cross-attention: (Nv, d), (Nl, d) -> (V_f, L_f)."""
    mask = None if lang_mask is None else np.asarray(lang_mask, dtype=bool)[None]
    V_f, L_f = params(V.reshape(1, *V.shape), L.reshape(1, *L.shape), mask)
    return V_f[0], L_f[0]


def fuse(V: Tensor, L: Tensor, params: FusionStack, lang_mask=None) -> FusedFeature:
    """Unbatched fusion: (2, d), (T, d) -> FusedFeature with ``F`` of width 2d."""
    mask = None if lang_mask is None else np.asarray(lang_mask, dtype=bool)[None]
    out = params(V.reshape(1, *V.shape), L.reshape(1, *L.shape), mask)
    return FusedFeature(*(None if t is None else t[0] for t in (out.F, out.V_f1, out.L_f1, out.V_f2, out.L_f2)))
