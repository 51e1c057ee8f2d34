"""The planner: encoders -> history integration -> fusion -> heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModalityMask, ModelConfig
from .dataset import Episode, ModelInputs, apply_modality_mask
from .encoders import TextEncoder, VisualEncoder, encode_text, scale_mask, scale_rgb
from .fusion import FusedFeature, FusionStack, fuse
from .heads import Heads, SubGoal, Vocabs, decode_subgoal, subgoal_loss
from .history import (
    SubGoalHistory,
    VisualHistory,
    history_weights,
    integrate_linguistic,
    integrate_visual,
    render_subgoal_history,
)
from .nn import Module
from .tensor import Tensor
from .vocab import PAD_ID, TextVocab


@dataclass
class Batch:
    """Teacher-forced steps of several episodes, stored episode-contiguously."""

    rgb: np.ndarray  # (S, H, W, 3) uint8
    bbox: np.ndarray  # (S, H, W) class ids
    lengths: list[int]
    instruction_ids: np.ndarray  # (E, T)
    step_episode: np.ndarray  # (S,)
    subgoal_ids: np.ndarray  # (S, T)
    targets: np.ndarray  # (S, 3)

    @property
    def n_steps(self) -> int:
        return len(self.step_episode)


@dataclass
class EncodedEpisode:
    """Per-episode arrays reused across epochs."""

    rgb: np.ndarray
    bbox: np.ndarray
    instruction_ids: np.ndarray
    subgoal_ids: np.ndarray
    targets: np.ndarray


def encode_episode(ep: Episode, vocab: TextVocab, max_len: int, vocabs: Vocabs | None = None) -> EncodedEpisode:
    vocabs = vocabs or Vocabs()
    subgoals = ep.subgoals
    prefixes = [render_subgoal_history(subgoals[:n]) for n in range(len(subgoals))]
    return EncodedEpisode(
        rgb=np.stack([s.rgb for s in ep.steps]),
        bbox=np.stack([s.bbox_mask for s in ep.steps]),
        instruction_ids=np.array(vocab.tokenize(ep.instruction, max_len), dtype=np.int64),
        subgoal_ids=np.array([vocab.tokenize(p, max_len) for p in prefixes], dtype=np.int64),
        targets=np.array([sg.indices(vocabs) for sg in subgoals], dtype=np.int64),
    )


def collate(encoded: list[EncodedEpisode], trim: bool = True) -> Batch:
    """Stack episodes. ``trim`` drops trailing positions that are [PAD] everywhere in the batch;
    padding is masked throughout the model, so outputs are unchanged."""
    lengths = [len(e.targets) for e in encoded]
    instruction_ids = np.stack([e.instruction_ids for e in encoded])
    subgoal_ids = np.concatenate([e.subgoal_ids for e in encoded])
    if trim:
        used = (instruction_ids != PAD_ID).any(axis=0) | (subgoal_ids != PAD_ID).any(axis=0)
        keep = int(np.nonzero(used)[0].max()) + 1
        instruction_ids, subgoal_ids = instruction_ids[:, :keep], subgoal_ids[:, :keep]
    return Batch(
        rgb=np.concatenate([e.rgb for e in encoded]),
        bbox=np.concatenate([e.bbox for e in encoded]),
        lengths=lengths,
        instruction_ids=instruction_ids,
        step_episode=np.repeat(np.arange(len(encoded)), lengths),
        subgoal_ids=subgoal_ids,
        targets=np.concatenate([e.targets for e in encoded]),
    )


class PlannerModel(Module):
    def __init__(self, cfg: ModelConfig, vocab: TextVocab, vocabs: Vocabs | None = None):
        cfg.validate()
        if cfg.text_vocab_size != len(vocab):
            raise ValueError(f"config vocabulary size {cfg.text_vocab_size} != {len(vocab)}")
        self.cfg = cfg
        self.vocab = vocab
        self.vocabs = vocabs or Vocabs.for_config(cfg)
        rng = np.random.default_rng(cfg.seed)
        self.rgb_encoder = VisualEncoder(3, cfg, rng)
        self.bbox_encoder = VisualEncoder(1, cfg, rng)
        self.text_encoder = TextEncoder(cfg, rng)
        self.fusion = FusionStack(cfg, rng)
        self.heads = Heads(cfg, rng)

    # -- batched, teacher-forced path --------------------------------------------------

    def encode_inputs(self, batch: Batch, mask: ModalityMask) -> tuple[ModelInputs, np.ndarray]:
        cfg = self.cfg
        s, d = batch.n_steps, cfg.d
        zeros_v = Tensor(np.zeros((s, d)))
        weights, _ = history_weights(batch.lengths, cfg.history)
        weights = Tensor(weights)

        def visual(encoder, images, use_now, use_past):
            if not (use_now or use_past):
                return zeros_v, zeros_v
            emb = encoder(images)
            return emb, weights @ emb

        rgb_now, rgb_past = visual(self.rgb_encoder, scale_rgb(batch.rgb), mask.use_O_n, mask.use_O_hist)
        bbox_now, bbox_past = visual(
            self.bbox_encoder, scale_mask(batch.bbox, cfg.num_object_classes), mask.use_B_n, mask.use_B_hist
        )
        instruction = self.text_encoder(batch.instruction_ids)[batch.step_episode]
        lang_mask = batch.instruction_ids[batch.step_episode] != PAD_ID
        if mask.use_S_hist:
            subgoals = self.text_encoder(batch.subgoal_ids)
            lang_mask = lang_mask | (batch.subgoal_ids != PAD_ID)
        else:
            subgoals = Tensor(np.zeros(instruction.shape))
        inputs = ModelInputs(rgb_now, bbox_now, rgb_past, bbox_past, instruction, subgoals)
        return apply_modality_mask(inputs, mask), lang_mask

    def forward(self, batch: Batch, mask: ModalityMask | None = None) -> tuple[tuple[Tensor, Tensor, Tensor], FusedFeature]:
        inputs, lang_mask = self.encode_inputs(batch, mask or ModalityMask())
        V = T.stack([inputs.rgb_past + inputs.bbox_past, inputs.rgb_now + inputs.bbox_now], axis=1)
        L = integrate_linguistic(inputs.instruction, inputs.subgoals)
        fused = self.fusion(V, L, lang_mask)
        return self.heads(fused.F), fused

    def loss(self, batch: Batch, mask: ModalityMask | None = None) -> Tensor:
        logits, _ = self.forward(batch, mask)
        return subgoal_loss(logits, batch.targets)

    def predict_batch(self, batch: Batch, mask: ModalityMask | None = None) -> tuple[np.ndarray, ...]:
        with T.no_grad():
            logits, _ = self.forward(batch, mask)
        return tuple(x.data for x in logits)

    # -- single-step path used in closed loop -------------------------------------------

    def embed_observation(self, rgb: np.ndarray, bbox_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        o = self.rgb_encoder(scale_rgb(rgb)[None])[0]
        b = self.bbox_encoder(scale_mask(bbox_mask, self.cfg.num_object_classes)[None])[0]
        return o, b

    def step_logits(
        self,
        current: tuple[Tensor, Tensor],
        visual_history: VisualHistory,
        subgoal_history: SubGoalHistory,
        instruction: str,
        mask: ModalityMask | None = None,
    ) -> tuple[tuple[Tensor, Tensor, Tensor], FusedFeature]:
        mask = mask or ModalityMask()
        d, length = self.cfg.d, self.cfg.max_len
        zero = Tensor(np.zeros(d))
        history = VisualHistory(
            window=visual_history.window,
            buffer=[
                (o if mask.use_O_hist else zero, b if mask.use_B_hist else zero)
                for o, b in visual_history.snapshot()
            ],
        )
        now = (current[0] if mask.use_O_n else zero, current[1] if mask.use_B_n else zero)
        V = integrate_visual(history, now)
        instr_ids = self.vocab.tokenize(instruction, length)
        sub_ids = self.vocab.tokenize(render_subgoal_history(subgoal_history), length)
        e_instr = encode_text(self.text_encoder, instr_ids)
        e_sub = encode_text(self.text_encoder, sub_ids) if mask.use_S_hist else Tensor(np.zeros((length, d)))
        L = integrate_linguistic(e_instr, e_sub)
        lang_mask = np.array(instr_ids) != PAD_ID
        if mask.use_S_hist:
            lang_mask |= np.array(sub_ids) != PAD_ID
        fused = fuse(V, L, self.fusion, lang_mask)
        return self.heads(fused.F), fused

    def predict_step(self, *args, **kwargs) -> SubGoal:
        with T.no_grad():
            logits, _ = self.step_logits(*args, **kwargs)
        return decode_subgoal(logits, self.vocabs)
