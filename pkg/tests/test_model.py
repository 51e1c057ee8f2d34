from __future__ import annotations

import numpy as np
import pytest

from subgoal_planner.config import ABLATION_ROWS, ModalityMask
from subgoal_planner.heads import decode_subgoal
from subgoal_planner.history import SubGoalHistory, VisualHistory, push_visual
from subgoal_planner.model import PlannerModel, collate, encode_episode
from subgoal_planner.simulator import AgentView, PlannerPolicy, oracle_policy, run_episode
from subgoal_planner.tensor import no_grad

from .conftest import tiny_config


@pytest.fixture(scope="module")
def model(small_vocab):
    return PlannerModel(tiny_config(text_vocab_size=len(small_vocab), max_len=16), small_vocab)


def _batch(model, episodes, trim=True):
    return collate([encode_episode(e, model.vocab, model.cfg.max_len) for e in episodes], trim=trim)


@pytest.mark.parametrize("row", ["full", "no_history", "no_bbox", "no_vision"])
def test_batched_teacher_forcing_matches_step_path(model, small_corpus, row):
    mask = ABLATION_ROWS[row]
    eps = small_corpus[:2]
    logits = model.predict_batch(_batch(model, eps), mask)
    k = 0
    for ep in eps:
        hist, subs = VisualHistory(model.cfg.history), SubGoalHistory()
        for step in ep.steps:
            with no_grad():
                cur = model.embed_observation(step.rgb, step.bbox_mask)
                single, _ = model.step_logits(cur, hist, subs, ep.instruction, mask)
            for head in range(3):
                np.testing.assert_allclose(single[head].data, logits[head][k], atol=1e-10, rtol=0)
            push_visual(hist, *cur)
            subs.append(step.subgoal)
            k += 1


def test_padding_trim_does_not_change_outputs(model, small_corpus):
    eps = small_corpus[:3]
    a = model.predict_batch(_batch(model, eps, trim=True))
    b = model.predict_batch(_batch(model, eps, trim=False))
    assert _batch(model, eps).instruction_ids.shape[1] <= model.cfg.max_len
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-12, rtol=0)


def test_batch_composition_does_not_change_outputs(model, small_corpus):
    eps = small_corpus[:3]
    together = model.predict_batch(_batch(model, eps))
    apart = [model.predict_batch(_batch(model, [e])) for e in eps]
    for head in range(3):
        np.testing.assert_allclose(np.concatenate([p[head] for p in apart]), together[head], atol=1e-12)


def test_closed_loop_policy_on_ground_truth_rollout(model, small_corpus):
    """When the model's rollout follows the ground truth, its inputs equal the teacher-forced ones."""
    ep = small_corpus[0]
    traj = run_episode(oracle_policy(ep), ep)
    policy = PlannerPolicy(model)
    policy.reset(ep.instruction)
    logits = model.predict_batch(_batch(model, [ep]))
    subs = SubGoalHistory()
    for n, rec in enumerate(traj.records):
        got = policy.act(AgentView(rec.rgb, rec.bbox_mask, ep.instruction, subs, [], None))
        assert got == decode_subgoal([x[n] for x in logits])
        subs.append(rec.subgoal)
    assert len(policy.history) == min(len(ep), model.cfg.history)


def test_vocab_size_must_match(small_vocab):
    with pytest.raises(ValueError):
        PlannerModel(tiny_config(text_vocab_size=len(small_vocab) + 1), small_vocab)


def test_default_mask_is_full(model, small_corpus):
    b = _batch(model, small_corpus[:1])
    for x, y in zip(model.predict_batch(b), model.predict_batch(b, ModalityMask())):
        assert np.array_equal(x, y)
