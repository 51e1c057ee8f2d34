from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgoal_planner.config import ABLATION_ROWS, ModalityMask
from subgoal_planner.dataset import (
    TEMPLATES,
    CorpusConfig,
    EpisodeError,
    EpisodeFormatError,
    ModelInputs,
    apply_modality_mask,
    episodes_equal,
    expand_template,
    feasible_objects,
    generate_corpus,
    generate_episode,
    read_episodes,
    split_of,
    write_episodes,
)
from subgoal_planner.heads import SubGoal
from subgoal_planner.history import VisualHistory, integrate_visual
from subgoal_planner.tensor import Tensor
from subgoal_planner.vocab import OBJECT_VOCAB
from subgoal_planner.world import (
    SceneGenerationError,
    Task,
    WorldConfig,
    footprints,
    generate_scene,
    initial_state,
    step_world,
)

from . import oracles


def test_scene_determinism():
    assert generate_scene(7).to_dict() == generate_scene(7).to_dict()
    assert generate_scene(7).to_dict() != generate_scene(8).to_dict()


def test_zero_objects_gives_receptacles_only():
    s = generate_scene(1, WorldConfig(n_objects=0))
    assert s.objects == [] and len(s.receptacles) == len(WorldConfig().receptacles)


def test_infeasible_grid_is_rejected():
    with pytest.raises(SceneGenerationError):
        generate_scene(0, WorldConfig(rows=3, cols=3))


def test_thousand_seeds_have_no_collisions():
    for seed in range(1000):
        s = generate_scene(seed)
        cells = [p.cell for p in s.objects + s.receptacles]
        for a, b in itertools.combinations(cells, 2):
            assert a != b, seed
        for r, c in cells:
            assert 0 <= r < s.rows and 0 <= c < s.cols


def test_pick_place_expansion():
    got = expand_template(Task("pick_place", "Pencil", "DiningTable"))
    assert got == [
        SubGoal("Navigate", "Pencil"),
        SubGoal("PickUp", "Pencil"),
        SubGoal("Navigate", "DiningTable"),
        SubGoal("Put", "Pencil", "DiningTable"),
        SubGoal("Stop"),
    ]


def test_unknown_template_and_missing_class():
    with pytest.raises(EpisodeError):
        expand_template(Task("chill_place", "Apple", "Desk"))
    scene = generate_scene(0)
    absent = next(c for c in ("Pencil", "Knife", "Apple", "Tomato", "Egg", "Cup") if c not in scene.classes())
    with pytest.raises(EpisodeError):
        generate_episode(scene, Task("pick_place", absent, "Desk"), 0)


def _slice_rule(subgoals):
    """One Slice, and the Knife was picked up before it and not put down in between."""
    slices = [i for i, sg in enumerate(subgoals) if sg.action == "Slice"]
    if len(slices) != 1:
        return False
    holding = False
    for sg in subgoals[: slices[0]]:
        if sg == SubGoal("PickUp", "Knife"):
            holding = True
        elif sg.action == "Put" and sg.object == "Knife":
            holding = False
    return holding


def test_generated_corpus_contracts(small_corpus):
    for ep in small_corpus:
        assert ep.subgoals[-1].action == "Stop"
        assert all(sg.action != "Stop" for sg in ep.subgoals[:-1])
        assert 5 <= len(ep) <= 16
        if ep.task.template == "slice_place":
            assert _slice_rule(ep.subgoals)
        else:
            assert not any(sg.action == "Slice" for sg in ep.subgoals)


def test_every_template_is_generable():
    for t in TEMPLATES:
        for seed in range(50):
            scene = generate_scene(seed)
            if feasible_objects(scene, t):
                ep = generate_episode(scene, t, seed)
                assert ep.task.template == t and ep.task.object in scene.classes()
                if t == "slice_place":
                    assert _slice_rule(ep.subgoals)
                break
        else:
            pytest.fail(f"no scene hosts {t}")


def test_instruction_variation():
    scene = generate_scene(4)
    forms = {generate_episode(scene, Task("pick_place", scene.objects[0].cls, "Desk"), s).instruction for s in range(40)}
    assert len(forms) >= 3


def test_bbox_mask_matches_rendered_footprints(small_corpus):
    for ep in small_corpus[:6]:
        state = initial_state(ep.scene, ep.agent_start)
        for step in ep.steps:
            boxes = [(OBJECT_VOCAB.index(c), *box) for c, box, _ in footprints(state) if c]
            h, w = step.bbox_mask.shape
            np.testing.assert_array_equal(step.bbox_mask, oracles.paint_boxes(boxes, h, w))
            state, _ = step_world(state, step.subgoal)


def test_split_hygiene(small_corpus):
    train = {e.scene_id for e in split_of(small_corpus, "train")}
    seen = {e.scene_id for e in split_of(small_corpus, "valid_seen")}
    unseen = {e.scene_id for e in split_of(small_corpus, "valid_unseen")}
    assert seen and unseen
    assert not train & unseen
    assert seen <= train
    with pytest.raises(ValueError):
        split_of(small_corpus, "test")


def test_round_trip(small_corpus, tmp_path):
    path = tmp_path / "eps.jsonl"
    write_episodes(small_corpus[:10], path)
    back = read_episodes(path)
    assert len(back) == 10 and all(episodes_equal(a, b) for a, b in zip(small_corpus, back))
    write_episodes(back, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_episodes(tmp_path / "e.jsonl") == []


def test_truncated_last_line_names_line(small_corpus, tmp_path):
    path = tmp_path / "eps.jsonl"
    write_episodes(small_corpus[:3], path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 40])
    with pytest.raises(EpisodeFormatError) as info:
        read_episodes(path)
    assert info.value.line == 3 and "line 3" in str(info.value)


def test_corpus_is_byte_deterministic(tmp_path):
    cfg = CorpusConfig(n_scenes=2, n_unseen=1, episodes_per_scene=3, valid_seen_per_scene=1, seed=11)
    write_episodes(generate_corpus(cfg), tmp_path / "a.jsonl")
    write_episodes(generate_corpus(cfg), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_default_corpus_shape():
    cfg = CorpusConfig()
    assert (cfg.n_scenes, cfg.n_unseen) == (24, 6)


# -- modality masks ---------------------------------------------------------------------


def _inputs(rng, d=4, t=3):
    vec = lambda: Tensor(rng.normal(size=d))  # noqa: E731
    return ModelInputs(vec(), vec(), vec(), vec(), Tensor(rng.normal(size=(t, d))), Tensor(rng.normal(size=(t, d))))


FIELDS = ("rgb_now", "bbox_now", "rgb_past", "bbox_past", "instruction", "subgoals")


def test_full_mask_is_identity(rng):
    x = _inputs(rng)
    y = apply_modality_mask(x, ModalityMask())
    assert all(getattr(x, f) is getattr(y, f) for f in FIELDS)


def test_instruction_cannot_be_disabled():
    with pytest.raises(ValueError):
        ModalityMask(use_I=False)


def test_no_subgoal_history_leaves_instruction_only(rng):
    x = apply_modality_mask(_inputs(rng), ModalityMask(use_S_hist=False))
    assert np.array_equal(x.subgoals.data, np.zeros((3, 4)))
    assert np.array_equal((x.instruction + x.subgoals).data, x.instruction.data)


def test_no_visual_history_zeros_first_token(rng):
    x = apply_modality_mask(_inputs(rng), ABLATION_ROWS["no_history"])
    hist = VisualHistory(4)
    V = integrate_visual(hist, (x.rgb_now, x.bbox_now)).data
    assert np.array_equal((x.rgb_past + x.bbox_past).data, V[0])
    assert np.array_equal(V[0], np.zeros(4))


@settings(max_examples=64, deadline=None)
@given(st.lists(st.booleans(), min_size=5, max_size=5))
def test_mask_zeroes_exactly_the_disabled_fields(flags):
    rng = np.random.default_rng(0)
    mask = ModalityMask(*flags)
    x = _inputs(rng)
    y = apply_modality_mask(x, mask)
    enabled = dict(zip(FIELDS, [flags[0], flags[1], flags[2], flags[3], True, flags[4]]))
    for f in FIELDS:
        a, b = getattr(x, f).data, getattr(y, f).data
        assert b.shape == a.shape
        assert np.array_equal(b, a) if enabled[f] else not b.any()
