"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (see ``verdict`` in conftest) that is printed in the
pytest terminal summary. The training-based criteria are slow (tens of minutes in total).
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np
import pytest

from subgoal_planner import tensor as T
from subgoal_planner.checkpoint import load_checkpoint, save_checkpoint
from subgoal_planner.config import ABLATION_ROWS, ModelConfig, TrainConfig
from subgoal_planner.dataset import (
    CorpusConfig,
    Episode,
    episodes_equal,
    generate_corpus,
    generate_episode,
    read_episodes,
    split_of,
    write_episodes,
)
from subgoal_planner.fusion import XMHA, FusionStack, fuse, x_mha
from subgoal_planner.heads import SubGoal
from subgoal_planner.history import VisualHistory, integrate_visual, push_visual
from subgoal_planner.model import PlannerModel, collate, encode_episode
from subgoal_planner.simulator import (
    FAILURE_KINDS,
    MANIPULATION_ERROR,
    NAVIGATION_ERROR,
    FailureInjector,
    PlannerPolicy,
    RecoveryOraclePolicy,
    oracle_policy,
    read_trajectories,
    recovery_rate,
    run_episode,
    trajectories_equal,
    write_trajectory,
)
from subgoal_planner.tensor import Tensor
from subgoal_planner.trainer import (
    build_vocab,
    evaluate,
    make_checkpoint,
    model_from_checkpoint,
    train,
)
from subgoal_planner.world import Task

from . import oracles
from .conftest import tiny_config
from .test_simulator import PLAN, TASK, hand_scene
from .test_simulator import run as run_hand
from .test_trainer import TableModel

pytestmark = pytest.mark.slow

ABLATION_SEEDS = (0, 1, 2)
ABLATION_EPOCHS = 30
OVERFIT_MAX_EPOCHS = 200
FD_STEP = 1e-5
FD_REL_TOL = 1e-4
FD_ABS_FLOOR = 1e-6

REPORTS = []  # every EvalReport produced here, for the Total <= min(head) audit


def _evaluate(*args, **kwargs):
    rep = evaluate(*args, **kwargs)
    REPORTS.append(rep)
    return rep


@pytest.fixture(scope="module")
def desk_corpus():
    return generate_corpus(CorpusConfig())


# -- 1 ----------------------------------------------------------------------------------


def test_01_gradient_check(verdict):
    start = time.time()
    corpus = generate_corpus(CorpusConfig(n_scenes=2, n_unseen=0, episodes_per_scene=2, valid_seen_per_scene=0, seed=1))
    vocab = build_vocab(corpus)
    model = PlannerModel(tiny_config(d=16, max_len=8, text_vocab_size=len(vocab), seed=2), vocab)
    ep = corpus[0]
    short = Episode(ep.instruction, ep.scene_id, ep.split, ep.task, ep.scene, ep.agent_start, ep.steps[:4])
    batch = collate([encode_episode(short, vocab, 8)])

    def loss_value():
        with T.no_grad():
            return model.loss(batch).item()

    params = list(model.named_parameters())
    T.backward(model.loss(batch), [p for _, p in params])
    rng = np.random.default_rng(0)
    worst, worst_name, checked = 0.0, "", 0
    for name, p in params:
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(20, flat.size), replace=False)
        for i in picks:
            idx = np.unravel_index(int(i), p.data.shape)
            num = oracles.central_difference(loss_value, p.data, idx, FD_STEP)
            ana = float(p.grad[idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), FD_ABS_FLOOR)
            checked += 1
            if rel > worst:
                worst, worst_name = rel, name
    elapsed = time.time() - start
    ok = worst < FD_REL_TOL and elapsed < 120 and len(params) > 0
    verdict(1, ok, f"{checked} coordinates over {len(params)} tensors, max rel err {worst:.2e} ({worst_name}), {elapsed:.0f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------------------


def test_02_fusion_oracle_equivalence(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for heads in (1, 4):
        for _ in range(100):
            d = 8
            n_l = int(rng.integers(1, 7))
            V, L = rng.normal(size=(2, d)), rng.normal(size=(n_l, d))
            mask = np.ones(n_l, bool)
            mask[int(rng.integers(1, n_l + 1)):] = False
            xm = XMHA(d, heads, rng)
            v_f, l_f = x_mha(Tensor(V), Tensor(L), xm, mask)
            rv, rl = oracles.xmha_from_state(V, L, xm.state_dict(), heads, mask)
            worst = max(worst, np.abs(v_f.data - rv).max(), np.abs(l_f.data - rl).max())
            cfg = tiny_config(d=d, heads=heads, text_vocab_size=10)
            fs = FusionStack(cfg, rng)
            out = fuse(Tensor(V), Tensor(L), fs, mask)
            ref = oracles.fuse(V, L, fs.state_dict(), heads, cfg.fusion_stages, mask)
            worst = max(worst, np.abs(out.F.data - ref).max())
    ok = worst < 1e-9
    verdict(2, ok, f"200 x_mha + 200 fuse instances (h=1,4), max abs diff {worst:.1e}")
    assert ok


# -- 3 ----------------------------------------------------------------------------------


def test_03_residual_identity(verdict):
    rng = np.random.default_rng(3)
    ok = True
    for heads in (1, 2, 4):
        fs = FusionStack(tiny_config(d=8, heads=heads, text_vocab_size=10), rng)
        stage = fs.stages[0]
        stage.W_p_vis.data[...] = 0.0
        stage.W_p_lang.data[...] = 0.0
        for _ in range(20):
            V, L = rng.normal(size=(2, 8)), rng.normal(size=(5, 8))
            mask = np.array([True, True, True, False, False])
            v_f, l_f = x_mha(Tensor(V), Tensor(L), stage, mask)
            ok &= v_f.data.tobytes() == V.tobytes() and l_f.data.tobytes() == L.tobytes()
    verdict(3, ok, "zeroed output projections give bitwise identity on both streams (60 instances)")
    assert ok


# -- 4 ----------------------------------------------------------------------------------


def test_04_visual_history_equivalence(verdict):
    rng = np.random.default_rng(4)
    window, worst, ok = 4, 0.0, True
    for trial in range(25):
        h = VisualHistory(window)
        pairs = []
        for n in range(window + 1):
            cur = (Tensor(rng.normal(size=16)), Tensor(rng.normal(size=16)))
            got = integrate_visual(h, cur).data
            ref = oracles.visual_feature([(o.data, b.data) for o, b in pairs[-window:]], (cur[0].data, cur[1].data))
            worst = max(worst, np.abs(got - ref).max())
            if n == 0:
                ok &= not got[0].any()
            push_visual(h, *cur)
            pairs.append(cur)
    ok &= worst <= 1e-12
    verdict(4, ok, f"buffer lengths 0..{window}, empty history gives zeros, max abs diff {worst:.1e}")
    assert ok


# -- 5 ----------------------------------------------------------------------------------


def test_05_metric_integrity(verdict):
    scene = hand_scene()
    eps = [generate_episode(scene, Task("pick_place", "Pencil", r), i, "valid_seen")
           for i, r in enumerate(("Desk", "DiningTable", "Shelf"))]
    errors = {0: (0,), 3: (1, 2), 7: (1,), 11: (0, 1), 14: (2,)}
    rep = _evaluate(TableModel(build_vocab(eps), errors), eps, "valid_seen", episodes_per_batch=2)
    hand = (rep.action, rep.object, rep.receptacle, rep.total) == (13, 12, 13, 10)
    verdict(5, hand, f"hand-scored fixture counts {rep.action}/{rep.object}/{rep.receptacle}/{rep.total} of {rep.n_steps}")
    assert hand


# -- 6 ----------------------------------------------------------------------------------


def test_06_overfit(verdict):
    corpus = generate_corpus(CorpusConfig(n_scenes=4, n_unseen=0, episodes_per_scene=16, valid_seen_per_scene=0))
    assert len(corpus) == 64
    start = time.time()
    seen = {}

    def probe(epoch, result):
        if epoch % 5:
            return False
        rep = _evaluate(result.model, corpus, None)
        seen.update(epoch=epoch, total=rep.accuracy("total"), loss=result.epoch_losses[-1])
        return rep.accuracy("total") >= 95.0 and result.epoch_losses[-1] < 0.05

    train(corpus, TrainConfig(epochs=OVERFIT_MAX_EPOCHS, seed=0), on_epoch=probe)
    elapsed = time.time() - start
    ok = seen["total"] >= 95.0 and elapsed <= 1800
    verdict(6, ok, f"train Total {seen['total']:.1f}% and epoch loss {seen['loss']:.4f} at epoch {seen['epoch']} "
                   f"({elapsed:.0f}s)")
    assert ok


# -- 7 ----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ablation_runs(desk_corpus):
    train_eps = split_of(desk_corpus, "train")
    vocab = build_vocab(train_eps)
    runs = {}
    start = time.time()
    for seed in ABLATION_SEEDS:
        for row in ("full", "no_history"):
            mask = ABLATION_ROWS[row]
            result = train(train_eps, TrainConfig(epochs=ABLATION_EPOCHS, seed=seed, mask=mask), vocab=vocab)
            reports = {s: _evaluate(result.model, desk_corpus, s, mask) for s in ("valid_seen", "valid_unseen")}
            runs[seed, row] = (result.model, reports)
    runs["elapsed"] = time.time() - start
    return runs


def test_07_ablation_direction(ablation_runs, verdict):
    holds = []
    details = []
    for seed in ABLATION_SEEDS:
        full = ablation_runs[seed, "full"][1]
        nohist = ablation_runs[seed, "no_history"][1]
        fs, fu = full["valid_seen"].accuracy("total"), full["valid_unseen"].accuracy("total")
        ns, nu = nohist["valid_seen"].accuracy("total"), nohist["valid_unseen"].accuracy("total")
        a = fu >= nu
        b = (ns - nu) > (fs - fu)
        holds.append(a and b)
        details.append(f"seed {seed}: full {fs:.1f}/{fu:.1f} no_history {ns:.1f}/{nu:.1f}")
    ok = sum(holds) >= 2 and ablation_runs["elapsed"] <= 7200
    verdict(7, ok, f"ordering holds in {sum(holds)}/3 seeds ({'; '.join(details)}), {ablation_runs['elapsed']:.0f}s")
    assert ok


# -- 8 ----------------------------------------------------------------------------------


def test_08_simulator_closure(desk_corpus, verdict):
    ok_count = sum(run_episode(oracle_policy(ep), ep).status == "success" for ep in desk_corpus)
    ok = ok_count == len(desk_corpus)
    verdict(8, ok, f"{ok_count}/{len(desk_corpus)} ground-truth sequences reach success")
    assert ok


# -- 9 ----------------------------------------------------------------------------------


def test_09_recovery_mechanism(verdict):
    nav = run_hand(RecoveryOraclePolicy(PLAN, TASK), [(2, NAVIGATION_ERROR)], seed=1)
    man = run_hand(RecoveryOraclePolicy(PLAN, TASK), [(2, MANIPULATION_ERROR)], seed=1)
    ok = (
        nav.subgoals == PLAN[:3] + [SubGoal("Navigate", "Desk")] + PLAN[3:]
        and man.subgoals == PLAN[:3] + [SubGoal("PickUp", "Pencil")] + PLAN[3:]
        and nav.status == man.status == "success"
    )
    verdict(9, ok, "scripted recovery: navigation_error -> retry Navigate; manipulation_error -> one PickUp")
    assert ok


def test_09b_learned_model_recovery_rate(ablation_runs, desk_corpus, verdict):
    model = ablation_runs[ABLATION_SEEDS[0], "full"][0]
    episodes = split_of(desk_corpus, "valid_seen")
    rng = np.random.default_rng(9)
    trajs = []
    for i in range(50):
        ep = episodes[i % len(episodes)]
        kind = FAILURE_KINDS[i % 2]
        step = int(rng.integers(1, len(ep) - 1))
        trajs.append(run_episode(PlannerPolicy(model), ep, FailureInjector([(step, kind)], seed=i)))
    rate = recovery_rate(trajs)
    clean = sum(run_episode(PlannerPolicy(model), ep).status == "success" for ep in episodes[:50])
    verdict(9, True, f"learned model recovery rate {100 * rate:.0f}% on 50 injected runs "
                     f"(soft target 60%, non-gating; {clean}/50 without injection)")


# -- 10 ---------------------------------------------------------------------------------


def test_10_reproducibility_and_persistence(ablation_runs, desk_corpus, tmp_path, verdict):
    checks = {}
    cfg = CorpusConfig(n_scenes=3, n_unseen=1, episodes_per_scene=4, valid_seen_per_scene=1, seed=10)
    write_episodes(generate_corpus(cfg), tmp_path / "a.jsonl")
    write_episodes(generate_corpus(cfg), tmp_path / "b.jsonl")
    checks["corpus bytes"] = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    small = read_episodes(tmp_path / "a.jsonl")
    checks["episode round-trip"] = all(episodes_equal(x, y) for x, y in zip(generate_corpus(cfg), small))

    tc = TrainConfig(epochs=2, seed=10, model=ModelConfig(d=16, heads=2, depth_visual=1, depth_text=1, max_len=16))
    r1, r2 = train(split_of(small, "train"), tc), train(split_of(small, "train"), tc)
    checks["training bits"] = r1.trace == r2.trace and all(
        np.array_equal(a, b) for a, b in zip(r1.model.state_dict().values(), r2.model.state_dict().values()))
    ep = split_of(small, "valid_unseen")[0]
    t1 = run_episode(PlannerPolicy(r1.model), ep, FailureInjector([(1, NAVIGATION_ERROR)], seed=3))
    t2 = run_episode(PlannerPolicy(r2.model), ep, FailureInjector([(1, NAVIGATION_ERROR)], seed=3))
    checks["rollout bits"] = trajectories_equal(t1, t2)
    write_trajectory([t1, t2], tmp_path / "t.jsonl")
    checks["trajectory round-trip"] = all(trajectories_equal(t1, t) for t in read_trajectories(tmp_path / "t.jsonl"))

    model = ablation_runs[ABLATION_SEEDS[0], "full"][0]
    save_checkpoint(tmp_path / "m.ckpt", make_checkpoint(model))
    loaded = model_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"))
    checks["checkpoint accuracy"] = all(
        _evaluate(loaded, desk_corpus, s).accuracies == _evaluate(model, desk_corpus, s).accuracies
        for s in ("valid_seen", "valid_unseen"))
    ok = all(checks.values())
    verdict(10, ok, ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items()))
    assert ok


def test_shapes_of_default_corpus(desk_corpus):
    counts = {s: len(split_of(desk_corpus, s)) for s in ("train", "valid_seen", "valid_unseen")}
    assert counts == {"train": 378, "valid_seen": 72, "valid_unseen": 150}
    assert dataclasses.asdict(CorpusConfig())["n_scenes"] == 24


# -- 5, audited last ------------------------------------------------------------------


def test_99_total_bounded_on_every_report(verdict):
    bad = [r for r in REPORTS if r.total > min(r.action, r.object, r.receptacle)]
    ok = not bad and len(REPORTS) > 0
    verdict(5, ok, f"Total <= min(head) on all {len(REPORTS)} reports generated in this suite")
    assert ok
