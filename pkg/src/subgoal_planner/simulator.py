"""Closed-loop plan/act execution with failure injection."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModalityMask
from .dataset import (
    FORMAT_VERSION,
    Episode,
    Step,
    dumps_record,
    read_records,
    step_from_dict,
    step_to_dict,
)
from .heads import SubGoal
from .history import SubGoalHistory, VisualHistory, push_visual
from .vocab import EMPTY, NO_OBJECT, PORTABLE
from .world import (
    FAILED,
    SUCCESS,
    Scene,
    Task,
    WorldState,
    _resolve,
    drop_held,
    goal_satisfied,
    initial_state,
    render,
    step_world,
    teleport_away,
)

NAVIGATION_ERROR = "navigation_error"
MANIPULATION_ERROR = "manipulation_error"
FAILURE_KINDS = (NAVIGATION_ERROR, MANIPULATION_ERROR)
STATUSES = ("success", "stop_without_success", "step_limit")


# -- failure injection ---------------------------------------------------------------


@dataclass
class FailureInjector:
    """Corrupts the outcome of scheduled steps (0-based step indices).

    navigation_error: the sub-goal is not carried out and the agent ends up next to some
    other receptacle, never next to the intended destination.
    manipulation_error: the sub-goal is carried out, then the held object falls to a free
    cell near the agent; if the sub-goal released the object, it lands there instead.
    Both report ``failed``.
    """

    schedule: Sequence[tuple[int, str]] = ()
    seed: int = 0
    fired: set = field(default_factory=set, init=False)

    def __post_init__(self):
        self.schedule = tuple((int(s), str(k)) for s, k in self.schedule)
        steps = [s for s, _ in self.schedule]
        for s, kind in self.schedule:
            if kind not in FAILURE_KINDS:
                raise ValueError(f"unknown failure kind {kind!r}")
            if s < 0:
                raise ValueError("failure steps are non-negative")
        if len(set(steps)) != len(steps):
            raise ValueError("at most one failure per step")
        self.rng = np.random.default_rng(self.seed)

    def pending(self, step: int) -> str | None:
        for s, kind in self.schedule:
            if s == step and s not in self.fired:
                return kind
        return None

    def apply(self, step: int, before: WorldState, subgoal: SubGoal) -> tuple[WorldState, str, str | None]:
        kind = self.pending(step)
        if kind is None:
            after, outcome = step_world(before, subgoal)
            return after, outcome, None
        self.fired.add(step)
        if kind == NAVIGATION_ERROR:
            avoid = _resolve(before, subgoal.object)[0] if subgoal.action == "Navigate" else None
            after = teleport_away(before, avoid, self.rng)
        else:
            after, _ = step_world(before, subgoal)
            if after.held is not None:
                after = drop_held(after, self.rng)
            elif before.held is not None:
                after = drop_held(before, self.rng)
            else:
                after = before.copy()
        if after.step == before.step:
            after.step += 1
        return after, FAILED, kind

    @classmethod
    def parse(cls, specs: Sequence[str], seed: int = 0) -> FailureInjector:
        """From strings like ``navigation_error@2``."""
        schedule = []
        for spec in specs:
            kind, sep, step = spec.partition("@")
            if not sep:
                raise ValueError(f"failure spec {spec!r} is not KIND@STEP")
            schedule.append((int(step), kind))
        return cls(schedule, seed)


# -- policies -------------------------------------------------------------------------


@dataclass
class AgentView:
    """What a policy receives each step. ``state`` is privileged and only read by oracles."""

    rgb: np.ndarray
    bbox_mask: np.ndarray
    instruction: str
    subgoals: SubGoalHistory
    outcomes: list[str]
    state: WorldState


class Policy:
    def reset(self, instruction: str) -> None:
        pass

    def act(self, view: AgentView) -> SubGoal:
        raise NotImplementedError


class ScriptedPolicy(Policy):
    """Replays a fixed sub-goal list, then keeps issuing Stop."""

    def __init__(self, plan: Sequence[SubGoal]):
        self.plan = list(plan)

    def reset(self, instruction: str) -> None:
        self.i = 0

    def act(self, view: AgentView) -> SubGoal:
        sg = self.plan[self.i] if self.i < len(self.plan) else SubGoal("Stop")
        self.i += 1
        return sg


def plan_succeeds(state: WorldState, plan: Sequence[SubGoal], task: Task) -> bool:
    for sg in plan:
        if sg.action == "Stop":
            return goal_satisfied(state, task)
        state, outcome = step_world(state, sg)
        if outcome != SUCCESS:
            return False
    return False


class RecoveryOraclePolicy(Policy):
    """Follows a ground-truth plan; after a failed step it inserts the fewest corrective
    sub-goals (Navigate / PickUp over classes the plan mentions) that make the rest of the
    plan, with or without retrying the failed sub-goal, succeed from the true world state."""

    def __init__(self, plan: Sequence[SubGoal], task: Task, max_fix: int = 3):
        self.plan = list(plan)
        self.task = task
        self.max_fix = max_fix

    def reset(self, instruction: str) -> None:
        self.queue = list(self.plan)
        self.last: SubGoal | None = None

    def _candidates(self, state: WorldState, rest: list[SubGoal]) -> list[SubGoal]:
        names = set()
        for sg in self.plan + rest:
            names.update(n for n in (sg.object, sg.receptacle) if n not in (NO_OBJECT, EMPTY))
        if state.held is not None:
            names.add(state.objects[state.held].cls)
        names = sorted(names)
        return [SubGoal("Navigate", n) for n in names] + [SubGoal("PickUp", n) for n in names if n in PORTABLE]

    def repair(self, state: WorldState, failed: SubGoal) -> list[SubGoal]:
        rest = [failed] + self.queue
        cands = self._candidates(state, rest)
        for cost in range(self.max_fix + 2):
            for k, tail in ((cost - 1, rest), (cost, rest[1:])):
                if k < 0 or k > self.max_fix:
                    continue
                for fix in itertools.product(cands, repeat=k):
                    if plan_succeeds(state, list(fix) + tail, self.task):
                        return list(fix) + tail
        return rest

    def act(self, view: AgentView) -> SubGoal:
        if view.outcomes and view.outcomes[-1] == FAILED and self.last is not None:
            self.queue = self.repair(view.state, self.last)
        self.last = self.queue.pop(0) if self.queue else SubGoal("Stop")
        return self.last


class PlannerPolicy(Policy):
    """Wraps a trained model. The current frame enters the visual history after its own
    prediction, matching how histories were built for training."""

    def __init__(self, model, mask: ModalityMask | None = None):
        self.model = model
        self.mask = mask or ModalityMask()

    def reset(self, instruction: str) -> None:
        self.history = VisualHistory(window=self.model.cfg.history)

    def act(self, view: AgentView) -> SubGoal:
        with T.no_grad():
            current = self.model.embed_observation(view.rgb, view.bbox_mask)
            sg = self.model.predict_step(current, self.history, view.subgoals, view.instruction, self.mask)
        push_visual(self.history, *current)
        return sg


# -- the loop --------------------------------------------------------------------------


@dataclass
class Record:
    rgb: np.ndarray
    bbox_mask: np.ndarray
    subgoal: SubGoal
    outcome: str
    failure: str | None = None


@dataclass
class Trajectory:
    instruction: str
    scene: Scene
    task: Task
    agent_start: tuple[int, int]
    records: list[Record] = field(default_factory=list)
    status: str = "step_limit"
    step_limit: int = 0
    schedule: tuple = ()
    injector_seed: int = 0

    @property
    def subgoals(self) -> list[SubGoal]:
        return [r.subgoal for r in self.records]

    @property
    def failures_injected(self) -> int:
        return sum(r.failure is not None for r in self.records)

    @property
    def failures_recovered(self) -> int:
        """Injected failures in a run that still ended in success."""
        return self.failures_injected if self.status == "success" else 0

    def summary(self) -> str:
        return (
            f"status={self.status} steps={len(self.records)} "
            f"failures_injected={self.failures_injected} failures_recovered={self.failures_recovered}"
        )


def default_step_limit(plan_length: int) -> int:
    return 3 * plan_length


def run_agent(
    policy: Policy,
    scene: Scene,
    instruction: str,
    injector: FailureInjector | None = None,
    step_limit: int = 30,
    *,
    task: Task,
    start: tuple[int, int],
) -> Trajectory:
    """Render, predict, execute (possibly corrupted), append to history; until Stop or the limit."""
    if step_limit < 1:
        raise ValueError("step limit must be positive")
    injector = injector or FailureInjector()
    state = initial_state(scene, start)
    subgoals = SubGoalHistory()
    outcomes: list[str] = []
    traj = Trajectory(
        instruction, scene, task, tuple(start), step_limit=step_limit,
        schedule=tuple(injector.schedule), injector_seed=injector.seed,
    )
    policy.reset(instruction)
    for step in range(step_limit):
        rgb, mask = render(state)
        sg = policy.act(AgentView(rgb, mask, instruction, subgoals, outcomes, state.copy()))
        state, outcome, failure = injector.apply(step, state, sg)
        traj.records.append(Record(rgb, mask, sg, outcome, failure))
        subgoals.append(sg)
        outcomes.append(outcome)
        if state.done:
            traj.status = "success" if goal_satisfied(state, task) else "stop_without_success"
            break
    return traj


def run_episode(
    policy: Policy,
    episode: Episode,
    injector: FailureInjector | None = None,
    step_limit: int | None = None,
) -> Trajectory:
    limit = step_limit if step_limit is not None else default_step_limit(len(episode.steps))
    return run_agent(
        policy, episode.scene, episode.instruction, injector, limit, task=episode.task, start=episode.agent_start
    )


def oracle_policy(episode: Episode) -> ScriptedPolicy:
    return ScriptedPolicy(episode.subgoals)


def recovery_policy(episode: Episode) -> RecoveryOraclePolicy:
    return RecoveryOraclePolicy(episode.subgoals, episode.task)


def replay(traj: Trajectory) -> Trajectory:
    """Re-run the logged sub-goals under the same injector schedule and seed."""
    injector = FailureInjector(traj.schedule, traj.injector_seed)
    return run_agent(
        ScriptedPolicy(traj.subgoals), traj.scene, traj.instruction, injector, traj.step_limit,
        task=traj.task, start=traj.agent_start,
    )


# -- trajectory file -------------------------------------------------------------------


def trajectory_to_dict(traj: Trajectory) -> dict:
    steps = []
    for r in traj.records:
        d = step_to_dict(Step(r.rgb, r.bbox_mask, r.subgoal))
        d["outcome"] = r.outcome
        d["failure"] = r.failure
        steps.append(d)
    return {
        "version": FORMAT_VERSION,
        "kind": "trajectory",
        "instruction": traj.instruction,
        "scene_id": traj.scene.scene_id,
        "scene": traj.scene.to_dict(),
        "task": traj.task.to_dict(),
        "agent_start": list(traj.agent_start),
        "status": traj.status,
        "step_limit": traj.step_limit,
        "schedule": [[s, k] for s, k in traj.schedule],
        "injector_seed": traj.injector_seed,
        "steps": steps,
    }


def trajectory_from_dict(data: dict) -> Trajectory:
    if data.get("version") != FORMAT_VERSION or data.get("kind") != "trajectory":
        raise ValueError("not a trajectory record of a supported version")
    if data["status"] not in STATUSES:
        raise ValueError(f"unknown status {data['status']!r}")
    records = []
    for s in data["steps"]:
        step = step_from_dict(s)
        records.append(Record(step.rgb, step.bbox_mask, step.subgoal, s["outcome"], s["failure"]))
    return Trajectory(
        instruction=data["instruction"],
        scene=Scene.from_dict(data["scene"]),
        task=Task(**data["task"]),
        agent_start=tuple(data["agent_start"]),
        records=records,
        status=data["status"],
        step_limit=int(data["step_limit"]),
        schedule=tuple((int(s), str(k)) for s, k in data["schedule"]),
        injector_seed=int(data["injector_seed"]),
    )


def write_trajectory(traj: Trajectory | Sequence[Trajectory], path) -> None:
    trajs = [traj] if isinstance(traj, Trajectory) else list(traj)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trajs:
            fh.write(dumps_record(trajectory_to_dict(t)) + "\n")


def read_trajectories(path) -> list[Trajectory]:
    return read_records(path, trajectory_from_dict)


def read_trajectory(path) -> Trajectory:
    trajs = read_trajectories(path)
    if len(trajs) != 1:
        raise ValueError(f"{path} holds {len(trajs)} trajectories, expected one")
    return trajs[0]


def trajectories_equal(a: Trajectory, b: Trajectory) -> bool:
    return json.dumps(trajectory_to_dict(a), sort_keys=True) == json.dumps(trajectory_to_dict(b), sort_keys=True)


def recovery_rate(trajs: Sequence[Trajectory]) -> float:
    injected = [t for t in trajs if t.failures_injected]
    return sum(t.status == "success" for t in injected) / len(injected) if injected else float("nan")


__all__ = [
    "FAILURE_KINDS",
    "MANIPULATION_ERROR",
    "NAVIGATION_ERROR",
    "AgentView",
    "FailureInjector",
    "PlannerPolicy",
    "Policy",
    "Record",
    "RecoveryOraclePolicy",
    "ScriptedPolicy",
    "Trajectory",
    "read_trajectory",
    "replay",
    "run_agent",
    "run_episode",
    "write_trajectory",
]
