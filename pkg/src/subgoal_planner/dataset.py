"""Synthetic instruction-following episodes: generation, splits, file format, modality masks."""

from __future__ import annotations

import base64
import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .config import ModalityMask
from .heads import SubGoal
from .tensor import Tensor
from .vocab import OPENABLE, PLACEMENT_RECEPTACLES, SLICEABLE
from .world import (
    SUCCESS,
    Scene,
    Task,
    WorldConfig,
    generate_scene,
    goal_satisfied,
    initial_state,
    random_start,
    render,
    step_world,
)

FORMAT_VERSION = 1
SPLITS = ("train", "valid_seen", "valid_unseen")
TEMPLATES = ("pick_place", "pick_two_place", "clean_place", "heat_place", "slice_place")

INSTRUCTION_FORMS = {
    "pick_place": (
        "Put a {o} on the {r}.",
        "Place the {o} on the {r}.",
        "Move a {o} to the {r}.",
        "Pick up the {o} and set it on the {r}.",
    ),
    "pick_two_place": (
        "Put two {o}s on the {r}.",
        "Place both {o}s on the {r}.",
        "Move a pair of {o}s to the {r}.",
        "Carry two {o}s over to the {r}.",
    ),
    "clean_place": (
        "Put a clean {o} on the {r}.",
        "Rinse the {o} and place it on the {r}.",
        "Wash a {o} in the sink, then put it on the {r}.",
        "Place a washed {o} on the {r}.",
    ),
    "heat_place": (
        "Put a heated {o} on the {r}.",
        "Warm the {o} in the microwave and place it on the {r}.",
        "Cook a {o} and set it on the {r}.",
        "Place a hot {o} on the {r}.",
    ),
    "slice_place": (
        "Put a sliced {o} on the {r}.",
        "Slice the {o} and place it on the {r}.",
        "Cut a {o} with a knife, then put it on the {r}.",
        "Place a slice of {o} on the {r}.",
    ),
}


class EpisodeError(ValueError):
    pass


class EpisodeFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Step:
    rgb: np.ndarray
    bbox_mask: np.ndarray
    subgoal: SubGoal


@dataclass
class Episode:
    instruction: str
    scene_id: str
    split: str
    task: Task
    scene: Scene
    agent_start: tuple[int, int]
    steps: list[Step] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def subgoals(self) -> list[SubGoal]:
        return [s.subgoal for s in self.steps]


def natural_name(cls: str) -> str:
    return " ".join(re.findall(r"[A-Z][a-z]*", cls)).lower()


def expand_template(task: Task) -> list[SubGoal]:
    o, r = task.object, task.receptacle

    def nav(target: str) -> SubGoal:
        return SubGoal("Navigate", target)

    fetch = [nav(o), SubGoal("PickUp", o)]
    place = [nav(r), SubGoal("Put", o, r)]
    if task.template == "pick_place":
        seq = fetch + place
    elif task.template == "pick_two_place":
        seq = fetch + place + fetch + place
    elif task.template == "clean_place":
        seq = fetch + [
            nav("SinkBasin"),
            SubGoal("Put", o, "SinkBasin"),
            SubGoal("ToggleOn", "Faucet"),
            SubGoal("ToggleOff", "Faucet"),
            SubGoal("PickUp", o),
        ] + place
    elif task.template == "heat_place":
        m = "Microwave"
        seq = fetch + [
            nav(m),
            SubGoal("Open", m),
            SubGoal("Put", o, m),
            SubGoal("Close", m),
            SubGoal("ToggleOn", m),
            SubGoal("ToggleOff", m),
            SubGoal("Open", m),
            SubGoal("PickUp", o),
            SubGoal("Close", m),
        ] + place
    elif task.template == "slice_place":
        seq = [nav("Knife"), SubGoal("PickUp", "Knife"), nav(o), SubGoal("Slice", o)]
        seq += [nav(r), SubGoal("Put", "Knife", r)] + fetch + place
    else:
        raise EpisodeError(f"unknown task template {task.template!r}")
    return seq + [SubGoal("Stop")]


def feasible_objects(scene: Scene, template: str) -> list[str]:
    counts: dict[str, int] = {}
    for p in scene.objects:
        counts[p.cls] = counts.get(p.cls, 0) + 1
    present = scene.classes()
    if template == "pick_two_place":
        return sorted(c for c, n in counts.items() if n >= 2)
    if template == "slice_place":
        return sorted(c for c in counts if c in SLICEABLE) if "Knife" in counts else []
    if template == "clean_place" and "SinkBasin" not in present:
        return []
    if template == "heat_place" and not all(m in present for m in OPENABLE):
        return []
    return sorted(counts)


def feasible_receptacles(scene: Scene) -> list[str]:
    present = {p.cls for p in scene.receptacles}
    return [r for r in PLACEMENT_RECEPTACLES if r in present]


def generate_episode(
    scene: Scene,
    task_template: str | Task,
    seed: int,
    split: str = "train",
) -> Episode:
    """Expand a template into ground-truth sub-goals and render one observation per step."""
    rng = np.random.default_rng(seed)
    if isinstance(task_template, Task):
        task = task_template
    else:
        objects = feasible_objects(scene, task_template)
        receptacles = feasible_receptacles(scene)
        if not objects or not receptacles:
            raise EpisodeError(f"scene {scene.scene_id} cannot host template {task_template!r}")
        task = Task(task_template, str(rng.choice(objects)), str(rng.choice(receptacles)))
    present = scene.classes()
    for needed in (task.object, task.receptacle):
        if needed not in present:
            raise EpisodeError(f"{needed} is not in scene {scene.scene_id}")
    if task.template == "pick_two_place" and sum(p.cls == task.object for p in scene.objects) < 2:
        raise EpisodeError(f"scene {scene.scene_id} has fewer than two {task.object}")
    subgoals = expand_template(task)
    form = INSTRUCTION_FORMS[task.template][int(rng.integers(len(INSTRUCTION_FORMS[task.template])))]
    instruction = form.format(o=natural_name(task.object), r=natural_name(task.receptacle))
    start = random_start(scene, rng)
    state = initial_state(scene, start)
    steps = []
    for sg in subgoals:
        rgb, mask = render(state)
        steps.append(Step(rgb, mask, sg))
        state, outcome = step_world(state, sg)
        if outcome != SUCCESS:
            raise EpisodeError(f"ground-truth sub-goal {sg} failed in scene {scene.scene_id}")
    if not goal_satisfied(state, task):
        raise EpisodeError(f"ground-truth plan does not achieve {task}")
    return Episode(instruction, scene.scene_id, split, task, scene, start, steps)


@dataclass
class CorpusConfig:
    n_scenes: int = 24
    n_unseen: int = 6
    episodes_per_scene: int = 25
    valid_seen_per_scene: int = 4
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def generate_corpus(config: CorpusConfig | None = None) -> list[Episode]:
    """Seen scenes feed train and valid_seen; the last ``n_unseen`` scenes feed valid_unseen only."""
    cfg = config or CorpusConfig()
    if cfg.valid_seen_per_scene >= cfg.episodes_per_scene:
        raise ValueError("every seen scene needs at least one training episode")
    episodes = []
    n_seen = cfg.n_scenes - cfg.n_unseen
    for i in range(cfg.n_scenes):
        scene_seed = int(np.random.default_rng([cfg.seed, 0, i]).integers(2**31))
        scene = generate_scene(scene_seed, cfg.world, scene_id=f"scene_{i:03d}")
        templates = [t for t in TEMPLATES if feasible_objects(scene, t) and feasible_receptacles(scene)]
        pick = np.random.default_rng([cfg.seed, 1, i])
        for j in range(cfg.episodes_per_scene):
            if i >= n_seen:
                split = "valid_unseen"
            else:
                split = "valid_seen" if j < cfg.valid_seen_per_scene else "train"
            template = templates[int(pick.integers(len(templates)))]
            seed = int(np.random.default_rng([cfg.seed, 2, i, j]).integers(2**31))
            episodes.append(generate_episode(scene, template, seed, split))
    return episodes


def split_of(episodes: Iterable[Episode], split: str) -> list[Episode]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [e for e in episodes if e.split == split]


# -- file format ----------------------------------------------------------------------


def encode_image(img: np.ndarray) -> dict:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    c = img.shape[2] if img.ndim == 3 else 1
    return {"h": h, "w": w, "c": c, "data": base64.b64encode(img.tobytes()).decode("ascii")}


def decode_image(obj: dict) -> np.ndarray:
    h, w, c = int(obj["h"]), int(obj["w"]), int(obj["c"])
    raw = np.frombuffer(base64.b64decode(obj["data"], validate=True), dtype=np.uint8)
    if raw.size != h * w * c:
        raise ValueError(f"image payload has {raw.size} values, expected {h}*{w}*{c}")
    return raw.reshape((h, w, c) if c > 1 else (h, w)).copy()


def step_to_dict(step: Step) -> dict:
    sg = step.subgoal
    return {
        "rgb": encode_image(step.rgb),
        "bbox_mask": encode_image(step.bbox_mask),
        "action": sg.action,
        "object": sg.object,
        "receptacle": sg.receptacle,
    }


def step_from_dict(data: dict) -> Step:
    return Step(
        decode_image(data["rgb"]),
        decode_image(data["bbox_mask"]),
        SubGoal(data["action"], data["object"], data["receptacle"]),
    )


def episode_to_dict(ep: Episode) -> dict:
    return {
        "version": FORMAT_VERSION,
        "instruction": ep.instruction,
        "scene_id": ep.scene_id,
        "split": ep.split,
        "task": ep.task.to_dict(),
        "agent_start": list(ep.agent_start),
        "scene": ep.scene.to_dict(),
        "steps": [step_to_dict(s) for s in ep.steps],
    }


def episode_from_dict(data: dict) -> Episode:
    if data.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {data.get('version')!r}")
    if data["split"] not in SPLITS:
        raise ValueError(f"unknown split {data['split']!r}")
    return Episode(
        instruction=data["instruction"],
        scene_id=data["scene_id"],
        split=data["split"],
        task=Task(**data["task"]),
        scene=Scene.from_dict(data["scene"]),
        agent_start=tuple(data["agent_start"]),
        steps=[step_from_dict(s) for s in data["steps"]],
    )


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_episodes(episodes: Iterable[Episode], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            fh.write(dumps_record(episode_to_dict(ep)) + "\n")


def read_records(path: str | Path, parse) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(parse(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise EpisodeFormatError(lineno, f"malformed record ({exc})") from exc
    return out


def read_episodes(path: str | Path) -> list[Episode]:
    return read_records(path, episode_from_dict)


def episodes_equal(a: Episode, b: Episode) -> bool:
    if (a.instruction, a.scene_id, a.split, a.task, tuple(a.agent_start)) != (
        b.instruction,
        b.scene_id,
        b.split,
        b.task,
        tuple(b.agent_start),
    ):
        return False
    if a.scene.to_dict() != b.scene.to_dict() or len(a.steps) != len(b.steps):
        return False
    return all(
        x.subgoal == y.subgoal and np.array_equal(x.rgb, y.rgb) and np.array_equal(x.bbox_mask, y.bbox_mask)
        for x, y in zip(a.steps, b.steps)
    )


# -- modality masking -------------------------------------------------------------------


@dataclass
class ModelInputs:
    """Encoded per-step inputs before integration. Shapes: (..., d) or (..., T, d)."""

    rgb_now: Tensor
    bbox_now: Tensor
    rgb_past: Tensor
    bbox_past: Tensor
    instruction: Tensor
    subgoals: Tensor


_MASK_FIELDS = {
    "rgb_now": "use_O_n",
    "bbox_now": "use_B_n",
    "rgb_past": "use_O_hist",
    "bbox_past": "use_B_hist",
    "subgoals": "use_S_hist",
    "instruction": "use_I",
}


def apply_modality_mask(inputs: ModelInputs, mask: ModalityMask) -> ModelInputs:
    """Replace every disabled modality with zeros of the same shape."""
    values = {}
    for name, flag in _MASK_FIELDS.items():
        x = getattr(inputs, name)
        values[name] = x if getattr(mask, flag) else Tensor(np.zeros(x.shape, dtype=T.DTYPE))
    return ModelInputs(**values)


__all__ = [
    "CorpusConfig",
    "Episode",
    "EpisodeError",
    "EpisodeFormatError",
    "ModalityMask",
    "ModelInputs",
    "Step",
    "apply_modality_mask",
    "generate_corpus",
    "generate_episode",
    "generate_scene",
    "read_episodes",
    "write_episodes",
]
