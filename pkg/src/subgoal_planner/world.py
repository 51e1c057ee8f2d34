"""Toy grid world: scenes, state, sub-goal dynamics and the block renderer.

The dataset generator produces observations by replaying ground-truth
sub-goals through ``step_world``, and the simulator uses the same function,
so the two always agree on dynamics.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .encoders import build_bbox_mask
from .vocab import (
    ACTIONS,
    OBJECT_VOCAB,
    OPENABLE,
    PORTABLE,
    RECEPTACLES,
    SLICEABLE,
    TOGGLEABLE,
)

# Per-class base colours; scenes jitter them.
BASE_COLORS: dict[str, tuple[int, int, int]] = {
    "Pencil": (230, 200, 40),
    "Knife": (150, 150, 170),
    "Apple": (200, 30, 30),
    "Tomato": (230, 70, 50),
    "Potato": (160, 120, 60),
    "Bread": (210, 160, 90),
    "Lettuce": (60, 190, 60),
    "Egg": (235, 225, 200),
    "Mug": (60, 60, 200),
    "Plate": (200, 200, 230),
    "Cup": (120, 40, 160),
    "Faucet": (40, 160, 220),
    "DiningTable": (120, 70, 30),
    "CounterTop": (100, 100, 100),
    "SideTable": (150, 90, 50),
    "Shelf": (90, 60, 40),
    "Desk": (130, 110, 80),
    "Dresser": (110, 50, 70),
    "SinkBasin": (30, 90, 140),
    "Microwave": (50, 50, 50),
}
FLOOR_COLOR = (180, 170, 150)
AGENT_COLOR = (255, 255, 255)
MARKER_COLOR = (0, 0, 0)
LIGHT_COLOR = (255, 255, 0)

DIRECTIONS = ((-1, 0), (0, 1), (1, 0), (0, -1))  # N, E, S, W as (drow, dcol)

SUCCESS, FAILED = "success", "failed"


class SceneGenerationError(RuntimeError):
    pass


Cell = tuple[int, int]


@dataclass(frozen=True)
class Placement:
    cls: str
    cell: Cell


@dataclass
class WorldConfig:
    rows: int = 8
    cols: int = 8
    cell_px: int = 4
    n_objects: int = 7
    receptacles: tuple[str, ...] = RECEPTACLES
    palette_jitter: int = 40
    max_attempts: int = 200

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.rows * self.cell_px, self.cols * self.cell_px


@dataclass
class Scene:
    scene_id: str
    rows: int
    cols: int
    cell_px: int
    objects: list[Placement]
    receptacles: list[Placement]
    palette: dict[str, tuple[int, int, int]]
    floor: tuple[int, int, int] = FLOOR_COLOR

    def receptacle_cell(self, cls: str) -> Cell | None:
        for p in self.receptacles:
            if p.cls == cls:
                return p.cell
        return None

    def classes(self) -> set[str]:
        names = {p.cls for p in self.objects} | {p.cls for p in self.receptacles}
        if "SinkBasin" in names:
            names.add("Faucet")
        return names

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "rows": self.rows,
            "cols": self.cols,
            "cell_px": self.cell_px,
            "objects": [[p.cls, list(p.cell)] for p in self.objects],
            "receptacles": [[p.cls, list(p.cell)] for p in self.receptacles],
            "palette": {k: list(v) for k, v in sorted(self.palette.items())},
            "floor": list(self.floor),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Scene:
        return cls(
            scene_id=data["scene_id"],
            rows=int(data["rows"]),
            cols=int(data["cols"]),
            cell_px=int(data["cell_px"]),
            objects=[Placement(c, tuple(cell)) for c, cell in data["objects"]],
            receptacles=[Placement(c, tuple(cell)) for c, cell in data["receptacles"]],
            palette={k: tuple(v) for k, v in data["palette"].items()},
            floor=tuple(data["floor"]),
        )


def _neighbors(cell: Cell, rows: int, cols: int):
    r, c = cell
    for dr, dc in DIRECTIONS:
        nr, nc = r + dr, c + dc
        if 0 <= nr < rows and 0 <= nc < cols:
            yield nr, nc


def _layout_ok(occupied: set[Cell], rows: int, cols: int) -> bool:
    free = {(r, c) for r in range(rows) for c in range(cols)} - occupied
    if not free:
        return False
    start = next(iter(sorted(free)))
    seen = {start}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        for nb in _neighbors(cell, rows, cols):
            if nb in free and nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if seen != free:
        return False
    return all(any(nb in free for nb in _neighbors(cell, rows, cols)) for cell in occupied)


def generate_scene(seed: int, config: WorldConfig | None = None, scene_id: str | None = None) -> Scene:
    """Deterministic scene from ``seed``; placements never collide and stay reachable."""
    cfg = config or WorldConfig()
    rng = np.random.default_rng(seed)
    n_items = len(cfg.receptacles) + cfg.n_objects
    if n_items + 1 > cfg.rows * cfg.cols:
        raise SceneGenerationError(f"{n_items} items do not fit a {cfg.rows}x{cfg.cols} grid with an agent")
    if cfg.n_objects >= 2:
        distinct = list(rng.choice(PORTABLE, size=min(cfg.n_objects - 1, len(PORTABLE)), replace=False))
        while len(distinct) < cfg.n_objects - 1:
            distinct.append(str(rng.choice(PORTABLE)))
        classes = distinct + [str(rng.choice(distinct))]
    elif cfg.n_objects == 1:
        classes = [str(rng.choice(PORTABLE))]
    else:
        classes = []
    palette = {}
    for name, base in BASE_COLORS.items():
        jitter = rng.integers(-cfg.palette_jitter, cfg.palette_jitter + 1, size=3)
        palette[name] = tuple(int(v) for v in np.clip(np.array(base) + jitter, 20, 235))
    floor_jitter = rng.integers(-20, 21, size=3)
    floor = tuple(int(v) for v in np.clip(np.array(FLOOR_COLOR) + floor_jitter, 20, 235))
    all_cells = [(r, c) for r in range(cfg.rows) for c in range(cfg.cols)]
    for _ in range(cfg.max_attempts):
        picks = rng.choice(len(all_cells), size=n_items, replace=False)
        cells = [all_cells[i] for i in picks]
        if _layout_ok(set(cells), cfg.rows, cfg.cols):
            recs = [Placement(name, cell) for name, cell in zip(cfg.receptacles, cells)]
            objs = [Placement(str(name), cell) for name, cell in zip(classes, cells[len(cfg.receptacles) :])]
            return Scene(
                scene_id=scene_id if scene_id is not None else f"scene_{seed}",
                rows=cfg.rows,
                cols=cfg.cols,
                cell_px=cfg.cell_px,
                objects=objs,
                receptacles=recs,
                palette=palette,
                floor=floor,
            )
    raise SceneGenerationError(f"no reachable layout found for seed {seed} in {cfg.max_attempts} attempts")


@dataclass
class ObjectState:
    cls: str
    cell: Cell | None
    container: str | None = None
    held: bool = False
    sliced: bool = False
    clean: bool = False
    heated: bool = False


@dataclass
class WorldState:
    scene: Scene
    agent: Cell
    facing: int = 2
    objects: list[ObjectState] = field(default_factory=list)
    opened: dict[str, bool] = field(default_factory=dict)
    toggled: dict[str, bool] = field(default_factory=dict)
    held: int | None = None
    focus: str | int | None = None  # last navigation target: object index or receptacle name
    step: int = 0
    done: bool = False

    def copy(self) -> WorldState:
        scene = self.scene
        self.scene = None
        try:
            out = copy.deepcopy(self)
        finally:
            self.scene = scene
        out.scene = scene
        return out

    def occupied(self) -> set[Cell]:
        cells = {p.cell for p in self.scene.receptacles}
        cells |= {o.cell for o in self.objects if o.cell is not None}
        return cells

    def free_cells(self) -> set[Cell]:
        s = self.scene
        return {(r, c) for r in range(s.rows) for c in range(s.cols)} - self.occupied()

    def signature(self) -> tuple:
        objs = tuple((o.cls, o.cell, o.container, o.held, o.sliced, o.clean, o.heated) for o in self.objects)
        return (
            self.agent,
            self.facing,
            objs,
            tuple(sorted(self.opened.items())),
            tuple(sorted(self.toggled.items())),
            self.held,
            self.focus,
            self.done,
        )


def initial_state(scene: Scene, agent: Cell) -> WorldState:
    if agent in {p.cell for p in scene.receptacles} | {p.cell for p in scene.objects}:
        raise ValueError(f"agent start {agent} is occupied")
    present = scene.classes()
    return WorldState(
        scene=scene,
        agent=tuple(agent),
        objects=[ObjectState(p.cls, p.cell) for p in scene.objects],
        opened={name: False for name in OPENABLE if name in present},
        toggled={name: False for name in TOGGLEABLE if name in present},
    )


def random_start(scene: Scene, rng: np.random.Generator) -> Cell:
    occupied = {p.cell for p in scene.receptacles} | {p.cell for p in scene.objects}
    free = sorted({(r, c) for r in range(scene.rows) for c in range(scene.cols)} - occupied)
    return free[int(rng.integers(len(free)))]


# -- dynamics ------------------------------------------------------------------


def _adjacent(a: Cell, b: Cell) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1


def _facing_towards(src: Cell, dst: Cell) -> int:
    delta = (int(np.sign(dst[0] - src[0])), int(np.sign(dst[1] - src[1])))
    return DIRECTIONS.index(delta) if delta in DIRECTIONS else 2


def _resolve(state: WorldState, target: str) -> tuple[Cell | None, str | int | None]:
    """Grid cell standing for ``target`` plus what becomes the focus after navigating there.

    Loose instances win over stored ones; lowest index first.
    """
    if target == "Faucet":
        return state.scene.receptacle_cell("SinkBasin"), "SinkBasin"
    if target in RECEPTACLES:
        return state.scene.receptacle_cell(target), target
    for i, o in enumerate(state.objects):
        if o.cls == target and o.cell is not None:
            return o.cell, i
    for i, o in enumerate(state.objects):
        if o.cls == target and o.container is not None:
            return state.scene.receptacle_cell(o.container), i
    return None, None


def _anchor_cell(state: WorldState, target: str) -> Cell | None:
    return _resolve(state, target)[0]


def path_to_adjacent(state: WorldState, goal: Cell) -> Cell | None:
    """Closest free cell next to ``goal`` reachable from the agent (BFS, fixed neighbour order)."""
    if _adjacent(state.agent, goal):
        return state.agent
    free = state.free_cells() | {state.agent}
    seen = {state.agent}
    queue = deque([state.agent])
    rows, cols = state.scene.rows, state.scene.cols
    while queue:
        cell = queue.popleft()
        for nb in _neighbors(cell, rows, cols):
            if nb in free and nb not in seen:
                if _adjacent(nb, goal):
                    return nb
                seen.add(nb)
                queue.append(nb)
    return None


def _adjacent_to_class(state: WorldState, cls: str) -> bool:
    cell = _anchor_cell(state, cls) if cls in RECEPTACLES or cls == "Faucet" else None
    return cell is not None and _adjacent(state.agent, cell)


def _instance_reachable(state: WorldState, o: ObjectState) -> bool:
    if o.cell is not None:
        return _adjacent(state.agent, o.cell)
    if o.container is not None:
        rc = state.scene.receptacle_cell(o.container)
        return _adjacent(state.agent, rc) and state.opened.get(o.container, True)
    return False


def _reachable_instance(state: WorldState, cls: str) -> int | None:
    """Instance of ``cls`` within reach, preferring the navigation focus."""
    f = state.focus
    if isinstance(f, int) and state.objects[f].cls == cls and _instance_reachable(state, state.objects[f]):
        return f
    if isinstance(f, str):
        for i, o in enumerate(state.objects):
            if o.cls == cls and o.container == f and _instance_reachable(state, o):
                return i
    for i, o in enumerate(state.objects):
        if o.cls == cls and o.cell is not None and _adjacent(state.agent, o.cell):
            return i
    for i, o in enumerate(state.objects):
        if o.cls == cls and o.container is not None:
            rc = state.scene.receptacle_cell(o.container)
            if _adjacent(state.agent, rc) and state.opened.get(o.container, True):
                return i
    return None


def step_world(state: WorldState, subgoal) -> tuple[WorldState, str]:
    """Apply one sub-goal. Illegal actions leave the state unchanged and report ``failed``."""
    new = state.copy()
    new.step += 1
    ok = _apply(new, subgoal.action, subgoal.object, subgoal.receptacle)
    if not ok:
        failed = state.copy()
        failed.step += 1
        return failed, FAILED
    return new, SUCCESS


def _apply(s: WorldState, action: str, obj: str, rec: str) -> bool:
    if s.done:
        return False
    if action not in ACTIONS:
        return False
    if action == "Stop":
        s.done = True
        return True
    if action == "Navigate":
        if s.held is not None and s.objects[s.held].cls == obj and obj in PORTABLE:
            return False
        goal, focus = _resolve(s, obj)
        if goal is None:
            return False
        spot = path_to_adjacent(s, goal)
        if spot is None:
            return False
        s.agent = spot
        s.facing = _facing_towards(spot, goal)
        s.focus = focus
        return True
    if action == "PickUp":
        if s.held is not None or obj not in PORTABLE:
            return False
        i = _reachable_instance(s, obj)
        if i is None:
            return False
        o = s.objects[i]
        o.cell, o.container, o.held = None, None, True
        s.held = i
        return True
    if action == "Put":
        if s.held is None or s.objects[s.held].cls != obj or rec not in RECEPTACLES:
            return False
        if not _adjacent_to_class(s, rec) or not s.opened.get(rec, True):
            return False
        o = s.objects[s.held]
        o.held, o.container = False, rec
        s.held = None
        if rec == "SinkBasin" and s.toggled.get("Faucet"):
            o.clean = True
        return True
    if action in ("Open", "Close"):
        want = action == "Open"
        if obj not in OPENABLE or obj not in s.opened or not _adjacent_to_class(s, obj):
            return False
        if s.opened[obj] == want:
            return False
        if want and s.toggled.get(obj):
            return False
        s.opened[obj] = want
        return True
    if action in ("ToggleOn", "ToggleOff"):
        want = action == "ToggleOn"
        if obj not in TOGGLEABLE or obj not in s.toggled or not _adjacent_to_class(s, obj):
            return False
        if s.toggled[obj] == want:
            return False
        if want and s.opened.get(obj, False):
            return False
        s.toggled[obj] = want
        if want:
            where = "SinkBasin" if obj == "Faucet" else obj
            for o in s.objects:
                if o.container == where:
                    if obj == "Faucet":
                        o.clean = True
                    else:
                        o.heated = True
        return True
    if action == "Slice":
        if s.held is None or s.objects[s.held].cls != "Knife" or obj not in SLICEABLE:
            return False
        order = list(range(len(s.objects)))
        if isinstance(s.focus, int):
            order.remove(s.focus)
            order.insert(0, s.focus)
        for i in order:
            o = s.objects[i]
            if o.cls == obj and o.cell is not None and not o.sliced and _adjacent(s.agent, o.cell):
                o.sliced = True
                return True
        return False
    return False


# -- failure corruption (used by the simulator's injector) ----------------------------


def teleport_away(state: WorldState, avoid: Cell | None, rng: np.random.Generator) -> WorldState:
    """Move the agent next to some other receptacle, never next to ``avoid`` (wrong destination)."""
    s = state.copy()
    options = []
    for p in s.scene.receptacles:
        if avoid is not None and p.cell == avoid:
            continue
        if _adjacent(s.agent, p.cell):
            continue
        spot = path_to_adjacent(s, p.cell)
        if spot is not None and spot != s.agent and not (avoid is not None and _adjacent(spot, avoid)):
            options.append((p.cell, spot))
    if not options:
        free = sorted(c for c in s.free_cells() if avoid is None or not _adjacent(c, avoid))
        if free:
            s.agent = free[int(rng.integers(len(free)))]
        s.focus = None
        return s
    goal, spot = options[int(rng.integers(len(options)))]
    s.agent = spot
    s.facing = _facing_towards(spot, goal)
    s.focus = None
    return s


def drop_held(state: WorldState, rng: np.random.Generator) -> WorldState:
    """Drop the held object onto a free cell near the agent."""
    s = state.copy()
    if s.held is None:
        return s
    free = s.free_cells()
    near = [c for c in _neighbors(s.agent, s.scene.rows, s.scene.cols) if c in free]
    if not near:
        near = sorted(free - {s.agent})
    if not near:
        return s
    cell = near[int(rng.integers(len(near)))]
    o = s.objects[s.held]
    o.held, o.cell = False, cell
    s.held = None
    return s


# -- goals ------------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    template: str
    object: str
    receptacle: str

    def to_dict(self) -> dict:
        return {"template": self.template, "object": self.object, "receptacle": self.receptacle}


def goal_satisfied(state: WorldState, task: Task) -> bool:
    placed = [o for o in state.objects if o.cls == task.object and o.container == task.receptacle]
    if task.template == "pick_two_place":
        return len(placed) >= 2
    if task.template == "clean_place":
        return any(o.clean for o in placed)
    if task.template == "heat_place":
        return any(o.heated for o in placed)
    if task.template == "slice_place":
        return any(o.sliced for o in placed)
    return bool(placed)


# -- rendering -----------------------------------------------------------------------------


def footprints(state: WorldState) -> list[tuple[str, tuple[int, int, int, int], tuple[int, int, int]]]:
    """Drawable blocks in paint order: (class or '', (x0, y0, x1, y1), colour).

    Class '' marks decoration without a bounding box (floor, agent, markers).
    """
    s = state.scene
    px = s.cell_px
    pal = s.palette
    items = []

    def cell_box(cell, dx0=0, dy0=0, dx1=None, dy1=None):
        r, c = cell
        x0, y0 = c * px, r * px
        return x0 + dx0, y0 + dy0, x0 + (px - 1 if dx1 is None else dx1), y0 + (px - 1 if dy1 is None else dy1)

    half = px // 2
    for p in s.receptacles:
        items.append((p.cls, cell_box(p.cell), pal[p.cls]))
        x0, y0, x1, _ = cell_box(p.cell)
        if state.opened.get(p.cls):
            items.append(("", (x0, y0, x1, y0), _lighten(pal[p.cls])))
        if p.cls != "SinkBasin" and state.toggled.get(p.cls):
            items.append(("", (x1, y0, x1, y0), LIGHT_COLOR))
        if p.cls == "SinkBasin" and "Faucet" in state.toggled:
            color = _lighten(pal["Faucet"]) if state.toggled["Faucet"] else pal["Faucet"]
            items.append(("Faucet", cell_box(p.cell, half, 0, px - 1, half - 1), color))
        contents = [o for o in state.objects if o.container == p.cls][:2]
        for k, o in enumerate(contents):
            dx0 = 0 if k == 0 else half
            items.append((o.cls, cell_box(p.cell, dx0, half, dx0 + half - 1, px - 1), pal[o.cls]))
    for o in state.objects:
        if o.cell is None:
            continue
        items.append((o.cls, cell_box(o.cell), pal[o.cls]))
        if o.sliced:
            x0, y0, x1, _ = cell_box(o.cell)
            items.append(("", (x0, y0 + half, x1, y0 + half), MARKER_COLOR))
    items.append(("", cell_box(state.agent), AGENT_COLOR))
    if state.held is not None:
        o = state.objects[state.held]
        q = px // 4
        items.append((o.cls, cell_box(state.agent, q, q, px - 1 - q, px - 1 - q), pal[o.cls]))
    dr, dc = DIRECTIONS[state.facing]
    x0, y0, x1, y1 = cell_box(state.agent)
    mx = {-1: x0, 0: (x0 + x1) // 2, 1: x1}[dc]
    my = {-1: y0, 0: (y0 + y1) // 2, 1: y1}[dr]
    items.append(("", (mx, my, mx, my), MARKER_COLOR))
    return items


def _lighten(color):
    return tuple(min(255, v + 60) for v in color)


def render(state: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Top-down RGB raster (H, W, 3) uint8 and its class-id mask (H, W)."""
    s = state.scene
    h, w = s.rows * s.cell_px, s.cols * s.cell_px
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[:, :] = s.floor
    boxes = []
    for cls, (x0, y0, x1, y1), color in footprints(state):
        rgb[y0 : y1 + 1, x0 : x1 + 1] = color
        if cls:
            boxes.append((OBJECT_VOCAB.index(cls), x0, y0, x1, y1))
    return rgb, build_bbox_mask(boxes, h, w).astype(np.uint8)
