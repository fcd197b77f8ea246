"""Seeded grid world: terrain, goal entities, sensing, movement and audio.

Distances: Euclidean for audio falloff and the per-step movement cap,
Chebyshev for the sensing window and goal proximity.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

from .rng import SplitMix64
from .types import Goal, GoalKind, Position, check_name

TERRAIN_NAMES = (
    "plains", "forest", "desert", "taiga", "swamp", "mesa",
    "jungle", "savanna", "snowy", "badlands", "mushroom", "ocean",
)
DIAMOND = "diamond_block"
DIAMOND_SPACING = 16
_TERRAIN_GLYPHS = string.digits + string.ascii_lowercase


class WorldError(ValueError):
    pass


class InvalidConfig(WorldError):
    pass


class UnknownAgent(WorldError, KeyError):
    pass


class UnknownSource(WorldError, KeyError):
    pass


class OutOfBounds(WorldError):
    pass


class Layout(str, Enum):
    FREEFORM = "freeform"
    DIAMOND_GRID_16 = "diamond_grid_16"


@dataclass(frozen=True)
class GoalPlacement:
    """One line of a world's goal spec; ``count`` copies are placed."""

    kind: GoalKind
    name: str
    features: tuple[str, ...] = ()
    count: int = 1
    position: Position | None = None
    id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", GoalKind(self.kind))
        check_name(self.name)
        object.__setattr__(self, "features", tuple(sorted(set(self.features))))
        for t in self.features:
            check_name(t)
        if self.id is not None:
            check_name(self.id)
        if self.position is not None:
            object.__setattr__(self, "position", (int(self.position[0]), int(self.position[1])))
        if self.count < 1:
            raise InvalidConfig("placement count must be >= 1")
        if self.kind is GoalKind.IMAGE and not self.features:
            raise InvalidConfig("image placement needs feature tokens")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value, "name": self.name, "count": self.count}
        if self.features:
            d["features"] = list(self.features)
        if self.position is not None:
            d["position"] = list(self.position)
        if self.id is not None:
            d["id"] = self.id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GoalPlacement:
        pos = d.get("position")
        return cls(
            kind=GoalKind(d["kind"]),
            name=d["name"],
            features=tuple(d.get("features", ())),
            count=int(d.get("count", 1)),
            position=tuple(pos) if pos is not None else None,
            id=d.get("id"),
        )


@dataclass(frozen=True)
class WorldConfig:
    seed: int
    width: int
    height: int
    terrain_count: int = 6
    goal_spec: tuple[GoalPlacement, ...] = ()
    layout: Layout = Layout.FREEFORM
    perceptible_radius_audio: float = 48.0
    sensing_radius: int = 16
    move_cap: int = 50

    def __post_init__(self) -> None:
        object.__setattr__(self, "layout", Layout(self.layout))
        object.__setattr__(self, "goal_spec", tuple(self.goal_spec))

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise InvalidConfig("width and height must be positive")
        if self.terrain_count < 1:
            raise InvalidConfig("terrain_count must be >= 1")
        if self.terrain_count > self.width * self.height:
            raise InvalidConfig("terrain_count exceeds cell count")
        if self.move_cap < 1:
            raise InvalidConfig("move_cap must be >= 1")
        if self.sensing_radius < 0:
            raise InvalidConfig("sensing_radius must be >= 0")
        if self.perceptible_radius_audio <= 0:
            raise InvalidConfig("perceptible_radius_audio must be positive")
        for p in self.goal_spec:
            if p.position is not None and not _in_bounds(self.width, self.height, p.position):
                raise InvalidConfig(f"placement position {p.position} out of bounds")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "terrain_count": self.terrain_count,
            "goal_spec": [p.to_dict() for p in self.goal_spec],
            "layout": self.layout.value,
            "perceptible_radius_audio": self.perceptible_radius_audio,
            "sensing_radius": self.sensing_radius,
            "move_cap": self.move_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> WorldConfig:
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise InvalidConfig(f"unknown world config keys: {sorted(extra)}")
        kwargs = dict(d)
        kwargs["goal_spec"] = tuple(GoalPlacement.from_dict(p) for p in d.get("goal_spec", ()))
        if "layout" in kwargs:
            kwargs["layout"] = Layout(kwargs["layout"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> WorldConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class GoalEntity:
    id: str
    kind: GoalKind
    name: str
    position: Position
    features: tuple[str, ...] = ()

    def tokens(self) -> tuple[str, ...]:
        if self.kind is GoalKind.IMAGE:
            return self.features
        if self.kind is GoalKind.AUDIO:
            return (self.id,)
        return (self.name,)


@dataclass(frozen=True)
class Cell:
    terrain_id: int
    annotations: tuple[str, ...]
    block: str | None


@dataclass
class WorldState:
    config: WorldConfig
    terrain: tuple[tuple[int, ...], ...]
    annotations: dict[Position, tuple[str, ...]]
    blocks: dict[Position, str]
    entities: tuple[GoalEntity, ...]
    agents: dict[int, Position] = field(default_factory=dict)
    inventory: dict[int, tuple[str, ...]] = field(default_factory=dict)
    clock: int = 0

    @property
    def width(self) -> int:
        return self.config.width

    @property
    def height(self) -> int:
        return self.config.height

    def in_bounds(self, pos: Position) -> bool:
        return _in_bounds(self.config.width, self.config.height, pos)

    def cell(self, pos: Position) -> Cell:
        if not self.in_bounds(pos):
            raise OutOfBounds(f"{pos} outside {self.width}x{self.height}")
        x, y = pos
        return Cell(self.terrain[y][x], self.annotations.get(pos, ()), self.blocks.get(pos))

    def entity(self, entity_id: str) -> GoalEntity:
        for e in self.entities:
            if e.id == entity_id:
                return e
        raise UnknownSource(entity_id)

    def position_of(self, agent: int) -> Position:
        try:
            return self.agents[agent]
        except KeyError:
            raise UnknownAgent(agent) from None

    def place_agent(self, agent: int, pos: Position) -> None:
        if not self.in_bounds(pos):
            raise OutOfBounds(f"spawn {pos} out of bounds")
        self.agents[agent] = (int(pos[0]), int(pos[1]))
        self.inventory.setdefault(agent, ())

    def copy(self) -> WorldState:
        """Copy the mutable parts; terrain and entities are immutable and shared."""
        return WorldState(
            config=self.config,
            terrain=self.terrain,
            annotations=dict(self.annotations),
            blocks=dict(self.blocks),
            entities=self.entities,
            agents=dict(self.agents),
            inventory=dict(self.inventory),
            clock=self.clock,
        )


def _in_bounds(width: int, height: int, pos: Position) -> bool:
    return 0 <= pos[0] < width and 0 <= pos[1] < height


def terrain_name(terrain_id: int) -> str:
    base = TERRAIN_NAMES[terrain_id % len(TERRAIN_NAMES)]
    lap = terrain_id // len(TERRAIN_NAMES)
    return base if lap == 0 else f"{base}{lap}"


def _voronoi_terrain(rng: SplitMix64, width: int, height: int, count: int) -> np.ndarray:
    # Manhattan-metric Voronoi with lowest-index tie-break: every cell has a
    # 4-neighbour one step closer to its own site, so regions are contiguous.
    sites: list[Position] = []
    taken: set[Position] = set()
    while len(sites) < count:
        p = (rng.below(width), rng.below(height))
        if p not in taken:
            taken.add(p)
            sites.append(p)
    ys, xs = np.mgrid[0:height, 0:width]
    best = np.full((height, width), np.iinfo(np.int64).max, dtype=np.int64)
    label = np.zeros((height, width), dtype=np.int64)
    for i, (sx, sy) in enumerate(sites):
        d = np.abs(xs - sx) + np.abs(ys - sy)
        closer = d < best
        best[closer] = d[closer]
        label[closer] = i
    return label


def generate_world(config: WorldConfig) -> WorldState:
    """Build the world for ``config``; identical configs give equal worlds."""
    config.validate()
    rng = SplitMix64(config.seed)
    w, h = config.width, config.height
    label = _voronoi_terrain(rng, w, h, config.terrain_count)
    terrain = tuple(tuple(row) for row in label.tolist())

    annotations: dict[Position, tuple[str, ...]] = {}
    blocks: dict[Position, str] = {}
    if config.layout is Layout.DIAMOND_GRID_16:
        for y in range(0, h, DIAMOND_SPACING):
            for x in range(0, w, DIAMOND_SPACING):
                blocks[(x, y)] = DIAMOND
                annotations[(x, y)] = (DIAMOND,)

    entities: list[GoalEntity] = []
    occupied = set(blocks)
    free_cells = w * h - len(occupied)
    for p_index, placement in enumerate(config.goal_spec):
        for copy in range(placement.count):
            if placement.position is not None and copy == 0:
                pos = placement.position
            else:
                if free_cells <= 0:
                    raise InvalidConfig("no free cells left for goal placement")
                while True:
                    pos = (rng.below(w), rng.below(h))
                    if pos not in occupied:
                        break
            if placement.id is not None:
                eid = placement.id if placement.count == 1 else f"{placement.id}_{copy}"
            else:
                eid = f"{placement.name}_{p_index}_{copy}"
            ent = GoalEntity(eid, placement.kind, placement.name, pos, placement.features)
            if any(e.id == eid for e in entities):
                raise InvalidConfig(f"duplicate entity id {eid}")
            entities.append(ent)
            if pos not in occupied:
                free_cells -= 1
            occupied.add(pos)
            merged = annotations.get(pos, ()) + ent.tokens()
            annotations[pos] = tuple(sorted(set(merged)))

    return WorldState(
        config=config,
        terrain=terrain,
        annotations=annotations,
        blocks=blocks,
        entities=tuple(entities),
    )


@dataclass(frozen=True)
class AgentProperties:
    position: Position
    inventory: tuple[str, ...] = ()
    group_id: int | None = None


@dataclass(frozen=True)
class Observation:
    """What one agent perceives: a square vision window, audio and properties.

    ``annotated`` lists only the window cells that carry tokens; ``vision``
    expands the full window lazily.
    """

    agent: int
    window: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive
    annotated: tuple[tuple[Position, tuple[str, ...]], ...]
    audio: tuple[tuple[str, float], ...]
    properties: AgentProperties
    step: int

    @property
    def position(self) -> Position:
        return self.properties.position

    @cached_property
    def vision(self) -> frozenset[tuple[Position, tuple[str, ...]]]:
        return frozenset(self.cells().items())

    def cells(self) -> dict[Position, tuple[str, ...]]:
        x0, y0, x1, y1 = self.window
        out: dict[Position, tuple[str, ...]] = {
            (x, y): () for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)
        }
        out.update(self.annotated)
        return out

    def visible_tokens(self) -> set[str]:
        return {t for _, toks in self.annotated for t in toks}


def _window(world: WorldState, pos: Position, radius: int) -> tuple[int, int, int, int]:
    x, y = pos
    return (
        max(0, x - radius),
        max(0, y - radius),
        min(world.width - 1, x + radius),
        min(world.height - 1, y + radius),
    )


def audio_intensity(world: WorldState, listener: Position, source_id: str) -> float:
    """Linear falloff ``max(0, 1 - d/R)`` with Euclidean ``d``."""
    ent = world.entity(source_id)
    if ent.kind is not GoalKind.AUDIO:
        raise UnknownSource(f"{source_id} is not an audio source")
    d = math.dist(listener, ent.position)
    return max(0.0, 1.0 - d / world.config.perceptible_radius_audio)


def observe(world: WorldState, agent: int, group_id: int | None = None) -> Observation:
    pos = world.position_of(agent)
    win = _window(world, pos, world.config.sensing_radius)
    x0, y0, x1, y1 = win
    annotated = tuple(
        sorted(
            (p, toks)
            for p, toks in world.annotations.items()
            if x0 <= p[0] <= x1 and y0 <= p[1] <= y1
        )
    )
    audio = []
    for ent in world.entities:
        if ent.kind is GoalKind.AUDIO:
            level = audio_intensity(world, pos, ent.id)
            if level > 0.0:
                audio.append((ent.id, level))
    audio.sort()
    props = AgentProperties(pos, world.inventory.get(agent, ()), group_id)
    return Observation(agent, win, annotated, tuple(audio), props, world.clock)


@dataclass(frozen=True)
class MoveResult:
    new_position: Position
    truncated: bool


def _line(a: Position, b: Position, max_steps: int) -> list[Position]:
    """Bresenham cells from ``a`` toward ``b``, at most ``max_steps`` steps."""
    x0, y0 = a
    x1, y1 = b
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = [(x0, y0)]
    while (x0, y0) != (x1, y1) and len(out) <= max_steps:
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
        out.append((x0, y0))
    return out


def capped_destination(start: Position, target: Position, cap: float) -> MoveResult:
    if math.dist(start, target) <= cap:
        return MoveResult(target, False)
    best = start
    # each Bresenham step advances the major axis by one, so cap+1 steps suffice
    for p in _line(start, target, int(cap) + 1):
        if math.dist(start, p) <= cap:
            best = p
        else:
            break
    return MoveResult(best, True)


def apply_move(world: WorldState, agent: int, target: Position) -> MoveResult:
    start = world.position_of(agent)
    target = (int(target[0]), int(target[1]))
    if not world.in_bounds(target):
        raise OutOfBounds(f"move target {target} out of bounds")
    result = capped_destination(start, target, world.config.move_cap)
    world.agents[agent] = result.new_position
    return result


def pick_up(world: WorldState, agent: int) -> str | None:
    pos = world.position_of(agent)
    block = world.blocks.pop(pos, None)
    if block is None:
        return None
    rest = tuple(t for t in world.annotations.get(pos, ()) if t != block)
    if rest:
        world.annotations[pos] = rest
    else:
        world.annotations.pop(pos, None)
    world.inventory[agent] = world.inventory.get(agent, ()) + (block,)
    return block


def chebyshev(a: Position, b: Position) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def goal_targets(world: WorldState, goal: Goal, image_match_fraction: float = 0.75) -> dict[str, Position]:
    """Every target in the world that satisfies ``goal``, keyed by target id."""
    out: dict[str, Position] = {}
    for ent in world.entities:
        if goal.kind is GoalKind.OBJECT:
            ok = ent.kind is GoalKind.OBJECT and ent.name == goal.payload
        elif goal.kind is GoalKind.IMAGE:
            ok = image_matches(ent.features, goal.payload, image_match_fraction)
        else:
            ok = ent.kind is GoalKind.AUDIO and ent.id == goal.payload
        if ok:
            out[ent.id] = ent.position
    if goal.kind is GoalKind.OBJECT:
        for pos, block in world.blocks.items():
            if block == goal.payload:
                out[f"block@{pos[0]},{pos[1]}"] = pos
    return out


def image_matches(seen: tuple[str, ...] | set[str], wanted: tuple[str, ...], fraction: float) -> bool:
    if not wanted or not seen:
        return False
    overlap = len(set(seen) & set(wanted))
    return overlap / len(wanted) >= fraction


def targets_in_reach(
    world: WorldState,
    agent: int,
    goal: Goal,
    threshold: int = 3,
    image_match_fraction: float = 0.75,
) -> set[str]:
    pos = world.position_of(agent)
    return {
        tid
        for tid, tpos in goal_targets(world, goal, image_match_fraction).items()
        if chebyshev(pos, tpos) <= threshold
    }


def check_goal_reached(
    world: WorldState,
    agent: int,
    goal: Goal,
    threshold: int = 3,
    image_match_fraction: float = 0.75,
) -> bool:
    return bool(targets_in_reach(world, agent, goal, threshold, image_match_fraction))


def dump_world(world: WorldState) -> str:
    """Line-oriented text grid: terrain digit/letter, or D/O/I/A for blocks and entities."""
    grid = [[_TERRAIN_GLYPHS[t % len(_TERRAIN_GLYPHS)] for t in row] for row in world.terrain]
    for (x, y), block in world.blocks.items():
        grid[y][x] = "D" if block == DIAMOND else "B"
    glyph = {GoalKind.OBJECT: "O", GoalKind.IMAGE: "I", GoalKind.AUDIO: "A"}
    for ent in world.entities:
        x, y = ent.position
        grid[y][x] = glyph[ent.kind]
    return "\n".join("".join(row) for row in grid) + "\n"
