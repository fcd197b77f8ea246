"""The shared exploration map: a monotone union of per-agent reports.

Each cell keeps the record with the greatest ``(step, agent, annotations)``
key, which makes merging commutative, associative and idempotent. ``version``
only moves when a merge actually changes the map.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .types import Position

UNEXPLORED = "?"
EXPLORED = "."
SPECIAL = "*"

Bounds = tuple[int, int]  # width, height; origin is (0, 0)
Region = tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive

_LEGEND_RE = re.compile(r"^(\S+) @ \((-?\d+),(-?\d+)\)$")


class MapError(ValueError):
    pass


@dataclass(frozen=True)
class ReportEntry:
    agent: int
    step: int
    cells: Mapping[Position, tuple[str, ...]]

    def __post_init__(self) -> None:
        if not self.cells:
            raise MapError("report must contain at least one cell")


@dataclass(frozen=True, slots=True)
class CellRecord:
    annotations: tuple[str, ...]
    last_agent: int
    last_step: int


@dataclass
class DynamicMap:
    bounds: Bounds | None = None
    explored: dict[Position, CellRecord] = field(default_factory=dict)
    version: int = 0
    _annotated: set[Position] = field(default_factory=set, repr=False, compare=False)
    _rasters: dict = field(default_factory=dict, repr=False, compare=False)

    def merge(self, report: ReportEntry) -> int:
        """Merge in place; returns the number of newly explored cells."""
        if self.bounds is not None:
            w, h = self.bounds
            for x, y in report.cells:
                if not (0 <= x < w and 0 <= y < h):
                    raise MapError(f"report cell {(x, y)} outside map bounds {self.bounds}")
        explored = self.explored
        step, agent = report.step, report.agent
        changed: list[Position] = []
        grown = 0
        for pos, toks in report.cells.items():
            toks = tuple(toks)
            rec = explored.get(pos)
            if rec is None:
                grown += 1
            elif (rec.last_step, rec.last_agent, rec.annotations) >= (step, agent, toks):
                continue
            explored[pos] = CellRecord(toks, agent, step)
            changed.append(pos)
            if toks:
                self._annotated.add(pos)
            else:
                self._annotated.discard(pos)
        if changed:
            self.version += 1
            for _, dirty in self._rasters.values():
                dirty.update(changed)
        return grown

    def copy(self) -> DynamicMap:
        rasters = {k: ([bytearray(r) for r in grid], set(dirty)) for k, (grid, dirty) in self._rasters.items()}
        return DynamicMap(self.bounds, dict(self.explored), self.version, set(self._annotated), rasters)

    def annotated_cells(self) -> dict[Position, tuple[str, ...]]:
        return {p: self.explored[p].annotations for p in self._annotated}

    def to_json(self) -> str:
        cells = [
            {
                "x": x,
                "y": y,
                "annotations": list(rec.annotations),
                "last_agent": rec.last_agent,
                "last_step": rec.last_step,
            }
            for (x, y), rec in sorted(self.explored.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        ]
        return json.dumps({"version": self.version, "cells": cells}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, bounds: Bounds | None = None) -> DynamicMap:
        data = json.loads(text)
        m = cls(bounds=bounds, version=int(data["version"]))
        for c in data["cells"]:
            toks = tuple(c["annotations"])
            m.explored[(c["x"], c["y"])] = CellRecord(toks, c["last_agent"], c["last_step"])
            if toks:
                m._annotated.add((c["x"], c["y"]))
        return m


def merge_report(dmap: DynamicMap, report: ReportEntry) -> DynamicMap:
    out = dmap.copy()
    out.merge(report)
    return out


def explored_area(dmap: DynamicMap) -> int:
    return len(dmap.explored)


@dataclass(frozen=True)
class MapImage:
    """Text raster handed to the manager in place of a picture.

    One glyph per cell (``?`` unexplored, ``.`` explored, ``*`` annotated),
    then a legend of ``token @ (x,y)`` lines. ``origin`` is the world
    coordinate of the top-left glyph.
    """

    rows: tuple[str, ...]
    legend: tuple[str, ...]
    origin: Position = (0, 0)

    @property
    def width(self) -> int:
        return len(self.rows[0]) if self.rows else 0

    @property
    def height(self) -> int:
        return len(self.rows)

    def text(self) -> str:
        ox, oy = self.origin
        head = f"map origin ({ox},{oy}) size {self.width}x{self.height}"
        legend = "\n".join(self.legend) if self.legend else "(no landmarks)"
        return head + "\n" + "\n".join(self.rows) + "\nlegend:\n" + legend + "\n"

    def explored_mask(self) -> np.ndarray:
        """Boolean ``[row, col]`` array of non-``?`` glyphs."""
        if not self.rows:
            return np.zeros((0, 0), dtype=bool)
        buf = np.frombuffer("".join(self.rows).encode("ascii"), dtype=np.uint8)
        return buf.reshape(self.height, self.width) != ord(UNEXPLORED)

    def landmarks(self) -> dict[Position, tuple[str, ...]]:
        out: dict[Position, list[str]] = {}
        for line in self.legend:
            m = _LEGEND_RE.match(line)
            if m is None:
                raise MapError(f"bad legend line {line!r}")
            pos = (int(m.group(2)), int(m.group(3)))
            out.setdefault(pos, []).append(m.group(1))
        return {p: tuple(sorted(toks)) for p, toks in out.items()}

    def is_blank(self) -> bool:
        return not self.legend and all(set(r) <= {UNEXPLORED} for r in self.rows)

    def excerpt(self, region: Region) -> MapImage:
        ox, oy = self.origin
        x0, y0, x1, y1 = region
        x0, y0 = max(x0, ox), max(y0, oy)
        x1, y1 = min(x1, ox + self.width - 1), min(y1, oy + self.height - 1)
        if x1 < x0 or y1 < y0:
            return MapImage((), (), (x0, y0))
        rows = tuple(r[x0 - ox : x1 - ox + 1] for r in self.rows[y0 - oy : y1 - oy + 1])
        legend = tuple(
            line
            for line in self.legend
            if (m := _LEGEND_RE.match(line))
            and x0 <= int(m.group(2)) <= x1
            and y0 <= int(m.group(3)) <= y1
        )
        return MapImage(rows, legend, (x0, y0))


def blank_image(bounds: Bounds) -> MapImage:
    w, h = bounds
    return MapImage(tuple(UNEXPLORED * w for _ in range(h)), ())


def render_for_manager(dmap: DynamicMap, bounds: Bounds) -> MapImage:
    w, h = bounds
    cached = dmap._rasters.get(bounds)
    if cached is None:
        grid = [bytearray(UNEXPLORED * w, "ascii") for _ in range(h)]
        dirty: set[Position] = set(dmap.explored)
        dmap._rasters[bounds] = (grid, dirty)
    else:
        grid, dirty = cached
    explored = dmap.explored
    for x, y in dirty:
        if 0 <= x < w and 0 <= y < h:
            rec = explored.get((x, y))
            if rec is None:
                glyph = UNEXPLORED
            else:
                glyph = SPECIAL if rec.annotations else EXPLORED
            grid[y][x] = ord(glyph)
    dirty.clear()
    rows = tuple(row.decode("ascii") for row in grid)
    legend = []
    for x, y in sorted(dmap._annotated, key=lambda p: (p[1], p[0])):
        if 0 <= x < w and 0 <= y < h:
            for tok in sorted(explored[(x, y)].annotations):
                legend.append(f"{tok} @ ({x},{y})")
    return MapImage(rows, tuple(legend))


def parse_map_image(image: MapImage) -> tuple[set[Position], dict[Position, tuple[str, ...]]]:
    """Recover the explored cell set and annotations from a rendered image."""
    ox, oy = image.origin
    explored = {
        (ox + x, oy + y)
        for y, row in enumerate(image.rows)
        for x, ch in enumerate(row)
        if ch != UNEXPLORED
    }
    return explored, image.landmarks()


def frontier_mask(mask: np.ndarray) -> np.ndarray:
    """Unexplored cells 4-adjacent to an explored cell."""
    near = np.zeros_like(mask)
    near[1:, :] |= mask[:-1, :]
    near[:-1, :] |= mask[1:, :]
    near[:, 1:] |= mask[:, :-1]
    near[:, :-1] |= mask[:, 1:]
    return near & ~mask


def explored_mask(dmap: DynamicMap, bounds: Bounds) -> np.ndarray:
    w, h = bounds
    mask = np.zeros((h, w), dtype=bool)
    if dmap.explored:
        pts = np.array([p for p in dmap.explored if 0 <= p[0] < w and 0 <= p[1] < h], dtype=np.int64)
        if len(pts):
            mask[pts[:, 1], pts[:, 0]] = True
    return mask


def frontier_cells(dmap: DynamicMap, bounds: Bounds) -> set[Position]:
    ys, xs = np.nonzero(frontier_mask(explored_mask(dmap, bounds)))
    return {(int(x), int(y)) for x, y in zip(xs, ys)}


def report_from_cells(agent: int, step: int, cells: Iterable[tuple[Position, tuple[str, ...]]]) -> ReportEntry:
    return ReportEntry(agent, step, dict(cells))
