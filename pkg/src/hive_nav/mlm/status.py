"""Line-oriented status text exchanged between the hierarchy and the planner.

The manager only ever sees this text and the map image, so the scripted
planner parses the same text an LLM would read.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..types import Position

_XY = r"\((-?\d+),(-?\d+)\)"
_UNIT = re.compile(rf"^unit (\d+) (\w+) at {_XY}$")
_ACTIVE = re.compile(rf"^active (\w+) target {_XY}(?: anchors (.*))?$")
_ENGAGED = re.compile(rf"^engaged {_XY}$")
_SIGHT = re.compile(rf"^sighting (\S+) at {_XY}$")
_AUDIO = re.compile(rf"^audio (\S+) ([0-9.]+) at {_XY}$")
_PROGRESS = re.compile(r"^progress (\d+)/(\d+)$")
_ROUND = re.compile(r"^round (\d+)$")
_PAIR = re.compile(_XY)


@dataclass
class StatusView:
    round: int = 0
    progress: int = 0
    needed: int = 0
    units: dict[int, tuple[str, Position]] = field(default_factory=dict)
    active: list[tuple[str, Position, tuple[Position, ...]]] = field(default_factory=list)
    engaged: list[Position] = field(default_factory=list)
    sightings: list[tuple[str, Position]] = field(default_factory=list)
    audio: list[tuple[str, float, Position]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def idle_positions(self) -> list[Position]:
        return [p for role, p in self.units.values() if role == "idle"]

    def all_positions(self) -> list[Position]:
        return [p for _, p in self.units.values()]


def format_status(view: StatusView) -> str:
    lines = [f"round {view.round}", f"progress {view.progress}/{view.needed}"]
    for u in sorted(view.units):
        role, (x, y) = view.units[u]
        lines.append(f"unit {u} {role} at ({x},{y})")
    for kind, (x, y), anchors in view.active:
        line = f"active {kind} target ({x},{y})"
        if anchors:
            line += " anchors " + ";".join(f"({ax},{ay})" for ax, ay in anchors)
        lines.append(line)
    for x, y in view.engaged:
        lines.append(f"engaged ({x},{y})")
    for tok, (x, y) in view.sightings:
        lines.append(f"sighting {tok} at ({x},{y})")
    for src, level, (x, y) in view.audio:
        lines.append(f"audio {src} {level:.4f} at ({x},{y})")
    for note in view.notes:
        lines.append(f"note {note}")
    return "\n".join(lines) + "\n"


def parse_status(text: str) -> StatusView:
    view = StatusView()
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if m := _ROUND.match(line):
            view.round = int(m.group(1))
        elif m := _PROGRESS.match(line):
            view.progress, view.needed = int(m.group(1)), int(m.group(2))
        elif m := _UNIT.match(line):
            view.units[int(m.group(1))] = (m.group(2), (int(m.group(3)), int(m.group(4))))
        elif m := _ACTIVE.match(line):
            anchors = tuple((int(a), int(b)) for a, b in _PAIR.findall(m.group(4) or ""))
            view.active.append((m.group(1), (int(m.group(2)), int(m.group(3))), anchors))
        elif m := _ENGAGED.match(line):
            view.engaged.append((int(m.group(1)), int(m.group(2))))
        elif m := _SIGHT.match(line):
            view.sightings.append((m.group(1), (int(m.group(2)), int(m.group(3)))))
        elif m := _AUDIO.match(line):
            view.audio.append((m.group(1), float(m.group(2)), (int(m.group(3)), int(m.group(4)))))
        elif line.startswith("note "):
            view.notes.append(line[5:])
    return view
