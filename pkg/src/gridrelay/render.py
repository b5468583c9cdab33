"""Text rendering of recorded frames for replay and debugging.

Character map, two characters per cell: walls ``#``, area background
digits ``1``/``2``/``3``, ground resources ``b`` (type 1) / ``y``
(type 2), agents ``A``-``Z`` with a ``*`` suffix while carrying. Agents
draw over resources, resources over the background.
"""

from __future__ import annotations

import json
from pathlib import Path

from .env import WALL, build_area_map


def render_frame_text(frame: dict, width: int, height: int) -> str:
    """Deterministic text grid for one frame record."""
    area = build_area_map(width, height)
    grid = [["# " if area[y, x] == WALL else f"{int(area[y, x])} " for x in range(width)]
            for y in range(height)]
    for res in frame["resources"]:
        if res["state"] != "ground":
            continue
        glyph = "b" if res["type"] == 1 else "y"
        grid[res["y"]][res["x"]] = glyph + " "
    for agent in frame["agents"]:
        letter = chr(ord("A") + (agent["id"] % 26))
        suffix = "*" if agent["cargo"] is not None else " "
        grid[agent["y"]][agent["x"]] = letter + suffix
    lines = [f"step {frame['step']}  area2={frame['area2_count']}"]
    lines += ["".join(row) for row in grid]
    return "\n".join(lines)


def load_frames(path: str | Path) -> tuple[dict, list[dict]]:
    """Read a frames.jsonl file -> (meta, frame records)."""
    path = Path(path)
    meta: dict | None = None
    frames: list[dict] = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: malformed frame at line {line_no}: {exc}") from exc
            if "meta" in record:
                meta = record["meta"]
            elif "step" in record:
                frames.append(record)
            else:
                raise ValueError(f"{path}: unrecognized record at line {line_no}")
    if meta is None:
        raise ValueError(f"{path}: missing meta line with grid geometry")
    return meta, frames


def render_frames_file(path: str | Path) -> str:
    meta, frames = load_frames(path)
    width, height = int(meta["width"]), int(meta["height"])
    return "\n\n".join(render_frame_text(f, width, height) for f in frames) + "\n"
