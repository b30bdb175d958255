"""Trace events: one JSON object per line, keys sorted, so equal runs give equal bytes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO


def _line(t: int, cat: str, node: str, d: dict) -> str:
    return json.dumps({"t": t, "cat": cat, "node": node, "d": d}, sort_keys=True, separators=(",", ":"))


@dataclass
class Trace:
    lines: list[str] = field(default_factory=list)
    sink: Optional[TextIO] = None

    def emit(self, t: int, cat: str, node, **d) -> None:
        line = _line(t, cat, str(node), d)
        self.lines.append(line)
        if self.sink is not None:
            self.sink.write(line + "\n")

    def text(self) -> str:
        return "".join(l + "\n" for l in self.lines)

    def events(self) -> list[dict]:
        return [json.loads(l) for l in self.lines]


def parse_trace(text: str) -> tuple[list[dict], bool]:
    """Parse trace text; the flag is True when the last line was cut off or unreadable."""
    events, broken = [], False
    lines = text.split("\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            ev = json.loads(line)
            if not isinstance(ev, dict) or not {"t", "cat", "node", "d"} <= ev.keys():
                raise ValueError
        except ValueError:
            broken = True
            break
        events.append(ev)
    if text and not text.endswith("\n"):
        broken = True
    return events, broken


def read_trace(lines: Iterable[str]) -> list[dict]:
    return [json.loads(l) for l in lines if l.strip()]
