"""Request trimming that is not paging: tool stubs, skill dedup, static-prefix tracking."""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from .wire import ContentBlock, Request, ToolDef, content_hash

DEFAULT_SKILL_PREFIXES = ("base", "example-skills:base", "document-skills:base")
PHANTOM_TOOL_NAMES = frozenset({"memory_release", "memory_fault"})


@dataclass
class StubState:
    full_defs: dict[str, dict[str, Any]] = field(default_factory=dict)
    used_tools: set[str] = field(default_factory=set)


def make_stub(tool: ToolDef) -> dict[str, Any]:
    first_line = tool.description.split("\n", 1)[0]
    return {
        "name": tool.name,
        "description": first_line,
        "input_schema": {"type": "object", "properties": {}},
    }


def is_stub(data: dict[str, Any]) -> bool:
    return data.get("input_schema") == {"type": "object", "properties": {}}


def note_tool_use(state: StubState, req: Request) -> StubState:
    for msg in req.messages:
        if msg.role != "assistant":
            continue
        for blk in msg.blocks:
            if blk.kind == "tool_use":
                name = str(blk.data.get("name", ""))
                if name and name not in PHANTOM_TOOL_NAMES:
                    state.used_tools.add(name)
    return state


def stub_tools(req: Request, state: StubState) -> int:
    """Swap unused tool schemas for stubs; returns bytes saved."""
    saved = 0
    tools = []
    for tool in req.tools:
        if tool.name in PHANTOM_TOOL_NAMES:
            tools.append(tool)
            continue
        if not is_stub(tool.data) or tool.name not in state.full_defs:
            state.full_defs[tool.name] = copy.deepcopy(tool.data)
        if tool.name in state.used_tools:
            full = tool if not is_stub(tool.data) else ToolDef(copy.deepcopy(state.full_defs[tool.name]))
            saved += tool.byte_size - full.byte_size
            tools.append(full)
            continue
        stub = ToolDef(make_stub(tool))
        saved += tool.byte_size - stub.byte_size
        tools.append(stub)
    req.tools = tools
    return saved


# ---------------------------------------------------------------------------
# Skill dedup
# ---------------------------------------------------------------------------


def _skill_line(prefixes: Iterable[str]) -> re.Pattern[str]:
    alts = "|".join(re.escape(p) for p in sorted(prefixes, key=len, reverse=True))
    return re.compile(r"^\s*-\s+(?P<name>(?:" + alts + r"):[^\s:]+)(?::|\s|$)")


def dedup_text(text: str, seen: set[str], pattern: re.Pattern[str]) -> str:
    out = []
    for line in text.splitlines(keepends=True):
        m = pattern.match(line)
        if m:
            base = m["name"].rsplit(":", 1)[-1]
            if base in seen:
                continue
            seen.add(base)
        out.append(line)
    return "".join(out)


def dedup_skills(req: Request, prefixes: Iterable[str] = DEFAULT_SKILL_PREFIXES) -> int:
    """Keep the first listing of each skill across the request; returns bytes saved."""
    pattern = _skill_line(prefixes)
    seen: set[str] = set()
    saved = 0
    for msg in req.messages:
        for i, blk in enumerate(msg.blocks):
            if blk.kind != "text":
                continue
            text = str(blk.data.get("text", ""))
            new = dedup_text(text, seen, pattern)
            if new != text:
                saved += len(text.encode("utf-8")) - len(new.encode("utf-8"))
                replacement = ContentBlock(dict(blk.data))
                replacement.replace_body(new)
                msg.blocks[i] = replacement
    return saved


# ---------------------------------------------------------------------------
# Static tracking (measurement only)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StaticRow:
    index: int
    digest: str
    size_bytes: int
    status: str  # new | stable | changed


@dataclass
class StaticReport:
    rows: list[StaticRow]

    @property
    def stable_bytes(self) -> int:
        return sum(r.size_bytes for r in self.rows if r.status == "stable")

    @property
    def hashes(self) -> list[str]:
        return [r.digest for r in self.rows]


def track_static(req: Request, prior_hashes: list[str] | None) -> StaticReport:
    prior = prior_hashes or []
    rows = []
    for i, seg in enumerate(req.system_prompt):
        text = str(seg.get("text", "")) if isinstance(seg, dict) else str(seg)
        digest = content_hash(text)
        if i >= len(prior):
            status = "new"
        elif prior[i] == digest:
            status = "stable"
        else:
            status = "changed"
        rows.append(StaticRow(i, digest, len(text.encode("utf-8")), status))
    return StaticReport(rows)
