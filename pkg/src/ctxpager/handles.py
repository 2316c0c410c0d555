"""Retrieval handles: the tombstones left behind when content is removed.

Two byte-exact templates are a public contract; deployed transcripts
contain them, so changing either is a breaking change:

    [Paged out: <tool> <key> (<N> bytes, <L> lines). Re-read the file if you need its content.]
    [Cleaned up: <tool> output (<N> bytes).]

A short recovery instruction ("Re-read if needed.") is used when the long
form would not fit the 300-byte budget.  Keys that still do not fit are
truncated in the middle so the root and file name stay visible.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

HANDLE_BUDGET = 300
PAGED_PREFIX = "[Paged out: "
GC_PREFIX = "[Cleaned up: "
LONG_TAIL = "Re-read the file if you need its content."
SHORT_TAIL = "Re-read if needed."
ELLIPSIS = "…"
_MAX_TOOL_NAME = 64


@dataclass(frozen=True)
class Handle:
    tool_name: str
    key_param: str
    size_bytes: int
    line_count: int | None
    rendered: str

    @property
    def paged(self) -> bool:
        return self.rendered.startswith(PAGED_PREFIX)


def _nbytes(s: str) -> int:
    return len(s.encode("utf-8"))


def _clip_tool(name: str) -> str:
    name = re.sub(r"\s+", "_", name) or "tool"
    return name[:_MAX_TOOL_NAME]


def truncate_middle(text: str, max_bytes: int) -> str:
    """Shorten ``text`` to at most ``max_bytes`` UTF-8 bytes, cutting the middle."""
    if _nbytes(text) <= max_bytes:
        return text
    room = max_bytes - _nbytes(ELLIPSIS)
    if room <= 0:
        return ELLIPSIS if max_bytes >= _nbytes(ELLIPSIS) else ""
    head_budget = room // 2
    tail_budget = room - head_budget
    head = []
    used = 0
    for ch in text:
        w = _nbytes(ch)
        if used + w > head_budget:
            break
        head.append(ch)
        used += w
    tail = []
    used = 0
    for ch in reversed(text):
        w = _nbytes(ch)
        if used + w > tail_budget:
            break
        tail.append(ch)
        used += w
    return "".join(head) + ELLIPSIS + "".join(reversed(tail))


def _size_clause(size: int, lines: int | None) -> str:
    if lines is None:
        return f"{size:,} bytes"
    return f"{size:,} bytes, {lines:,} lines"


def render_paged(tool_name: str, key_param: str, size_bytes: int, line_count: int | None) -> str:
    tool = _clip_tool(tool_name)
    key = key_param.replace("\n", " ")
    clause = _size_clause(size_bytes, line_count)
    for tail in (LONG_TAIL, SHORT_TAIL):
        text = f"{PAGED_PREFIX}{tool} {key} ({clause}). {tail}]"
        if _nbytes(text) < HANDLE_BUDGET:
            return text
    fixed = _nbytes(f"{PAGED_PREFIX}{tool}  ({clause}). {SHORT_TAIL}]")
    key = truncate_middle(key, HANDLE_BUDGET - 1 - fixed)
    return f"{PAGED_PREFIX}{tool} {key} ({clause}). {SHORT_TAIL}]"


def render_gc(tool_name: str, size_bytes: int) -> str:
    return f"{GC_PREFIX}{_clip_tool(tool_name)} output ({size_bytes:,} bytes).]"


def render_handle(record) -> str:
    """Render the tombstone for an eviction record (paged or gc)."""
    key = record.fault_key
    if record.category == "paged":
        return render_paged(key.tool_name, key.args_key, record.size_bytes, record.line_count)
    return render_gc(key.tool_name, record.size_bytes)


_NUM = r"\d{1,3}(?:,\d{3})*"
_PAGED_RE = re.compile(
    r"\[Paged out: (?P<tool>\S+) (?P<key>.*) \((?P<size>" + _NUM + r") bytes"
    r"(?:, (?P<lines>" + _NUM + r") lines)?\)\. (?:"
    + re.escape(LONG_TAIL) + "|" + re.escape(SHORT_TAIL) + r")\]",
    re.DOTALL,
)
_GC_RE = re.compile(r"\[Cleaned up: (?P<tool>\S+) output \((?P<size>" + _NUM + r") bytes\)\.\]")


def _int(s: str | None) -> int | None:
    return None if s is None else int(s.replace(",", ""))


def parse_handle(text: str) -> Handle | None:
    text = text.strip()
    m = _PAGED_RE.fullmatch(text)
    if m:
        return Handle(m["tool"], m["key"], _int(m["size"]), _int(m["lines"]), text)
    m = _GC_RE.fullmatch(text)
    if m:
        return Handle(m["tool"], "", _int(m["size"]), None, text)
    return None


def is_handle(text: str) -> bool:
    return text.startswith(PAGED_PREFIX) or text.startswith(GC_PREFIX)
