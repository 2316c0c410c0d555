"""Cooperative memory management: phantom tools, cleanup tags, pressure advisories.

Phantom tools flow proxy -> model: two tool definitions the client never
sees, whose calls are cut out of the response stream and answered on the
next request.  Cleanup tags flow model -> proxy: line directives in the
assistant's text.

Directive grammar (one per line, anywhere in the text)::

    drop: block:<ID>
    anchor: block:<ID>
    summarize: block:<ID> "<text>"
    collapse: turns <N>-<M> "<text>"
"""
from __future__ import annotations

import copy
import json
import logging
import re
import uuid
from dataclasses import dataclass, field
from typing import Any, Iterable

from . import handles
from .pagestore import (
    BlockMeta,
    FaultKey,
    Registration,
    SessionState,
    apply_fault,
    latest_record,
    lookup_fault,
    record_eviction,
)
from .policy import PolicyConfig, PressureZone, ToolClass, classify
from .sse import StreamEvent
from .wire import ContentBlock, Request, ToolDef

logger = logging.getLogger(__name__)

RELEASE = "memory_release"
FAULT = "memory_fault"
PHANTOM_NAMES = frozenset({RELEASE, FAULT})
PHANTOM_ID_PREFIX = "phantom-"
PLACEHOLDER_TEXT = "[memory operation handled]"

_PATHS_SCHEMA = {
    "type": "object",
    "properties": {"paths": {"type": "array", "items": {"type": "string"}}},
    "required": ["paths"],
}

PHANTOM_TOOL_DEFS: tuple[dict[str, Any], ...] = (
    {
        "name": RELEASE,
        "description": "Release files you no longer need from context. Their content is paged out immediately.",
        "input_schema": _PATHS_SCHEMA,
    },
    {
        "name": FAULT,
        "description": "Restore paged-out file content from the proxy cache without re-reading the file.",
        "input_schema": _PATHS_SCHEMA,
    },
)


def phantom_defs_size() -> int:
    return sum(ToolDef(d).byte_size for d in PHANTOM_TOOL_DEFS)


def strip_phantom_tools(req: Request) -> int:
    before = len(req.tools)
    req.tools = [t for t in req.tools if t.name not in PHANTOM_NAMES]
    return before - len(req.tools)


def inject_phantom_tools(req: Request, enabled: bool = True) -> Request:
    if not enabled:
        return req
    strip_phantom_tools(req)
    req.tools.extend(ToolDef(copy.deepcopy(d)) for d in PHANTOM_TOOL_DEFS)
    return req


# ---------------------------------------------------------------------------
# Stream interception
# ---------------------------------------------------------------------------


@dataclass
class PhantomCall:
    tool: str
    paths: list[str]
    tool_use_id: str

    def __post_init__(self) -> None:
        if self.tool not in PHANTOM_NAMES:
            raise ValueError(f"not a phantom tool: {self.tool!r}")


def _call_from(name: str, tool_id: str, args: Any) -> PhantomCall:
    paths = args.get("paths", []) if isinstance(args, dict) else []
    if isinstance(paths, str):
        paths = [paths]
    return PhantomCall(name, [str(p) for p in paths], tool_id)


class StreamInterceptor:
    """Single-pass filter that removes phantom tool_use blocks from an event stream.

    Only a phantom block's own events are held back; everything else is
    emitted as soon as it is fed.  Later blocks are re-indexed to close the
    gap, and a ``tool_use`` stop reason becomes ``end_turn`` when no real
    tool call is left for the client to answer.
    """

    def __init__(self) -> None:
        self.calls: list[PhantomCall] = []
        self.passthrough = False
        self._index_map: dict[int, int] = {}
        self._phantom: dict[int, dict[str, Any]] = {}
        self._next = 0
        self._real_tool_use = False

    def _reindexed(self, ev: StreamEvent, payload: dict[str, Any], ci: int) -> StreamEvent:
        if payload.get("index") == ci:
            return ev
        payload = dict(payload, index=ci)
        return StreamEvent.build(ev.event or payload.get("type", ""), payload)

    def feed(self, ev: StreamEvent) -> list[StreamEvent]:
        if self.passthrough or not ev.data:
            return [ev]
        try:
            payload = json.loads(ev.data)
            return self._route(ev, payload)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            logger.warning("stream interception disabled: %s", exc)
            self.passthrough = True
            return [ev]

    def _route(self, ev: StreamEvent, payload: dict[str, Any]) -> list[StreamEvent]:
        kind = payload.get("type")
        if kind == "content_block_start":
            idx = payload["index"]
            block = payload["content_block"]
            if block.get("type") == "tool_use" and block.get("name") in PHANTOM_NAMES:
                self._phantom[idx] = {"block": block, "parts": [], "held": [(ev, payload)]}
                return []
            ci = self._next
            self._next += 1
            self._index_map[idx] = ci
            if block.get("type") == "tool_use":
                self._real_tool_use = True
            return [self._reindexed(ev, payload, ci)]
        if kind in ("content_block_delta", "content_block_stop"):
            idx = payload["index"]
            if idx in self._phantom:
                slot = self._phantom[idx]
                slot["held"].append((ev, payload))
                if kind == "content_block_delta":
                    slot["parts"].append(payload["delta"].get("partial_json", ""))
                    return []
                return self._close_phantom(idx)
            return [self._reindexed(ev, payload, self._index_map[idx])]
        if kind == "message_delta":
            out: list[StreamEvent] = []
            if self.calls and self._next == 0:
                out.extend(self._placeholder())
            delta = payload.get("delta", {})
            if self.calls and not self._real_tool_use and delta.get("stop_reason") == "tool_use":
                payload = dict(payload, delta=dict(delta, stop_reason="end_turn"))
                ev = StreamEvent.build(ev.event or "message_delta", payload)
            out.append(ev)
            return out
        return [ev]

    def _close_phantom(self, idx: int) -> list[StreamEvent]:
        slot = self._phantom.pop(idx)
        block = slot["block"]
        text = "".join(slot["parts"])
        try:
            args = json.loads(text) if text else block.get("input", {})
            call = _call_from(block["name"], block.get("id", ""), args)
        except ValueError:
            # Unparseable arguments: surface the block unchanged rather than lose it.
            ci = self._next
            self._next += 1
            self._index_map[idx] = ci
            self._real_tool_use = True
            return [self._reindexed(e, p, ci) for e, p in slot["held"]]
        self.calls.append(call)
        return []

    def _placeholder(self) -> list[StreamEvent]:
        ci = self._next
        self._next += 1
        return [
            StreamEvent.build("content_block_start", {
                "type": "content_block_start", "index": ci, "content_block": {"type": "text", "text": ""},
            }),
            StreamEvent.build("content_block_delta", {
                "type": "content_block_delta", "index": ci,
                "delta": {"type": "text_delta", "text": PLACEHOLDER_TEXT},
            }),
            StreamEvent.build("content_block_stop", {"type": "content_block_stop", "index": ci}),
        ]


def intercept_stream(events: list[StreamEvent]) -> tuple[list[StreamEvent], list[PhantomCall]]:
    """Batch form of :class:`StreamInterceptor`; malformed streams pass through untouched."""
    try:
        for ev in events:
            if ev.data:
                json.loads(ev.data)
    except ValueError:
        return list(events), []
    icpt = StreamInterceptor()
    out: list[StreamEvent] = []
    for ev in events:
        out.extend(icpt.feed(ev))
    if icpt.passthrough:
        return list(events), []
    return out, icpt.calls


def intercept_message(body: dict[str, Any]) -> tuple[dict[str, Any], list[PhantomCall]]:
    """Non-streamed counterpart: drop phantom tool_use blocks from a response body."""
    content = body.get("content")
    if not isinstance(content, list):
        return body, []
    calls = []
    kept = []
    for block in content:
        if isinstance(block, dict) and block.get("type") == "tool_use" and block.get("name") in PHANTOM_NAMES:
            calls.append(_call_from(block["name"], block.get("id", ""), block.get("input", {})))
        else:
            kept.append(block)
    if not calls:
        return body, []
    out = dict(body)
    if not kept:
        kept = [{"type": "text", "text": PLACEHOLDER_TEXT}]
    out["content"] = kept
    if out.get("stop_reason") == "tool_use" and not any(b.get("type") == "tool_use" for b in kept):
        out["stop_reason"] = "end_turn"
    return out, calls


# ---------------------------------------------------------------------------
# Phantom execution
# ---------------------------------------------------------------------------


@dataclass
class PhantomOutcome:
    use: dict[str, Any]
    result: dict[str, Any]
    released: list[BlockMeta] = field(default_factory=list)
    faulted: list[FaultKey] = field(default_factory=list)


def _matches_path(meta: BlockMeta, path: str) -> bool:
    return meta.key_param == path or (meta.fault_key is not None and meta.fault_key.args_key == path)


def _find_cached(state: SessionState, path: str, cfg: PolicyConfig):
    for tool in sorted(cfg.pageable_tools):
        rec = latest_record(state, FaultKey(tool, path), cached=True)
        if rec is not None:
            return rec
    return None


def execute_phantom(
    call: PhantomCall, state: SessionState, cfg: PolicyConfig | None = None, turn: int = 0
) -> PhantomOutcome:
    """Carry out a phantom call; the outcome is a synthetic tool_use/tool_result pair."""
    cfg = cfg or PolicyConfig()
    tool_id = PHANTOM_ID_PREFIX + uuid.uuid4().hex[:16]
    use = {"type": "tool_use", "id": tool_id, "name": call.tool, "input": {"paths": list(call.paths)}}
    lines: list[str] = []
    outcome = PhantomOutcome(use, {})
    if call.tool == RELEASE:
        for path in call.paths:
            hits = [
                m for m in state.blocks.values()
                if m.kind == "tool_result" and m.status == "resident" and _matches_path(m, path)
            ]
            for m in hits:
                m.release_requested = True
                m.anchored = False
            outcome.released.extend(hits)
            lines.append(f"{path}: released {len(hits)} block(s)" if hits else f"{path}: nothing resident")
    else:
        for path in call.paths:
            rec = _find_cached(state, path, cfg)
            if rec is None:
                lines.append(f"{path}: content not cached; use Read {path}")
                continue
            if lookup_fault(state, rec.fault_key) is not None:
                apply_fault(state, rec, rec.content_hash, turn)
                outcome.faulted.append(rec.fault_key)
            lines.append(f"{path}:\n{rec.cached_body}")
    outcome.result = {"type": "tool_result", "tool_use_id": tool_id, "content": "\n\n".join(lines)}
    return outcome


# ---------------------------------------------------------------------------
# Cleanup tags
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Directive:
    kind: str  # drop | summarize | anchor | collapse
    block_id: str | None = None
    turn_range: tuple[int, int] | None = None
    text: str | None = None

    def __post_init__(self) -> None:
        if self.kind in ("drop", "anchor") and not self.block_id:
            raise ValueError(f"{self.kind} needs a block id")
        if self.kind == "summarize" and (not self.block_id or self.text is None):
            raise ValueError("summarize needs a block id and text")
        if self.kind == "collapse":
            if self.turn_range is None or self.text is None:
                raise ValueError("collapse needs a turn range and text")
            if self.turn_range[0] > self.turn_range[1]:
                raise ValueError(f"collapse range {self.turn_range} runs backwards")
        if self.kind not in ("drop", "summarize", "anchor", "collapse"):
            raise ValueError(f"unknown directive {self.kind!r}")


_QUOTED = r'"((?:[^"\\]|\\.)*)"'
_DIRECTIVE_START = re.compile(r"^\s*(drop|anchor|summarize|collapse):", re.IGNORECASE)
_BLOCK_ONLY = re.compile(r"^\s*(drop|anchor):\s*block:(\S+)\s*$")
_SUMMARIZE = re.compile(r"^\s*summarize:\s*block:(\S+)\s+" + _QUOTED + r"\s*$")
_COLLAPSE = re.compile(r"^\s*collapse:\s*turns\s+(\d+)\s*-\s*(\d+)\s+" + _QUOTED + r"\s*$")


def _unquote(s: str) -> str:
    return re.sub(r"\\(.)", r"\1", s)


def parse_cleanup_tags(text: str) -> list[Directive]:
    out: list[Directive] = []
    for line in text.splitlines():
        if not _DIRECTIVE_START.match(line):
            continue
        try:
            if m := _BLOCK_ONLY.match(line):
                out.append(Directive(m[1], block_id=m[2]))
            elif m := _SUMMARIZE.match(line):
                out.append(Directive("summarize", block_id=m[1], text=_unquote(m[2])))
            elif m := _COLLAPSE.match(line):
                out.append(Directive("collapse", turn_range=(int(m[1]), int(m[2])), text=_unquote(m[3])))
            else:
                raise ValueError("does not match the directive grammar")
        except ValueError as exc:
            logger.info("ignoring cleanup tag %r: %s", line.strip(), exc)
    return out


@dataclass
class MutationReport:
    applied: list[tuple[Directive, list[str]]] = field(default_factory=list)
    skipped: list[tuple[Directive, str]] = field(default_factory=list)
    bytes_delta: int = 0
    evictions: list[Any] = field(default_factory=list)

    @property
    def affected(self) -> list[str]:
        return [bid for _, ids in self.applied for bid in ids]


def forwarded_size(meta: BlockMeta, state: SessionState) -> int:
    """Bytes a block currently occupies in the forwarded request."""
    if meta.status == "evicted":
        rec = next((r for r in reversed(state.evictions) if r.block_id == meta.block_id), None)
        return len(handles.render_handle(rec).encode("utf-8")) if rec else 0
    if meta.status == "summarized":
        return len((meta.summary or "").encode("utf-8"))
    if meta.status == "collapsed":
        return 0
    return meta.size_bytes


def collapse_blockers(req: Request, lo: int, hi: int) -> str | None:
    """Why turns lo..hi cannot be removed from ``req`` cleanly, or None."""
    if hi >= req.max_turn:
        return "cannot collapse the current turn"
    inside_uses: set[str] = set()
    inside_results: set[str] = set()
    outside_uses: set[str] = set()
    outside_results: set[str] = set()
    for _, _, msg, blk in req.iter_blocks():
        tid = blk.tool_use_id
        if not tid:
            continue
        inside = lo <= msg.turn <= hi
        if blk.kind == "tool_use":
            (inside_uses if inside else outside_uses).add(tid)
        elif blk.kind == "tool_result":
            (inside_results if inside else outside_results).add(tid)
    if inside_uses & outside_results or inside_results & outside_uses:
        return "range splits a tool_use from its tool_result"
    return None


def apply_directives(
    directives: Iterable[Directive],
    state: SessionState,
    req: Request,
    reg: Registration,
    cfg: PolicyConfig | None = None,
) -> MutationReport:
    """Apply a batch of directives in one pass; all valid ones land or none do."""
    cfg = cfg or PolicyConfig()
    report = MutationReport()
    present = {m.block_id: m for _, _, m in reg.located}
    bodies = {m.block_id: req.messages[mi].blocks[bi].body for mi, bi, m in reg.located}
    current_turn = req.max_turn
    snapshot = {bid: copy.copy(m) for bid, m in state.blocks.items()}
    n_evictions = len(state.evictions)
    cached_bytes = state.cached_bytes
    try:
        for d in directives:
            if d.kind == "collapse":
                lo, hi = d.turn_range
                why = collapse_blockers(req, lo, hi)
                targets = [m for m in present.values() if lo <= m.turn <= hi and m.status != "collapsed"]
                if why is None and not targets:
                    why = "no blocks in range"
                if why:
                    report.skipped.append((d, why))
                    continue
                delta = len(d.text.encode("utf-8")) - sum(forwarded_size(m, state) for m in targets)
                for m in targets:
                    m.status = "collapsed"
                    m.summary = d.text
                    m.anchored = False
                report.bytes_delta += delta
                report.applied.append((d, [m.block_id for m in targets]))
                continue
            meta = present.get(d.block_id)
            if meta is None:
                report.skipped.append((d, "unknown block id"))
                continue
            if d.kind == "anchor":
                if meta.anchored:
                    report.skipped.append((d, "already anchored"))
                    continue
                meta.anchored = True
                report.applied.append((d, [meta.block_id]))
            elif d.kind == "drop":
                if meta.kind != "tool_result" or meta.status not in ("resident", "pinned"):
                    report.skipped.append((d, f"cannot drop a {meta.status} {meta.kind} block"))
                    continue
                if meta.status == "pinned":
                    meta.status = "resident"
                category = "paged" if classify(meta.tool_name, cfg) == ToolClass.PAGEABLE else "gc"
                rec = record_eviction(state, meta, category, bodies.get(meta.block_id), current_turn)
                report.evictions.append(rec)
                report.bytes_delta += len(handles.render_handle(rec).encode("utf-8")) - meta.size_bytes
                report.applied.append((d, [meta.block_id]))
            elif d.kind == "summarize":
                if meta.kind not in ("tool_result", "text") or meta.status in ("collapsed", "evicted"):
                    report.skipped.append((d, f"cannot summarize a {meta.status} {meta.kind} block"))
                    continue
                before = forwarded_size(meta, state)
                meta.status = "summarized"
                meta.summary = d.text
                report.bytes_delta += len(d.text.encode("utf-8")) - before
                report.applied.append((d, [meta.block_id]))
    except Exception:
        for bid, old in snapshot.items():
            state.blocks[bid] = old
        del state.evictions[n_evictions:]
        state.cached_bytes = cached_bytes
        raise
    return report


# ---------------------------------------------------------------------------
# Advisory
# ---------------------------------------------------------------------------

ADVISORY_OPEN = "<memory-pressure>"
ADVISORY_CLOSE = "</memory-pressure>"

DIRECTIVE_HELP = (
    "Cleanup operations (write one per line in your reply):\n"
    "  drop: block:<ID>\n"
    "  anchor: block:<ID>\n"
    '  summarize: block:<ID> "<summary>"\n'
    '  collapse: turns <N>-<M> "<summary of outcomes>"\n'
    "Tools memory_release(paths) and memory_fault(paths) release or restore file content."
)


@dataclass
class Advisory:
    fill_percent: float
    largest_blocks: list[tuple[str, str, int]]
    operations_help: str = DIRECTIVE_HELP

    def render(self) -> str:
        rows = "\n".join(
            f"  block:{bid}  {tool}  {size:,} bytes" for bid, tool, size in self.largest_blocks
        ) or "  (none)"
        return (
            f"{ADVISORY_OPEN}\nContext is {self.fill_percent:.1f}% full. Largest resident blocks:\n"
            f"{rows}\n{self.operations_help}\n{ADVISORY_CLOSE}"
        )


def is_advisory(text: str) -> bool:
    return text.startswith(ADVISORY_OPEN)


def strip_advisories(req: Request) -> int:
    removed = 0
    for msg in req.messages:
        keep = [b for b in msg.blocks if not (b.kind == "text" and is_advisory(str(b.data.get("text", ""))))]
        removed += len(msg.blocks) - len(keep)
        if len(keep) != len(msg.blocks):
            msg.blocks = keep
            msg.string_content = None
    return removed


def build_advisory(
    metas: Iterable[BlockMeta], zone: PressureZone, estimated_tokens: int, cfg: PolicyConfig
) -> Advisory | None:
    if zone < PressureZone.ADVISORY:
        return None
    resident = [m for m in metas if m.status in ("resident", "pinned")]
    largest = sorted(resident, key=lambda m: -m.size_bytes)[:5]
    fill = 100.0 * estimated_tokens / cfg.context_window_tokens
    return Advisory(fill, [(m.block_id, m.tool_name or m.kind, m.size_bytes) for m in largest])


def render_advisory(
    metas: Iterable[BlockMeta], zone: PressureZone, estimated_tokens: int, cfg: PolicyConfig | None = None
) -> str | None:
    adv = build_advisory(metas, zone, estimated_tokens, cfg or PolicyConfig())
    return adv.render() if adv else None


def append_advisory(req: Request, text: str) -> bool:
    """Put the advisory at the end of the newest user message; one per request."""
    strip_advisories(req)
    for msg in reversed(req.messages):
        if msg.role == "user":
            msg.blocks.append(ContentBlock.text(text))
            msg.string_content = None
            return True
    return False
