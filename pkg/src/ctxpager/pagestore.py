"""Per-session page table: block metadata, eviction records, fault history, checkpoints."""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .wire import ContentBlock, Request, canonical_json, content_hash

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEFAULT_CACHE_BUDGET = 64 * 1024 * 1024
STATUSES = ("resident", "evicted", "summarized", "collapsed", "pinned")


class EvictPinned(RuntimeError):
    """A pinned block was handed to record_eviction; the policy should have filtered it."""


class CheckpointError(OSError):
    pass


@dataclass(frozen=True, order=True)
class FaultKey:
    tool_name: str
    args_key: str

    def as_list(self) -> list[str]:
        return [self.tool_name, self.args_key]


_PATH_ARGS = ("file_path", "notebook_path", "path")


def fault_key(tool_name: str, args: dict[str, Any] | None) -> FaultKey:
    """Key under which a tool call's result is paged; Read-like tools key on the path."""
    args = args or {}
    for name in _PATH_ARGS:
        if isinstance(args.get(name), str):
            if tool_name in ("Read", "NotebookRead", "Write", "memory_fault") or len(args) == 1:
                return FaultKey(tool_name, args[name])
    return FaultKey(tool_name, canonical_json(args))


def key_param(tool_name: str, args: dict[str, Any] | None) -> str:
    """Principal argument shown in a handle (file path, command, pattern)."""
    args = args or {}
    for name in _PATH_ARGS + ("command", "pattern", "url", "query"):
        if isinstance(args.get(name), str):
            return args[name]
    return canonical_json(args) if args else ""


@dataclass
class BlockMeta:
    block_id: str
    content_hash: str
    size_bytes: int
    turn: int
    role: str
    kind: str
    line_count: int | None = None
    tool_name: str | None = None
    status: str = "resident"
    summary: str | None = None
    fault_key: FaultKey | None = None
    is_error: bool = False
    anchored: bool = False
    release_requested: bool = False
    key_param: str | None = None

    def to_json(self) -> dict[str, Any]:
        out = asdict(self)
        out["fault_key"] = self.fault_key.as_list() if self.fault_key else None
        return out

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> BlockMeta:
        data = dict(data)
        fk = data.get("fault_key")
        data["fault_key"] = FaultKey(*fk) if fk else None
        return cls(**data)


@dataclass
class EvictionRecord:
    block_id: str
    fault_key: FaultKey
    content_hash: str
    size_bytes: int
    evicted_at_turn: int
    category: str  # "gc" | "paged"
    line_count: int | None = None
    cached_body: str | None = None
    resolved: bool = False  # a fault has already been charged against this record

    def to_json(self) -> dict[str, Any]:
        out = asdict(self)
        out.pop("cached_body")
        out["fault_key"] = self.fault_key.as_list()
        return out

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> EvictionRecord:
        data = dict(data)
        data["fault_key"] = FaultKey(*data["fault_key"])
        data.pop("cached_body", None)
        return cls(**data)


@dataclass
class FaultEntry:
    pinned_hash: str | None
    fault_count: int
    last_access_turn: int
    pinned: bool = False


class FaultHistory(dict):
    """FaultKey -> FaultEntry; an entry exists only after a detected fault."""

    def is_pinned(self, key: FaultKey | None) -> bool:
        entry = self.get(key) if key is not None else None
        return bool(entry and entry.pinned)


@dataclass
class PinUpdate:
    pinned: bool
    fault_count: int


@dataclass
class PhantomInjection:
    anchor_block_id: str
    uses: list[dict[str, Any]]
    results: list[dict[str, Any]]


@dataclass
class SessionState:
    session_id: str = "default"
    blocks: dict[str, BlockMeta] = field(default_factory=dict)
    evictions: list[EvictionRecord] = field(default_factory=list)
    fault_history: FaultHistory = field(default_factory=FaultHistory)
    used_tools: set[str] = field(default_factory=set)
    full_defs: dict[str, dict[str, Any]] = field(default_factory=dict)
    pending_phantom_calls: list[Any] = field(default_factory=list)
    injections: list[PhantomInjection] = field(default_factory=list)
    processed_directive_blocks: set[str] = field(default_factory=set)
    static_hashes: list[str] = field(default_factory=list)
    last_usage_tokens: int | None = None
    checkpoint_path: Path | None = None
    cache_budget_bytes: int = DEFAULT_CACHE_BUDGET
    cached_bytes: int = 0

    def meta(self, block_id: str) -> BlockMeta | None:
        return self.blocks.get(block_id)


# ---------------------------------------------------------------------------
# Registration
# ---------------------------------------------------------------------------


def make_block_id(digest: str, turn: int) -> str:
    return f"{digest[:8]}-{turn}"


def _line_count(body: str) -> int:
    return body.count("\n") + 1 if body else 0


@dataclass
class Registration:
    """Where each request block landed in the store."""

    located: list[tuple[int, int, BlockMeta]]
    new_ids: set[str]

    def metas_for(self, message_index: int) -> list[BlockMeta]:
        return [m for mi, _, m in self.located if mi == message_index]


def describe_block(blk: ContentBlock, turn: int, role: str, tool_uses: dict[str, ContentBlock]) -> BlockMeta:
    body = blk.body
    digest = content_hash(body)
    meta = BlockMeta(
        block_id=make_block_id(digest, turn),
        content_hash=digest,
        size_bytes=len(body.encode("utf-8")),
        turn=turn,
        role=role,
        kind=blk.kind,
    )
    if blk.kind == "tool_result":
        use = tool_uses.get(blk.tool_use_id or "")
        meta.tool_name = blk.tool_name or (use.data.get("name") if use else None)
        meta.is_error = blk.is_error
        meta.line_count = _line_count(body)
        if use is not None:
            meta.fault_key = fault_key(str(use.data.get("name", "")), use.args)
            meta.key_param = key_param(str(use.data.get("name", "")), use.args)
    elif blk.kind == "tool_use":
        meta.tool_name = str(blk.data.get("name", ""))
        meta.fault_key = fault_key(meta.tool_name, blk.args)
    return meta


def register_blocks(state: SessionState, req: Request) -> Registration:
    """Track every block of a turn-indexed request; known blocks keep their status."""
    tool_uses: dict[str, ContentBlock] = {}
    located: list[tuple[int, int, BlockMeta]] = []
    new_ids: set[str] = set()
    for mi, bi, msg, blk in req.iter_blocks():
        if blk.kind == "tool_use" and blk.tool_use_id:
            tool_uses[blk.tool_use_id] = blk
        fresh = describe_block(blk, msg.turn, msg.role, tool_uses)
        known = state.blocks.get(fresh.block_id)
        if known is None:
            if (
                fresh.kind == "tool_result"
                and fresh.fault_key is not None
                and state.fault_history.is_pinned(fresh.fault_key)
                and state.fault_history[fresh.fault_key].pinned_hash == fresh.content_hash
            ):
                fresh.status = "pinned"
            state.blocks[fresh.block_id] = fresh
            new_ids.add(fresh.block_id)
            known = fresh
        located.append((mi, bi, known))
    return Registration(located, new_ids)


# ---------------------------------------------------------------------------
# Eviction and faults
# ---------------------------------------------------------------------------


def _trim_cache(state: SessionState) -> None:
    for rec in state.evictions:
        if state.cached_bytes <= state.cache_budget_bytes:
            break
        if rec.cached_body is not None:
            state.cached_bytes -= len(rec.cached_body.encode("utf-8"))
            rec.cached_body = None


def record_eviction(
    state: SessionState, meta: BlockMeta, category: str, body: str | None, turn: int | None = None
) -> EvictionRecord:
    if meta.status == "pinned":
        raise EvictPinned(meta.block_id)
    if meta.status != "resident":
        raise ValueError(f"block {meta.block_id} is {meta.status}, not resident")
    if category not in ("gc", "paged"):
        raise ValueError(f"unknown eviction category {category!r}")
    key = meta.fault_key or FaultKey(meta.tool_name or meta.kind, "")
    rec = EvictionRecord(
        block_id=meta.block_id,
        fault_key=key,
        content_hash=meta.content_hash,
        size_bytes=meta.size_bytes,
        evicted_at_turn=meta.turn if turn is None else turn,
        category=category,
        line_count=meta.line_count,
    )
    meta.status = "evicted"
    meta.release_requested = False
    state.evictions.append(rec)
    if category == "paged" and body is not None:
        size = len(body.encode("utf-8"))
        if size <= state.cache_budget_bytes:
            rec.cached_body = body
            state.cached_bytes += size
            _trim_cache(state)
    return rec


def lookup_fault(state: SessionState, key: FaultKey) -> EvictionRecord | None:
    for rec in reversed(state.evictions):
        if rec.category == "paged" and not rec.resolved and rec.fault_key == key:
            return rec
    return None


def latest_record(state: SessionState, key: FaultKey, *, cached: bool = False) -> EvictionRecord | None:
    for rec in reversed(state.evictions):
        if rec.category == "paged" and rec.fault_key == key and (not cached or rec.cached_body is not None):
            return rec
    return None


def _set_pin_status(state: SessionState, key: FaultKey, pinned_hash: str | None, pinned: bool) -> list[BlockMeta]:
    changed = []
    for meta in state.blocks.values():
        if meta.fault_key != key or meta.kind != "tool_result":
            continue
        if pinned and meta.status == "resident" and meta.content_hash == pinned_hash:
            meta.status = "pinned"
            changed.append(meta)
        elif not pinned and meta.status == "pinned":
            meta.status = "resident"
            changed.append(meta)
    return changed


def apply_fault(
    state: SessionState, record: EvictionRecord, current_hash: str | None, turn: int | None = None
) -> PinUpdate:
    """Charge a fault to ``record``; pin the key iff the model got back exactly what was taken."""
    key = record.fault_key
    for rec in state.evictions:
        if rec.fault_key == key and rec.category == "paged":
            rec.resolved = True
    turn = record.evicted_at_turn if turn is None else turn
    entry = state.fault_history.get(key)
    if entry is None:
        entry = FaultEntry(pinned_hash=None, fault_count=0, last_access_turn=turn)
        state.fault_history[key] = entry
    entry.fault_count += 1
    entry.last_access_turn = max(entry.last_access_turn, turn)
    same = current_hash is not None and current_hash == record.content_hash
    if same:
        entry.pinned = True
        entry.pinned_hash = current_hash
        _set_pin_status(state, key, current_hash, True)
    return PinUpdate(pinned=entry.pinned, fault_count=entry.fault_count)


def unpin_on_edit(state: SessionState, key: FaultKey, new_hash: str) -> list[BlockMeta]:
    """Drop the pin when the path now reads differently; returns blocks that changed status."""
    entry = state.fault_history.get(key)
    if entry is None or not entry.pinned or entry.pinned_hash == new_hash:
        return []
    entry.pinned = False
    return _set_pin_status(state, key, None, False)


def note_access(state: SessionState, key: FaultKey, turn: int) -> None:
    entry = state.fault_history.get(key)
    if entry is not None:
        entry.last_access_turn = max(entry.last_access_turn, turn)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_document(state: SessionState) -> dict[str, Any]:
    return {
        "version": CHECKPOINT_VERSION,
        "session_id": state.session_id,
        "blocks": [m.to_json() for m in state.blocks.values()],
        "evictions": [r.to_json() for r in state.evictions],
        "fault_history": [
            {"fault_key": k.as_list(), **asdict(v)} for k, v in sorted(state.fault_history.items())
        ],
        "used_tools": sorted(state.used_tools),
        "processed_directive_blocks": sorted(state.processed_directive_blocks),
        "injections": [asdict(i) for i in state.injections],
        "last_usage_tokens": state.last_usage_tokens,
    }


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def checkpoint_save(state: SessionState, path: Path | str | None = None) -> Path:
    target = Path(path) if path is not None else state.checkpoint_path
    if target is None:
        raise CheckpointError("no checkpoint path configured")
    payload = json.dumps(checkpoint_document(state), ensure_ascii=False, indent=1).encode("utf-8")
    try:
        _atomic_write(target, payload)
    except OSError as exc:
        raise CheckpointError(f"checkpoint write failed for {target}: {exc}") from exc
    return target


def checkpoint_load(path: Path | str, session_id: str | None = None) -> SessionState:
    path = Path(path)
    sid = session_id or path.stem
    fresh = SessionState(session_id=sid, checkpoint_path=path)
    if not path.exists():
        return fresh
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        state = SessionState(session_id=doc.get("session_id", sid), checkpoint_path=path)
        for raw in doc["blocks"]:
            meta = BlockMeta.from_json(raw)
            state.blocks[meta.block_id] = meta
        state.evictions = [EvictionRecord.from_json(r) for r in doc["evictions"]]
        for raw in doc["fault_history"]:
            raw = dict(raw)
            key = FaultKey(*raw.pop("fault_key"))
            state.fault_history[key] = FaultEntry(**raw)
        state.used_tools = set(doc["used_tools"])
        state.processed_directive_blocks = set(doc.get("processed_directive_blocks", []))
        state.injections = [PhantomInjection(**i) for i in doc.get("injections", [])]
        state.last_usage_tokens = doc.get("last_usage_tokens")
        return state
    except (OSError, ValueError, KeyError, TypeError) as exc:
        logger.warning("discarding unreadable checkpoint %s: %s", path, exc)
        return fresh


def iter_status(state: SessionState, statuses: Iterable[str]) -> list[BlockMeta]:
    wanted = set(statuses)
    return [m for m in state.blocks.values() if m.status in wanted]
