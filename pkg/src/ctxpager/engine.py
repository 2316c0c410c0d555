"""The per-request paging pipeline, shared by the live proxy and offline replay.

A :class:`Pager` takes one client request (the full resent history), brings
the session's page table up to date, re-applies every earlier mutation, makes
this turn's eviction decisions and returns the request to forward.  Every
block status change is written to the decision log exactly once.
"""
from __future__ import annotations

import enum
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import cooperative, handles
from .pagestore import (
    BlockMeta,
    EvictionRecord,
    PhantomInjection,
    Registration,
    SessionState,
    apply_fault,
    lookup_fault,
    note_access,
    record_eviction,
    register_blocks,
    unpin_on_edit,
)
from .policy import (
    PolicyConfig,
    PressureZone,
    ToolClass,
    classify,
    compute_zone,
    estimate_tokens,
    select_evictions,
)
from .trimming import DEFAULT_SKILL_PREFIXES, StubState, dedup_skills, note_tool_use, stub_tools, track_static
from .wire import ContentBlock, Request, index_turns, serialize_request

logger = logging.getLogger(__name__)

ACTIONS = ("evict", "fault", "pin", "unpin", "stub", "dedup", "directive", "phantom", "advisory", "forward")


class Mode(str, enum.Enum):
    OBSERVE = "observe"
    TRIM = "trim"
    COMPACT = "compact"


@dataclass
class DecisionLogRecord:
    timestamp: float
    session_id: str
    turn: int
    zone: str
    action: str
    subject: str
    bytes_delta: int
    detail: str = ""

    def __post_init__(self) -> None:
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)


class DecisionLog:
    """Append-only JSONL decision log; write failures are counted, never raised."""

    def __init__(self, path: Path | str | None = None, keep: bool = False) -> None:
        self.path = Path(path) if path else None
        self.keep = keep
        self.records: list[DecisionLogRecord] = []
        self.failures = 0
        self._lock = threading.Lock()
        self._fh = None

    def log_decision(self, record: DecisionLogRecord) -> None:
        if self.keep:
            self.records.append(record)
        if self.path is None:
            return
        line = record.to_json() + "\n"
        with self._lock:
            try:
                if self._fh is None:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    self._fh = open(self.path, "a", encoding="utf-8")
                self._fh.write(line)
                self._fh.flush()
            except (OSError, ValueError) as exc:
                self.failures += 1
                logger.warning("decision log write failed: %s", exc)

    def extend(self, records: list[DecisionLogRecord]) -> None:
        for r in records:
            self.log_decision(r)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def key_label(meta_or_key: Any) -> str:
    key = getattr(meta_or_key, "fault_key", meta_or_key)
    if key is None:
        return ""
    return f"{key.tool_name}:{key.args_key}"


@dataclass
class PassResult:
    request: Request
    records: list[DecisionLogRecord] = field(default_factory=list)
    zone: PressureZone = PressureZone.NORMAL
    estimated_tokens: int = 0
    evictions: list[EvictionRecord] = field(default_factory=list)
    faults: int = 0
    overhead_bytes: int = 0  # advisory + phantom defs, excluded from savings
    static_detail: str = ""


COMPACT_STAGES = (
    "index",
    "register",
    "note_tools",
    "faults",
    "directives",
    "phantom",
    "reapply",
    "zone",
    "evict",
    "advisory",
    "trim",
    "inject_tools",
    "collapse",
)
TRIM_STAGES = ("index", "note_tools", "trim")


class Pager:
    def __init__(
        self,
        state: SessionState,
        policy: PolicyConfig | None = None,
        mode: Mode | str = Mode.COMPACT,
        *,
        phantom_enabled: bool = True,
        trimming: bool = True,
        advisories: bool = True,
        force_zone: PressureZone | None = None,
        skill_prefixes: tuple[str, ...] = DEFAULT_SKILL_PREFIXES,
    ) -> None:
        self.state = state
        self.policy = policy or PolicyConfig()
        self.mode = Mode(mode)
        self.phantom_enabled = phantom_enabled and self.mode == Mode.COMPACT
        self.trimming = trimming
        self.advisories = advisories
        self.force_zone = force_zone
        self.skill_prefixes = skill_prefixes

    @property
    def stages(self) -> tuple[str, ...]:
        if self.mode == Mode.COMPACT:
            return COMPACT_STAGES
        if self.mode == Mode.TRIM:
            return TRIM_STAGES
        return ()

    # -- helpers ------------------------------------------------------------

    def _log(self, out: PassResult, action: str, subject: str, delta: int = 0, detail: str = "") -> None:
        out.records.append(
            DecisionLogRecord(
                timestamp=time.time(),
                session_id=self.state.session_id,
                turn=self._turn,
                zone=out.zone.label,
                action=action,
                subject=subject,
                bytes_delta=delta,
                detail=detail,
            )
        )

    def _present(self) -> list[BlockMeta]:
        seen: dict[str, BlockMeta] = {}
        for _, _, meta in self._reg.located:
            seen.setdefault(meta.block_id, meta)
        return list(seen.values())

    def _replace(self, block_id: str, text: str) -> None:
        for mi, bi, meta in self._reg.located:
            if meta.block_id != block_id:
                continue
            blk = self._req.messages[mi].blocks[bi]
            if blk.kind in ("tool_result", "text"):
                new = ContentBlock(dict(blk.data), blk.tool_name)
                new.replace_body(text)
                self._req.messages[mi].blocks[bi] = new

    def _body_of(self, block_id: str) -> str | None:
        for mi, bi, meta in self._reg.located:
            if meta.block_id == block_id:
                return self._bodies.get((mi, bi))
        return None

    # -- pipeline -----------------------------------------------------------

    def run(self, req: Request) -> PassResult:
        self._req = req
        self._turn = 0
        self._reg = Registration([], set())
        self._bodies: dict[tuple[int, int], str] = {}
        out = PassResult(req)
        if self.force_zone is not None:
            out.zone = self.force_zone
        for stage in self.stages:
            getattr(self, f"_stage_{stage}")(out)
        return out

    def _stage_index(self, out: PassResult) -> None:
        cooperative.strip_advisories(self._req)
        cooperative.strip_phantom_tools(self._req)
        index_turns(self._req)
        self._turn = self._req.max_turn

    def _stage_register(self, out: PassResult) -> None:
        self._reg = register_blocks(self.state, self._req)
        self._bodies = {(mi, bi): self._req.messages[mi].blocks[bi].body for mi, bi, _ in self._reg.located}

    def _stage_note_tools(self, out: PassResult) -> None:
        note_tool_use(StubState(self.state.full_defs, self.state.used_tools), self._req)

    def _stage_faults(self, out: PassResult) -> None:
        results_by_use: dict[str, BlockMeta] = {}
        for mi, bi, meta in self._reg.located:
            blk = self._req.messages[mi].blocks[bi]
            if blk.kind == "tool_result" and blk.tool_use_id:
                results_by_use[blk.tool_use_id] = meta
        faulted_results: set[str] = set()
        for mi, bi, meta in self._reg.located:
            if meta.block_id not in self._reg.new_ids or meta.kind != "tool_use" or meta.role != "assistant":
                continue
            key = meta.fault_key
            note_access(self.state, key, self._turn)
            rec = lookup_fault(self.state, key)
            if rec is None:
                continue
            result = results_by_use.get(self._req.messages[mi].blocks[bi].tool_use_id or "")
            current = result.content_hash if result is not None and not result.is_error else None
            was_pinned = self.state.fault_history.is_pinned(key)
            upd = apply_fault(self.state, rec, current, self._turn)
            out.faults += 1
            if result is not None:
                faulted_results.add(result.block_id)
            self._log(out, "fault", key_label(key), 0, f"count={upd.fault_count} same_content={current == rec.content_hash}")
            if upd.pinned and not was_pinned:
                pinned = [m for m in self._present() if m.fault_key == key and m.status == "pinned"]
                for m in pinned or [None]:
                    self._log(out, "pin", m.block_id if m else key_label(key), 0, key_label(key))
        for meta in self._present():
            if meta.block_id not in self._reg.new_ids or meta.kind != "tool_result" or meta.fault_key is None:
                continue
            if meta.block_id in faulted_results:
                continue
            if not self.state.fault_history.is_pinned(meta.fault_key):
                continue
            changed = unpin_on_edit(self.state, meta.fault_key, meta.content_hash)
            for m in changed:
                self._log(out, "unpin", m.block_id, 0, f"content changed for {key_label(meta)}")
            if not changed and not self.state.fault_history.is_pinned(meta.fault_key):
                self._log(out, "unpin", key_label(meta), 0, "content changed")

    def _stage_directives(self, out: PassResult) -> None:
        last = max((i for i, m in enumerate(self._req.messages) if m.role == "assistant"), default=None)
        if last is None:
            return
        metas = self._reg.metas_for(last)
        ids = {m.block_id for m in metas}
        if not ids or ids <= self.state.processed_directive_blocks:
            return
        self.state.processed_directive_blocks |= ids
        text = "\n".join(
            str(b.data.get("text", "")) for b in self._req.messages[last].blocks if b.kind == "text"
        )
        directives = cooperative.parse_cleanup_tags(text)
        if not directives:
            return
        report = cooperative.apply_directives(directives, self.state, self._req, self._reg, self.policy)
        for d, bids in report.applied:
            label = d.kind if d.kind != "collapse" else f"collapse turns {d.turn_range[0]}-{d.turn_range[1]}"
            for bid in bids:
                meta = self.state.blocks[bid]
                if d.kind == "drop":
                    cat = next((r.category for r in report.evictions if r.block_id == bid), "gc")
                    label = f"drop {cat}"
                self._log(out, "directive", bid, -cooperative.forwarded_size(meta, self.state) if d.kind == "collapse" else 0, label)
        for d, why in report.skipped:
            self._log(out, "directive", d.block_id or str(d.turn_range), 0, f"skipped {d.kind}: {why}")
        out.evictions.extend(report.evictions)

    def _stage_phantom(self, out: PassResult) -> None:
        if not self.state.pending_phantom_calls:
            return
        anchors = {m.block_id for m in self._present() if m.role == "assistant"}
        still_pending = []
        for anchor, calls in self.state.pending_phantom_calls:
            if anchor not in anchors:
                still_pending.append((anchor, calls))
                continue
            uses, results = [], []
            for call in calls:
                outcome = cooperative.execute_phantom(call, self.state, self.policy, self._turn)
                uses.append(outcome.use)
                results.append(outcome.result)
                out.faults += len(outcome.faulted)
                self._log(out, "phantom", outcome.use["id"], 0, f"{call.tool} {call.paths}")
                for key in outcome.faulted:
                    self._log(out, "fault", key_label(key), 0, "phantom")
            self.state.injections.append(PhantomInjection(anchor, uses, results))
        self.state.pending_phantom_calls = still_pending[-16:]

    def _stage_reapply(self, out: PassResult) -> None:
        latest: dict[str, EvictionRecord] = {r.block_id: r for r in self.state.evictions}
        for meta in self._present():
            if meta.status == "evicted" and meta.block_id in latest:
                self._replace(meta.block_id, handles.render_handle(latest[meta.block_id]))
            elif meta.status == "summarized" and meta.summary is not None:
                self._replace(meta.block_id, meta.summary)

    def _splice_injections(self) -> None:
        if not self.state.injections:
            return
        where = {meta.block_id: mi for mi, _, meta in self._reg.located if meta.role == "assistant"}
        msgs = self._req.messages
        for inj in self.state.injections:
            mi = where.get(inj.anchor_block_id)
            if mi is None or mi + 1 >= len(msgs) or msgs[mi + 1].role != "user":
                continue
            msgs[mi].blocks.extend(ContentBlock(dict(u), u.get("name")) for u in inj.uses)
            msgs[mi].string_content = None
            msgs[mi + 1].blocks[0:0] = [ContentBlock(dict(r)) for r in inj.results]
            msgs[mi + 1].string_content = None

    def _stage_zone(self, out: PassResult) -> None:
        if self.force_zone is not None:
            out.zone = self.force_zone
            return
        if self.state.last_usage_tokens is not None:
            out.estimated_tokens = self.state.last_usage_tokens
        else:
            out.estimated_tokens = estimate_tokens(len(serialize_request(self._req)), self.policy)
        out.zone = compute_zone(out.estimated_tokens, self.policy)

    def _stage_evict(self, out: PassResult) -> None:
        chosen = select_evictions(self._present(), self.state.fault_history, out.zone, self.policy, self._turn)
        for meta, cls in chosen:
            detail = "released" if meta.release_requested else f"age={self._turn - meta.turn}"
            if meta.status == "pinned":
                meta.status = "resident"
                detail = "pin decayed"
            category = "paged" if cls == ToolClass.PAGEABLE else "gc"
            rec = record_eviction(self.state, meta, category, self._body_of(meta.block_id), self._turn)
            text = handles.render_handle(rec)
            self._replace(meta.block_id, text)
            out.evictions.append(rec)
            self._log(
                out, "evict", meta.block_id, len(text.encode("utf-8")) - meta.size_bytes,
                f"{category} {key_label(meta)} {detail}",
            )

    def _stage_advisory(self, out: PassResult) -> None:
        if not self.advisories or out.zone < PressureZone.ADVISORY:
            return
        text = cooperative.render_advisory(self._present(), out.zone, out.estimated_tokens, self.policy)
        if text and cooperative.append_advisory(self._req, text):
            size = len(text.encode("utf-8"))
            out.overhead_bytes += size
            self._log(out, "advisory", "newest-user-message", size, f"zone={out.zone.label}")

    def _stage_trim(self, out: PassResult) -> None:
        if not self.trimming:
            return
        stub = StubState(self.state.full_defs, self.state.used_tools)
        saved = stub_tools(self._req, stub)
        if saved:
            n = sum(1 for t in self._req.tools if t.name not in self.state.used_tools)
            self._log(out, "stub", f"{n} tools", -saved, f"used={sorted(self.state.used_tools)}")
        saved = dedup_skills(self._req, self.skill_prefixes)
        if saved:
            self._log(out, "dedup", "skills", -saved, "")
        report = track_static(self._req, self.state.static_hashes)
        self.state.static_hashes = report.hashes
        counts = {s: sum(1 for r in report.rows if r.status == s) for s in ("stable", "changed", "new")}
        out.static_detail = " ".join(f"{k}={v}" for k, v in counts.items()) + f" stable_bytes={report.stable_bytes}"

    def _stage_inject_tools(self, out: PassResult) -> None:
        # splicing shifts block positions, so it runs after every positional edit
        self._splice_injections()
        if self.phantom_enabled:
            cooperative.inject_phantom_tools(self._req)
            out.overhead_bytes += cooperative.phantom_defs_size()

    def _stage_collapse(self, out: PassResult) -> None:
        summaries: dict[int, str] = {}
        for meta in self._present():
            if meta.status == "collapsed" and meta.summary is not None:
                summaries.setdefault(meta.turn, meta.summary)
        if not summaries:
            return
        kept = []
        pending: list[str] = []
        for msg in self._req.messages:
            if msg.turn in summaries:
                text = summaries[msg.turn]
                if text not in pending:
                    pending.append(text)
                continue
            if pending and msg.role == "user":
                msg.blocks[0:0] = [ContentBlock.text(t) for t in pending]
                msg.string_content = None
                pending = []
            kept.append(msg)
        self._req.messages = kept


def process_request(state: SessionState, req: Request, **kwargs: Any) -> PassResult:
    return Pager(state, **kwargs).run(req)


__all__ = [
    "ACTIONS",
    "COMPACT_STAGES",
    "DecisionLog",
    "DecisionLogRecord",
    "Mode",
    "Pager",
    "PassResult",
    "classify",
    "process_request",
]
