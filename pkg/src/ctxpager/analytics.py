"""Offline instruments: transcript probe, eviction replay and cost accounting."""
from __future__ import annotations

import csv
import io
import json
import logging
import re
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .engine import DecisionLogRecord, Mode, Pager
from .pagestore import SessionState, fault_key
from .policy import PolicyConfig, PressureZone, classify, estimate_tokens, ToolClass
from .wire import Request, block_body, index_turns, serialize_request

logger = logging.getLogger(__name__)

__all__ = [
    "CostCurve",
    "ReplayReport",
    "ToolOverhead",
    "Transcript",
    "amplification_factor",
    "belady_min_faults",
    "cost_curve",
    "estimate_tokens",
    "fifo_faults",
    "load_transcript",
    "lru_faults",
    "replay",
    "report_from_log",
    "tool_overhead",
]


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------


@dataclass
class TranscriptRecord:
    role: str
    content: list[dict[str, Any]]
    usage: dict[str, Any] = field(default_factory=dict)


@dataclass
class Transcript:
    records: list[TranscriptRecord] = field(default_factory=list)
    path: str | None = None
    bad_lines: int = 0

    @classmethod
    def from_messages(cls, messages: Iterable[dict[str, Any]], path: str | None = None) -> Transcript:
        t = cls(path=path)
        for m in messages:
            rec = _record_from(m)
            if rec is not None:
                t.records.append(rec)
        return t

    def messages(self) -> list[dict[str, Any]]:
        """Records as API messages, merging consecutive same-role records."""
        out: list[dict[str, Any]] = []
        for r in self.records:
            if out and out[-1]["role"] == r.role:
                out[-1]["content"].extend(r.content)
            else:
                out.append({"role": r.role, "content": list(r.content)})
        return out

    def request(self) -> Request:
        req = Request.from_json({"messages": self.messages()})
        index_turns(req)
        return req


def _record_from(line: dict[str, Any]) -> TranscriptRecord | None:
    msg = line.get("message") if isinstance(line.get("message"), dict) else line
    role = msg.get("role")
    if role not in ("user", "assistant"):
        return None
    content = msg.get("content")
    if isinstance(content, str):
        content = [{"type": "text", "text": content}]
    if not isinstance(content, list):
        return None
    blocks = [b for b in content if isinstance(b, dict)]
    return TranscriptRecord(role, blocks, dict(msg.get("usage") or {}))


def load_transcript(path: Path | str) -> Transcript:
    """Read a session JSONL file; lines that are not messages are skipped."""
    path = Path(path)
    t = Transcript(path=str(path))
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except ValueError:
                t.bad_lines += 1
                logger.warning("%s:%d: not JSON, skipped", path, n)
                continue
            rec = _record_from(doc) if isinstance(doc, dict) else None
            if rec is not None:
                t.records.append(rec)
    return t


# ---------------------------------------------------------------------------
# Probe
# ---------------------------------------------------------------------------


def result_survival(t: Transcript) -> list[tuple[int, int]]:
    """(size_bytes, user turns survived to session end) for each tool result."""
    req = t.request()
    last = req.max_turn
    out = []
    for _, _, msg, blk in req.iter_blocks():
        if blk.kind == "tool_result":
            out.append((blk.content_bytes, last - msg.turn))
    return out


def amplification_factor(t: Transcript) -> float:
    """Size-weighted mean number of later user turns each tool result is resent for."""
    rows = result_survival(t)
    total = sum(size for size, _ in rows)
    if total == 0:
        return 0.0
    return sum(size * turns for size, turns in rows) / total


@dataclass(frozen=True)
class ToolOverhead:
    tool_result: float
    assistant_text: float
    user_text: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.tool_result, self.assistant_text, self.user_text)


def tool_overhead(t: Transcript) -> ToolOverhead:
    """Byte shares of tool results, assistant output and user text."""
    tool = assistant = user = 0
    for rec in t.records:
        for blk in rec.content:
            size = len(block_body(blk).encode("utf-8"))
            if blk.get("type") == "tool_result":
                tool += size
            elif rec.role == "assistant":
                assistant += size
            else:
                user += size
    total = tool + assistant + user
    if total == 0:
        return ToolOverhead(0.0, 0.0, 0.0)
    return ToolOverhead(tool / total, assistant / total, user / total)


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


@dataclass
class ReplayReport:
    total_evictions: int = 0
    gc_evictions: int = 0
    paged_evictions: int = 0
    faults: int = 0
    bytes_evicted: int = 0
    files: int = 0
    skipped_files: int = 0
    sessions: int = 0
    baselines: dict[str, int] = field(default_factory=dict)

    @property
    def fault_rate_total(self) -> float | None:
        return self.faults / self.total_evictions if self.total_evictions else None

    @property
    def fault_rate_paged(self) -> float | None:
        return self.faults / self.paged_evictions if self.paged_evictions else None

    def merge(self, other: ReplayReport) -> ReplayReport:
        merged = ReplayReport()
        for name in ("total_evictions", "gc_evictions", "paged_evictions", "faults", "bytes_evicted",
                     "files", "skipped_files", "sessions"):
            setattr(merged, name, getattr(self, name) + getattr(other, name))
        merged.baselines = dict(Counter(self.baselines) + Counter(other.baselines))
        return merged

    def to_json(self) -> dict[str, Any]:
        doc = {
            "total_evictions": self.total_evictions,
            "gc_evictions": self.gc_evictions,
            "paged_evictions": self.paged_evictions,
            "faults": self.faults,
            "fault_rate_total": self.fault_rate_total,
            "fault_rate_paged": self.fault_rate_paged,
            "bytes_evicted": self.bytes_evicted,
            "metadata": {"files": self.files, "skipped_files": self.skipped_files, "sessions": self.sessions},
        }
        if self.baselines:
            doc["baselines"] = dict(self.baselines)
        return doc


def request_prefixes(t: Transcript) -> list[Request]:
    """The request a client would have sent after each user-role message."""
    msgs = t.messages()
    out = []
    for i, m in enumerate(msgs):
        if m["role"] == "user":
            out.append(Request.from_json({"messages": json.loads(json.dumps(msgs[: i + 1]))}))
    return out


def replay_transcript(
    t: Transcript,
    cfg: PolicyConfig | None = None,
    zone: PressureZone | None = PressureZone.INVOLUNTARY,
) -> ReplayReport:
    """Drive one recorded session through the pager, one reconstructed request per API call.

    ``zone`` pins the pressure zone (the default mimics a context under
    pressure); pass ``None`` to estimate it from request size instead.
    """
    cfg = cfg or PolicyConfig()
    state = SessionState(session_id=t.path or "replay")
    pager = Pager(state, cfg, Mode.COMPACT, phantom_enabled=False, trimming=False, advisories=False, force_zone=zone)
    report = ReplayReport(sessions=1)
    for req in request_prefixes(t):
        result = pager.run(req)
        report.faults += result.faults
        for rec in result.evictions:
            report.total_evictions += 1
            report.bytes_evicted += rec.size_bytes
            if rec.category == "paged":
                report.paged_evictions += 1
            else:
                report.gc_evictions += 1
    return report


def _is_decision_log(path: Path) -> bool:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                return isinstance(doc, dict) and "action" in doc and "bytes_delta" in doc
    return False


def replay(
    sources: Iterable[Transcript | Path | str],
    cfg: PolicyConfig | None = None,
    zone: PressureZone | None = PressureZone.INVOLUNTARY,
    baseline_capacity: int | None = None,
) -> ReplayReport:
    """Replay transcripts (objects, files or directories of ``*.jsonl``) into one report.

    Decision-log files are summarized from their records rather than replayed.
    """
    report = ReplayReport()
    for src in _expand(sources):
        if isinstance(src, Transcript):
            part = replay_transcript(src, cfg, zone)
            transcript = src
        else:
            try:
                if _is_decision_log(src):
                    part = report_from_log(load_decision_log(src))
                    transcript = None
                else:
                    transcript = load_transcript(src)
                    part = replay_transcript(transcript, cfg, zone)
            except (OSError, ValueError, UnicodeDecodeError) as exc:
                logger.warning("skipping %s: %s", src, exc)
                report.skipped_files += 1
                continue
            part.files = 1
        if baseline_capacity and transcript is not None:
            refs = reference_string(transcript, cfg)
            part.baselines = {
                "min_faults": belady_min_faults(refs, baseline_capacity),
                "fifo_faults": fifo_faults(refs, baseline_capacity),
                "lru_faults": lru_faults(refs, baseline_capacity),
            }
        report = report.merge(part)
    return report


def _expand(sources: Iterable[Transcript | Path | str]) -> list[Transcript | Path]:
    out: list[Transcript | Path] = []
    for src in sources:
        if isinstance(src, Transcript):
            out.append(src)
            continue
        p = Path(src)
        if p.is_dir():
            out.extend(sorted(p.rglob("*.jsonl")))
        else:
            out.append(p)
    return out


# ---------------------------------------------------------------------------
# Decision logs
# ---------------------------------------------------------------------------


def load_decision_log(path: Path | str) -> list[DecisionLogRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(DecisionLogRecord(**json.loads(line)))
            except (ValueError, TypeError) as exc:
                logger.warning("%s:%d: bad record skipped (%s)", path, n, exc)
    return records


_SIZES = re.compile(r"received=(\d+) forwarded=(\d+)")


def report_from_log(records: Iterable[DecisionLogRecord]) -> ReplayReport:
    report = ReplayReport()
    sessions = set()
    for r in records:
        sessions.add(r.session_id)
        is_drop = r.action == "directive" and r.detail.startswith("drop ")
        if r.action == "evict" or is_drop:
            report.total_evictions += 1
            if r.detail.split()[1 if is_drop else 0] == "paged":
                report.paged_evictions += 1
            else:
                report.gc_evictions += 1
            report.bytes_evicted += max(0, -r.bytes_delta)
        elif r.action == "fault":
            report.faults += 1
    report.sessions = len(sessions - {""})
    return report


def curve_from_log(records: Iterable[DecisionLogRecord]) -> CostCurve:
    """Per-request received vs forwarded sizes from ``forward`` records."""
    baseline, managed = [], []
    for r in records:
        if r.action != "forward":
            continue
        m = _SIZES.search(r.detail)
        if m:
            baseline.append(int(m.group(1)))
            managed.append(int(m.group(2)))
    return cost_curve(baseline, managed)


def action_table(records: Iterable[DecisionLogRecord]) -> dict[str, dict[str, int]]:
    table: dict[str, dict[str, int]] = {}
    for r in records:
        row = table.setdefault(r.action, {"count": 0, "bytes_delta": 0})
        row["count"] += 1
        row["bytes_delta"] += r.bytes_delta
    return dict(sorted(table.items()))


# ---------------------------------------------------------------------------
# Cost curves
# ---------------------------------------------------------------------------


@dataclass
class CostCurve:
    baseline: list[int]
    managed: list[int]
    baseline_cumulative: list[int]
    managed_cumulative: list[int]
    reduction: float
    mean_per_turn_reduction: float
    final_turn_reduction: float

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["turn", "baseline", "managed", "baseline_cumulative", "managed_cumulative"])
        for i, row in enumerate(zip(self.baseline, self.managed, self.baseline_cumulative, self.managed_cumulative)):
            w.writerow([i, *row])
        return buf.getvalue()


def _cumsum(xs: Sequence[int]) -> list[int]:
    out, total = [], 0
    for x in xs:
        total += x
        out.append(total)
    return out


def _ratio_saved(base: int, managed: int) -> float:
    return 1.0 - managed / base if base else 0.0


def cost_curve(baseline_sizes: Sequence[int], managed_sizes: Sequence[int]) -> CostCurve:
    if len(baseline_sizes) != len(managed_sizes):
        raise ValueError(f"length mismatch: {len(baseline_sizes)} baseline vs {len(managed_sizes)} managed")
    base, man = list(baseline_sizes), list(managed_sizes)
    bc, mc = _cumsum(base), _cumsum(man)
    per_turn = [_ratio_saved(b, m) for b, m in zip(base, man)]
    return CostCurve(
        baseline=base,
        managed=man,
        baseline_cumulative=bc,
        managed_cumulative=mc,
        reduction=_ratio_saved(bc[-1], mc[-1]) if bc else 0.0,
        mean_per_turn_reduction=sum(per_turn) / len(per_turn) if per_turn else 0.0,
        final_turn_reduction=per_turn[-1] if per_turn else 0.0,
    )


def managed_sizes(t: Transcript, cfg: PolicyConfig | None = None, zone: PressureZone | None = None) -> tuple[list[int], list[int]]:
    """Baseline and post-pipeline byte sizes of every reconstructed request."""
    state = SessionState(session_id=t.path or "curve")
    pager = Pager(state, cfg or PolicyConfig(), Mode.COMPACT, phantom_enabled=False, advisories=False, force_zone=zone)
    base, managed = [], []
    for req in request_prefixes(t):
        base.append(len(serialize_request(req)))
        managed.append(len(serialize_request(pager.run(req).request)))
    return base, managed


# ---------------------------------------------------------------------------
# Classic page-replacement baselines
# ---------------------------------------------------------------------------


def reference_string(t: Transcript, cfg: PolicyConfig | None = None) -> list[str]:
    """Keys of pageable tool calls in order: the page-reference trace of a session."""
    refs = []
    for rec in t.records:
        if rec.role != "assistant":
            continue
        for blk in rec.content:
            if blk.get("type") == "tool_use" and classify(blk.get("name"), cfg) == ToolClass.PAGEABLE:
                key = fault_key(str(blk.get("name")), blk.get("input") or {})
                refs.append(key.args_key)
    return refs


def belady_min_faults(refs: Sequence[str], capacity: int) -> int:
    """Faults under the optimal policy: evict the page referenced furthest in the future."""
    if capacity <= 0:
        return len(refs)
    next_use: list[int] = [0] * len(refs)
    upcoming: dict[str, int] = {}
    for i in range(len(refs) - 1, -1, -1):
        next_use[i] = upcoming.get(refs[i], len(refs) + i)
        upcoming[refs[i]] = i
    resident: dict[str, int] = {}
    faults = 0
    for i, page in enumerate(refs):
        if page not in resident:
            faults += 1
            if len(resident) >= capacity:
                victim = max(resident, key=lambda p: resident[p])
                del resident[victim]
        resident[page] = next_use[i]
    return faults


def fifo_faults(refs: Sequence[str], capacity: int) -> int:
    resident: OrderedDict[str, None] = OrderedDict()
    faults = 0
    for page in refs:
        if page in resident:
            continue
        faults += 1
        if capacity <= 0:
            continue
        if len(resident) >= capacity:
            resident.popitem(last=False)
        resident[page] = None
    return faults


def lru_faults(refs: Sequence[str], capacity: int) -> int:
    resident: OrderedDict[str, None] = OrderedDict()
    faults = 0
    for page in refs:
        if page in resident:
            resident.move_to_end(page)
            continue
        faults += 1
        if capacity <= 0:
            continue
        if len(resident) >= capacity:
            resident.popitem(last=False)
        resident[page] = None
    return faults
