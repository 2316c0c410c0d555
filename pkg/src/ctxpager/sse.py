"""Server-sent event framing for streamed Messages responses."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable


@dataclass
class StreamEvent:
    """One SSE frame; ``raw`` holds the exact bytes received, terminator included."""

    event: str | None
    data: str
    raw: bytes = b""

    @property
    def payload(self) -> dict[str, Any]:
        return json.loads(self.data)

    @classmethod
    def build(cls, event: str, payload: dict[str, Any]) -> StreamEvent:
        data = json.dumps(payload, ensure_ascii=False, separators=(",", ":"))
        return cls(event, data, f"event: {event}\ndata: {data}\n\n".encode("utf-8"))

    def encode(self) -> bytes:
        if self.raw:
            return self.raw
        head = f"event: {self.event}\n" if self.event else ""
        body = "".join(f"data: {line}\n" for line in self.data.split("\n"))
        return (head + body + "\n").encode("utf-8")


class SSEParser:
    """Incremental text/event-stream parser that keeps each frame's raw bytes."""

    def __init__(self) -> None:
        self._buffer = b""

    def feed(self, chunk: bytes) -> list[StreamEvent]:
        self._buffer += chunk
        events = []
        while True:
            cut = _frame_end(self._buffer)
            if cut is None:
                break
            frame, self._buffer = self._buffer[:cut], self._buffer[cut:]
            ev = _parse_frame(frame)
            if ev is not None:
                events.append(ev)
        return events

    def flush(self) -> list[StreamEvent]:
        frame, self._buffer = self._buffer, b""
        if not frame.strip():
            return [StreamEvent(None, "", frame)] if frame else []
        ev = _parse_frame(frame)
        return [ev] if ev is not None else []


def _frame_end(buf: bytes) -> int | None:
    best = None
    for sep in (b"\n\n", b"\r\n\r\n", b"\r\r"):
        i = buf.find(sep)
        if i != -1 and (best is None or i + len(sep) < best):
            best = i + len(sep)
    return best


def _parse_frame(frame: bytes) -> StreamEvent | None:
    text = frame.decode("utf-8", errors="replace")
    event = None
    data: list[str] = []
    for line in text.splitlines():
        if not line or line.startswith(":"):
            continue
        name, _, value = line.partition(":")
        if value.startswith(" "):
            value = value[1:]
        if name == "event":
            event = value
        elif name == "data":
            data.append(value)
    return StreamEvent(event, "\n".join(data), frame)


def parse_stream(raw: bytes) -> list[StreamEvent]:
    parser = SSEParser()
    return parser.feed(raw) + parser.flush()


def encode_stream(events: Iterable[StreamEvent]) -> bytes:
    return b"".join(ev.encode() for ev in events)


@dataclass
class AssembledMessage:
    content: list[dict[str, Any]] = field(default_factory=list)
    stop_reason: str | None = None
    usage: dict[str, Any] = field(default_factory=dict)


def reassemble(events: Iterable[StreamEvent]) -> AssembledMessage:
    """Fold stream events into the equivalent non-streamed message."""
    msg = AssembledMessage()
    partial: dict[int, list[str]] = {}
    slots: dict[int, dict[str, Any]] = {}
    for ev in events:
        if not ev.data:
            continue
        p = json.loads(ev.data)
        kind = p.get("type")
        if kind == "message_start":
            msg.usage.update(p.get("message", {}).get("usage") or {})
        elif kind == "content_block_start":
            block = dict(p["content_block"])
            slots[p["index"]] = block
            partial[p["index"]] = []
        elif kind == "content_block_delta":
            d = p["delta"]
            block = slots[p["index"]]
            if d.get("type") == "text_delta":
                block["text"] = block.get("text", "") + d.get("text", "")
            elif d.get("type") == "input_json_delta":
                partial[p["index"]].append(d.get("partial_json", ""))
            elif d.get("type") == "thinking_delta":
                block["thinking"] = block.get("thinking", "") + d.get("thinking", "")
            elif d.get("type") == "signature_delta":
                block["signature"] = d.get("signature", "")
        elif kind == "content_block_stop":
            i = p["index"]
            block = slots[i]
            if block.get("type") == "tool_use" and partial.get(i):
                block["input"] = json.loads("".join(partial[i]))
            msg.content.append(block)
        elif kind == "message_delta":
            msg.stop_reason = p.get("delta", {}).get("stop_reason", msg.stop_reason)
            msg.usage.update(p.get("usage") or {})
    return msg


def usage_tokens(usage: dict[str, Any]) -> int | None:
    """Effective input tokens: plain input plus cache creation plus cache reads."""
    keys = ("input_tokens", "cache_creation_input_tokens", "cache_read_input_tokens")
    if not any(k in usage for k in keys):
        return None
    return sum(int(usage.get(k) or 0) for k in keys)
