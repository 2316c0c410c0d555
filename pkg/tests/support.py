"""Shared fixtures: tool/skill payloads, a mock upstream and a scripted agent session."""
from __future__ import annotations

import asyncio
import json
import re
from dataclasses import dataclass, field
from typing import Any

import httpx

from ctxpager import proxy
from ctxpager.policy import PolicyConfig
from ctxpager.sse import parse_stream, reassemble
from ctxpager.synth import filler
from ctxpager.wire import canonical_json

# ---------------------------------------------------------------------------
# Tool and skill fixtures
# ---------------------------------------------------------------------------

TOOL_NAMES = [
    "Read", "Bash", "Edit", "Glob", "Grep", "Write", "WebFetch", "WebSearch", "ExitPlanMode",
    "EnterPlanMode", "AskUserQuestion", "TaskOutput", "TaskStop", "Agent", "Skill", "TodoWrite",
    "NotebookEdit", "EnterWorktree",
]
FULL_TOOL_BYTES = 3505


def tool_def(name: str, size: int = FULL_TOOL_BYTES) -> dict[str, Any]:
    """A tool definition whose canonical JSON is exactly ``size`` bytes."""
    first = f"{name} tool."
    schema = {
        "type": "object",
        "properties": {
            "target": {"type": "string", "description": "What to operate on."},
            "options": {"type": "object", "description": "Extra settings.", "properties": {}},
        },
        "required": ["target"],
    }
    data = {"name": name, "description": first + "\n", "input_schema": schema}
    pad = size - len(canonical_json(data).encode("utf-8"))
    words = ("Usage notes follow. " * (pad // 20 + 2))[:pad]
    data["description"] = first + "\n" + words
    assert len(canonical_json(data).encode("utf-8")) == size
    return data


def tool_fixture() -> list[dict[str, Any]]:
    return [tool_def(n) for n in TOOL_NAMES]


SKILL_PREFIXES = ("base", "example-skills:base", "document-skills:base")
SKILL_NAMES = ["pdf", "xlsx", "docx", "pptx", "canvas", "theme", "brand", "webapp", "mcp", "artifacts"]
SKILL_LINE_BYTES = 372  # incl. newline; 20 duplicate lines come to about 7,450 bytes


def skill_line(prefix: str, name: str) -> str:
    head = f"- {prefix}:{name}: "
    body = f"Use for {name} tasks. " * 40
    return head + body[: SKILL_LINE_BYTES - len(head) - 1] + "\n"


def skills_text() -> str:
    """The same ten skills listed under three prefixes: 30 entries."""
    lines = ["The following skills are available:\n"]
    for prefix in SKILL_PREFIXES:
        lines.extend(skill_line(prefix, n) for n in SKILL_NAMES)
    return "".join(lines)


SYSTEM_PROMPT = [
    {"type": "text", "text": "You are a coding agent working in a repository."},
    {"type": "text", "text": filler("project instructions", 12_000)},
]


# ---------------------------------------------------------------------------
# Mock upstream
# ---------------------------------------------------------------------------


def sse(events: list[tuple[str, dict[str, Any]]]) -> bytes:
    return b"".join(
        f"event: {name}\ndata: {json.dumps(payload, separators=(',', ':'))}\n\n".encode() for name, payload in events
    )


def message_events(content: list[dict[str, Any]], stop_reason: str, input_tokens: int) -> list[tuple[str, dict[str, Any]]]:
    ev: list[tuple[str, dict[str, Any]]] = [(
        "message_start",
        {"type": "message_start", "message": {
            "id": "msg_1", "type": "message", "role": "assistant", "model": "mock", "content": [],
            "stop_reason": None, "usage": {"input_tokens": input_tokens, "output_tokens": 1},
        }},
    )]
    for i, block in enumerate(content):
        if block["type"] == "text":
            ev.append(("content_block_start", {"type": "content_block_start", "index": i, "content_block": {"type": "text", "text": ""}}))
            ev.append(("content_block_delta", {"type": "content_block_delta", "index": i, "delta": {"type": "text_delta", "text": block["text"]}}))
        else:
            start = dict(block, input={})
            ev.append(("content_block_start", {"type": "content_block_start", "index": i, "content_block": start}))
            ev.append(("content_block_delta", {"type": "content_block_delta", "index": i, "delta": {"type": "input_json_delta", "partial_json": json.dumps(block["input"])}}))
        ev.append(("content_block_stop", {"type": "content_block_stop", "index": i}))
    ev.append(("message_delta", {"type": "message_delta", "delta": {"stop_reason": stop_reason}, "usage": {"output_tokens": 5}}))
    ev.append(("message_stop", {"type": "message_stop"}))
    return ev


@dataclass
class MockUpstream:
    """Records every forwarded body; answers with ``model(body) -> (content, stop_reason)``."""

    model: Any = None
    received: list[bytes] = field(default_factory=list)
    fail: bool = False

    def __post_init__(self) -> None:
        if self.model is None:
            self.model = lambda body: ([{"type": "text", "text": "hello"}], "end_turn")

    async def __call__(self, request: httpx.Request) -> httpx.Response:
        body = await request.aread()
        self.received.append(body)
        if self.fail:
            return httpx.Response(529, json={"type": "error", "error": {"type": "overloaded_error", "message": "busy"}})
        try:
            doc = json.loads(body)
        except ValueError:
            return httpx.Response(400, json={"type": "error", "error": {"type": "invalid_request_error", "message": "bad json"}})
        content, stop = self.model(doc)
        tokens = round(len(body) / 4.15)
        if doc.get("stream"):
            return httpx.Response(200, headers={"content-type": "text/event-stream"}, content=sse(message_events(content, stop, tokens)))
        return httpx.Response(200, json={
            "id": "msg_1", "type": "message", "role": "assistant", "model": "mock", "content": content,
            "stop_reason": stop, "usage": {"input_tokens": tokens, "output_tokens": 5},
        })

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self)


def make_proxy(upstream: MockUpstream, mode: str = "compact", **kw: Any) -> proxy.ProxyService:
    policy = kw.pop("policy", PolicyConfig())
    cfg = proxy.ProxyConfig(upstream_base_url="http://upstream.test", mode=mode, policy=policy, **kw)
    return proxy.ProxyService(cfg, transport=upstream.transport(), keep_records=True)


def client_for(service: proxy.ProxyService) -> httpx.AsyncClient:
    return httpx.AsyncClient(transport=httpx.ASGITransport(app=service.app), base_url="http://proxy.test", timeout=30)


async def post(service: proxy.ProxyService, body: bytes, headers: dict[str, str] | None = None) -> httpx.Response:
    async with client_for(service) as client:
        return await client.post("/v1/messages", content=body, headers={"content-type": "application/json", **(headers or {})})


def run(coro: Any) -> Any:
    return asyncio.run(coro)


def reassemble_sse(raw: bytes) -> tuple[list[dict[str, Any]], str | None]:
    msg = reassemble(e for e in parse_stream(raw) if e.data)
    return msg.content, msg.stop_reason


# ---------------------------------------------------------------------------
# Scripted agent session
# ---------------------------------------------------------------------------

TURNS = 12
FILE_SIZE = 24_000


def secret(i: int) -> str:
    return f"SECRET-{i:02d}-{(i * 7919) % 10007:05d}"


def repo_files() -> dict[str, str]:
    files = {}
    for i in range(2 * TURNS):
        path = f"/repo/src/module_{i:02d}.py"
        files[path] = f"# {secret(i)}\n" + filler(path, FILE_SIZE)
    return files


EXPLORE = 12  # files read up front in turn 0


def plan(turn: int) -> list[dict[str, Any]]:
    """Tool calls the scripted model makes in a user turn, before any recovery.

    Turn 0 explores the codebase; later turns work on one new module each.
    """
    if turn == 0:
        reads = [f"/repo/src/module_{i:02d}.py" for i in range(EXPLORE)]
    else:
        reads = [f"/repo/src/module_{EXPLORE - 1 + turn:02d}.py"]
    calls = [{"name": "Read", "input": {"file_path": p}} for p in reads]
    calls.append({"name": "Bash", "input": {"command": f"pytest tests/test_{turn:02d}.py"}})
    return calls


_TURN = re.compile(r"TURN (\d+)")


def scripted_model(doc: dict[str, Any]) -> tuple[list[dict[str, Any]], str]:
    """Deterministic stand-in for the model.

    Turn 10 asks the proxy to restore module_03 with memory_fault when it
    only sees a retrieval handle; the final turn must quote the secrets of
    module_00 and module_03, re-reading module_00 if it was paged out.
    """
    msgs = doc["messages"]
    turn_start = max(i for i, m in enumerate(msgs) if m["role"] == "user" and any(
        b.get("type") == "text" and _TURN.search(b.get("text", "")) for b in _blocks(m)))
    turn = int(_TURN.search(next(b["text"] for b in _blocks(msgs[turn_start]) if b.get("type") == "text" and _TURN.search(b["text"]))).group(1))
    done = sum(1 for m in msgs[turn_start + 1:] if m["role"] == "assistant" for b in _blocks(m) if b.get("type") == "tool_use")
    visible = json.dumps(doc)
    calls = list(plan(turn)) if turn < TURNS - 2 else []
    if turn == TURNS - 2 and secret(3) not in visible:
        tools = {t["name"] for t in doc.get("tools", [])}
        if "memory_fault" in tools and done == 0:
            return [{"type": "tool_use", "id": f"toolu_mf_{turn}", "name": "memory_fault",
                     "input": {"paths": ["/repo/src/module_03.py"]}}], "tool_use"
    if turn == TURNS - 1 and secret(0) not in visible and done == 0:
        calls = [{"name": "Read", "input": {"file_path": "/repo/src/module_00.py"}}]
    if done < len(calls):
        c = calls[done]
        return [{"type": "tool_use", "id": f"toolu_{turn:02d}_{done:02d}", "name": c["name"], "input": c["input"]}], "tool_use"
    if turn == TURNS - 1:
        found = [s for s in (secret(0), secret(3)) if s in visible]
        return [{"type": "text", "text": "Task complete. " + " ".join(found)}], "end_turn"
    return [{"type": "text", "text": f"Finished turn {turn}."}], "end_turn"


def _blocks(m: dict[str, Any]) -> list[dict[str, Any]]:
    c = m.get("content")
    return [{"type": "text", "text": c}] if isinstance(c, str) else list(c or [])


@dataclass
class SessionRun:
    sent: list[bytes]
    forwarded: list[bytes]
    final_text: str
    history: list[dict[str, Any]]


async def drive_session(service: proxy.ProxyService, upstream: MockUpstream, stream: bool = True) -> SessionRun:
    """Play the client side: send, run tools locally, resend the full history."""
    files = repo_files()
    tools = tool_fixture()
    history: list[dict[str, Any]] = []
    sent: list[bytes] = []
    final = ""
    async with client_for(service) as client:
        for turn in range(TURNS):
            text = f"TURN {turn}: continue the refactor."
            if turn == 0:
                text = skills_text() + "\n" + text
            history.append({"role": "user", "content": [{"type": "text", "text": text}]})
            for _ in range(10):
                body = json.dumps({
                    "model": "mock-model", "max_tokens": 1024, "system": SYSTEM_PROMPT,
                    "tools": tools, "messages": history, "stream": stream,
                }).encode()
                sent.append(body)
                resp = await client.post("/v1/messages", content=body, headers={"x-session-id": "scripted"})
                assert resp.status_code == 200, resp.text
                if stream:
                    content, stop = reassemble_sse(resp.content)
                else:
                    doc = resp.json()
                    content, stop = doc["content"], doc["stop_reason"]
                history.append({"role": "assistant", "content": content})
                if stop != "tool_use":
                    final = " ".join(b.get("text", "") for b in content if b.get("type") == "text")
                    break
                results = []
                for b in content:
                    if b["type"] != "tool_use":
                        continue
                    if b["name"] == "Read":
                        out = files[b["input"]["file_path"]]
                    else:
                        out = filler(b["input"]["command"], 3000)
                    results.append({"type": "tool_result", "tool_use_id": b["id"], "content": out})
                history.append({"role": "user", "content": results})
    return SessionRun(sent, list(upstream.received), final, history)
