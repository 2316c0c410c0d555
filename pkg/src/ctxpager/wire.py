"""Messages-API request model with span-preserving JSON round trips.

Requests are parsed into a light typed view (system segments, tool
definitions, messages, content blocks) while the original raw text of
every JSON value is remembered.  On serialization, any value that is
still equal to what was received is emitted from its original bytes, so
fields the proxy never touched come back byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from json.decoder import scanstring
from typing import Any, Iterator

__all__ = [
    "ContentBlock",
    "Message",
    "ParseError",
    "Request",
    "ToolDef",
    "block_body",
    "canonical_json",
    "content_hash",
    "index_turns",
    "parse_request",
    "serialize_request",
]


class ParseError(ValueError):
    """Raised when a request body is not a well-formed JSON object."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def canonical_json(value: Any) -> str:
    return json.dumps(value, ensure_ascii=False, separators=(",", ":"), sort_keys=True)


def content_hash(body: str) -> str:
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Span-recording JSON scanner
# ---------------------------------------------------------------------------

_WS = re.compile(r"[ \t\n\r]*")
_DECODER = json.JSONDecoder()


class _Node:
    __slots__ = ("raw", "value", "children")

    def __init__(self, raw: str, value: Any, children: Any = None) -> None:
        self.raw = raw
        self.value = value
        self.children = children


def _scan(s: str, idx: int) -> tuple[_Node, int]:
    idx = _WS.match(s, idx).end()
    if idx >= len(s):
        raise ParseError("unexpected end of document", idx)
    c = s[idx]
    if c == "{":
        obj: dict[str, Any] = {}
        kids: dict[str, _Node] = {}
        i = _WS.match(s, idx + 1).end()
        if i < len(s) and s[i] == "}":
            return _Node(s[idx : i + 1], obj, kids), i + 1
        while True:
            if i >= len(s) or s[i] != '"':
                raise ParseError("expected object key", i)
            try:
                key, i = scanstring(s, i + 1)
            except ValueError as exc:
                raise ParseError("bad string", i) from exc
            i = _WS.match(s, i).end()
            if i >= len(s) or s[i] != ":":
                raise ParseError("expected ':'", i)
            child, i = _scan(s, i + 1)
            obj[key] = child.value
            kids[key] = child
            i = _WS.match(s, i).end()
            if i < len(s) and s[i] == ",":
                i = _WS.match(s, i + 1).end()
                continue
            if i < len(s) and s[i] == "}":
                return _Node(s[idx : i + 1], obj, kids), i + 1
            raise ParseError("expected ',' or '}'", i)
    if c == "[":
        arr: list[Any] = []
        items: list[_Node] = []
        i = _WS.match(s, idx + 1).end()
        if i < len(s) and s[i] == "]":
            return _Node(s[idx : i + 1], arr, items), i + 1
        while True:
            child, i = _scan(s, i)
            arr.append(child.value)
            items.append(child)
            i = _WS.match(s, i).end()
            if i < len(s) and s[i] == ",":
                i += 1
                continue
            if i < len(s) and s[i] == "]":
                return _Node(s[idx : i + 1], arr, items), i + 1
            raise ParseError("expected ',' or ']'", i)
    try:
        value, end = _DECODER.raw_decode(s, idx)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos) from exc
    return _Node(s[idx:end], value), end


def _same(a: Any, b: Any) -> bool:
    if a is b:
        return True
    if type(a) is not type(b):
        return False
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    if isinstance(a, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


def _emit(value: Any, node: _Node | None) -> str:
    if node is not None and _same(value, node.value):
        return node.raw
    if isinstance(value, dict):
        kids = node.children if node is not None and isinstance(node.children, dict) else {}
        parts = [
            json.dumps(k, ensure_ascii=False) + ":" + _emit(v, kids.get(k)) for k, v in value.items()
        ]
        return "{" + ",".join(parts) + "}"
    if isinstance(value, list):
        items = node.children if node is not None and isinstance(node.children, list) else []
        by_id = {id(n.value): n for n in items}
        parts = []
        for i, v in enumerate(value):
            match = by_id.get(id(v))
            if match is None and i < len(items):
                match = items[i]
            parts.append(_emit(v, match))
        return "[" + ",".join(parts) + "]"
    return json.dumps(value, ensure_ascii=False)


# ---------------------------------------------------------------------------
# Typed view
# ---------------------------------------------------------------------------


def _tool_result_text(content: Any) -> str:
    if content is None:
        return ""
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        parts = []
        for item in content:
            if isinstance(item, dict) and item.get("type") == "text":
                parts.append(str(item.get("text", "")))
            else:
                parts.append(canonical_json(item))
        return "\n".join(parts)
    return canonical_json(content)


def block_body(data: dict[str, Any]) -> str:
    """Text used for hashing and sizing a content block."""
    kind = data.get("type")
    if kind == "text":
        return str(data.get("text", ""))
    if kind == "tool_result":
        return _tool_result_text(data.get("content"))
    if kind == "tool_use":
        return canonical_json({"name": data.get("name"), "input": data.get("input", {})})
    return canonical_json(data)


@dataclass
class ContentBlock:
    data: dict[str, Any]
    tool_name: str | None = None  # for tool_result: name of the answered tool_use

    @property
    def kind(self) -> str:
        return str(self.data.get("type", ""))

    @property
    def tool_use_id(self) -> str | None:
        if self.kind == "tool_use":
            return self.data.get("id")
        if self.kind == "tool_result":
            return self.data.get("tool_use_id")
        return None

    @property
    def args(self) -> dict[str, Any] | None:
        if self.kind == "tool_use":
            args = self.data.get("input")
            return args if isinstance(args, dict) else {}
        return None

    @property
    def is_error(self) -> bool:
        return self.kind == "tool_result" and bool(self.data.get("is_error", False))

    @property
    def body(self) -> str:
        return block_body(self.data)

    @property
    def content_bytes(self) -> int:
        return len(self.body.encode("utf-8"))

    def replace_body(self, text: str) -> None:
        """Swap the payload for ``text``, keeping sibling keys such as ids."""
        new = dict(self.data)
        if self.kind == "tool_result":
            new["content"] = text
        elif self.kind == "text":
            new["text"] = text
        else:
            raise ValueError(f"cannot replace body of a {self.kind!r} block")
        self.data = new

    @classmethod
    def text(cls, text: str) -> ContentBlock:
        return cls({"type": "text", "text": text})


@dataclass
class Message:
    role: str
    blocks: list[ContentBlock]
    user_turn_index: int | None = None
    turn: int = 0  # index of the enclosing or most recent preceding user turn
    extra: dict[str, Any] = field(default_factory=dict)
    string_content: str | None = None  # original value when content arrived as a bare string

    def to_json(self) -> dict[str, Any]:
        out = dict(self.extra)
        out["role"] = self.role
        if (
            self.string_content is not None
            and len(self.blocks) == 1
            and self.blocks[0].data == {"type": "text", "text": self.string_content}
        ):
            out["content"] = self.string_content
        else:
            out["content"] = [b.data for b in self.blocks]
        return out

    def is_user_turn(self) -> bool:
        return self.role == "user" and any(b.kind != "tool_result" for b in self.blocks)


@dataclass
class ToolDef:
    data: dict[str, Any]

    @property
    def name(self) -> str:
        return str(self.data.get("name", ""))

    @property
    def description(self) -> str:
        return str(self.data.get("description", ""))

    @property
    def input_schema(self) -> Any:
        return self.data.get("input_schema")

    @property
    def byte_size(self) -> int:
        return len(canonical_json(self.data).encode("utf-8"))


_KNOWN = ("system", "tools", "messages")


@dataclass
class Request:
    system_prompt: list[dict[str, Any]]
    tools: list[ToolDef]
    messages: list[Message]
    passthrough_fields: dict[str, Any]
    raw: bytes | None = None
    system_is_string: bool = False
    _root: _Node | None = field(default=None, repr=False)
    _present: tuple[str, ...] = field(default=(), repr=False)

    @property
    def model_name(self) -> str:
        return str(self.passthrough_fields.get("model", ""))

    @property
    def stream(self) -> bool:
        return bool(self.passthrough_fields.get("stream", False))

    def iter_blocks(self) -> Iterator[tuple[int, int, Message, ContentBlock]]:
        for mi, msg in enumerate(self.messages):
            for bi, blk in enumerate(msg.blocks):
                yield mi, bi, msg, blk

    @property
    def max_turn(self) -> int:
        turns = [m.user_turn_index for m in self.messages if m.user_turn_index is not None]
        return max(turns) if turns else 0

    def age(self, message_index: int) -> int:
        return self.max_turn - self.messages[message_index].turn

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        order = list(self._present) or ["model", "system", "tools", "messages"]
        for key in list(self.passthrough_fields) + [k for k in _KNOWN if k not in self.passthrough_fields]:
            if key not in order:
                order.append(key)
        for key in order:
            if key == "system":
                if "system" in self._present or self.system_prompt:
                    if self.system_is_string and len(self.system_prompt) == 1:
                        out["system"] = self.system_prompt[0].get("text", "")
                    else:
                        out["system"] = list(self.system_prompt)
            elif key == "tools":
                if "tools" in self._present or self.tools:
                    out["tools"] = [t.data for t in self.tools]
            elif key == "messages":
                out["messages"] = [m.to_json() for m in self.messages]
            elif key in self.passthrough_fields:
                out[key] = self.passthrough_fields[key]
        return out

    @classmethod
    def from_json(cls, body: dict[str, Any]) -> Request:
        return _build(body, raw=None, root=None)


def _build(body: dict[str, Any], raw: bytes | None, root: _Node | None) -> Request:
    system = body.get("system")
    system_is_string = isinstance(system, str)
    if system is None:
        segments: list[dict[str, Any]] = []
    elif system_is_string:
        segments = [{"type": "text", "text": system}]
    else:
        segments = list(system)
    tools = [ToolDef(t) for t in body.get("tools") or []]
    messages = []
    tool_names: dict[str, str] = {}
    for m in body.get("messages") or []:
        content = m.get("content")
        string_content = None
        if isinstance(content, str):
            string_content = content
            blocks = [ContentBlock({"type": "text", "text": content})]
        else:
            blocks = [ContentBlock(b) for b in content or []]
        for b in blocks:
            if b.kind == "tool_use" and b.tool_use_id:
                tool_names[b.tool_use_id] = str(b.data.get("name", ""))
            elif b.kind == "tool_result":
                b.tool_name = tool_names.get(b.tool_use_id or "")
        extra = {k: v for k, v in m.items() if k not in ("role", "content")}
        messages.append(Message(str(m.get("role", "")), blocks, extra=extra, string_content=string_content))
    passthrough = {k: v for k, v in body.items() if k not in _KNOWN}
    return Request(
        system_prompt=segments,
        tools=tools,
        messages=messages,
        passthrough_fields=passthrough,
        raw=raw,
        system_is_string=system_is_string,
        _root=root,
        _present=tuple(body.keys()),
    )


def parse_request(raw: bytes) -> Request:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("invalid utf-8", exc.start) from exc
    root, end = _scan(text, 0)
    if _WS.match(text, end).end() != len(text):
        raise ParseError("trailing data", end)
    if not isinstance(root.value, dict):
        raise ParseError("request is not a JSON object", 0)
    return _build(root.value, raw=raw, root=root)


def serialize_request(req: Request) -> bytes:
    body = req.to_json()
    if req._root is not None and req.raw is not None and _same(body, req._root.value):
        return req.raw
    return _emit(body, req._root).encode("utf-8")


def index_turns(req: Request) -> Request:
    """Number qualifying user turns from 0 and stamp every message with its turn.

    A user-role message counts only if it holds something other than
    tool results; tool-result-only messages belong to the preceding turn.
    """
    counter = -1
    for msg in req.messages:
        if msg.is_user_turn():
            counter += 1
            msg.user_turn_index = counter
        else:
            msg.user_turn_index = None
        msg.turn = max(counter, 0)
    return req
