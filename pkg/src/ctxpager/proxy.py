"""HTTP interposition service.

Receives Messages-API requests, runs the paging pipeline, forwards upstream
and relays the response back, rewriting the stream only when the model calls
one of the proxy's own tools.  Any internal failure forwards the original
bytes unchanged.
"""
from __future__ import annotations

import asyncio
import contextlib
import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, AsyncIterator, Mapping

import httpx
import uvicorn
from starlette.applications import Starlette
from starlette.requests import Request as HTTPRequest
from starlette.responses import JSONResponse, Response, StreamingResponse
from starlette.routing import Route

from . import cooperative
from .engine import DecisionLog, DecisionLogRecord, Mode, Pager
from .pagestore import SessionState, checkpoint_load, checkpoint_save, make_block_id
from .policy import PolicyConfig
from .sse import SSEParser, StreamEvent, reassemble, usage_tokens
from .wire import ParseError, Request, block_body, canonical_json, content_hash, parse_request, serialize_request

logger = logging.getLogger(__name__)

SESSION_HEADER = "x-session-id"
HEALTH_PATH = "/_ctxpager/health"

_HOP_BY_HOP = {
    "host", "content-length", "connection", "keep-alive", "transfer-encoding",
    "te", "trailer", "upgrade", "proxy-authorization", "proxy-connection", "accept-encoding",
}
_RESPONSE_DROP = {"content-length", "transfer-encoding", "connection", "content-encoding", "keep-alive"}


@dataclass
class ProxyConfig:
    listen_address: str = "127.0.0.1:8080"
    upstream_base_url: str = "https://api.anthropic.com"
    mode: str = Mode.OBSERVE.value
    checkpoint_dir: str | None = None
    log_path: str | None = None
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    phantom_enabled: bool = True
    session_header: str = SESSION_HEADER
    upstream_timeout: float = 600.0

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode).value
        self.listen_host, self.listen_port  # validate early

    @property
    def listen_host(self) -> str:
        host, _, _ = self.listen_address.rpartition(":")
        return host or "127.0.0.1"

    @property
    def listen_port(self) -> int:
        _, _, port = self.listen_address.rpartition(":")
        try:
            return int(port)
        except ValueError:
            raise ValueError(f"listen_address needs host:port, got {self.listen_address!r}") from None

    @classmethod
    def field_names(cls) -> list[str]:
        return [
            "listen_address", "upstream_base_url", "mode", "checkpoint_dir",
            "log_path", "phantom_enabled", "session_header", "upstream_timeout",
        ]


def derive_session_id(req: Request, headers: Mapping[str, str] | None = None, header: str = SESSION_HEADER) -> str:
    """Client session header when given, else a hash of the first user message and system prompt."""
    if headers is not None:
        value = headers.get(header)
        if value:
            return value
    first = next((m for m in req.messages if m.role == "user"), None)
    first_content = first.to_json().get("content") if first is not None else None
    system_digest = content_hash(canonical_json(req.system_prompt))
    digest = hashlib.sha256(canonical_json([first_content, system_digest]).encode("utf-8")).hexdigest()
    return "s-" + digest[:16]


def _safe_name(session_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", session_id)[:120] or "session"


@dataclass
class _Exchange:
    """Per-request context carried from the pipeline to the response relay."""

    session_id: str
    state: SessionState | None = None
    lock: asyncio.Lock | None = None
    turn: int = 0
    intercept: bool = False
    managed: bool = False


class ProxyService:
    def __init__(
        self,
        cfg: ProxyConfig,
        transport: httpx.AsyncBaseTransport | None = None,
        keep_records: bool = False,
    ) -> None:
        self.cfg = cfg
        self.mode = Mode(cfg.mode)
        self.log = DecisionLog(cfg.log_path, keep=keep_records)
        self.client = httpx.AsyncClient(
            base_url=cfg.upstream_base_url, transport=transport, timeout=cfg.upstream_timeout
        )
        self.sessions: dict[str, SessionState] = {}
        self._locks: dict[str, asyncio.Lock] = {}
        self.health = {"requests": 0, "fail_open": 0, "checkpoint_failures": 0, "upstream_errors": 0}
        self.app = Starlette(
            routes=[
                Route(HEALTH_PATH, self._health, methods=["GET"]),
                Route("/{path:path}", self.handle, methods=["GET", "POST", "PUT", "PATCH", "DELETE", "HEAD", "OPTIONS"]),
            ],
            lifespan=self._lifespan,
        )

    @contextlib.asynccontextmanager
    async def _lifespan(self, app: Starlette) -> AsyncIterator[None]:
        yield
        await self.aclose()

    async def aclose(self) -> None:
        await self.client.aclose()
        self.log.close()

    # -- sessions -----------------------------------------------------------

    def checkpoint_path(self, session_id: str) -> Path | None:
        if not self.cfg.checkpoint_dir:
            return None
        return Path(self.cfg.checkpoint_dir) / f"{_safe_name(session_id)}.json"

    def session(self, session_id: str) -> SessionState:
        state = self.sessions.get(session_id)
        if state is None:
            path = self.checkpoint_path(session_id)
            state = checkpoint_load(path, session_id) if path else SessionState(session_id=session_id)
            state.checkpoint_path = path
            self.sessions[session_id] = state
        return state

    def _lock_for(self, session_id: str) -> asyncio.Lock:
        return self._locks.setdefault(session_id, asyncio.Lock())

    # -- logging ------------------------------------------------------------

    def _forward_record(self, session_id: str, turn: int, zone: str, delta: int, detail: str) -> None:
        self.log.log_decision(
            DecisionLogRecord(time.time(), session_id, turn, zone, "forward", "request", delta, detail)
        )

    # -- handlers -----------------------------------------------------------

    async def _health(self, request: HTTPRequest) -> Response:
        return JSONResponse({**self.health, "log_failures": self.log.failures, "sessions": len(self.sessions)})

    async def handle(self, request: HTTPRequest) -> Response:
        raw = await request.body()
        self.health["requests"] += 1
        is_messages = request.method == "POST" and request.url.path.rstrip("/").endswith("/messages")
        if not is_messages or self.mode == Mode.OBSERVE:
            self._forward_record("", 0, "Normal", 0, f"passthrough {request.method} {request.url.path}")
            return await self._relay(request, raw, None)
        try:
            req = parse_request(raw)
        except ParseError as exc:
            self.health["fail_open"] += 1
            self._forward_record("", 0, "Normal", 0, f"fail-open: parse error at byte {exc.offset}")
            return await self._relay(request, raw, None)

        sid = derive_session_id(req, request.headers, self.cfg.session_header)
        lock = self._lock_for(sid)
        await lock.acquire()
        handed_off = False
        try:
            ex = _Exchange(sid, lock=lock)
            body = raw
            try:
                state = self.session(sid)
                pager = Pager(state, self.cfg.policy, self.mode, phantom_enabled=self.cfg.phantom_enabled)
                result = pager.run(req)
                body = serialize_request(result.request)
                self.log.extend(result.records)
                ex.state, ex.turn, ex.intercept, ex.managed = state, result.request.max_turn, pager.phantom_enabled, True
                detail = (
                    f"received={len(raw)} forwarded={len(body)} overhead={result.overhead_bytes}"
                    f" evictions={len(result.evictions)} faults={result.faults} {result.static_detail}"
                ).rstrip()
                self._forward_record(sid, ex.turn, result.zone.label, len(body) - len(raw), detail)
            except Exception as exc:  # fail-open on anything the pipeline throws
                logger.exception("pipeline failed for session %s; forwarding original request", sid)
                self.health["fail_open"] += 1
                body = raw
                ex.intercept = ex.managed = False
                self._forward_record(sid, 0, "Normal", 0, f"fail-open: {type(exc).__name__}: {exc}")
            response = await self._relay(request, body, ex)
            handed_off = True
            return response
        finally:
            if not handed_off:
                lock.release()

    # -- upstream -----------------------------------------------------------

    def _upstream_headers(self, request: HTTPRequest) -> dict[str, str]:
        headers = {k: v for k, v in request.headers.items() if k.lower() not in _HOP_BY_HOP}
        headers["accept-encoding"] = "identity"
        return headers

    async def _relay(self, request: HTTPRequest, body: bytes, ex: _Exchange | None) -> Response:
        """Forward ``body`` upstream; ownership of ``ex.lock`` passes to the response."""
        url = request.url.path + (f"?{request.url.query}" if request.url.query else "")
        try:
            up = self.client.build_request(request.method, url, headers=self._upstream_headers(request), content=body)
            resp = await self.client.send(up, stream=True)
        except httpx.HTTPError as exc:
            self.health["upstream_errors"] += 1
            logger.warning("upstream unreachable: %s", exc)
            if ex is not None and ex.lock is not None:
                ex.lock.release()
            return JSONResponse(
                {"type": "error", "error": {"type": "api_error", "message": f"upstream unreachable: {exc}"}},
                status_code=502,
            )
        headers = {k: v for k, v in resp.headers.items() if k.lower() not in _RESPONSE_DROP}
        ctype = resp.headers.get("content-type", "")
        if "text/event-stream" in ctype:
            return StreamingResponse(
                self._stream(resp, ex), status_code=resp.status_code, headers=headers, media_type=None
            )
        try:
            content = await resp.aread()
        finally:
            await resp.aclose()
        calls: list[cooperative.PhantomCall] = []
        usage = None
        client_content: list[dict[str, Any]] = []
        if ex is not None and ex.managed and resp.status_code < 400 and "json" in ctype:
            content, calls, usage, client_content = self._intercept_json(content, ex)
        await self._finish(ex, usage, calls, client_content)
        return Response(content, status_code=resp.status_code, headers=headers)

    def _intercept_json(self, content: bytes, ex: _Exchange):
        try:
            doc = json.loads(content)
        except ValueError:
            return content, [], None, []
        if not isinstance(doc, dict):
            return content, [], None, []
        usage = usage_tokens(doc.get("usage") or {})
        calls: list[cooperative.PhantomCall] = []
        if ex.intercept:
            new_doc, calls = cooperative.intercept_message(doc)
            if calls:
                doc = new_doc
                content = json.dumps(doc, ensure_ascii=False).encode("utf-8")
        return content, calls, usage, list(doc.get("content") or [])

    async def _stream(self, resp: httpx.Response, ex: _Exchange | None) -> AsyncIterator[bytes]:
        parser = SSEParser()
        interceptor = cooperative.StreamInterceptor() if ex is not None and ex.intercept and resp.status_code < 400 else None
        watch = ex is not None and ex.managed and resp.status_code < 400
        emitted: list[StreamEvent] = []
        usage: dict[str, Any] = {}
        try:
            async for chunk in resp.aiter_bytes():
                if not watch:
                    yield chunk
                    continue
                events = parser.feed(chunk)
                if interceptor is None:
                    yield chunk
                    emitted.extend(events)
                    continue
                out: list[StreamEvent] = []
                for ev in events:
                    out.extend(interceptor.feed(ev))
                emitted.extend(out)
                if out:
                    yield b"".join(ev.encode() for ev in out)
            if watch:
                tail = parser.flush()
                if interceptor is not None:
                    out = [e for ev in tail for e in interceptor.feed(ev)]
                    if out:
                        yield b"".join(ev.encode() for ev in out)
                    emitted.extend(out)
                else:
                    emitted.extend(tail)
        finally:
            await resp.aclose()
            calls = list(interceptor.calls) if interceptor is not None else []
            content: list[dict[str, Any]] = []
            usage_total = None
            if watch:
                try:
                    assembled = reassemble(e for e in emitted if e.data)
                    usage, content = assembled.usage, assembled.content
                    usage_total = usage_tokens(usage)
                except (ValueError, KeyError, TypeError) as exc:
                    logger.info("could not reassemble response stream: %s", exc)
            await self._finish(ex, usage_total, calls, content)

    async def _finish(
        self,
        ex: _Exchange | None,
        usage: int | None,
        calls: list[cooperative.PhantomCall],
        client_content: list[dict[str, Any]],
    ) -> None:
        """Post-response bookkeeping: usage, pending phantom calls, checkpoint, unlock."""
        if ex is None:
            return
        try:
            state = ex.state
            if state is None or not ex.managed:
                return
            if usage is not None:
                state.last_usage_tokens = usage
            if calls:
                if client_content:
                    anchor = make_block_id(content_hash(block_body(client_content[-1])), ex.turn)
                    state.pending_phantom_calls.append((anchor, calls))
                else:
                    logger.warning("phantom calls without client-visible content; dropping %d call(s)", len(calls))
            path = state.checkpoint_path
            if path is not None:
                try:
                    await asyncio.to_thread(checkpoint_save, state, path)
                except OSError as exc:
                    self.health["checkpoint_failures"] += 1
                    logger.warning("checkpoint failed for %s: %s", ex.session_id, exc)
        finally:
            if ex.lock is not None and ex.lock.locked():
                ex.lock.release()


def build_app(cfg: ProxyConfig, transport: httpx.AsyncBaseTransport | None = None, keep_records: bool = False) -> Starlette:
    service = ProxyService(cfg, transport, keep_records)
    service.app.state.service = service
    return service.app


def serve(cfg: ProxyConfig) -> None:
    app = build_app(cfg)
    logger.info("listening on %s, upstream %s, mode %s", cfg.listen_address, cfg.upstream_base_url, cfg.mode)
    uvicorn.run(app, host=cfg.listen_host, port=cfg.listen_port, log_level="warning")
