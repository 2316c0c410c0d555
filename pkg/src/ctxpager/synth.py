"""Deterministic synthetic sessions with known eviction and re-request counts.

Each user turn issues its tool calls one at a time (assistant tool_use,
then a tool-result-only user message) and ends with a short assistant
reply, the shape coding agents produce.
"""
from __future__ import annotations

import argparse
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .analytics import Transcript

logger = logging.getLogger(__name__)


@dataclass
class Call:
    tool: str
    args: dict[str, Any]
    output: str
    is_error: bool = False


@dataclass
class TurnSpec:
    user_text: str
    calls: list[Call] = field(default_factory=list)
    reply: str = "ok"


def filler(label: str, size: int, seed: int = 0) -> str:
    """Deterministic line-structured text of exactly ``size`` bytes."""
    rng = random.Random(f"{label}:{seed}")
    words = ("alpha", "beta", "gamma", "delta", "return", "value", "index", "buffer", "config", "handle")
    lines = []
    total = 0
    n = 0
    while total < size:
        n += 1
        line = f"{n:4d}  " + " ".join(rng.choice(words) for _ in range(8)) + "\n"
        lines.append(line)
        total += len(line)
    text = "".join(lines)
    head = f"# {label}\n"
    return (head + text)[:size]


def build_messages(turns: list[TurnSpec], prefix: str = "toolu") -> list[dict[str, Any]]:
    msgs: list[dict[str, Any]] = []
    for t, turn in enumerate(turns):
        msgs.append({"role": "user", "content": [{"type": "text", "text": turn.user_text}]})
        for j, call in enumerate(turn.calls):
            tid = f"{prefix}_{t:03d}_{j:02d}"
            msgs.append({
                "role": "assistant",
                "content": [{"type": "tool_use", "id": tid, "name": call.tool, "input": call.args}],
            })
            result: dict[str, Any] = {"type": "tool_result", "tool_use_id": tid, "content": call.output}
            if call.is_error:
                result["is_error"] = True
            msgs.append({"role": "user", "content": [result]})
        msgs.append({"role": "assistant", "content": [{"type": "text", "text": turn.reply}]})
    return msgs


def read_call(path: str, size: int, version: int = 0) -> Call:
    return Call("Read", {"file_path": path}, filler(path, size, version))


def bash_call(command: str, size: int) -> Call:
    return Call("Bash", {"command": command}, filler(command, size))


def transcript(turns: list[TurnSpec], name: str) -> Transcript:
    return Transcript.from_messages(build_messages(turns), path=name)


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def replay_suite(
    seed: int = 7,
    sessions: int = 40,
    turns: int = 30,
    rerequests: int = 3,
    tools: tuple[str, ...] = ("Read", "Bash"),
    tau: int = 4,
) -> list[Transcript]:
    """One tool call per turn, every result above the size gate.

    With the default FIFO gate each session evicts the results of turns
    ``0 .. turns - tau - 2``; with the defaults that is 25 per session and
    1,000 overall.  ``rerequests`` sessions re-read, with unchanged content,
    a file evicted long before.
    """
    rng = random.Random(seed)
    out = []
    for s in range(sessions):
        specs = []
        for t in range(turns):
            tool = tools[t % len(tools)]
            size = rng.randint(600, 6000)
            if tool == "Read":
                call = read_call(f"/src/s{s:03d}/mod_{t:03d}.py", size)
            else:
                call = bash_call(f"pytest -k case_{s}_{t}", size)
            specs.append(TurnSpec(f"step {t} of session {s}", [call], reply=f"done with step {t}"))
        first_read = next((i for i in range(turns) if specs[i].calls[0].tool == "Read"), None)
        if s < rerequests and first_read is not None:
            again = specs[first_read].calls[0]
            late = min(turns - 1, first_read + tau + 14)
            specs[late].calls.append(Call(again.tool, dict(again.args), again.output))
        out.append(transcript(specs, f"suite-{seed}-{s:03d}"))
    return out


def session_a(tau: int = 4) -> Transcript:
    """Fifteen evicted results (11 Bash, 4 Read) and one identical re-read."""
    reads = {1, 4, 8, 12}
    specs = []
    for t in range(15 + tau + 1):
        calls = []
        if t < 15:
            if t in reads:
                calls.append(read_call(f"/repo/pkg/file_{t}.py", 1200 + 97 * t))
            else:
                calls.append(bash_call(f"make target{t}", 900 + 53 * t))
        specs.append(TurnSpec(f"turn {t}", calls))
    specs[17].calls.append(read_call("/repo/pkg/file_4.py", 1200 + 97 * 4))
    return transcript(specs, "session-a")


def growing_session(turns: int = 88, seed: int = 11) -> Transcript:
    """A long session whose history grows every turn; results are read once."""
    rng = random.Random(seed)
    specs = []
    for t in range(turns):
        calls = [read_call(f"/app/src/unit_{t:03d}.py", rng.randint(3000, 9000))]
        if t % 3 == 0:
            calls.append(bash_call(f"npm test -- unit_{t}", rng.randint(800, 3000)))
        specs.append(TurnSpec(f"continue with unit {t}", calls, reply=f"unit {t} updated"))
    return transcript(specs, "growing")


def write_transcripts(transcripts: list[Transcript], outdir: Path | str) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in transcripts:
        path = outdir / f"{t.path}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for rec in t.records:
                fh.write(json.dumps({"type": rec.role, "message": {"role": rec.role, "content": rec.content}}) + "\n")
        paths.append(path)
    return paths


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Write synthetic session JSONL fixtures.")
    parser.add_argument("outdir")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--sessions", type=int, default=40)
    args = parser.parse_args(argv)
    paths = write_transcripts(replay_suite(args.seed, args.sessions), args.outdir)
    logger.info("wrote %d files", len(paths))
    print(f"wrote {len(paths)} transcripts to {args.outdir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
