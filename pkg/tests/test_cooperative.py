from __future__ import annotations

import json

from hypothesis import given, settings, strategies as st

from ctxpager.cooperative import (
    ADVISORY_OPEN,
    PLACEHOLDER_TEXT,
    Directive,
    PhantomCall,
    append_advisory,
    apply_directives,
    build_advisory,
    execute_phantom,
    inject_phantom_tools,
    intercept_message,
    intercept_stream,
    parse_cleanup_tags,
    render_advisory,
)
from ctxpager.pagestore import SessionState, record_eviction, register_blocks
from ctxpager.policy import PolicyConfig, PressureZone, select_evictions
from ctxpager.sse import encode_stream, parse_stream, reassemble
from ctxpager.synth import filler
from ctxpager.wire import Request, index_turns
from support import message_events, sse, tool_fixture

# -- phantom tool definitions ----------------------------------------------


def test_inject_adds_two_tools_once():
    req = Request.from_json({"tools": tool_fixture(), "messages": []})
    inject_phantom_tools(req)
    assert len(req.tools) == 20
    inject_phantom_tools(req)
    assert len(req.tools) == 20
    assert [t.name for t in req.tools[-2:]] == ["memory_release", "memory_fault"]


def test_inject_disabled_is_noop():
    req = Request.from_json({"tools": tool_fixture(), "messages": []})
    inject_phantom_tools(req, enabled=False)
    assert len(req.tools) == 18


# -- stream interception ---------------------------------------------------


def release_call(paths, tid="toolu_rel"):
    return {"type": "tool_use", "id": tid, "name": "memory_release", "input": {"paths": paths}}


def test_text_plus_release_is_cut_out():
    text = {"type": "text", "text": "Done with that file."}
    raw = sse(message_events([text, release_call(["/a.py"])], "tool_use", 10))
    out, calls = intercept_stream(parse_stream(raw))
    expected = reassemble(parse_stream(sse(message_events([text], "end_turn", 10))))
    got = reassemble(out)
    assert got.content == expected.content
    assert got.stop_reason == "end_turn"
    assert calls == [PhantomCall("memory_release", ["/a.py"], "toolu_rel")]


def test_no_phantom_is_byte_identical():
    raw = sse(message_events([{"type": "tool_use", "id": "t", "name": "Read", "input": {"file_path": "/x"}}], "tool_use", 5))
    out, calls = intercept_stream(parse_stream(raw))
    assert encode_stream(out) == raw and calls == []


def test_malformed_stream_passes_through():
    raw = sse(message_events([release_call(["/a"])], "tool_use", 5)).replace(b'"index":0', b'"index":"zero"', 1)
    raw += b"event: broken\ndata: {not json\n\n"
    events = parse_stream(raw)
    out, calls = intercept_stream(events)
    assert encode_stream(out) == raw and calls == []


def test_only_phantom_leaves_placeholder():
    raw = sse(message_events([release_call(["/a"])], "tool_use", 5))
    out, calls = intercept_stream(parse_stream(raw))
    msg = reassemble(out)
    assert msg.content == [{"type": "text", "text": PLACEHOLDER_TEXT}]
    assert msg.stop_reason == "end_turn"
    assert len(calls) == 1


def test_message_interception():
    body = {"content": [{"type": "text", "text": "hi"}, release_call(["/a"]),
                        {"type": "tool_use", "id": "r", "name": "Read", "input": {}}], "stop_reason": "tool_use"}
    out, calls = intercept_message(body)
    assert [b.get("name") for b in out["content"]] == [None, "Read"]
    assert out["stop_reason"] == "tool_use"
    assert calls[0].paths == ["/a"]


block_strategy = st.one_of(
    st.builds(lambda t: {"type": "text", "text": t}, st.text(min_size=1, max_size=20)),
    st.builds(lambda p: {"type": "tool_use", "id": "x", "name": "Read", "input": {"file_path": p}}, st.text(max_size=10)),
    st.builds(lambda name, ps: {"type": "tool_use", "id": "p", "name": name, "input": {"paths": ps}},
              st.sampled_from(["memory_release", "memory_fault"]), st.lists(st.text(max_size=8), max_size=3)),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(block_strategy, min_size=1, max_size=6))
def test_stream_conservation(blocks):
    raw = sse(message_events(blocks, "tool_use", 7))
    out, calls = intercept_stream(parse_stream(raw))
    client = reassemble(out).content
    phantom = [b for b in blocks if b.get("name") in ("memory_release", "memory_fault")]
    real = [b for b in blocks if b not in phantom]
    if phantom and not real:
        assert client == [{"type": "text", "text": PLACEHOLDER_TEXT}]
    else:
        assert client == real
    assert [(c.tool, c.paths) for c in calls] == [(b["name"], b["input"]["paths"]) for b in phantom]


# -- phantom execution -----------------------------------------------------


def read_session(turns, *, current=None):
    msgs = []
    for t, (path, body) in enumerate(turns):
        msgs += [
            {"role": "user", "content": [{"type": "text", "text": f"turn {t}"}]},
            {"role": "assistant", "content": [{"type": "tool_use", "id": f"t{t}", "name": "Read", "input": {"file_path": path}}]},
            {"role": "user", "content": [{"type": "tool_result", "tool_use_id": f"t{t}", "content": body}]},
            {"role": "assistant", "content": [{"type": "text", "text": "ok"}]},
        ]
    if current:
        msgs.append({"role": "user", "content": [{"type": "text", "text": current}]})
    return index_turns(Request.from_json({"messages": msgs}))


def test_release_bypasses_age_threshold():
    state = SessionState()
    req = read_session([("/a.py", filler("/a.py", 3000)), ("/b.py", filler("/b.py", 3000))])
    register_blocks(state, req)
    out = execute_phantom(PhantomCall("memory_release", ["/b.py"], "x"), state)
    assert len(out.released) == 1 and out.released[0].turn == 1
    picked = select_evictions(state.blocks.values(), state.fault_history, PressureZone.NORMAL, PolicyConfig(), current_turn=2)
    assert [m.block_id for m, _ in picked] == [out.released[0].block_id]


def test_fault_from_cache_and_miss():
    state = SessionState()
    body = filler("/a.py", 3000)
    reg = register_blocks(state, read_session([("/a.py", body)]))
    meta = next(m for _, _, m in reg.located if m.kind == "tool_result")
    record_eviction(state, meta, "paged", body)
    hit = execute_phantom(PhantomCall("memory_fault", ["/a.py"], "x"), state, turn=3)
    assert body in hit.result["content"]
    assert hit.use["id"].startswith("phantom-") and hit.result["tool_use_id"] == hit.use["id"]
    assert state.fault_history[meta.fault_key].fault_count == 1
    miss = execute_phantom(PhantomCall("memory_fault", ["/never.py"], "y"), state)
    assert "content not cached; use Read /never.py" in miss.result["content"]


# -- cleanup tags ----------------------------------------------------------


def test_parse_directives():
    text = (
        "I will tidy up.\n"
        "drop: block:a1b2c3d4-7\n"
        'collapse: turns 3-14 "Chose FIFO; built pager; tests pass"\n'
        'collapse: turns 14-3 "x"\n'
        'summarize: block:deadbeef-2 "the \\"config\\" loader"\n'
        "anchor: block:cafef00d-1\n"
        "drop: nonsense\n"
    )
    assert parse_cleanup_tags(text) == [
        Directive("drop", block_id="a1b2c3d4-7"),
        Directive("collapse", turn_range=(3, 14), text="Chose FIFO; built pager; tests pass"),
        Directive("summarize", block_id="deadbeef-2", text='the "config" loader'),
        Directive("anchor", block_id="cafef00d-1"),
    ]


def text_session(sizes_per_turn, current="now"):
    msgs = []
    for t, (u, a) in enumerate(sizes_per_turn):
        msgs.append({"role": "user", "content": [{"type": "text", "text": filler(f"u{t}", u)}]})
        msgs.append({"role": "assistant", "content": [{"type": "text", "text": filler(f"a{t}", a)}]})
    msgs.append({"role": "user", "content": [{"type": "text", "text": current}]})
    return index_turns(Request.from_json({"messages": msgs}))


def test_collapse_delta_exact():
    sizes = [3413] * 11 + [40_960 - 3413 * 11]
    req = text_session(list(zip(sizes[0::2], sizes[1::2])))
    state = SessionState()
    reg = register_blocks(state, req)
    summary = "S" * 90
    report = apply_directives([Directive("collapse", turn_range=(0, 5), text=summary)], state, req, reg)
    assert len(report.affected) == 12
    assert report.bytes_delta == -40_870
    assert all(state.blocks[b].status == "collapsed" for b in report.affected)
    # the current turn is untouched
    last = [m for _, _, m in reg.located if m.turn == 6]
    assert [m.status for m in last] == ["resident"]


def test_collapse_of_current_turn_is_refused():
    req = text_session([(600, 600)])
    state = SessionState()
    reg = register_blocks(state, req)
    report = apply_directives([Directive("collapse", turn_range=(0, 1), text="x")], state, req, reg)
    assert report.applied == [] and report.skipped


def test_anchor_survives_eviction_and_drop_is_idempotent():
    state = SessionState()
    body = filler("/a.py", 3000)
    req = read_session([("/a.py", body)] + [(f"/p{i}", filler(f"/p{i}", 600)) for i in range(6)])
    reg = register_blocks(state, req)
    meta = next(m for _, _, m in reg.located if m.kind == "tool_result" and m.turn == 0)
    apply_directives([Directive("anchor", block_id=meta.block_id)], state, req, reg)
    picked = select_evictions(state.blocks.values(), state.fault_history, PressureZone.INVOLUNTARY, PolicyConfig(), 6)
    assert meta.block_id not in [m.block_id for m, _ in picked]
    victim = next(m for _, _, m in reg.located if m.kind == "tool_result" and m.turn == 1)
    first = apply_directives([Directive("drop", block_id=victim.block_id)], state, req, reg)
    assert victim.status == "evicted" and len(first.evictions) == 1
    second = apply_directives([Directive("drop", block_id=victim.block_id)], state, req, reg)
    assert second.applied == [] and len(second.skipped) == 1
    unknown = apply_directives([Directive("drop", block_id="ffffffff-9")], state, req, reg)
    assert unknown.skipped[0][1] == "unknown block id"


def test_summarize_sets_status():
    state = SessionState()
    req = read_session([("/a.py", filler("/a.py", 3000))], current="go")
    reg = register_blocks(state, req)
    meta = next(m for _, _, m in reg.located if m.kind == "tool_result")
    report = apply_directives([Directive("summarize", block_id=meta.block_id, text="a config loader")], state, req, reg)
    assert meta.status == "summarized" and meta.summary == "a config loader"
    assert report.bytes_delta == len("a config loader") - 3000


# -- advisory --------------------------------------------------------------


def test_advisory_fill_and_top_five():
    sizes = [1200, 9000, 700, 5000, 8000, 300, 6500]
    state = SessionState()
    req = read_session([(f"/f{i}", filler(f"/f{i}", s)) for i, s in enumerate(sizes)])
    register_blocks(state, req)
    adv = build_advisory(state.blocks.values(), PressureZone.ADVISORY, 75_000, PolicyConfig())
    assert adv.fill_percent == 37.5
    assert [s for _, _, s in adv.largest_blocks] == [9000, 8000, 6500, 5000, 1200]
    assert "37.5% full" in adv.render()
    assert render_advisory(state.blocks.values(), PressureZone.NORMAL, 59_000) is None


def test_single_advisory_per_request():
    req = read_session([("/a", "x")], current="hello")
    append_advisory(req, ADVISORY_OPEN + "\nold\n</memory-pressure>")
    append_advisory(req, ADVISORY_OPEN + "\nnew\n</memory-pressure>")
    texts = [b.data.get("text", "") for m in req.messages for b in m.blocks if b.kind == "text"]
    advisories = [t for t in texts if t.startswith(ADVISORY_OPEN)]
    assert advisories == [ADVISORY_OPEN + "\nnew\n</memory-pressure>"]
    assert json.loads(json.dumps(req.to_json()))["messages"][-1]["content"][-1]["text"].endswith("</memory-pressure>")
