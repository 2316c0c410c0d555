from __future__ import annotations

import json
import random
from itertools import product

import pytest

from ctxpager.analytics import (
    Transcript,
    action_table,
    amplification_factor,
    belady_min_faults,
    cost_curve,
    curve_from_log,
    fifo_faults,
    load_decision_log,
    load_transcript,
    lru_faults,
    managed_sizes,
    reference_string,
    replay,
    replay_transcript,
    report_from_log,
    tool_overhead,
)
from ctxpager.engine import DecisionLog, DecisionLogRecord
from ctxpager.policy import PolicyConfig, estimate_tokens
from ctxpager.synth import (
    TurnSpec,
    bash_call,
    growing_session,
    read_call,
    replay_suite,
    session_a,
    transcript,
    write_transcripts,
)
from oracles import brute_force_replay


def bash_output(size):
    return bash_call(f"cmd{size}", size)


# -- probe -------------------------------------------------------------------


def test_amplification_worked_example():
    t = transcript([TurnSpec("a", [bash_output(100)]), TurnSpec("b"), TurnSpec("c", [bash_output(300)]), TurnSpec("d")], "amp")
    assert amplification_factor(t) == pytest.approx(1.5)


def test_amplification_terminal_result_is_zero():
    t = transcript([TurnSpec("only", [bash_output(500)])], "term")
    assert amplification_factor(t) == 0.0


@pytest.mark.parametrize("k", range(0, 11))
def test_amplification_uniform_survival(k):
    # every result sits exactly k turns before the end
    specs = [TurnSpec(f"t{i}", [bash_output(200 + i)]) for i in range(3)]
    specs = [TurnSpec("x", [c for s in specs for c in s.calls])] + [TurnSpec(f"pad{i}") for i in range(k)]
    assert amplification_factor(transcript(specs, "k")) == pytest.approx(k)


def test_tool_overhead_shares():
    only_tools = Transcript.from_messages([{"role": "user", "content": [{"type": "tool_result", "tool_use_id": "a", "content": "x" * 50}]}])
    assert tool_overhead(only_tools).as_tuple() == (1.0, 0.0, 0.0)
    mixed = Transcript.from_messages([
        {"role": "user", "content": [{"type": "text", "text": "u" * 80}]},
        {"role": "assistant", "content": [{"type": "text", "text": "a" * 130}]},
        {"role": "user", "content": [{"type": "tool_result", "tool_use_id": "a", "content": "r" * 790}]},
    ])
    assert tool_overhead(mixed).as_tuple() == pytest.approx((0.79, 0.13, 0.08))
    assert tool_overhead(Transcript.from_messages([])).as_tuple() == (0.0, 0.0, 0.0)
    assert sum(tool_overhead(session_a()).as_tuple()) == pytest.approx(1.0)


def test_estimate_tokens():
    assert estimate_tokens(4150) == 1000
    assert estimate_tokens(0) == 0
    assert estimate_tokens(4) == 1


# -- replay --------------------------------------------------------------------


def test_replay_suite_matches_oracle():
    suite = replay_suite()
    report = replay(suite)
    oracle_evictions = oracle_faults = 0
    for t in suite:
        o = brute_force_replay(t.messages())
        oracle_evictions += o.evictions
        oracle_faults += o.faults
    assert report.total_evictions == oracle_evictions == 1000
    assert report.faults == oracle_faults == 3
    assert report.fault_rate_total == pytest.approx(0.003)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_per_session_oracle_agreement(seed):
    for t in replay_suite(seed=seed, sessions=6, turns=24, rerequests=4):
        got = replay_transcript(t)
        o = brute_force_replay(t.messages())
        assert (got.total_evictions, got.paged_evictions, got.gc_evictions, got.faults) == (o.evictions, o.paged, o.gc, o.faults)


def test_bash_only_has_no_paged_denominator():
    report = replay(replay_suite(sessions=5, tools=("Bash",)))
    assert report.paged_evictions == 0 and report.faults == 0
    assert report.fault_rate_paged is None
    assert report.to_json()["fault_rate_paged"] is None


def test_session_a_paged_rate():
    report = replay_transcript(session_a())
    assert (report.gc_evictions, report.paged_evictions, report.faults) == (11, 4, 1)
    assert report.fault_rate_paged == 0.25


def test_gc_traffic_does_not_move_paged_rate():
    base = replay([session_a()])
    noisy = replay([session_a(), *replay_suite(sessions=4, tools=("Bash",), rerequests=0)])
    assert noisy.total_evictions > base.total_evictions
    assert noisy.fault_rate_paged == base.fault_rate_paged


def test_replay_is_deterministic():
    a = replay(replay_suite(seed=3, sessions=5)).to_json()
    b = replay(replay_suite(seed=3, sessions=5)).to_json()
    assert a == b


def test_replay_from_files_and_directories(tmp_path):
    paths = write_transcripts(replay_suite(sessions=3), tmp_path / "traces")
    (tmp_path / "traces" / "broken.jsonl").write_bytes(b"\xff\xfe not utf8")
    assert load_transcript(paths[0]).messages() == replay_suite(sessions=3)[0].messages()
    report = replay([tmp_path / "traces"], baseline_capacity=4)
    assert report.files == 3 and report.skipped_files == 1 and report.sessions == 3
    assert report.total_evictions == 75
    meta = report.to_json()["metadata"]
    assert meta == {"files": 3, "skipped_files": 1, "sessions": 3}
    assert set(report.baselines) == {"min_faults", "fifo_faults", "lru_faults"}


def test_decision_log_summary(tmp_path):
    log = DecisionLog(tmp_path / "d.jsonl")
    rows = [
        DecisionLogRecord(1.0, "s1", 5, "Involuntary", "evict", "a-0", -4000, "paged Read:/a"),
        DecisionLogRecord(1.0, "s1", 5, "Involuntary", "evict", "b-0", -900, "gc Bash:{}"),
        DecisionLogRecord(1.0, "s1", 6, "Involuntary", "directive", "c-1", -700, "drop gc"),
        DecisionLogRecord(1.0, "s1", 7, "Involuntary", "fault", "Read:/a", 0, ""),
        DecisionLogRecord(1.0, "s1", 7, "Involuntary", "forward", "", 0, "received=1000 forwarded=600 overhead=0"),
        DecisionLogRecord(1.0, "s2", 1, "Normal", "forward", "", 0, "received=500 forwarded=500 overhead=0"),
    ]
    for r in rows:
        log.log_decision(r)
    log.close()
    records = load_decision_log(tmp_path / "d.jsonl")
    report = report_from_log(records)
    assert (report.total_evictions, report.paged_evictions, report.gc_evictions, report.faults) == (3, 1, 2, 1)
    assert report.sessions == 2 and report.bytes_evicted == 5600
    assert replay([tmp_path / "d.jsonl"]).faults == 1
    curve = curve_from_log(records)
    assert curve.baseline == [1000, 500] and curve.managed == [600, 500]
    assert action_table(records)["evict"] == {"count": 2, "bytes_delta": -4900}


# -- cost curves ---------------------------------------------------------------


def test_cost_curve_examples():
    same = cost_curve([10, 20, 30], [10, 20, 30])
    assert same.reduction == 0.0 and same.mean_per_turn_reduction == 0.0
    halved = cost_curve([10, 20, 30], [5, 10, 15])
    assert halved.reduction == pytest.approx(0.5) and halved.final_turn_reduction == pytest.approx(0.5)
    with pytest.raises(ValueError):
        cost_curve([1, 2], [1])
    csv_text = halved.to_csv().splitlines()
    assert csv_text[0] == "turn,baseline,managed,baseline_cumulative,managed_cumulative"
    assert csv_text[-1] == "2,30,15,60,30"


def test_early_savings_compound_on_a_growing_baseline():
    base = [100 * (i + 1) for i in range(20)]
    managed = [b - 50 * min(i, 5) for i, b in enumerate(base)]
    curve = cost_curve(base, managed)
    assert curve.reduction > curve.final_turn_reduction


def test_cost_curve_dominance():
    rng = random.Random(2)
    for _ in range(200):
        base = [rng.randint(1, 1000) for _ in range(rng.randint(1, 30))]
        managed = [rng.randint(0, b) for b in base]
        c = cost_curve(base, managed)
        assert 0.0 <= c.reduction <= 1.0
        assert all(m <= b for m, b in zip(c.managed_cumulative, c.baseline_cumulative))


def test_managed_sizes_never_exceed_baseline():
    base, managed = managed_sizes(growing_session(20), PolicyConfig())
    assert len(base) == len(managed) and all(m <= b for b, m in zip(base, managed))


# -- classic baselines ---------------------------------------------------------


def brute_min(refs, capacity):
    """Optimal faults by exhaustive search over every eviction choice."""
    best = None

    def go(i, resident, faults):
        nonlocal best
        if best is not None and faults >= best:
            return
        if i == len(refs):
            best = faults
            return
        page = refs[i]
        if page in resident:
            go(i + 1, resident, faults)
        elif len(resident) < capacity:
            go(i + 1, resident | {page}, faults + 1)
        else:
            for victim in resident:
                go(i + 1, (resident - {victim}) | {page}, faults + 1)

    go(0, frozenset(), 0)
    return best


def test_min_is_optimal_and_dominates():
    rng = random.Random(9)
    for _ in range(150):
        refs = [rng.choice("abcde") for _ in range(rng.randint(0, 10))]
        cap = rng.randint(1, 3)
        m = belady_min_faults(refs, cap)
        assert m == brute_min(refs, cap)
        assert m <= fifo_faults(refs, cap) and m <= lru_faults(refs, cap)


def test_fifo_and_lru_differ_on_classic_trace():
    refs = list("abacabad")
    assert fifo_faults(refs, 2) != lru_faults(refs, 2)
    assert lru_faults(list("aaaa"), 1) == 1
    assert belady_min_faults(list("abc"), 0) == 3


def test_reference_string_lists_pageable_keys():
    t = transcript([TurnSpec("a", [read_call("/x", 800), bash_output(700), read_call("/y", 800)]),
                    TurnSpec("b", [read_call("/x", 800)])], "refs")
    assert reference_string(t) == ["/x", "/y", "/x"]


def test_oracle_sanity_on_hand_cases():
    for reread, tau in product([True, False], [2, 4]):
        specs = [TurnSpec("0", [read_call("/f", 2000)])] + [TurnSpec(str(i)) for i in range(1, 12)]
        if reread:
            specs[9].calls.append(read_call("/f", 2000))
        msgs = transcript(specs, "h").messages()
        o = brute_force_replay(msgs, tau=tau)
        assert o.faults == (1 if reread else 0)
        got = replay_transcript(Transcript.from_messages(msgs), PolicyConfig(tau_user_turns=tau))
        assert (got.total_evictions, got.faults) == (o.evictions, o.faults)
        assert json.dumps(got.to_json())
