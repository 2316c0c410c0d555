"""Command-line entry point: serve, replay, probe and report.

Settings resolve as command-line flags, then environment variables, then
a flat JSON config file, then built-in defaults.  Exit status is 0 on
success, 1 on a usage error and 2 when the run itself fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from . import analytics, proxy
from .policy import PolicyConfig, PressureZone

logger = logging.getLogger("ctxpager")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

ENV_VARS = {
    "PICHAY_UPSTREAM": "upstream_base_url",
    "PICHAY_MODE": "mode",
    "PICHAY_LOG": "log_path",
    "PICHAY_CHECKPOINT_DIR": "checkpoint_dir",
}

# short spellings accepted alongside the --field-name flags
ALIASES = {"tau_user_turns": ["--tau"], "min_size_bytes": ["--min-size"], "upstream_base_url": ["--upstream"],
           "listen_address": ["--listen"]}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit status 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"\n{self.prog}: error: {message}\n")


@dataclasses.dataclass(frozen=True)
class Setting:
    name: str
    owner: str  # "policy" | "proxy"
    parse: Callable[[Any], Any]
    default: Any
    help: str


def _bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _names(value: Any) -> frozenset[str]:
    if isinstance(value, str):
        return frozenset(v.strip() for v in value.split(",") if v.strip())
    return frozenset(str(v) for v in value)


def _optional_str(value: Any) -> str | None:
    return None if value in (None, "") else str(value)


_HELP = {
    "tau_user_turns": "evict results older than this many user turns",
    "min_size_bytes": "only evict results larger than this",
    "advisory_tokens": "estimated tokens where the Advisory zone starts",
    "involuntary_tokens": "estimated tokens where the Involuntary zone starts",
    "aggressive_tokens": "estimated tokens where the Aggressive zone starts",
    "aggressive_tau": "age gate used in the Aggressive zone",
    "aggressive_min_size": "size gate used in the Aggressive zone",
    "bytes_per_token": "bytes per token for size-based estimates",
    "pin_decay_enabled": "let pins weaken while their key goes unused",
    "pin_half_life_turns": "turns for a pin's strength to halve",
    "pin_evict_strength": "pins weaker than this may be evicted",
    "context_window_tokens": "model context size used for fill percentages",
    "pageable_tools": "comma-separated tools whose results can be faulted back",
    "protected_tools": "comma-separated tools whose results are never evicted",
    "listen_address": "host:port to listen on",
    "upstream_base_url": "base URL of the upstream Messages API (env PICHAY_UPSTREAM)",
    "mode": "observe, trim or compact (env PICHAY_MODE)",
    "checkpoint_dir": "directory for per-session checkpoints (env PICHAY_CHECKPOINT_DIR)",
    "log_path": "decision log JSONL path (env PICHAY_LOG)",
    "phantom_enabled": "offer memory_release / memory_fault to the model",
    "session_header": "request header carrying a client session id",
    "upstream_timeout": "seconds to wait on the upstream",
}


def settings() -> list[Setting]:
    out = []
    for f in dataclasses.fields(PolicyConfig):
        default = f.default
        if isinstance(default, bool):
            parse: Callable[[Any], Any] = _bool
        elif isinstance(default, frozenset):
            parse = _names
        else:
            parse = type(default)
        out.append(Setting(f.name, "policy", parse, default, _HELP[f.name]))
    defaults = proxy.ProxyConfig()
    for name in proxy.ProxyConfig.field_names():
        default = getattr(defaults, name)
        if isinstance(default, bool):
            parse = _bool
        elif default is None:
            parse = _optional_str
        else:
            parse = type(default)
        out.append(Setting(name, "proxy", parse, default, _HELP[name]))
    return out


def _show(value: Any) -> str:
    if isinstance(value, frozenset):
        return ",".join(sorted(value))
    return str(value)


def add_setting_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("settings (flags > environment > --config file > defaults)")
    group.add_argument("--config", metavar="PATH", help="flat JSON file keyed by the setting names below")
    for s in settings():
        flags = ["--" + s.name.replace("_", "-"), *ALIASES.get(s.name, [])]
        group.add_argument(
            *flags, dest=s.name, default=None, metavar=s.name.upper(),
            help=f"{s.name}: {s.help} (default {_show(s.default)})",
        )


def resolve(args: argparse.Namespace, environ: dict[str, str] | None = None) -> tuple[PolicyConfig, proxy.ProxyConfig]:
    """Merge defaults, config file, environment and flags into the two config objects."""
    environ = dict(os.environ if environ is None else environ)
    table = {s.name: s for s in settings()}
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise RuntimeError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise RuntimeError(f"config {args.config} must be a JSON object")
        unknown = sorted(set(doc) - set(table))
        if unknown:
            raise RuntimeError(f"unknown config keys: {', '.join(unknown)}")
        values.update(doc)
    for var, name in ENV_VARS.items():
        if environ.get(var):
            values[name] = environ[var]
    for name in table:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    policy_kw: dict[str, Any] = {}
    proxy_kw: dict[str, Any] = {}
    for name, raw in values.items():
        s = table[name]
        try:
            value = s.parse(raw)
        except (TypeError, ValueError) as exc:
            raise RuntimeError(f"bad value for {name}: {raw!r} ({exc})") from exc
        (policy_kw if s.owner == "policy" else proxy_kw)[name] = value
    try:
        policy = PolicyConfig(**policy_kw)
        cfg = proxy.ProxyConfig(policy=policy, **proxy_kw)
    except ValueError as exc:
        raise RuntimeError(str(exc)) from exc
    return policy, cfg


def _emit(doc: Any, output: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=False) + "\n"
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_serve(args: argparse.Namespace, policy: PolicyConfig, cfg: proxy.ProxyConfig) -> int:
    try:
        proxy.serve(cfg)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


_ZONES = {"estimate": None, **{z.label.lower(): z for z in PressureZone}}


def cmd_replay(args: argparse.Namespace, policy: PolicyConfig, cfg: proxy.ProxyConfig) -> int:
    missing = [p for p in args.traces if not Path(p).exists()]
    if missing:
        raise RuntimeError(f"no such file or directory: {', '.join(missing)}")
    report = analytics.replay(args.traces, policy, _ZONES[args.zone], args.baseline_capacity)
    _emit(report.to_json(), args.output)
    return EXIT_OK


def cmd_probe(args: argparse.Namespace, policy: PolicyConfig, cfg: proxy.ProxyConfig) -> int:
    rows = []
    for path in args.transcripts:
        try:
            t = analytics.load_transcript(path)
        except OSError as exc:
            raise RuntimeError(f"cannot read {path}: {exc.strerror or exc}") from exc
        overhead = analytics.tool_overhead(t)
        survival = analytics.result_survival(t)
        rows.append({
            "path": str(path),
            "records": len(t.records),
            "user_turns": t.request().max_turn + 1 if t.records else 0,
            "tool_results": len(survival),
            "tool_result_bytes": sum(size for size, _ in survival),
            "amplification_factor": analytics.amplification_factor(t),
            "tool_overhead": dataclasses.asdict(overhead),
            "bad_lines": t.bad_lines,
        })
    _emit(rows[0] if len(rows) == 1 else rows, args.output)
    return EXIT_OK


def cmd_report(args: argparse.Namespace, policy: PolicyConfig, cfg: proxy.ProxyConfig) -> int:
    records = []
    for path in args.logs:
        try:
            records.extend(analytics.load_decision_log(path))
        except OSError as exc:
            raise RuntimeError(f"cannot read {path}: {exc.strerror or exc}") from exc
    curve = analytics.curve_from_log(records)
    if args.csv:
        Path(args.csv).write_text(curve.to_csv(), encoding="utf-8")
    doc = {
        "faults": analytics.report_from_log(records).to_json(),
        "actions": analytics.action_table(records),
        "cost": {
            "requests": len(curve.baseline),
            "baseline_bytes": curve.baseline_cumulative[-1] if curve.baseline else 0,
            "managed_bytes": curve.managed_cumulative[-1] if curve.managed else 0,
            "baseline_tokens": analytics.estimate_tokens(sum(curve.baseline), policy),
            "managed_tokens": analytics.estimate_tokens(sum(curve.managed), policy),
            "reduction": curve.reduction,
            "mean_per_turn_reduction": curve.mean_per_turn_reduction,
        },
    }
    _emit(doc, args.output)
    return EXIT_OK


def build_parser() -> Parser:
    every = ", ".join(s.name for s in settings())
    parser = Parser(
        prog="ctxpager",
        description="Demand paging for LLM context windows.",
        epilog=f"Settings available on every subcommand: {every}.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", metavar="{serve,replay,probe,report}")

    p = sub.add_parser("serve", help="run the proxy until interrupted")
    add_setting_flags(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="replay recorded sessions and report evictions and faults")
    p.add_argument("--traces", nargs="+", required=True, metavar="PATH", help="session or decision-log JSONL files or directories")
    p.add_argument("--zone", choices=sorted(_ZONES), default="involuntary", help="pressure zone to assume (default involuntary)")
    p.add_argument("--baseline-capacity", type=int, default=None, metavar="N", help="also count MIN/FIFO/LRU faults with N resident pages")
    p.add_argument("-o", "--output", help="write JSON here instead of stdout")
    add_setting_flags(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("probe", help="measure amplification and tool-output share of transcripts")
    p.add_argument("transcripts", nargs="+", metavar="TRANSCRIPT")
    p.add_argument("-o", "--output")
    add_setting_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="summarize decision logs; cost curve as CSV")
    p.add_argument("logs", nargs="+", metavar="LOG")
    p.add_argument("--csv", metavar="PATH", help="write the per-request cost curve here")
    p.add_argument("-o", "--output")
    add_setting_flags(p)
    p.set_defaults(func=cmd_report)
    return parser


def dispatch(argv: Sequence[str] | None = None, environ: dict[str, str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        policy, cfg = resolve(args, environ)
        return args.func(args, policy, cfg)
    except RuntimeError as exc:
        print(f"ctxpager: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"ctxpager: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    raise SystemExit(dispatch())


if __name__ == "__main__":
    main()
