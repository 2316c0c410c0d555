"""Eviction policy: classification, pressure zones, FIFO age selection, cost model."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .pagestore import BlockMeta, FaultHistory

DEFAULT_PAGEABLE = frozenset({"Read", "NotebookRead", "Write", "ExitPlanMode"})
DEFAULT_PROTECTED = frozenset({"memory_release", "memory_fault"})


class ToolClass(str, enum.Enum):
    GARBAGE_COLLECTABLE = "GarbageCollectable"
    PAGEABLE = "Pageable"
    PROTECTED = "Protected"


class PressureZone(enum.IntEnum):
    NORMAL = 0
    ADVISORY = 1
    INVOLUNTARY = 2
    AGGRESSIVE = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


@dataclass
class PolicyConfig:
    tau_user_turns: int = 4
    min_size_bytes: int = 500
    advisory_tokens: int = 60_000
    involuntary_tokens: int = 100_000
    aggressive_tokens: int = 120_000
    aggressive_tau: int = 1
    aggressive_min_size: int = 100
    bytes_per_token: float = 4.15
    pin_decay_enabled: bool = False
    pin_half_life_turns: int = 8
    pin_evict_strength: float = 0.25
    context_window_tokens: int = 200_000
    pageable_tools: frozenset[str] = field(default=DEFAULT_PAGEABLE)
    protected_tools: frozenset[str] = field(default=DEFAULT_PROTECTED)

    def __post_init__(self) -> None:
        self.pageable_tools = frozenset(self.pageable_tools)
        self.protected_tools = frozenset(self.protected_tools)
        if not 0 < self.advisory_tokens < self.involuntary_tokens < self.aggressive_tokens:
            raise ValueError(
                "zone thresholds must satisfy 0 < advisory < involuntary < aggressive, got "
                f"{self.advisory_tokens}, {self.involuntary_tokens}, {self.aggressive_tokens}"
            )
        if not self.tau_user_turns >= self.aggressive_tau >= 0:
            raise ValueError(f"need tau ({self.tau_user_turns}) >= aggressive_tau ({self.aggressive_tau}) >= 0")
        if self.bytes_per_token <= 0:
            raise ValueError(f"bytes_per_token must be > 0, got {self.bytes_per_token}")
        if self.pin_half_life_turns <= 0:
            raise ValueError("pin_half_life_turns must be > 0")
        if self.context_window_tokens <= 0:
            raise ValueError("context_window_tokens must be > 0")

    @property
    def zone_thresholds(self) -> dict[str, int]:
        return {
            "advisory": self.advisory_tokens,
            "involuntary": self.involuntary_tokens,
            "aggressive": self.aggressive_tokens,
        }

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def classify(tool_name: str | None, cfg: PolicyConfig | None = None) -> ToolClass:
    cfg = cfg or PolicyConfig()
    if tool_name in cfg.protected_tools:
        return ToolClass.PROTECTED
    if tool_name in cfg.pageable_tools:
        return ToolClass.PAGEABLE
    return ToolClass.GARBAGE_COLLECTABLE


def compute_zone(estimated_tokens: int, cfg: PolicyConfig | None = None) -> PressureZone:
    cfg = cfg or PolicyConfig()
    if estimated_tokens >= cfg.aggressive_tokens:
        return PressureZone.AGGRESSIVE
    if estimated_tokens >= cfg.involuntary_tokens:
        return PressureZone.INVOLUNTARY
    if estimated_tokens >= cfg.advisory_tokens:
        return PressureZone.ADVISORY
    return PressureZone.NORMAL


def effective_thresholds(zone: PressureZone, cfg: PolicyConfig) -> tuple[int, int] | None:
    """(tau, min_size) for age-based eviction in ``zone``; None when it is off."""
    if zone == PressureZone.AGGRESSIVE:
        return cfg.aggressive_tau, cfg.aggressive_min_size
    if zone == PressureZone.INVOLUNTARY:
        return cfg.tau_user_turns, cfg.min_size_bytes
    return None


def pin_strength(last_access_turn: int, current_turn: int, cfg: PolicyConfig) -> float:
    elapsed = max(0, current_turn - last_access_turn)
    return 2.0 ** (-elapsed / cfg.pin_half_life_turns)


def _pin_holds(meta: BlockMeta, history: FaultHistory, current_turn: int, cfg: PolicyConfig) -> bool:
    if not cfg.pin_decay_enabled:
        return True
    entry = history.get(meta.fault_key) if meta.fault_key is not None else None
    if entry is None:
        return True
    return pin_strength(entry.last_access_turn, current_turn, cfg) >= cfg.pin_evict_strength


def select_evictions(
    blocks: Iterable[BlockMeta],
    fault_history: FaultHistory,
    zone: PressureZone,
    cfg: PolicyConfig,
    current_turn: int,
) -> list[tuple[BlockMeta, ToolClass]]:
    """Pick tool results to evict this pass, in block order.

    Model-released blocks bypass the age and size gates in every zone.
    Error results, anchored blocks and live pins are never returned.
    """
    gates = effective_thresholds(zone, cfg)
    chosen: list[tuple[BlockMeta, ToolClass]] = []
    for meta in blocks:
        if meta.kind != "tool_result" or meta.is_error or meta.anchored:
            continue
        category = classify(meta.tool_name, cfg)
        if category == ToolClass.PROTECTED:
            continue
        if meta.status == "pinned":
            if not _pin_holds(meta, fault_history, current_turn, cfg):
                chosen.append((meta, category))
            continue
        if meta.status != "resident":
            continue
        if meta.release_requested:
            chosen.append((meta, category))
            continue
        if gates is None:
            continue
        tau, min_size = gates
        if current_turn - meta.turn <= tau or meta.size_bytes <= min_size:
            continue
        if zone == PressureZone.AGGRESSIVE and meta.fault_key is not None:
            entry = fault_history.get(meta.fault_key)
            if entry is not None and entry.fault_count >= 1:
                continue
        chosen.append((meta, category))
    return chosen


# ---------------------------------------------------------------------------
# Inverted cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostEstimate:
    keep_cost: float
    fault_cost: float
    decision: str  # "keep" | "evict"

    @property
    def savings(self) -> float:
        return self.keep_cost - self.fault_cost


def keep_cost(size_tokens: int, resident_turns: float) -> float:
    """Token-turns spent keeping a page resident (per-token price factored out)."""
    return size_tokens * resident_turns


def break_even(size_tokens: int, turns_until_next_ref: float) -> CostEstimate:
    """Evict iff the page will not be referenced for more than one turn."""
    keep = keep_cost(size_tokens, turns_until_next_ref)
    fault = float(size_tokens)
    decision = "evict" if turns_until_next_ref > 1 else "keep"
    return CostEstimate(keep, fault, decision)


def quadratic_fault_cost(context_tokens: int, page_tokens: int) -> float:
    """Fault cost under attention's quadratic scaling, normalised to token units."""
    if context_tokens == 0:
        return float(page_tokens)
    return (context_tokens + page_tokens) ** 2 / context_tokens


def estimate_tokens(n_bytes: int, cfg: PolicyConfig | None = None) -> int:
    cfg = cfg or PolicyConfig()
    return int(round(n_bytes / cfg.bytes_per_token))


INFINITY = math.inf
