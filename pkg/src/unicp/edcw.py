"""Error-aware dynamic cache window: the per-unit online caching decision.

Steps are execution indices (0 = first denoising iteration). A unit's state
holds a ring buffer of its recent fully-computed attention results; when no
cache is active, the fresh result is compared against history entries at
distances K..1. A hit on the output tier reuses the whole attention output,
a hit on the map tier reuses only the softmax map; otherwise the step is
handed to pruning. A hit with window k serves the arming step plus the k-1
steps that follow it from one full compute.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .linalg import rel_l2
from .model import AttentionResult

STATUS_FREE = "F"
STATUS_CACHED = "T"
STATUS_PROCESSED = "Processed"


class DecisionKind(enum.Enum):
    FULL = "full"
    REUSE_OUTPUT = "reuse_output"
    REUSE_MAP = "reuse_map"
    PRUNED = "pruned"


CACHE_OUTPUT = "output"
CACHE_MAP = "map"


@dataclass(frozen=True)
class SchedulerConfig:
    delta: float
    search_window: int = 4
    per_step_delta: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.search_window < 1:
            raise ValueError("search_window must be >= 1")
        if self.per_step_delta is not None and any(d < 0 for d in self.per_step_delta):
            raise ValueError("per_step_delta entries must be >= 0")

    def threshold_at(self, step: int) -> float:
        if self.per_step_delta is not None and 0 <= step < len(self.per_step_delta):
            return self.per_step_delta[step]
        return self.delta


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    window: int | None = None
    measured_drift_output: float | None = None
    measured_drift_map: float | None = None


@dataclass
class ActiveCache:
    kind: str  # CACHE_OUTPUT | CACHE_MAP
    payload: object  # stacked output or stacked map
    window: int
    expires_at_step: int


@dataclass
class BlockCacheState:
    """Cache bookkeeping owned by exactly one (block, attention-kind) unit."""

    capacity: int
    status: str = STATUS_FREE
    history: list[tuple[int, AttentionResult]] = field(default_factory=list)
    active_cache: ActiveCache | None = None

    def record(self, step: int, result: AttentionResult):
        self.history.append((step, result))
        if len(self.history) > self.capacity:
            del self.history[: len(self.history) - self.capacity]

    def entry_at_distance(self, step: int, k: int) -> AttentionResult | None:
        target = step - k
        for recorded_step, result in reversed(self.history):
            if recorded_step == target:
                return result
            if recorded_step < target:
                break
        return None

    def clear_processed(self):
        if self.status == STATUS_PROCESSED:
            self.status = STATUS_FREE


def edcw_decide(state: BlockCacheState, current: AttentionResult, step: int,
                cfg: SchedulerConfig) -> Decision:
    """Decide the caching strategy for a freshly full-computed result.

    Scans k = K..1 on the output tier, then on the map tier; the first hit
    (largest k) wins and arms the unit's cache for the k-1 following steps.
    A miss on both tiers defers to pruning. The fresh result enters the
    history either way. Absent history distances are simply skipped, so the
    first steps of a run cannot match at the full window.
    """
    if state.status != STATUS_FREE:
        raise RuntimeError(f"edcw_decide requires a free cache status, got {state.status!r}")

    decision = None
    for k in range(cfg.search_window, 0, -1):
        candidate = state.entry_at_distance(step, k)
        if candidate is None:
            continue
        drift = rel_l2(current.output, candidate.output)
        if drift <= cfg.threshold_at(step - k):
            decision = Decision(kind=DecisionKind.REUSE_OUTPUT, window=k,
                                measured_drift_output=drift)
            break
    if decision is None:
        for k in range(cfg.search_window, 0, -1):
            candidate = state.entry_at_distance(step, k)
            if candidate is None:
                continue
            drift = rel_l2(current.map, candidate.map)
            if drift <= cfg.threshold_at(step - k):
                decision = Decision(kind=DecisionKind.REUSE_MAP, window=k,
                                    measured_drift_map=drift)
                break
    if decision is None:
        decision = Decision(kind=DecisionKind.PRUNED)

    if decision.kind is DecisionKind.REUSE_OUTPUT:
        state.status = STATUS_CACHED
        state.active_cache = ActiveCache(kind=CACHE_OUTPUT, payload=current.output,
                                         window=decision.window,
                                         expires_at_step=step + decision.window - 1)
    elif decision.kind is DecisionKind.REUSE_MAP:
        state.status = STATUS_CACHED
        state.active_cache = ActiveCache(kind=CACHE_MAP, payload=current.map,
                                         window=decision.window,
                                         expires_at_step=step + decision.window - 1)
    else:
        state.status = STATUS_PROCESSED

    state.record(step, current)
    return decision


def consume_cache(state: BlockCacheState, step: int) -> ActiveCache | None:
    """Return the active cache entry if it still covers `step`.

    Once the step passes the expiry the cache is cleared, the status returns
    to free and the unit decides again.
    """
    if state.active_cache is None:
        return None
    if step <= state.active_cache.expires_at_step:
        return state.active_cache
    state.active_cache = None
    state.status = STATUS_FREE
    return None


def drift_vs_previous(state: BlockCacheState, current: AttentionResult, step: int):
    """Adjacent-step drifts (output, map) against the most recent history entry.

    Feeds the trace's error curves; returns (None, None) when no prior entry
    exists.
    """
    if not state.history:
        return None, None
    prev_step, prev = state.history[-1]
    if prev_step >= step:
        return None, None
    return rel_l2(current.output, prev.output), rel_l2(current.map, prev.map)
