"""Scripted-drift rig for exercising the cache-window scheduler in isolation.

Sequences of attention results are synthesized so the relative drift between
adjacent steps follows a prescribed profile (U-shapes, spikes). The rig owns
the whole sequence, so each decision sees the candidates for the steps a
window would actually serve, the framing under which cache windows are
chosen; a fixed-window comparator reuses blindly every k-th step. Reuse
error is accumulated as the sum of per-step relative distances between the
reused value and the true value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .edcw import (
    CACHE_OUTPUT,
    BlockCacheState,
    Decision,
    DecisionKind,
    SchedulerConfig,
    consume_cache,
    edcw_decide,
)
from .linalg import frob, rel_l2
from .model import AttentionResult

MAX_FEASIBLE_DRIFT = 2.0


@dataclass(frozen=True)
class DriftProfile:
    """Per-step target relative drifts plus optional spike overrides."""

    drifts: tuple[float, ...]
    spikes: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if any(d < 0 for d in self.drifts):
            raise ValueError("drift values must be >= 0")
        for step, magnitude in self.spikes:
            if not 0 <= step < len(self.drifts):
                raise ValueError(f"spike step {step} outside profile of length {len(self.drifts)}")
            if magnitude < 0:
                raise ValueError("spike magnitudes must be >= 0")

    def effective(self) -> list[float]:
        drifts = list(self.drifts)
        for step, magnitude in self.spikes:
            drifts[step] = magnitude
        return drifts


def u_profile(num_steps: int, end_frac: float = 0.2, end_drift: float = 0.2,
              mid_drift: float = 0.01, spike_step: int | None = None,
              spike_magnitude: float = 0.3) -> DriftProfile:
    """U-shaped profile: high drift at each end, low in the middle, one spike."""
    n_end = round(end_frac * num_steps)
    drifts = [end_drift if (t < n_end or t >= num_steps - n_end) else mid_drift
              for t in range(num_steps)]
    spikes = ()
    if spike_step is not None:
        spikes = ((spike_step, spike_magnitude),)
    return DriftProfile(drifts=tuple(drifts), spikes=spikes)


def synthesize_sequence(profile: DriftProfile, shape: tuple[int, int],
                        seed: int) -> list[AttentionResult]:
    """Build attention results whose adjacent-step drift follows the profile.

    Outputs move along one fixed random direction scaled per step; maps move
    along a fixed zero-row-sum direction so rows keep summing to one.
    drifts[0] displaces the first result from the random base, so measured
    drift t (vs step t-1) matches profile entry t for t >= 1.
    """
    drifts = profile.effective()
    for t, d in enumerate(drifts):
        if d > MAX_FEASIBLE_DRIFT:
            raise ValueError(f"drift {d} at step {t} exceeds the feasible cap {MAX_FEASIBLE_DRIFT}")
    s, m = shape
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    base_out = rng.standard_normal((s, m))
    direction_out = rng.standard_normal((s, m))
    direction_out /= frob(direction_out)
    base_map = np.full((s, s), 1.0 / s)
    direction_map = rng.standard_normal((s, s))
    direction_map -= direction_map.mean(axis=1, keepdims=True)
    direction_map /= frob(direction_map)

    full_macs = 4 * s * m * m + 2 * s * s * m
    results = []
    out = base_out
    amap = base_map
    for d in drifts:
        out = out + d * frob(out) * direction_out
        amap = amap + d * frob(amap) * direction_map
        results.append(AttentionResult(map=amap, output=out, macs=full_macs))
    return results


@dataclass(frozen=True)
class HarnessStep:
    step: int
    consumed: str | None  # "output" | "map" when served from cache
    reuse_error: float | None
    decision: Decision | None
    history: tuple = ()


@dataclass
class HarnessResult:
    steps: list[HarnessStep] = field(default_factory=list)
    accumulated_error: float = 0.0
    # (arming step, window, decision kind) for every armed cache.
    armings: list[tuple[int, int, DecisionKind]] = field(default_factory=list)
    fixed_window_errors: dict[int, float] = field(default_factory=dict)


def run_fixed_window(results: list[AttentionResult], window: int) -> float:
    """Accumulated reuse error of caching unconditionally every `window` steps."""
    if window < 1:
        raise ValueError("fixed window must be >= 1")
    total = 0.0
    anchor = None
    for i, r in enumerate(results):
        if i % window == 0:
            anchor = r
        else:
            total += rel_l2(anchor.output, r.output)
    return total


def run_scheduler_on_profile(profile: DriftProfile, sched: SchedulerConfig,
                             shape: tuple[int, int] = (16, 8), seed: int = 0,
                             fixed_windows: tuple[int, ...] = (2, 3, 4)) -> HarnessResult:
    """Walk the synthesized sequence through decide/consume, step by step.

    Before each decision the candidate buffer is filled with the results of
    the next K steps (distance k maps to step i+k), so a window only arms
    when the drift across the span it would serve stays under the threshold.
    Reuse steps consume the armed payload and accrue its error against the
    true value. Fixed-window comparators run on the same sequence.
    """
    results = synthesize_sequence(profile, shape, seed)
    num_steps = len(results)
    res = HarnessResult()
    st = BlockCacheState(capacity=sched.search_window)
    for i in range(num_steps):
        cached = consume_cache(st, i)
        if cached is not None:
            true = results[i]
            if cached.kind == CACHE_OUTPUT:
                err = rel_l2(cached.payload, true.output)
            else:
                err = rel_l2(cached.payload, true.map)
            res.accumulated_error += err
            res.steps.append(HarnessStep(step=i, consumed=cached.kind,
                                         reuse_error=err, decision=None))
            continue
        st.clear_processed()
        st.history = [(i - k, results[i + k])
                      for k in range(sched.search_window, 0, -1)
                      if i + k < num_steps]
        snapshot = tuple(st.history)
        decision = edcw_decide(st, results[i], i, sched)
        res.steps.append(HarnessStep(step=i, consumed=None, reuse_error=None,
                                     decision=decision, history=snapshot))
        if decision.kind in (DecisionKind.REUSE_OUTPUT, DecisionKind.REUSE_MAP):
            res.armings.append((i, decision.window, decision.kind))
    for w in fixed_windows:
        res.fixed_window_errors[w] = run_fixed_window(results, w)
    return res


def window_spans_step(arming_step: int, window: int, target_step: int) -> bool:
    """True when a window armed at `arming_step` serves `target_step`."""
    return arming_step < target_step <= arming_step + window - 1


# ---------------------------------------------------------------------------
# Profile files: header line with T, delta, K; one drift per line; spikes as
# "@step magnitude".
# ---------------------------------------------------------------------------

def profile_export(profile: DriftProfile, delta: float, window: int) -> str:
    lines = [f"T={len(profile.drifts)} delta={delta!r} K={window}"]
    lines.extend(repr(d) for d in profile.drifts)
    lines.extend(f"@{step} {magnitude!r}" for step, magnitude in profile.spikes)
    return "\n".join(lines) + "\n"


def profile_parse(text: str):
    """Parse a profile document; returns (DriftProfile, delta, window)."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty profile document")
    header = {}
    for token in lines[0].split():
        key, _, value = token.partition("=")
        header[key] = value
    try:
        num_steps = int(header["T"])
        delta = float(header["delta"])
        window = int(header["K"])
    except KeyError as exc:
        raise ValueError(f"profile header is missing {exc}") from exc
    drifts = []
    spikes = []
    for ln in lines[1:]:
        if ln.startswith("@"):
            step_str, magnitude_str = ln[1:].split()
            spikes.append((int(step_str), float(magnitude_str)))
        else:
            drifts.append(float(ln))
    if len(drifts) != num_steps:
        raise ValueError(f"profile declares T={num_steps} but lists {len(drifts)} drift values")
    return DriftProfile(drifts=tuple(drifts), spikes=tuple(spikes)), delta, window
