"""Dynamic weight shift: calibration, the cache map, and dispatch.

Calibration runs one captured baseline pass, fits a PCA basis per
(block, attention-kind) unit from the captured inputs, sweeps the pruned
fraction upward until the unit's sliced output drifts past the error
threshold, then replays the whole schedule online (caching first, slicing as
the fallback tier) to populate the block x step cache map.

Dispatch holds both the original and the sliced weights. Online mode decides
live per the cache-window scheduler; replay mode executes a precomputed grid
cell by cell. Cells where the retained dimension equals the full width
execute the unsliced math (bitwise identical to full attention) while the
accounting uses the sliced formula, which is equal there.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .edcw import (
    CACHE_OUTPUT,
    BlockCacheState,
    Decision,
    DecisionKind,
    SchedulerConfig,
    consume_cache,
    drift_vs_previous,
    edcw_decide,
)
from .linalg import rel_l2
from .metrics import RunTrace, TraceRow, macs_sliced
from .model import (
    ATTENTION_KINDS,
    AttentionResult,
    ModelConfig,
    attention_weights_for,
    unit_attention_from_map,
    unit_attention_full,
)
from .pcas import compute_basis, slice_weights, unit_attention_sliced
from .runner import BaselineExecutor, denoise_run

CACHE_MAP_MAGIC = "unicp-cache-map v1"

LETTER_FULL = "F"
LETTER_OUTPUT = "O"
LETTER_MAP = "M"
LETTER_PRUNED = "P"

DECISION_BY_LETTER = {
    LETTER_FULL: "full",
    LETTER_OUTPUT: "reuse_output",
    LETTER_MAP: "reuse_map",
    LETTER_PRUNED: "pruned",
}

FRACTION_STEP = 0.05


class MissingArtifactError(RuntimeError):
    """A dispatch or replay step needed an artifact that is not available."""


@dataclass(frozen=True)
class DecideEvent:
    """One live scheduler decision with everything needed to replay it."""

    step: int
    block: int
    kind: str
    history: tuple  # ((step, AttentionResult), ...) as seen before deciding
    current: AttentionResult
    decision: Decision


@dataclass(frozen=True)
class CalibrationRecord:
    block: int
    kind: str
    step: int
    candidate_n: int
    measured_error: float
    accepted: bool


@dataclass
class CacheMap:
    """Block x attention-kind x step grid of executed strategies."""

    model_header: dict
    delta: float
    window: int
    ratio_lo: float
    ratio_hi: float
    mode: str
    aggregation: str
    grid: dict = field(default_factory=dict)  # (block, kind) -> list of letters
    final_n: dict = field(default_factory=dict)  # (block, kind) -> retained dim


def cache_map_export(cmap: CacheMap) -> str:
    h = cmap.model_header
    lines = [
        CACHE_MAP_MAGIC,
        f"blocks={h['blocks']} dim={h['dim']} tokens={h['tokens']} "
        f"frames={h['frames']} steps={h['steps']} seed={h['seed']}",
        f"delta={cmap.delta!r} window={cmap.window} ratio_lo={cmap.ratio_lo!r} "
        f"ratio_hi={cmap.ratio_hi!r} mode={cmap.mode} aggregation={cmap.aggregation}",
        "grid",
    ]
    for (block, kind) in sorted(cmap.grid.keys()):
        lines.append(f"{block} {kind} {''.join(cmap.grid[(block, kind)])}")
    lines.append("final_n")
    for (block, kind) in sorted(cmap.final_n.keys()):
        lines.append(f"{block} {kind} {cmap.final_n[(block, kind)]}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def _parse_kv_line(line: str) -> dict:
    out = {}
    for token in line.split():
        key, _, value = token.partition("=")
        out[key] = value
    return out


def cache_map_parse(text: str) -> CacheMap:
    lines = text.splitlines()
    if not lines or lines[0] != CACHE_MAP_MAGIC:
        raise ValueError("not a cache map document")
    dims = _parse_kv_line(lines[1])
    run = _parse_kv_line(lines[2])
    cmap = CacheMap(
        model_header={k: int(dims[k]) for k in ("blocks", "dim", "tokens", "frames", "steps", "seed")},
        delta=float(run["delta"]),
        window=int(run["window"]),
        ratio_lo=float(run["ratio_lo"]),
        ratio_hi=float(run["ratio_hi"]),
        mode=run["mode"],
        aggregation=run["aggregation"],
    )
    if lines[3] != "grid":
        raise ValueError("cache map is missing its grid section")
    i = 4
    while i < len(lines) and lines[i] != "final_n":
        block, kind, letters = lines[i].split()
        if any(ch not in DECISION_BY_LETTER for ch in letters):
            raise ValueError(f"cache map row has letters outside F/O/M/P: {lines[i]!r}")
        cmap.grid[(int(block), kind)] = list(letters)
        i += 1
    if i >= len(lines):
        raise ValueError("cache map is missing its final_n section")
    i += 1
    while i < len(lines) and lines[i] != "end":
        block, kind, n = lines[i].split()
        cmap.final_n[(int(block), kind)] = int(n)
        i += 1
    if i >= len(lines):
        raise ValueError("cache map is missing its end marker")
    return cmap


# ---------------------------------------------------------------------------
# Dispatchers (executors for runner.denoise_run / runner.forward_blocks).
# ---------------------------------------------------------------------------

class OnlineDispatcher:
    """Live scheduling: consume an armed cache, else full-compute and decide.

    A decide step executes the fresh full result (recorded as F, with the
    matched window in the trace when it armed a cache). A miss on both cache
    tiers executes sliced attention when sliced weights with n < m exist,
    else falls back to full. Each unit owns its cache state; the executed
    letters build the cache map record.
    """

    def __init__(self, model, cfg: ModelConfig, sched: SchedulerConfig,
                 sliced_weights: dict | None = None):
        self.model = model
        self.model_dim = cfg.model_dim
        self.sched = sched
        self.sliced = dict(sliced_weights) if sliced_weights else {}
        self.states = {(b, kind): BlockCacheState(capacity=sched.search_window)
                       for b in range(len(model)) for kind in ATTENTION_KINDS}
        self.grid = {unit: [] for unit in self.states}

    def run_unit(self, block_idx: int, kind: str, x_stack: np.ndarray,
                 step: int, trace: RunTrace):
        unit = (block_idx, kind)
        st = self.states[unit]
        w = attention_weights_for(self.model[block_idx], kind)

        cached = consume_cache(st, step)
        if cached is not None:
            if cached.kind == CACHE_OUTPUT:
                o_stack = cached.payload
                macs = 0
                decision = "reuse_output"
                letter = LETTER_OUTPUT
            else:
                o_stack, macs = unit_attention_from_map(x_stack, cached.payload, w)
                decision = "reuse_map"
                letter = LETTER_MAP
            self.grid[unit].append(letter)
            row = TraceRow(step=step, block=block_idx, kind=kind, decision=decision,
                           window=cached.window, drift_output=None, drift_map=None,
                           macs=macs)
            return o_stack, row

        st.clear_processed()
        o_full, a_full, full_macs = unit_attention_full(x_stack, w)
        current = AttentionResult(map=a_full, output=o_full, macs=full_macs)
        drift_o, drift_m = drift_vs_previous(st, current, step)
        history_snapshot = tuple(st.history)
        decision = edcw_decide(st, current, step, self.sched)
        trace.decide_events.append(DecideEvent(
            step=step, block=block_idx, kind=kind, history=history_snapshot,
            current=current, decision=decision))

        if decision.kind in (DecisionKind.REUSE_OUTPUT, DecisionKind.REUSE_MAP):
            self.grid[unit].append(LETTER_FULL)
            row = TraceRow(step=step, block=block_idx, kind=kind, decision="full",
                           window=decision.window, drift_output=drift_o,
                           drift_map=drift_m, macs=full_macs)
            return o_full, row

        sw = self.sliced.get(unit)
        if sw is not None and sw.n < self.model_dim:
            o_sliced, _, macs = unit_attention_sliced(x_stack, w, sw)
            self.grid[unit].append(LETTER_PRUNED)
            row = TraceRow(step=step, block=block_idx, kind=kind, decision="pruned",
                           window=None, drift_output=drift_o, drift_map=drift_m,
                           macs=macs)
            return o_sliced, row

        self.grid[unit].append(LETTER_FULL)
        row = TraceRow(step=step, block=block_idx, kind=kind, decision="full",
                       window=None, drift_output=drift_o, drift_map=drift_m,
                       macs=full_macs)
        return o_full, row

    def build_cache_map(self, cfg: ModelConfig, ratio_lo: float, ratio_hi: float,
                        aggregation: str) -> CacheMap:
        return CacheMap(
            model_header=cfg.header(),
            delta=self.sched.delta,
            window=self.sched.search_window,
            ratio_lo=ratio_lo,
            ratio_hi=ratio_hi,
            mode="online",
            aggregation=aggregation,
            grid={unit: list(letters) for unit, letters in self.grid.items()},
            final_n={unit: sw.n for unit, sw in self.sliced.items()},
        )


class ReplayDispatcher:
    """Execute a precomputed cache map cell by cell.

    F cells run full attention and stash their result; O/M cells serve from
    the most recent stash; P cells run sliced attention (full math when the
    retained dimension equals the width, with sliced-formula accounting).
    """

    def __init__(self, model, cache_map: CacheMap, sliced_weights: dict | None = None):
        self.model = model
        self.map = cache_map
        self.model_dim = int(cache_map.model_header["dim"])
        self.sliced = dict(sliced_weights) if sliced_weights else {}
        self._stash = {}

    def run_unit(self, block_idx: int, kind: str, x_stack: np.ndarray,
                 step: int, trace: RunTrace):
        unit = (block_idx, kind)
        letters = self.map.grid.get(unit)
        if letters is None or step >= len(letters):
            raise MissingArtifactError(
                f"cache map has no cell for block {block_idx} {kind} step {step}")
        letter = letters[step]
        w = attention_weights_for(self.model[block_idx], kind)
        inst, seq, _ = x_stack.shape

        if letter == LETTER_FULL:
            o_stack, a_stack, macs = unit_attention_full(x_stack, w)
            self._stash[unit] = (o_stack, a_stack)
        elif letter == LETTER_OUTPUT:
            if unit not in self._stash:
                raise MissingArtifactError(
                    f"reuse cell before any full compute: block {block_idx} {kind} step {step}")
            o_stack = self._stash[unit][0]
            macs = 0
        elif letter == LETTER_MAP:
            if unit not in self._stash:
                raise MissingArtifactError(
                    f"reuse cell before any full compute: block {block_idx} {kind} step {step}")
            o_stack, macs = unit_attention_from_map(x_stack, self._stash[unit][1], w)
        elif letter == LETTER_PRUNED:
            sw = self.sliced.get(unit)
            if sw is None:
                raise MissingArtifactError(
                    f"pruned cell without sliced weights: block {block_idx} {kind} step {step}")
            if sw.n >= self.model_dim:
                o_stack, _, _ = unit_attention_full(x_stack, w)
                macs = inst * macs_sliced(seq, self.model_dim, sw.n)
            else:
                o_stack, _, macs = unit_attention_sliced(x_stack, w, sw)
        else:
            raise ValueError(f"unknown cache map letter {letter!r}")

        row = TraceRow(step=step, block=block_idx, kind=kind,
                       decision=DECISION_BY_LETTER[letter], window=None,
                       drift_output=None, drift_map=None, macs=macs)
        return o_stack, row


# ---------------------------------------------------------------------------
# Calibration.
# ---------------------------------------------------------------------------

class _CaptureExecutor(BaselineExecutor):
    """Baseline pass that stashes unit inputs/outputs at the calibration steps."""

    def __init__(self, model, calib_steps):
        super().__init__(model)
        self.calib_steps = set(calib_steps)
        self.captured = {}

    def run_unit(self, block_idx, kind, x_stack, step, trace):
        o_stack, row = super().run_unit(block_idx, kind, x_stack, step, trace)
        if step in self.calib_steps:
            self.captured.setdefault((block_idx, kind), {})[step] = (x_stack, o_stack)
        return o_stack, row


def default_calib_steps(num_steps: int) -> list[int]:
    """First step of each third of the schedule."""
    return sorted({0, num_steps // 3, (2 * num_steps) // 3})


def fraction_grid(lo: float, hi: float) -> list[float]:
    fracs = []
    i = 0
    while True:
        f = lo + FRACTION_STEP * i
        if f > hi + 1e-9:
            break
        fracs.append(min(f, hi))
        i += 1
    return fracs


@dataclass
class CalibrationResult:
    cache_map: CacheMap
    sliced: dict  # (block, kind) -> SlicedWeights
    records: list  # CalibrationRecord, in (block, kind, step, n) order
    population_state: np.ndarray
    population_trace: RunTrace
    baseline_state: np.ndarray
    baseline_trace: RunTrace


def _calibrate_unit(model, cfg, sched, captured, unit, fracs, calib_steps, aggregation):
    block_idx, kind = unit
    m = cfg.model_dim
    w = attention_weights_for(model[block_idx], kind)
    per_step = captured[unit]
    instances = [x for step in calib_steps for x in per_step[step][0]]
    basis = compute_basis(instances, calib_steps)

    records = []
    per_step_n = {}
    for step in calib_steps:
        x_stack, o_full = per_step[step]
        threshold = sched.threshold_at(step)
        best_n = None
        for frac in fracs:
            n = math.ceil(m * (1.0 - frac))
            sw = slice_weights(w, basis, n)
            o_sliced, _, _ = unit_attention_sliced(x_stack, w, sw)
            err = rel_l2(o_sliced, o_full)
            accepted = err <= threshold
            records.append(CalibrationRecord(block=block_idx, kind=kind, step=step,
                                             candidate_n=n, measured_error=err,
                                             accepted=accepted))
            if not accepted:
                break
            best_n = n
        per_step_n[step] = best_n if best_n is not None else m

    if aggregation == "smallest":
        accepted_ns = [n for n in per_step_n.values() if n < m]
        final_n = min(accepted_ns) if accepted_ns else m
    else:
        final_n = max(per_step_n.values())
        # Soundness net: attention error is not guaranteed monotone in n, so
        # re-verify the aggregate at every calibration step and widen if a
        # step objects; abandoning pruning entirely beats an unsound slice.
        candidates = sorted({math.ceil(m * (1.0 - f)) for f in fracs})
        while final_n < m:
            sw = slice_weights(w, basis, final_n)
            sound = True
            for step in calib_steps:
                x_stack, o_full = per_step[step]
                o_sliced, _, _ = unit_attention_sliced(x_stack, w, sw)
                if rel_l2(o_sliced, o_full) > sched.threshold_at(step):
                    sound = False
                    break
            if sound:
                break
            larger = [n for n in candidates if n > final_n]
            final_n = larger[0] if larger else m

    return unit, slice_weights(w, basis, final_n), records


def dws_calibrate(model, cfg: ModelConfig, sched: SchedulerConfig,
                  ratio_bounds=(0.1, 0.4), aggregation: str = "conservative",
                  threads: int = 1) -> CalibrationResult:
    """Calibrate per-unit pruning dimensions and build the cache map.

    Returns the populated cache map (from an online pass with the calibrated
    sliced weights), the sliced weights themselves, and the per-candidate
    calibration records.
    """
    lo, hi = ratio_bounds
    if not 0.0 <= lo <= hi < 1.0:
        raise ValueError(f"ratio bounds must satisfy 0 <= lo <= hi < 1, got [{lo}, {hi}]")
    if aggregation not in ("conservative", "smallest"):
        raise ValueError(f"unknown aggregation {aggregation!r}")

    calib_steps = default_calib_steps(cfg.num_steps)
    capture = _CaptureExecutor(model, calib_steps)
    baseline_state, baseline_trace = denoise_run(cfg, capture)
    if not capture.captured:
        raise ValueError("calibration captured no block inputs")

    fracs = fraction_grid(lo, hi)
    units = [(b, kind) for b in range(len(model)) for kind in ATTENTION_KINDS]

    def work(unit):
        return _calibrate_unit(model, cfg, sched, capture.captured, unit,
                               fracs, calib_steps, aggregation)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, units))
    else:
        results = [work(unit) for unit in units]

    sliced = {}
    records = []
    for unit, sw, unit_records in results:
        sliced[unit] = sw
        records.extend(unit_records)

    dispatcher = OnlineDispatcher(model, cfg, sched, sliced)
    population_state, population_trace = denoise_run(cfg, dispatcher)
    cache_map = dispatcher.build_cache_map(cfg, lo, hi, aggregation)

    return CalibrationResult(cache_map=cache_map, sliced=sliced, records=records,
                             population_state=population_state,
                             population_trace=population_trace,
                             baseline_state=baseline_state,
                             baseline_trace=baseline_trace)
