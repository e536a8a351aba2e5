"""Command-line front end: baseline runs, calibration, dispatched runs,
scheduler harness, and output comparison.

Exit codes: 0 success, 2 configuration/validation problem, 3 missing
dependency artifact, 4 numeric failure. All commands are deterministic given
the same spec (seed included); every command writes a JSON echo of its full
spec beside its artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .dws import (
    MissingArtifactError,
    OnlineDispatcher,
    ReplayDispatcher,
    cache_map_export,
    cache_map_parse,
    dws_calibrate,
)
from .edcw import SchedulerConfig
from .harness import profile_parse, run_scheduler_on_profile, u_profile
from .metrics import quality_report, report_export, trace_export, trace_parse
from .model import ModelConfig, NumericError, init_model, load_state, save_state
from .pcas import load_sliced_weights, save_sliced_weights
from .runner import baseline_run, denoise_run

PRESETS = {"E1": 0.025, "E2": 0.05, "E3": 0.075, "E4": 0.125, "E5": 0.175}

# Desk-scale defaults: a full sweep (baseline + calibration + five runs)
# stays under two minutes on one CPU core.
DEFAULTS = {
    "blocks": 6,
    "dim": 64,
    "tokens": 64,
    "frames": 8,
    "steps": 30,
    "seed": 42,
    "delta": 0.05,
    "window": 4,
    "ratio_lo": 0.1,
    "ratio_hi": 0.4,
    "mode": "online",
    "aggregation": "conservative",
}

BASELINE_STATE = "baseline_state.bin"
BASELINE_TRACE = "baseline_trace.csv"
CACHE_MAP_FILE = "cache_map.txt"
SLICED_WEIGHTS_FILE = "sliced_weights.bin"
RUN_STATE = "run_state.bin"
RUN_TRACE = "run_trace.csv"
RUN_CACHE_MAP = "run_cache_map.txt"
HARNESS_REPORT = "harness_report.txt"
QUALITY_REPORT = "quality_report.txt"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSpec:
    model: ModelConfig
    scheduler: SchedulerConfig
    ratio_lo: float
    ratio_hi: float
    mode: str
    aggregation: str
    preset: str | None

    def as_dict(self) -> dict:
        d = dict(self.model.header())
        d.update({
            "delta": self.scheduler.delta,
            "window": self.scheduler.search_window,
            "ratio_lo": self.ratio_lo,
            "ratio_hi": self.ratio_hi,
            "mode": self.mode,
            "aggregation": self.aggregation,
            "preset": self.preset,
        })
        return d


def build_spec(args) -> RunSpec:
    values = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise MissingArtifactError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS) - {"preset"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    preset = getattr(args, "preset", None) or values.get("preset")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        values["delta"] = PRESETS[preset]
    for flag in ("delta", "window", "seed", "ratio_lo", "ratio_hi", "mode", "aggregation",
                 "blocks", "dim", "tokens", "frames", "steps"):
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[flag] = flag_value
    if values["mode"] not in ("online", "replay"):
        raise ConfigError(f"mode must be online or replay, got {values['mode']!r}")
    if values["aggregation"] not in ("conservative", "smallest"):
        raise ConfigError(f"aggregation must be conservative or smallest, got {values['aggregation']!r}")
    if not 0.0 <= values["ratio_lo"] <= values["ratio_hi"] < 1.0:
        raise ConfigError(
            f"ratio bounds must satisfy 0 <= lo <= hi < 1, got [{values['ratio_lo']}, {values['ratio_hi']}]")
    try:
        model = ModelConfig(
            num_blocks=int(values["blocks"]),
            model_dim=int(values["dim"]),
            tokens_per_frame=int(values["tokens"]),
            num_frames=int(values["frames"]),
            num_steps=int(values["steps"]),
            seed=int(values["seed"]),
        )
        scheduler = SchedulerConfig(delta=float(values["delta"]),
                                    search_window=int(values["window"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunSpec(model=model, scheduler=scheduler,
                   ratio_lo=float(values["ratio_lo"]), ratio_hi=float(values["ratio_hi"]),
                   mode=str(values["mode"]), aggregation=str(values["aggregation"]),
                   preset=preset)


def _write_text(path: Path, text: str):
    path.write_bytes(text.encode("utf-8"))


def _write_spec(out_dir: Path, name: str, spec: RunSpec):
    _write_text(out_dir / name, json.dumps(spec.as_dict(), sort_keys=True) + "\n")


def _threads() -> int:
    raw = os.environ.get("UNICP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"UNICP_THREADS must be an integer, got {raw!r}")


def cmd_baseline(args) -> int:
    spec = build_spec(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = init_model(spec.model)
    state, trace = baseline_run(model, spec.model)
    save_state(out_dir / BASELINE_STATE, state, spec.model)
    _write_text(out_dir / BASELINE_TRACE, trace_export(trace))
    _write_spec(out_dir, "baseline_spec.json", spec)
    print(f"baseline complete: steps={spec.model.num_steps} macs_total={trace.macs_total}")
    return 0


def cmd_calibrate(args) -> int:
    spec = build_spec(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = init_model(spec.model)
    result = dws_calibrate(model, spec.model, spec.scheduler,
                           ratio_bounds=(spec.ratio_lo, spec.ratio_hi),
                           aggregation=spec.aggregation, threads=_threads())
    _write_text(out_dir / CACHE_MAP_FILE, cache_map_export(result.cache_map))
    save_sliced_weights(out_dir / SLICED_WEIGHTS_FILE, result.sliced, {
        "model": spec.model.header(),
        "delta": spec.scheduler.delta,
        "window": spec.scheduler.search_window,
        "ratio_lo": spec.ratio_lo,
        "ratio_hi": spec.ratio_hi,
        "aggregation": spec.aggregation,
    })
    _write_spec(out_dir, "calibrate_spec.json", spec)
    for (block, kind) in sorted(result.sliced):
        print(f"final_n block={block} kind={kind} n={result.sliced[(block, kind)].n}")
    return 0


def cmd_run(args) -> int:
    spec = build_spec(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = init_model(spec.model)

    sliced = None
    sliced_path = out_dir / SLICED_WEIGHTS_FILE
    if sliced_path.exists():
        sliced, header = load_sliced_weights(sliced_path, spec.model.model_dim)
        if header.get("model") != spec.model.header():
            raise ConfigError("sliced weights were calibrated for a different model config")

    if spec.mode == "replay":
        map_path = out_dir / CACHE_MAP_FILE
        if not map_path.exists():
            raise MissingArtifactError(
                f"replay mode needs {CACHE_MAP_FILE} in {out_dir}; run calibrate first")
        cmap = cache_map_parse(map_path.read_text())
        if cmap.model_header != spec.model.header():
            raise ConfigError("cache map was calibrated for a different model config")
        if any(LETTER == "P" for row in cmap.grid.values() for LETTER in row) and sliced is None:
            raise MissingArtifactError(
                f"replay map contains pruned cells but {SLICED_WEIGHTS_FILE} is missing")
        dispatcher = ReplayDispatcher(model, cmap, sliced)
        state, trace = denoise_run(spec.model, dispatcher)
        run_map = cmap
    else:
        dispatcher = OnlineDispatcher(model, spec.model, spec.scheduler, sliced)
        state, trace = denoise_run(spec.model, dispatcher)
        run_map = dispatcher.build_cache_map(spec.model, spec.ratio_lo, spec.ratio_hi,
                                             spec.aggregation)

    save_state(out_dir / RUN_STATE, state, spec.model)
    _write_text(out_dir / RUN_TRACE, trace_export(trace))
    _write_text(out_dir / RUN_CACHE_MAP, cache_map_export(run_map))
    _write_spec(out_dir, "run_spec.json", spec)

    counts = trace.decision_counts()
    print(f"run complete: mode={spec.mode} macs_total={trace.macs_total} "
          f"decisions={json.dumps(counts, sort_keys=True)}")
    if args.baseline_trace:
        base_path = Path(args.baseline_trace)
        if not base_path.exists():
            raise MissingArtifactError(f"baseline trace not found: {base_path}")
        base_total = trace_parse(base_path.read_text()).macs_total
        print(f"mac_ratio {trace.macs_total / base_total!r}")
    return 0


def cmd_harness(args) -> int:
    spec = build_spec(args)
    if args.profile:
        profile_path = Path(args.profile)
        if not profile_path.exists():
            raise MissingArtifactError(f"profile file not found: {profile_path}")
        profile, delta, window = profile_parse(profile_path.read_text())
        sched = SchedulerConfig(delta=delta, search_window=window)
    else:
        num_steps = spec.model.num_steps
        profile = u_profile(num_steps, spike_step=num_steps // 2)
        sched = spec.scheduler
    result = run_scheduler_on_profile(profile, sched, seed=spec.model.seed)

    lines = ["unicp-harness-report v1",
             f"T={len(profile.drifts)} delta={sched.delta!r} K={sched.search_window}"]
    for step in result.steps:
        if step.consumed is not None:
            lines.append(f"step={step.step} consumed={step.consumed} "
                         f"reuse_error={step.reuse_error!r}")
        else:
            d = step.decision
            window = "" if d.window is None else d.window
            lines.append(f"step={step.step} decision={d.kind.value} k={window}")
    lines.append(f"edcw_accumulated_error={result.accumulated_error!r}")
    for w in sorted(result.fixed_window_errors):
        lines.append(f"fixed_window_{w}_error={result.fixed_window_errors[w]!r}")
    report = "\n".join(lines) + "\n"

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / HARNESS_REPORT, report)
    print(f"harness complete: edcw_error={result.accumulated_error!r} "
          f"fixed={ {w: result.fixed_window_errors[w] for w in sorted(result.fixed_window_errors)} }")
    return 0


def cmd_compare(args) -> int:
    for path in (args.reference, args.candidate):
        if not Path(path).exists():
            raise MissingArtifactError(f"state file not found: {path}")
    reference, _ = load_state(args.reference)
    candidate, _ = load_state(args.candidate)
    if reference.shape != candidate.shape:
        raise ConfigError(
            f"state shapes differ: {reference.shape} vs {candidate.shape}")
    report = quality_report(reference, candidate)
    text = report_export(report)
    sys.stdout.write(text)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_text(out_dir / QUALITY_REPORT, text)
    return 0


def _add_spec_flags(p: argparse.ArgumentParser, include_mode=True):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--preset", choices=sorted(PRESETS), help="error-threshold preset")
    p.add_argument("--delta", type=float, help="error threshold (overrides preset)")
    p.add_argument("--window", type=int, help="search window K")
    p.add_argument("--ratio-lo", dest="ratio_lo", type=float, help="lower pruned-fraction bound")
    p.add_argument("--ratio-hi", dest="ratio_hi", type=float, help="upper pruned-fraction bound")
    p.add_argument("--seed", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--tokens", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--aggregation", choices=["conservative", "smallest"])
    if include_mode:
        p.add_argument("--mode", choices=["online", "replay"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unicp",
                                     description="caching/pruning inference engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("baseline", help="full-compute run; writes state and trace")
    _add_spec_flags(p, include_mode=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("calibrate", help="calibrate pruning dims and build the cache map")
    _add_spec_flags(p, include_mode=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="dispatched run (online or replay)")
    _add_spec_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline-trace", dest="baseline_trace",
                   help="baseline trace CSV; prints the MAC ratio against it")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("harness", help="scripted-drift scheduler rig")
    _add_spec_flags(p, include_mode=False)
    p.add_argument("--profile", help="drift profile file; default is the built-in U profile")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_harness)

    p = sub.add_parser("compare", help="PSNR/SSIM/rel-L2 between two state files")
    p.add_argument("reference")
    p.add_argument("candidate")
    p.add_argument("--out", help="directory for the report document")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
