import math

import numpy as np
import pytest

from oracles import exhaustive_n_sweep
from unicp.dws import (
    CacheMap,
    MissingArtifactError,
    OnlineDispatcher,
    ReplayDispatcher,
    cache_map_export,
    cache_map_parse,
    default_calib_steps,
    dws_calibrate,
    fraction_grid,
)
from unicp.edcw import SchedulerConfig
from unicp.linalg import rel_l2
from unicp.metrics import RunTrace, macs_full_attention, macs_map_reuse, macs_sliced, macs_mlp
from unicp.model import ATTENTION_KINDS, ModelConfig, attention_weights_for, init_model
from unicp.runner import BaselineExecutor, denoise_run, forward_blocks


def tiny(**overrides):
    base = dict(num_blocks=2, model_dim=16, tokens_per_frame=16, num_frames=2,
                num_steps=8, seed=7)
    base.update(overrides)
    return ModelConfig(**base)


class TestFractionGrid:
    def test_default_bounds(self):
        grid = fraction_grid(0.1, 0.4)
        assert grid == pytest.approx([0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4])

    def test_degenerate_bounds(self):
        assert fraction_grid(0.2, 0.2) == [0.2]

    def test_calib_steps_cover_thirds(self):
        assert default_calib_steps(30) == [0, 10, 20]
        assert default_calib_steps(8) == [0, 2, 5]


class TestCalibrate:
    def test_huge_delta_accepts_max_fraction(self):
        cfg = tiny()
        model = init_model(cfg)
        sched = SchedulerConfig(delta=1e9, search_window=4)
        calib = dws_calibrate(model, cfg, sched, ratio_bounds=(0.1, 0.4))
        expected_n = math.ceil(cfg.model_dim * 0.6)
        for sw in calib.sliced.values():
            assert sw.n == expected_n

    def test_zero_delta_rejects_everything(self):
        cfg = tiny()
        model = init_model(cfg)
        sched = SchedulerConfig(delta=0.0, search_window=4)
        calib = dws_calibrate(model, cfg, sched)
        for sw in calib.sliced.values():
            assert sw.n == cfg.model_dim
        # With nothing accepted, pruned cells fall back to full compute.
        letters = {l for row in calib.cache_map.grid.values() for l in row}
        assert "P" not in letters

    def test_final_n_matches_exhaustive_oracle(self, tiny_calibration, tiny_cfg, tiny_model):
        sched, calib = tiny_calibration
        m = tiny_cfg.model_dim
        fracs = fraction_grid(0.1, 0.4)
        n_candidates = sorted({math.ceil(m * (1 - f)) for f in fracs})
        # Re-capture the baseline inputs independently of the calibration.
        from unicp.dws import _CaptureExecutor
        cap = _CaptureExecutor(tiny_model, default_calib_steps(tiny_cfg.num_steps))
        denoise_run(tiny_cfg, cap)
        for (block, kind), sw in calib.sliced.items():
            w = attention_weights_for(tiny_model[block], kind)
            per_step = cap.captured[(block, kind)]
            x_by_step = {s: per_step[s][0] for s in per_step}
            o_by_step = {s: per_step[s][1] for s in per_step}
            oracle_n = exhaustive_n_sweep(x_by_step, o_by_step, w.w_q, w.w_k,
                                          w.w_v, w.w_o, sched.delta, n_candidates)
            assert sw.n == oracle_n, (block, kind)

    def test_records_mark_acceptance_against_threshold(self, tiny_calibration):
        sched, calib = tiny_calibration
        assert calib.records
        for rec in calib.records:
            assert rec.accepted == (rec.measured_error <= sched.delta)

    def test_threshold_soundness_at_calibration_steps(self, tiny_calibration, tiny_cfg, tiny_model):
        # Post-hoc recomputation: the final sliced weights stay within delta
        # of full compute at every calibration step.
        from unicp.dws import _CaptureExecutor
        from unicp.pcas import unit_attention_sliced
        sched, calib = tiny_calibration
        cap = _CaptureExecutor(tiny_model, default_calib_steps(tiny_cfg.num_steps))
        denoise_run(tiny_cfg, cap)
        for (block, kind), sw in calib.sliced.items():
            if sw.n == tiny_cfg.model_dim:
                continue
            w = attention_weights_for(tiny_model[block], kind)
            for step, (x_stack, o_full) in cap.captured[(block, kind)].items():
                o_sliced, _, _ = unit_attention_sliced(x_stack, w, sw)
                assert rel_l2(o_sliced, o_full) <= sched.delta

    def test_pruned_fraction_bounds(self, tiny_calibration, tiny_cfg):
        _, calib = tiny_calibration
        m = tiny_cfg.model_dim
        for sw in calib.sliced.values():
            fraction = 1 - sw.n / m
            assert 0.0 <= fraction <= 0.4 + 1e-12

    def test_determinism(self):
        cfg = tiny()
        model = init_model(cfg)
        sched = SchedulerConfig(delta=0.075, search_window=4)
        a = dws_calibrate(model, cfg, sched)
        b = dws_calibrate(model, cfg, sched)
        assert {k: sw.n for k, sw in a.sliced.items()} == {k: sw.n for k, sw in b.sliced.items()}
        assert cache_map_export(a.cache_map) == cache_map_export(b.cache_map)
        for unit in a.sliced:
            assert np.array_equal(a.sliced[unit].wq_sliced, b.sliced[unit].wq_sliced)

    def test_threads_do_not_change_results(self):
        cfg = tiny()
        model = init_model(cfg)
        sched = SchedulerConfig(delta=0.075, search_window=4)
        serial = dws_calibrate(model, cfg, sched, threads=1)
        threaded = dws_calibrate(model, cfg, sched, threads=4)
        assert cache_map_export(serial.cache_map) == cache_map_export(threaded.cache_map)
        for unit in serial.sliced:
            assert np.array_equal(serial.sliced[unit].wq_sliced,
                                  threaded.sliced[unit].wq_sliced)

    def test_bad_ratio_bounds_rejected(self):
        cfg = tiny()
        model = init_model(cfg)
        sched = SchedulerConfig(delta=0.1)
        with pytest.raises(ValueError):
            dws_calibrate(model, cfg, sched, ratio_bounds=(0.5, 0.4))
        with pytest.raises(ValueError):
            dws_calibrate(model, cfg, sched, aggregation="median")

    def test_smallest_aggregation_is_at_most_conservative(self):
        cfg = tiny()
        model = init_model(cfg)
        sched = SchedulerConfig(delta=0.125, search_window=4)
        cons = dws_calibrate(model, cfg, sched, aggregation="conservative")
        small = dws_calibrate(model, cfg, sched, aggregation="smallest")
        for unit in cons.sliced:
            assert small.sliced[unit].n <= cons.sliced[unit].n


class TestDispatch:
    def test_all_full_grid_step_equals_baseline_step(self, tiny_cfg, tiny_model):
        cmap = CacheMap(model_header=tiny_cfg.header(), delta=0.0, window=4,
                        ratio_lo=0.1, ratio_hi=0.4, mode="replay", aggregation="conservative",
                        grid={(b, k): ["F"] * tiny_cfg.num_steps
                              for b in range(tiny_cfg.num_blocks) for k in ATTENTION_KINDS})
        replay = ReplayDispatcher(tiny_model, cmap, None)
        baseline = BaselineExecutor(tiny_model)
        rng = np.random.default_rng(0)
        h = rng.standard_normal((tiny_cfg.num_frames, tiny_cfg.tokens_per_frame,
                                 tiny_cfg.model_dim))
        out_replay = forward_blocks(replay, h.copy(), 0, RunTrace())
        out_base = forward_blocks(baseline, h.copy(), 0, RunTrace())
        assert np.array_equal(out_replay, out_base)

    def test_all_pruned_full_width_grid_is_bitwise_baseline(self, tiny_cfg, tiny_model):
        from unicp.pcas import compute_basis, slice_weights
        m = tiny_cfg.model_dim
        rng = np.random.default_rng(1)
        basis = compute_basis([rng.standard_normal((m + 4, m))])
        sliced = {(b, k): slice_weights(attention_weights_for(tiny_model[b], k), basis, m)
                  for b in range(tiny_cfg.num_blocks) for k in ATTENTION_KINDS}
        cmap = CacheMap(model_header=tiny_cfg.header(), delta=0.0, window=4,
                        ratio_lo=0.0, ratio_hi=0.0, mode="replay", aggregation="conservative",
                        grid={unit: ["P"] * tiny_cfg.num_steps for unit in sliced},
                        final_n={unit: m for unit in sliced})
        state_replay, trace_replay = denoise_run(tiny_cfg, ReplayDispatcher(tiny_model, cmap, sliced))
        state_base, trace_base = denoise_run(tiny_cfg, BaselineExecutor(tiny_model))
        assert np.array_equal(state_replay, state_base)
        # Nominal accounting via the sliced formula equals full at n = m.
        assert trace_replay.macs_total == trace_base.macs_total

    def test_pruned_cell_without_sliced_weights_errors(self, tiny_cfg, tiny_model):
        cmap = CacheMap(model_header=tiny_cfg.header(), delta=0.0, window=4,
                        ratio_lo=0.1, ratio_hi=0.4, mode="replay", aggregation="conservative",
                        grid={(b, k): ["P"] * tiny_cfg.num_steps
                              for b in range(tiny_cfg.num_blocks) for k in ATTENTION_KINDS})
        with pytest.raises(MissingArtifactError):
            denoise_run(tiny_cfg, ReplayDispatcher(tiny_model, cmap, None))

    def test_reuse_before_full_compute_errors(self, tiny_cfg, tiny_model):
        grid = {(b, k): ["F"] * tiny_cfg.num_steps
                for b in range(tiny_cfg.num_blocks) for k in ATTENTION_KINDS}
        grid[(0, "spatial")] = ["O"] + ["F"] * (tiny_cfg.num_steps - 1)
        cmap = CacheMap(model_header=tiny_cfg.header(), delta=0.0, window=4,
                        ratio_lo=0.1, ratio_hi=0.4, mode="replay", aggregation="conservative",
                        grid=grid)
        with pytest.raises(MissingArtifactError):
            denoise_run(tiny_cfg, ReplayDispatcher(tiny_model, cmap, None))

    def test_map_reuse_cells_recompute_value_path(self, tiny_cfg, tiny_model):
        # Hand-built grid: full compute at step 0, map reuse afterwards. The
        # reused map comes from step 0 while V/output projections track the
        # current input; MACs follow the map-reuse formula.
        grid = {(b, k): ["F"] + ["M"] * (tiny_cfg.num_steps - 1)
                for b in range(tiny_cfg.num_blocks) for k in ATTENTION_KINDS}
        cmap = CacheMap(model_header=tiny_cfg.header(), delta=0.0, window=4,
                        ratio_lo=0.1, ratio_hi=0.4, mode="replay", aggregation="conservative",
                        grid=grid)
        state, trace = denoise_run(tiny_cfg, ReplayDispatcher(tiny_model, cmap, None))
        f, s, m = tiny_cfg.num_frames, tiny_cfg.tokens_per_frame, tiny_cfg.model_dim
        for row in trace.attention_rows():
            if row.decision == "reuse_map":
                inst, seq = (f, s) if row.kind == "spatial" else (s, f)
                assert row.macs == inst * macs_map_reuse(seq, m)
        assert any(r.decision == "reuse_map" for r in trace.attention_rows())

    def test_online_replay_equivalence(self, tiny_calibration, tiny_cfg, tiny_model):
        sched, calib = tiny_calibration
        online = OnlineDispatcher(tiny_model, tiny_cfg, sched, calib.sliced)
        state_online, trace_online = denoise_run(tiny_cfg, online)
        assert np.array_equal(state_online, calib.population_state)

        replay = ReplayDispatcher(tiny_model, calib.cache_map, calib.sliced)
        state_replay, trace_replay = denoise_run(tiny_cfg, replay)
        assert np.array_equal(state_replay, state_online)
        assert trace_replay.macs_total == trace_online.macs_total
        online_letters = [r.decision for r in trace_online.attention_rows()]
        replay_letters = [r.decision for r in trace_replay.attention_rows()]
        assert online_letters == replay_letters

    def test_mac_recount_from_trace(self, tiny_calibration, tiny_cfg):
        # Independent recount: every row's MACs match the executing path's
        # formula for its unit geometry.
        _, calib = tiny_calibration
        f, s, m = tiny_cfg.num_frames, tiny_cfg.tokens_per_frame, tiny_cfg.model_dim
        per_kind = {
            "spatial": (f, s),
            "temporal": (s, f),
        }
        final_n = {unit: sw.n for unit, sw in calib.sliced.items()}
        total = 0
        for row in calib.population_trace.rows:
            if row.kind == "mlp":
                expected = macs_mlp(f * s, m)
            else:
                inst, seq = per_kind[row.kind]
                if row.decision == "full":
                    expected = inst * macs_full_attention(seq, m)
                elif row.decision == "reuse_output":
                    expected = 0
                elif row.decision == "reuse_map":
                    expected = inst * macs_map_reuse(seq, m)
                else:
                    expected = inst * macs_sliced(seq, m, final_n[(row.block, row.kind)])
            assert row.macs == expected, row
            total += expected
        assert total == calib.population_trace.macs_total

    def test_grid_tallies_match_trace_decisions(self, tiny_calibration):
        _, calib = tiny_calibration
        from collections import Counter
        letter_for = {"full": "F", "reuse_output": "O", "reuse_map": "M", "pruned": "P"}
        trace_tally = Counter(letter_for[r.decision]
                              for r in calib.population_trace.attention_rows())
        grid_tally = Counter(l for row in calib.cache_map.grid.values() for l in row)
        assert trace_tally == grid_tally

    def test_grid_covers_every_unit_and_step(self, tiny_calibration, tiny_cfg):
        _, calib = tiny_calibration
        assert set(calib.cache_map.grid) == {(b, k) for b in range(tiny_cfg.num_blocks)
                                             for k in ATTENTION_KINDS}
        for letters in calib.cache_map.grid.values():
            assert len(letters) == tiny_cfg.num_steps

    def test_conservative_priority_no_cell_both_cached_and_pruned(self, tiny_calibration):
        # Grid letters form a partition; a cell is exactly one of F/O/M/P.
        _, calib = tiny_calibration
        for letters in calib.cache_map.grid.values():
            assert all(l in "FOMP" for l in letters)


class TestCacheMapDocument:
    def test_round_trip_byte_identical(self, tiny_calibration):
        _, calib = tiny_calibration
        text = cache_map_export(calib.cache_map)
        parsed = cache_map_parse(text)
        assert cache_map_export(parsed) == text
        assert parsed.grid == calib.cache_map.grid
        assert parsed.final_n == calib.cache_map.final_n
        assert parsed.delta == calib.cache_map.delta

    def test_all_full_map_document(self, tiny_cfg):
        cmap = CacheMap(model_header=tiny_cfg.header(), delta=0.0, window=4,
                        ratio_lo=0.1, ratio_hi=0.4, mode="online", aggregation="conservative",
                        grid={(0, "spatial"): ["F"] * 4})
        text = cache_map_export(cmap)
        assert "FFFF" in text
        parsed = cache_map_parse(text)
        assert parsed.final_n == {}

    def test_rejects_unknown_letters(self, tiny_cfg):
        cmap = CacheMap(model_header=tiny_cfg.header(), delta=0.0, window=4,
                        ratio_lo=0.1, ratio_hi=0.4, mode="online", aggregation="conservative",
                        grid={(0, "spatial"): ["F", "X"]})
        text = cache_map_export(cmap)
        with pytest.raises(ValueError):
            cache_map_parse(text)

    def test_rejects_non_map_text(self):
        with pytest.raises(ValueError):
            cache_map_parse("hello\n")
