"""Rate-policy state machine and VO filtering tests."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmesh.vo import (
    FilterSpec,
    RatePolicyState,
    VoCore,
    VoReport,
    filter_report,
    on_input_frame,
    vo_config_from_kv,
)
from gridmesh.kv import parse_kv
from gridmesh.wire import GpsTimestamp, Phasor, PmuDataFrame, encode_frame

TB = 1_000_000


def vframe(soc, frac, vmag, n_extra=0):
    phasors = (Phasor(vmag, 0.0),) + tuple(Phasor(0.5, 0.1) for _ in range(n_extra))
    return PmuDataFrame(idcode=71, timestamp=GpsTimestamp(soc, frac),
                        phasors=phasors, freq=50.0, rocof=0.0)


def run_sequence(samples, state=None):
    """samples: (soc, frac, vmag) triples -> (final state, decisions)."""
    state = state or RatePolicyState()
    decisions = []
    for soc, frac, vmag in samples:
        state, decision = on_input_frame(state, vframe(soc, frac, vmag))
        decisions.append(decision)
    return state, decisions


class TestEscalation:
    def test_step_above_threshold_jumps_to_top(self):
        state, decisions = run_sequence([
            (0, 0, 1.0),
            (0, 20_000, 1.025),   # +2.5 %
        ])
        assert state.current_rr == 50
        assert decisions[-1].escalated
        assert decisions[-1].transitions == ((1, 50),)

    def test_escalating_frame_is_itself_emitted(self):
        _, decisions = run_sequence([
            (0, 0, 1.0),
            (0, 520_000, 1.05),   # mid-second, not on the 1 fps grid
        ])
        assert decisions[-1].emit

    def test_drop_also_escalates(self):
        state, _ = run_sequence([(0, 0, 1.0), (0, 20_000, 0.97)])
        assert state.current_rr == 50

    def test_exactly_at_threshold_does_not_escalate(self):
        # 0.5 is exactly representable, so the ratio is exactly the threshold
        state = RatePolicyState(raise_threshold=0.5, lower_threshold=0.001)
        state, _ = on_input_frame(state, vframe(0, 0, 1.0))
        state, decision = on_input_frame(state, vframe(0, 20_000, 1.5))
        assert state.current_rr == 1
        assert not decision.escalated

    def test_small_step_stays_low(self):
        state, decisions = run_sequence([(0, 0, 1.0), (0, 20_000, 1.0)])
        assert state.current_rr == 1
        assert not decisions[-1].emit  # frac 20000 not on the 1 fps grid


class TestStepDown:
    def test_quiet_boundary_steps_down_one_rung(self):
        state = RatePolicyState(current_rr=50, last_input_vrms=1.0,
                                last_output_vrms=1.0, last_second_boundary=0)
        state, decision = on_input_frame(state, vframe(1, 0, 1.0005))
        assert state.current_rr == 25
        assert decision.stepped_down
        assert decision.transitions == ((50, 25),)

    def test_three_quiet_boundaries_walk_down_the_ladder(self):
        samples = [(0, 0, 1.0), (0, 100_000, 1.05)]          # escalate
        samples += [(0, frac, 1.05) for frac in range(120_000, TB, 20_000)]
        samples += [(soc, frac, 1.05)
                    for soc in (1, 2, 3)
                    for frac in range(0, TB, 20_000)]
        state, _ = run_sequence(samples)
        assert state.current_rr == 1

    def test_busy_boundary_holds_rate(self):
        state = RatePolicyState(current_rr=25, last_input_vrms=1.0,
                                last_output_vrms=1.0, last_second_boundary=0)
        state, decision = on_input_frame(state, vframe(1, 0, 1.005))  # 0.5 %
        assert state.current_rr == 25
        assert not decision.stepped_down

    def test_exactly_at_lower_threshold_holds(self):
        # exact-representable boundary: change ratio is exactly the threshold
        state = RatePolicyState(current_rr=25, last_input_vrms=1.5,
                                last_output_vrms=1.0, last_second_boundary=0,
                                raise_threshold=0.75, lower_threshold=0.5)
        state, decision = on_input_frame(state, vframe(1, 0, 1.5))
        assert state.current_rr == 25
        assert not decision.stepped_down

    def test_one_step_per_boundary_even_after_gap(self):
        state = RatePolicyState(current_rr=50, last_input_vrms=1.0,
                                last_output_vrms=1.0, last_second_boundary=0)
        state, _ = on_input_frame(state, vframe(5, 0, 1.0))  # 5 s silence
        assert state.current_rr == 25

    def test_bottom_of_ladder_stays(self):
        state = RatePolicyState(current_rr=1, last_input_vrms=1.0,
                                last_output_vrms=1.0, last_second_boundary=0)
        state, decision = on_input_frame(state, vframe(1, 0, 1.0))
        assert state.current_rr == 1
        assert not decision.stepped_down


class TestEmissionAlignment:
    @pytest.mark.parametrize("rr,expected", [(1, 1), (10, 10), (25, 25), (50, 50)])
    def test_rate_bound_over_a_whole_second(self, rr, expected):
        state = RatePolicyState(current_rr=rr, last_input_vrms=1.0,
                                last_output_vrms=1.0, last_second_boundary=3)
        emitted = 0
        for frac in range(0, TB, 20_000):
            state, decision = on_input_frame(state, vframe(3, frac, 1.0))
            emitted += decision.emit
        assert emitted == expected

    def test_emitted_frames_sit_on_the_rate_grid(self):
        state = RatePolicyState(current_rr=25, last_input_vrms=1.0,
                                last_output_vrms=1.0, last_second_boundary=3)
        for frac in range(0, TB, 20_000):
            state, decision = on_input_frame(state, vframe(3, frac, 1.0))
            if decision.emit:
                assert frac % (TB // 25) == 0

    def test_first_frame_initializes_and_emits(self):
        state, decisions = run_sequence([(7, 0, 0.95)])
        assert decisions[0].emit
        assert state.last_input_vrms == 0.95
        assert state.last_output_vrms == 0.95
        assert state.last_second_boundary == 7


class TestDegenerateValues:
    def test_near_zero_reference_skips_relative_tests(self):
        state, decisions = run_sequence([(0, 0, 0.0), (0, 20_000, 1.0)])
        assert state.current_rr == 1  # no escalation off a zero reference
        state, decisions = run_sequence([(0, 0, 1e-12), (1, 0, 2e-12)])
        assert state.current_rr == 1


class TestLadderDiscipline:
    @settings(max_examples=120, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1),
                              st.floats(0.9, 1.1, allow_nan=False)),
                    min_size=1, max_size=300))
    def test_transitions_only_escalate_to_top_or_step_down(self, moves):
        state = RatePolicyState()
        soc, frac = 0, 0
        ladder = state.rr_ladder
        for advance_soc, vmag in moves:
            if advance_soc:
                soc, frac = soc + 1, 0
            else:
                frac += 20_000
                if frac >= TB:
                    soc, frac = soc + 1, 0
            state, decision = on_input_frame(state, vframe(soc, frac, vmag))
            for old, new in decision.transitions:
                if new == ladder[-1]:
                    assert old in ladder[:-1]
                else:
                    assert ladder.index(old) - ladder.index(new) == 1
            assert state.current_rr in ladder

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.9, 1.1, allow_nan=False),
                    min_size=1, max_size=200))
    def test_emissions_align_to_grid_for_aligned_streams(self, vmags):
        state = RatePolicyState()
        for k, vmag in enumerate(vmags):
            soc, frac = divmod(k * 20_000, TB)
            state, decision = on_input_frame(state, vframe(soc, frac, vmag))
            if decision.emit:
                assert frac % (TB // decision.rr) == 0


class TestPaperScenarioTrace:
    def test_steady_step_quiet_yields_50_25_10_1(self):
        samples = []
        for k in range(25 * 50):  # 25 s of 20 ms frames
            soc, frac = divmod(k * 20_000, TB)
            t = k * 0.02
            vmag = 0.898 if t < 20.9 else 0.947  # 5.4 % step at 20.9 s
            samples.append((soc, frac, vmag))
        state = RatePolicyState()
        trace = []
        for soc, frac, vmag in samples:
            state, decision = on_input_frame(state, vframe(soc, frac, vmag))
            for old, new in decision.transitions:
                trace.append((soc + frac / TB, old, new))
        assert trace == [
            (20.90, 1, 50),
            (21.00, 50, 25),
            (22.00, 25, 10),
            (23.00, 10, 1),
        ]


class TestFilterReport:
    def test_full_spec_carries_everything(self):
        report = filter_report(vframe(1, 0, 1.0), FilterSpec.full(), "vo-71",
                               ["V71"], 50)
        doc = report.to_dict()
        assert doc["freq"] == 50.0
        assert doc["rocof"] == 0.0
        assert doc["status"] == 0
        assert set(doc["phasors"]) == {"V71"}

    def test_phasors_only_drops_optional_fields(self):
        report = filter_report(vframe(1, 0, 1.0), FilterSpec.phasors_only(),
                               "vo-71", ["V71"], 1)
        doc = json.loads(report.to_json())
        assert "freq" not in doc
        assert "rocof" not in doc
        assert "status" not in doc
        assert doc["phasors"]["V71"]["mag"] == 1.0

    def test_six_phasor_frame_keeps_all_named_entries(self):
        frame = vframe(1, 0, 1.0, n_extra=5)
        names = [f"ch{i}" for i in range(6)]
        report = filter_report(frame, FilterSpec.phasors_only(), "vo-71",
                               names, 1)
        assert list(report.phasors) == names

    def test_phasors_cannot_be_excluded(self):
        spec = FilterSpec(frozenset({"freq"}))
        assert "phasors" in spec.include

    def test_report_json_round_trip(self):
        report = filter_report(vframe(3, 40_000, 0.97), FilterSpec.full(),
                               "vo-31", ["V31"], 10)
        again = VoReport.from_json(report.to_json())
        assert again == report

    def test_malformed_report_rejected(self):
        with pytest.raises(ValueError):
            VoReport.from_json("{\"vo_id\": \"x\"}")
        with pytest.raises(ValueError):
            VoReport.from_json("not json")


class TestVoCore:
    def test_out_of_order_frames_dropped_and_counted(self):
        core = VoCore("vo-71", 71)
        core.ingest_frame(vframe(1, 0, 1.0))
        core.ingest_frame(vframe(0, 980_000, 1.0))   # older
        core.ingest_frame(vframe(1, 0, 1.0))          # duplicate
        assert core.counters.order_dropped == 2
        assert core.counters.frames_received == 3

    def test_crc_dropped_frames_never_reach_policy(self):
        core = VoCore("vo-71", 71)
        data = bytearray(encode_frame(vframe(0, 0, 1.0)))
        data[-1] ^= 0x01
        assert core.ingest_bytes(bytes(data)) is None
        assert core.counters.crc_dropped == 1
        assert core.state.last_input_vrms is None

    def test_latest_report_tracks_most_recent_emission(self):
        core = VoCore("vo-71", 71)
        assert core.latest_report() is None
        for soc in range(3):
            core.ingest_frame(vframe(soc, 0, 1.0))
        latest = core.latest_report()
        assert latest.timestamp == GpsTimestamp(2, 0)

    def test_latest_report_refilters_per_query(self):
        core = VoCore("vo-71", 71)
        core.ingest_frame(vframe(0, 0, 1.0))
        full = core.latest_report()
        trimmed = core.latest_report(FilterSpec.phasors_only())
        assert full.freq == 50.0
        assert trimmed.freq is None

    def test_fixed_rr_bypasses_policy(self):
        core = VoCore("vo-71", 71, fixed_rr=50)
        emitted = [core.ingest_frame(vframe(0, frac, 1.0)) is not None
                   for frac in range(0, TB, 20_000)]
        assert all(emitted)
        assert core.rate_trace == []

    def test_emitted_rate_trace_on_paper_scenario(self):
        core = VoCore("vo-71", 71)
        for k in range(25 * 50):
            soc, frac = divmod(k * 20_000, TB)
            vmag = 0.898 if k * 0.02 < 20.9 else 0.947
            core.ingest_frame(vframe(soc, frac, vmag))
        assert [(old, new) for _, old, new in core.rate_trace] == \
               [(1, 50), (50, 25), (25, 10), (10, 1)]


def test_vo_config_parsing_and_env_override():
    doc = parse_kv(
        "gridmesh/vo v1\nvo_id = vo-71\nnode = 71\n"
        "endpoint = http://127.0.0.1:9000/report\n"
        "raise_threshold = 0.02\nlower_threshold = 0.001\n"
        "ladder = 1 10 25 50\nfields = phasors\n"
    )
    config = vo_config_from_kv(doc, environ={})
    assert config.filter_spec == FilterSpec.phasors_only()
    assert config.rr_ladder == (1, 10, 25, 50)
    over = vo_config_from_kv(
        doc, environ={"GRIDMESH_VO_ENDPOINT": "http://other:1/report"}
    )
    assert over.endpoint == "http://other:1/report"
