from __future__ import annotations

import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marble.agents.backends import ScriptedBackend, TransportError
from marble.agents.slm import (
    DEFAULT_TEMPLATES,
    ParseError,
    PromptTemplate,
    SlmAgent,
    build_prompt,
    calibrate,
    parse_response,
    parse_response_detailed,
    slm_evaluate,
)
from marble.core import AgentId, EngineConfig, Severity
from marble.features import FeatureValue, format_features, project
from marble.features import AccidentRecord


class TestBuildPrompt:
    def test_concatenation_order(self):
        template = PromptTemplate(context="C", instructions="I", query="severity confidence reasoning Q")
        assert build_prompt(template, "F") == "C\n\nI\n\nF\n\nseverity confidence reasoning Q"

    def test_empty_feature_block_keeps_its_slot(self):
        template = PromptTemplate(context="C", instructions="I", query="severity confidence reasoning Q")
        assert build_prompt(template, "") == "C\n\nI\n\n\n\nseverity confidence reasoning Q"

    def test_query_must_demand_the_three_keys(self):
        with pytest.raises(ValueError, match="severity"):
            PromptTemplate(context="C", instructions="I", query="just answer")

    def test_environmental_golden_prompt(self):
        # Golden fixture, recorded once and reviewed by hand.
        subset = {
            "Weather": FeatureValue.categorical("Rainy"),
            "Visibility": FeatureValue.numeric(0.5, "miles"),
        }
        prompt = build_prompt(DEFAULT_TEMPLATES[AgentId.ENVIRONMENTAL], format_features(subset))
        expected_block = "Weather: Rainy\nVisibility: 0.5 miles"
        assert f"\n\n{expected_block}\n\n" in prompt
        assert prompt.startswith("You are a road safety analyst specializing in environmental conditions")
        assert prompt.rstrip().endswith('"reasoning": "<one or two sentences>"}.')
        assert prompt == build_prompt(
            DEFAULT_TEMPLATES[AgentId.ENVIRONMENTAL], format_features(subset)
        )


class TestParseResponse:
    def test_embedded_json(self):
        raw = 'I think {"severity": 4, "confidence": 0.82, "reasoning": "poor visibility"}'
        assert parse_response(raw) == (Severity(4), 0.82, "poor visibility")

    def test_labeled_number_fallback(self):
        assert parse_response("Severity: 3\nConfidence: 0.55") == (Severity(3), 0.55, "")

    def test_plain_prose_fails(self):
        with pytest.raises(ParseError):
            parse_response("the accident is bad")

    def test_out_of_range_severity_fails(self):
        with pytest.raises(ParseError):
            parse_response('{"severity": 7, "confidence": 0.9, "reasoning": "x"}')

    def test_string_coercions(self):
        raw = '{"severity": "2", "confidence": "0.4", "reasoning": "ok"}'
        assert parse_response(raw) == (Severity(2), 0.4, "ok")

    def test_confidence_clamped_and_flagged(self):
        parsed = parse_response_detailed('{"severity": 1, "confidence": 1.4, "reasoning": "x"}')
        assert parsed.confidence == 1.0
        assert parsed.clamped

    def test_first_valid_object_wins(self):
        raw = '{"severity": 9} then {"severity": 2, "confidence": 0.6} and {"severity": 3, "confidence": 0.9}'
        severity, confidence, _ = parse_response(raw)
        assert int(severity) == 2 and confidence == 0.6

    def test_missing_confidence_defaults_to_neutral(self):
        severity, confidence, _ = parse_response('{"severity": 4, "reasoning": "r"}')
        assert int(severity) == 4 and confidence == 0.5

    def test_nested_json_object(self):
        raw = '{"result": {"severity": 3, "confidence": 0.7, "reasoning": "nested"}}'
        severity, confidence, reasoning = parse_response(raw)
        assert (int(severity), confidence, reasoning) == (3, 0.7, "nested")


class TestCalibrate:
    def test_high_gate_rare(self, cfg):
        assert calibrate(0.85, Severity(4), cfg) == pytest.approx(0.95)

    def test_common_class_unchanged(self, cfg):
        assert calibrate(0.5, Severity(2), cfg) == 0.5
        assert calibrate(0.95, Severity(3), cfg) == 0.95

    def test_cap_binds(self, cfg):
        assert calibrate(0.95, Severity(1), cfg) == pytest.approx(0.98)

    def test_mid_gate_rare(self, cfg):
        assert calibrate(0.7, Severity(1), cfg) == pytest.approx(0.75)

    def test_gates_are_strict(self, cfg):
        assert calibrate(0.6, Severity(4), cfg) == 0.6
        assert calibrate(0.8, Severity(4), cfg) == pytest.approx(0.85)  # mid branch at the high gate

    @given(
        raw=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        klass=st.sampled_from([1, 2, 3, 4]),
    )
    @settings(max_examples=300)
    def test_boost_bounds(self, raw, klass):
        # Gated rare predictions are boosted but capped at 0.98; everything
        # else passes through untouched (including raw values above the cap,
        # which only the boost branches are subject to).
        cfg = EngineConfig()
        value = calibrate(raw, Severity(klass), cfg)
        if Severity(klass).is_rare and raw > 0.6:
            assert value <= 0.98
            assert value >= min(raw, 0.98)
        else:
            assert value == raw

    @given(
        pair=st.tuples(
            st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
            st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        ),
        klass=st.sampled_from([1, 2, 3, 4]),
    )
    @settings(max_examples=300)
    def test_monotone_in_raw_confidence(self, pair, klass):
        cfg = EngineConfig()
        low, high = sorted(pair)
        assert calibrate(low, Severity(klass), cfg) <= calibrate(high, Severity(klass), cfg)


def env_features() -> dict[str, FeatureValue]:
    record = AccidentRecord(
        id="x", features={"Weather Conditions": FeatureValue.categorical("Rain")}
    )
    return project(record, AgentId.ENVIRONMENTAL)


class TestSlmEvaluate:
    def test_valid_rare_payload_gets_calibrated(self, cfg):
        backend = ScriptedBackend('{"severity": 4, "confidence": 0.82, "reasoning": "bad"}')
        output = slm_evaluate(
            AgentId.ENVIRONMENTAL, env_features(), DEFAULT_TEMPLATES[AgentId.ENVIRONMENTAL], backend, cfg
        )
        assert not output.failed
        assert int(output.prediction) == 4
        assert output.raw_confidence == 0.82
        assert output.confidence == pytest.approx(0.92)

    def test_backend_timeout_marks_failed(self, cfg):
        fast_cfg = dataclasses.replace(cfg, agent_timeout_ms=100)
        backend = ScriptedBackend('{"severity": 2, "confidence": 0.7, "reasoning": "x"}', delay_ms=400)
        output = slm_evaluate(
            AgentId.SPATIAL, {}, DEFAULT_TEMPLATES[AgentId.SPATIAL], backend, fast_cfg
        )
        assert output.failed and output.failure_kind == "timeout"
        assert output.confidence == 0.0

    def test_unparseable_prose_marks_failed(self, cfg):
        backend = ScriptedBackend("no structure here")
        output = slm_evaluate(
            AgentId.TEMPORAL, {}, DEFAULT_TEMPLATES[AgentId.TEMPORAL], backend, cfg
        )
        assert output.failed and output.failure_kind == "parse"

    def test_transport_error_marks_failed(self, cfg):
        backend = ScriptedBackend("", error=TransportError("boom", status=500))
        output = slm_evaluate(
            AgentId.TEMPORAL, {}, DEFAULT_TEMPLATES[AgentId.TEMPORAL], backend, cfg
        )
        assert output.failed and output.failure_kind == "transport"

    def test_scripted_pipeline_is_deterministic(self, cfg):
        agent = SlmAgent(
            AgentId.ENVIRONMENTAL,
            ScriptedBackend('{"severity": 1, "confidence": 0.82, "reasoning": "icy"}'),
            cfg,
        )
        first = agent.evaluate(env_features())
        second = agent.evaluate(env_features())
        assert (first.prediction, first.confidence, first.reasoning) == (
            second.prediction,
            second.confidence,
            second.reasoning,
        )

    def test_rejects_ml_domain(self, cfg):
        with pytest.raises(ValueError):
            slm_evaluate(AgentId.ML, {}, DEFAULT_TEMPLATES[AgentId.TEMPORAL], ScriptedBackend("x"), cfg)
