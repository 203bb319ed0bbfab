from __future__ import annotations

import dataclasses
import json
import time

import pytest

from marble.agents import ScriptedAgent, ScriptedBackend, SlmAgent
from marble.core import AgentId, AgentOutput, CoordinationMode, EngineConfig, Severity
from marble.decision import DecisionSource
from marble.engine import (
    AllAgentsFailedError,
    run_batch,
    run_instance,
    run_instances,
    strip_timings,
)
from marble.features import AccidentRecord, FeatureValue

SLM_KINDS = (AgentId.ENVIRONMENTAL, AgentId.INFRASTRUCTURAL, AgentId.SPATIAL, AgentId.TEMPORAL)


def record(rec_id: str = "r1", label: int | None = None) -> AccidentRecord:
    return AccidentRecord(
        id=rec_id,
        features={"Weather Conditions": FeatureValue.categorical("Rain")},
        label=None if label is None else Severity(label),
    )


def payload(severity: int, confidence: float) -> str:
    return json.dumps({"severity": severity, "confidence": confidence, "reasoning": "scripted"})


def unanimous_agents(cfg: EngineConfig, confidence: float) -> list:
    agents = [ScriptedAgent(AgentId.ML, prediction=3, confidence=confidence)]
    for kind in SLM_KINDS:
        agents.append(SlmAgent(kind, ScriptedBackend(payload(3, confidence)), cfg))
    return agents


class TestRunInstance:
    def test_unanimous_high_confidence_takes_the_override(self, cfg):
        decision, trace = run_instance(record(), unanimous_agents(cfg, 0.9), cfg)
        assert int(decision.prediction) == 3
        assert decision.rule_fired == 1
        assert trace.coordination.override_applied
        assert decision.confidence == pytest.approx(0.9)

    def test_unanimous_moderate_confidence_rides_the_vote(self, cfg):
        decision, trace = run_instance(record(), unanimous_agents(cfg, 0.7), cfg)
        assert int(decision.prediction) == 3
        assert decision.rule_fired == 2
        assert decision.source is DecisionSource.COORDINATOR
        # weighted mean 0.7 plus the 0.05 common-class agreement boost
        assert decision.confidence == pytest.approx(0.75)
        assert not trace.coordination.override_applied

    def test_trace_covers_every_configured_agent(self, cfg):
        _, trace = run_instance(record(), unanimous_agents(cfg, 0.7), cfg)
        assert len(trace.agent_outputs) == 5
        assert [o.agent for o in trace.agent_outputs] == list(AgentId)
        assert set(trace.projections) == set(AgentId)
        assert trace.config_fingerprint == cfg.fingerprint()

    def test_timed_out_agent_is_excluded(self, cfg):
        fast_cfg = dataclasses.replace(cfg, agent_timeout_ms=150)
        agents = [ScriptedAgent(AgentId.ML, prediction=2, confidence=0.6)]
        for kind in SLM_KINDS:
            delay = 500 if kind is AgentId.ENVIRONMENTAL else 0
            agents.append(
                SlmAgent(kind, ScriptedBackend(payload(2, 0.6), delay_ms=delay), fast_cfg)
            )
        decision, trace = run_instance(record(), agents, fast_cfg)
        by_agent = {o.agent: o for o in trace.agent_outputs}
        assert by_agent[AgentId.ENVIRONMENTAL].failed
        assert by_agent[AgentId.ENVIRONMENTAL].failure_kind == "timeout"
        live = [o for o in trace.agent_outputs if not o.failed]
        assert len(live) == 4
        assert int(decision.prediction) == 2

    def test_all_agents_failing_raises_with_trace(self, cfg):
        agents = [ScriptedAgent(kind, lambda features: None) for kind in SLM_KINDS]
        with pytest.raises(AllAgentsFailedError) as err:
            run_instance(record("doomed"), agents, cfg)
        trace = err.value.trace
        assert trace.record_id == "doomed"
        assert trace.decision.abstained
        assert all(o.failed for o in trace.agent_outputs)

    def test_rogue_agent_is_abandoned_at_the_barrier(self, cfg):
        fast_cfg = dataclasses.replace(cfg, agent_timeout_ms=100)

        class SleepyAgent:
            def identity(self):
                return AgentId.SPATIAL

            def evaluate(self, features):
                time.sleep(1.5)
                return AgentOutput(
                    agent=AgentId.SPATIAL, prediction=Severity(1), confidence=0.9
                )

        agents = [ScriptedAgent(AgentId.ML, prediction=2, confidence=0.6), SleepyAgent()]
        start = time.perf_counter()
        decision, trace = run_instance(record(), agents, fast_cfg)
        elapsed = time.perf_counter() - start
        assert elapsed < 1.4  # returned before the rogue agent woke up
        by_agent = {o.agent: o for o in trace.agent_outputs}
        assert by_agent[AgentId.SPATIAL].failed
        assert by_agent[AgentId.SPATIAL].failure_kind == "timeout"
        assert int(decision.prediction) == 2

    def test_stage3_starts_after_every_surviving_agent(self, cfg):
        _, trace = run_instance(record(), unanimous_agents(cfg, 0.7), cfg)
        completed = trace.timings["agent_completed_ms"]
        live = [o.agent.value for o in trace.agent_outputs if not o.failed]
        assert trace.timings["stage3_start_ms"] >= max(completed[a] for a in live)

    def test_duplicate_agent_identities_rejected(self, cfg):
        agents = [
            ScriptedAgent(AgentId.SPATIAL, prediction=1, confidence=0.5),
            ScriptedAgent(AgentId.SPATIAL, prediction=2, confidence=0.5),
        ]
        with pytest.raises(ValueError, match="distinct"):
            run_instance(record(), agents, cfg)

    def test_llm_mode_requires_backend(self, cfg):
        llm_cfg = dataclasses.replace(cfg, coordination_mode=CoordinationMode.LLM_BASED)
        with pytest.raises(ValueError, match="coordination backend"):
            run_instance(record(), unanimous_agents(cfg, 0.7), llm_cfg)


def poisoned_agents(cfg: EngineConfig) -> list:
    # Agents that fail only for records carrying the "poison" token.
    def ml_responder(features):
        if features["Weather Conditions"].text == "poison":
            return None
        return 2, 0.6

    script = {
        ": poison": "cannot comply",
        "": payload(2, 0.6),
    }
    agents = [ScriptedAgent(AgentId.ML, ml_responder)]
    for kind in SLM_KINDS:
        agents.append(SlmAgent(kind, ScriptedBackend(dict(script)), cfg))
    return agents


def weather_record(rec_id: str, token: str) -> AccidentRecord:
    # One feature per SLM domain so every agent sees the token.
    names = ("Weather Conditions", "Day of Week", "Road Type", "Point of Impact")
    return AccidentRecord(
        id=rec_id,
        features={name: FeatureValue.categorical(token) for name in names},
        label=Severity(2),
    )


class TestRunBatch:
    def test_order_preserved_under_parallelism(self, cfg, tmp_path):
        records = [record(f"r{i}") for i in range(10)]
        sink = tmp_path / "trace.jsonl"
        decisions = run_batch(
            records, unanimous_agents(cfg, 0.7), cfg, sink, max_workers=4
        )
        assert len(decisions) == 10
        lines = sink.read_text(encoding="utf-8").splitlines()
        assert [json.loads(line)["record_id"] for line in lines] == [f"r{i}" for i in range(10)]

    def test_unwritable_sink_fails_before_processing(self, cfg, tmp_path):
        calls = {"n": 0}

        def counting(features):
            calls["n"] += 1
            return 2, 0.6

        agents = [ScriptedAgent(AgentId.ML, counting)]
        with pytest.raises(OSError):
            run_batch([record()], agents, cfg, tmp_path / "absent-dir" / "trace.jsonl")
        assert calls["n"] == 0

    def test_all_failed_record_becomes_abstention(self, cfg, tmp_path):
        records = [weather_record(f"w{i}", "Rain") for i in range(4)]
        records.insert(2, weather_record("bad", "poison"))
        sink = tmp_path / "trace.jsonl"
        decisions = run_batch(records, poisoned_agents(cfg), cfg, sink)
        assert len(decisions) == 5
        assert decisions[2].abstained
        assert sum(1 for d in decisions if not d.abstained) == 4
        lines = sink.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 5
        abstained_line = json.loads(lines[2])
        assert abstained_line["decision"]["prediction"] is None
        assert abstained_line["coordination"] is None

    def test_traces_are_deterministic_modulo_timings(self, cfg, tmp_path):
        records = [record(f"d{i}") for i in range(5)]
        first = run_instances(records, unanimous_agents(cfg, 0.7), cfg)
        second = run_instances(records, unanimous_agents(cfg, 0.7), cfg, max_workers=3)
        for (_, trace_a), (_, trace_b) in zip(first, second):
            a = json.dumps(strip_timings(trace_a.to_dict()), sort_keys=True)
            b = json.dumps(strip_timings(trace_b.to_dict()), sort_keys=True)
            assert a == b
