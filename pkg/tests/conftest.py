from __future__ import annotations

import pytest

from marble.core import AgentId, AgentOutput, EngineConfig, Severity, validate_config


@pytest.fixture
def cfg() -> EngineConfig:
    return validate_config(EngineConfig())


def make_output(
    agent: AgentId,
    prediction: int | None,
    confidence: float,
    *,
    failed: bool = False,
    reasoning: str = "",
    failure_kind: str | None = None,
) -> AgentOutput:
    return AgentOutput(
        agent=agent,
        prediction=None if prediction is None else Severity(prediction),
        confidence=confidence,
        reasoning="" if agent is AgentId.ML else reasoning,
        raw_confidence=confidence,
        failed=failed,
        failure_kind=failure_kind,
    )


@pytest.fixture
def out():
    return make_output
