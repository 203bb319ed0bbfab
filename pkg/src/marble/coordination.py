"""Fusing agent outputs into one (prediction, confidence) pair.

Two mechanisms: deterministic rule-based voting (the default) built on
weighted scores, an ML override, tie-breaking, and an agreement boost; and
an LLM-based meta-reasoner that falls back to the rule-based path whenever
its backend fails or emits something unparseable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .agents.backends import BackendTimeoutError, SlmBackend, TransportError, call_with_timeout
from .agents.slm import ParseError, parse_response_detailed
from .core import (
    AGENT_ORDER,
    ALL_SEVERITIES,
    AgentId,
    AgentOutput,
    CoordinationMode,
    EngineConfig,
    Severity,
)


class EmptyInputError(ValueError):
    """Every agent failed; there is nothing to coordinate."""


@dataclass(frozen=True)
class VoteBreakdown:
    """Per-class weighted vote scores and the agents behind them."""

    scores: Mapping[Severity, float]
    supporters: Mapping[Severity, tuple[AgentId, ...]]
    slm_supporters: Mapping[Severity, tuple[AgentId, ...]]


@dataclass(frozen=True)
class CoordinationResult:
    prediction: Severity
    confidence: float
    method: CoordinationMode
    breakdown: VoteBreakdown | None = None
    override_applied: bool = False
    boost_applied: float = 0.0
    reasoning: str = ""
    fallback: str | None = None  # failure class when LLM coordination fell back

    def to_dict(self) -> dict:
        out: dict = {
            "prediction": int(self.prediction),
            "confidence": self.confidence,
            "method": self.method.value,
            "override_applied": self.override_applied,
            "boost_applied": self.boost_applied,
            "reasoning": self.reasoning,
            "fallback": self.fallback,
        }
        if self.breakdown is not None:
            out["breakdown"] = {
                "scores": {str(int(k)): v for k, v in self.breakdown.scores.items()},
                "supporters": {
                    str(int(k)): [a.value for a in v] for k, v in self.breakdown.supporters.items()
                },
                "slm_supporters": {
                    str(int(k)): [a.value for a in v]
                    for k, v in self.breakdown.slm_supporters.items()
                },
            }
        return out


def _live(outputs: Sequence[AgentOutput]) -> list[AgentOutput]:
    return [o for o in outputs if not o.failed]


def _ml_output(outputs: Sequence[AgentOutput]) -> AgentOutput | None:
    for o in outputs:
        if o.agent is AgentId.ML and not o.failed:
            return o
    return None


def weighted_scores(outputs: Sequence[AgentOutput], cfg: EngineConfig) -> VoteBreakdown:
    """Per-class score: sum over voters of weight * confidence * class factor."""
    live = _live(outputs)
    if not live:
        raise EmptyInputError("all agents failed")
    scores = {k: 0.0 for k in ALL_SEVERITIES}
    supporters: dict[Severity, list[AgentId]] = {k: [] for k in ALL_SEVERITIES}
    slm_supporters: dict[Severity, list[AgentId]] = {k: [] for k in ALL_SEVERITIES}
    for output in live:
        k = output.prediction
        weight = cfg.agent_weights.get(output.agent, 1.0)
        scores[k] += weight * output.confidence * cfg.class_factors[k]
        supporters[k].append(output.agent)
        if output.agent.is_slm:
            slm_supporters[k].append(output.agent)
    return VoteBreakdown(
        scores=scores,
        supporters={k: tuple(v) for k, v in supporters.items()},
        slm_supporters={k: tuple(v) for k, v in slm_supporters.items()},
    )


def check_ml_override(outputs: Sequence[AgentOutput], cfg: EngineConfig) -> bool:
    """High-confidence ML predictions can bypass the vote.

    Fires when the ML confidence reaches the corroboration-free threshold,
    or the lower threshold with at least one SLM agent agreeing. False when
    the ML agent failed or is absent.
    """
    ml = _ml_output(outputs)
    if ml is None:
        return False
    if ml.confidence >= cfg.tau_ml_corrob:
        return True
    if ml.confidence >= cfg.tau_ml_high:
        return any(
            o.agent.is_slm and not o.failed and o.prediction == ml.prediction for o in outputs
        )
    return False


def rb_predict(
    breakdown: VoteBreakdown, outputs: Sequence[AgentOutput], cfg: EngineConfig
) -> Severity:
    """Argmax of the weighted scores.

    Epsilon-ties prefer the class with the fewest supporting agents, then
    rare classes before common, then the lower class index.
    """
    best = max(breakdown.scores.values())
    tied = [k for k in ALL_SEVERITIES if best - breakdown.scores[k] <= cfg.tie_epsilon]
    if len(tied) == 1:
        return tied[0]
    return min(tied, key=lambda k: (len(breakdown.supporters[k]), 0 if k.is_rare else 1, int(k)))


def agreement_boost(prediction: Severity, breakdown: VoteBreakdown, cfg: EngineConfig) -> float:
    """Confidence increment when a strict majority of configured SLM agents concur.

    The denominator is the configured SLM count, so agent failures cannot
    inflate agreement. Rare classes additionally require two concurring
    SLM agents.
    """
    agreeing = len(breakdown.slm_supporters[prediction])
    total = cfg.slm_agent_count()
    if total == 0:
        return 0.0
    ratio = agreeing / total
    if prediction.is_rare:
        if agreeing >= 2 and ratio > 0.5:
            return cfg.boost_rare
        return 0.0
    if ratio > 0.5:
        return cfg.boost_common
    return 0.0


def weighted_avg_confidence(
    prediction: Severity,
    breakdown: VoteBreakdown,
    outputs: Sequence[AgentOutput],
    cfg: EngineConfig,
) -> float:
    """Weight-weighted mean confidence over the agents voting for the class;
    the configured fallback when no agent supports it."""
    numerator = 0.0
    denominator = 0.0
    for output in _live(outputs):
        if output.prediction == prediction:
            weight = cfg.agent_weights.get(output.agent, 1.0)
            numerator += weight * output.confidence
            denominator += weight
    if denominator == 0.0:
        return cfg.fallback_confidence
    return numerator / denominator


def coordinate_rb(outputs: Sequence[AgentOutput], cfg: EngineConfig) -> CoordinationResult:
    """Rule-based coordination: override first, else weighted vote.

    Confidence is floored at the fallback value and capped at the
    configured maximum, so the result always lies inside
    [fallback_confidence, confidence_cap].
    """
    live = _live(outputs)
    if not live:
        raise EmptyInputError("all agents failed")
    breakdown = weighted_scores(live, cfg)
    if check_ml_override(live, cfg):
        ml = _ml_output(live)
        if ml.prediction.is_rare:
            confidence = min(cfg.confidence_cap, ml.confidence + cfg.override_rare_bonus)
        else:
            confidence = min(cfg.confidence_cap, ml.confidence)
        return CoordinationResult(
            prediction=ml.prediction,
            confidence=confidence,
            method=CoordinationMode.RULE_BASED,
            breakdown=breakdown,
            override_applied=True,
        )
    prediction = rb_predict(breakdown, live, cfg)
    boost = agreement_boost(prediction, breakdown, cfg)
    average = weighted_avg_confidence(prediction, breakdown, live, cfg)
    confidence = min(cfg.confidence_cap, max(cfg.fallback_confidence, average + boost))
    return CoordinationResult(
        prediction=prediction,
        confidence=confidence,
        method=CoordinationMode.RULE_BASED,
        breakdown=breakdown,
        boost_applied=boost,
    )


def _format_float(x: float) -> str:
    return repr(float(x))


def format_meta_prompt(outputs: Sequence[AgentOutput], cfg: EngineConfig) -> str:
    """Serialize the agent reports into the coordinator meta-prompt.

    Blocks appear in canonical agent order (ML first), each carrying the
    agent's prediction, confidence, static weight, and reasoning.
    """
    ordered = sorted(_live(outputs), key=lambda o: AGENT_ORDER[o.agent])
    lines = [
        "You are the coordinating analyst for a team assessing one road accident.",
        "Each agent examined a different aspect of the accident and reported a "
        "severity class (1-4), a confidence in [0, 1], and its reasoning.",
        "",
    ]
    for output in ordered:
        lines.extend(
            [
                f"Agent: {output.agent.value}",
                f"prediction: {int(output.prediction)}",
                f"confidence: {_format_float(output.confidence)}",
                f"weight: {_format_float(cfg.agent_weights.get(output.agent, 1.0))}",
                f"reasoning: {output.reasoning or '(none)'}",
                "",
            ]
        )
    lines.extend(
        [
            "Weigh the reports (a higher weight marks a more reliable agent), "
            "resolve disagreements, and decide the final severity.",
            'Reply with a JSON object of the form {"severity": <integer 1-4>, '
            '"confidence": <number between 0 and 1>, "reasoning": "<short justification>"}.',
        ]
    )
    return "\n".join(lines)


def coordinate_llm(
    outputs: Sequence[AgentOutput], backend: SlmBackend, cfg: EngineConfig
) -> CoordinationResult:
    """LLM-based coordination with a guaranteed rule-based fallback.

    Any parse, transport, or timeout failure produces the rule-based result
    with the failure class recorded in ``fallback``.
    """
    live = _live(outputs)
    if not live:
        raise EmptyInputError("all agents failed")
    prompt = format_meta_prompt(live, cfg)
    try:
        raw = call_with_timeout(
            lambda: backend.complete(prompt, cfg.decoding, cfg.agent_timeout_ms),
            cfg.agent_timeout_ms,
        )
        parsed = parse_response_detailed(raw)
    except BackendTimeoutError:
        return replace(coordinate_rb(live, cfg), fallback="timeout")
    except TransportError:
        return replace(coordinate_rb(live, cfg), fallback="transport")
    except ParseError:
        return replace(coordinate_rb(live, cfg), fallback="parse")
    return CoordinationResult(
        prediction=parsed.severity,
        confidence=parsed.confidence,
        method=CoordinationMode.LLM_BASED,
        reasoning=parsed.reasoning,
    )
