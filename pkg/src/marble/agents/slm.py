"""The language-model agent pipeline: prompt assembly, structured-output
extraction, rare-class confidence calibration, and the composed evaluation."""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass
from typing import Mapping

from ..core import AgentId, AgentOutput, EngineConfig, Severity, clamp01
from ..features import FeatureValue, format_features
from .backends import BackendTimeoutError, SlmBackend, TransportError, call_with_timeout


class ParseError(ValueError):
    """No severity class in {1..4} is recoverable from the model output."""


@dataclass(frozen=True)
class PromptTemplate:
    """Per-domain prompt parts, concatenated around the formatted features."""

    context: str
    instructions: str
    query: str

    def __post_init__(self) -> None:
        for key in ("severity", "confidence", "reasoning"):
            if key not in self.query:
                raise ValueError(f"query must demand a JSON object with a {key!r} key")


_JSON_QUERY = (
    'Reply with a JSON object of the form '
    '{"severity": <integer 1-4>, "confidence": <number between 0 and 1>, '
    '"reasoning": "<one or two sentences>"}.'
)

DEFAULT_TEMPLATES: dict[AgentId, PromptTemplate] = {
    AgentId.ENVIRONMENTAL: PromptTemplate(
        context=(
            "You are a road safety analyst specializing in environmental conditions: "
            "weather, lighting, visibility, and atmospheric factors at accident scenes."
        ),
        instructions=(
            "Using only the conditions listed below, reason step by step about how they "
            "affect the likely severity of this accident on a 1-4 scale, then decide."
        ),
        query=_JSON_QUERY,
    ),
    AgentId.INFRASTRUCTURAL: PromptTemplate(
        context=(
            "You are a road safety analyst specializing in infrastructure: road type, "
            "junction layout, surface state, speed limits, and carriageway hazards."
        ),
        instructions=(
            "Using only the road characteristics listed below, reason step by step about "
            "the likely severity of this accident on a 1-4 scale, then decide."
        ),
        query=_JSON_QUERY,
    ),
    AgentId.SPATIAL: PromptTemplate(
        context=(
            "You are a road safety analyst specializing in spatial dynamics: impact "
            "points, vehicle manoeuvres, and the geographic context of accidents."
        ),
        instructions=(
            "Using only the spatial factors listed below, reason step by step about the "
            "likely severity of this accident on a 1-4 scale, then decide."
        ),
        query=_JSON_QUERY,
    ),
    AgentId.TEMPORAL: PromptTemplate(
        context=(
            "You are a road safety analyst specializing in temporal patterns: time of "
            "day, day of week, seasonality, and holiday effects on accidents."
        ),
        instructions=(
            "Using only the timing information listed below, reason step by step about "
            "the likely severity of this accident on a 1-4 scale, then decide."
        ),
        query=_JSON_QUERY,
    ),
}


def build_prompt(template: PromptTemplate, formatted: str) -> str:
    """Exact concatenation context / instructions / features / query,
    separated by single blank lines."""
    return "\n\n".join((template.context, template.instructions, formatted, template.query))


@dataclass(frozen=True)
class ParsedPrediction:
    severity: Severity
    confidence: float
    reasoning: str
    clamped: bool
    via: str  # "json" | "fallback"


def _coerce_severity(value: object) -> Severity | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        number = value
    elif isinstance(value, float) and value.is_integer():
        number = int(value)
    elif isinstance(value, str) and re.fullmatch(r"[+-]?\d+", value.strip()):
        number = int(value.strip())
    else:
        return None
    return Severity(number) if 1 <= number <= 4 else None


def _coerce_confidence(value: object) -> float | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value.strip())
        except ValueError:
            return None
    return None


def _iter_json_candidates(text: str):
    """Yield every parseable JSON object embedded in the text, left to right."""
    for start, ch in enumerate(text):
        if ch != "{":
            continue
        depth = 0
        in_string = False
        escaped = False
        for end in range(start, len(text)):
            c = text[end]
            if in_string:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == '"':
                    in_string = False
                continue
            if c == '"':
                in_string = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(text[start : end + 1])
                    except ValueError:
                        break
                    if isinstance(obj, dict):
                        yield obj
                    break


_SEV_PATTERN = re.compile(r'severity"?\s*[:=]\s*"?(\d+)', re.IGNORECASE)
_CONF_PATTERN = re.compile(r'confidence"?\s*[:=]\s*"?([0-9]*\.?[0-9]+)', re.IGNORECASE)

_DEFAULT_FALLBACK_CONFIDENCE = 0.5  # neutral prior when the model states none


def parse_response_detailed(raw: str) -> ParsedPrediction:
    """Extract (severity, confidence, reasoning) from free-form model output.

    Strict path first: the first embedded JSON object carrying a valid
    severity wins. Labeled-number patterns ("severity: N", "confidence: 0.x",
    case-insensitive) serve as the fallback. Confidence is clamped to [0, 1].
    """
    for obj in _iter_json_candidates(raw):
        if "severity" not in obj:
            continue
        severity = _coerce_severity(obj["severity"])
        if severity is None:
            continue
        confidence = _coerce_confidence(obj.get("confidence"))
        if confidence is None:
            confidence, clamped = _DEFAULT_FALLBACK_CONFIDENCE, False
        else:
            clamped = not 0.0 <= confidence <= 1.0
            confidence = clamp01(confidence)
        reasoning = obj.get("reasoning")
        return ParsedPrediction(
            severity=severity,
            confidence=confidence,
            reasoning=str(reasoning) if reasoning is not None else "",
            clamped=clamped,
            via="json",
        )

    sev_match = _SEV_PATTERN.search(raw)
    if sev_match:
        severity = _coerce_severity(int(sev_match.group(1)))
        if severity is not None:
            conf_match = _CONF_PATTERN.search(raw)
            if conf_match:
                confidence = float(conf_match.group(1))
                clamped = not 0.0 <= confidence <= 1.0
                confidence = clamp01(confidence)
            else:
                confidence, clamped = _DEFAULT_FALLBACK_CONFIDENCE, False
            return ParsedPrediction(severity, confidence, "", clamped, via="fallback")
    raise ParseError("no severity class in 1-4 recoverable from output")


def parse_response(raw: str) -> tuple[Severity, float, str]:
    parsed = parse_response_detailed(raw)
    return parsed.severity, parsed.confidence, parsed.reasoning


def calibrate(raw_confidence: float, prediction: Severity, cfg: EngineConfig) -> float:
    """Heuristic boost for confident rare-class predictions; common classes
    pass through unchanged. The high gate is tested before the mid gate."""
    cal = cfg.calibration
    if prediction.is_rare:
        if raw_confidence > cal.high_gate:
            return min(cal.high_cap, raw_confidence + cal.high_delta)
        if raw_confidence > cal.mid_gate:
            return min(cal.mid_cap, raw_confidence + cal.mid_delta)
    return raw_confidence


def slm_evaluate(
    agent: AgentId,
    features: Mapping[str, FeatureValue],
    template: PromptTemplate,
    backend: SlmBackend,
    cfg: EngineConfig,
) -> AgentOutput:
    """Full SLM pipeline: format -> prompt -> complete -> parse -> calibrate.

    Total by construction: any stage failure yields a failed output with
    the failure class (parse / timeout / transport) recorded.
    """
    if not agent.is_slm:
        raise ValueError("slm_evaluate only serves SLM domains")
    start = time.perf_counter()

    def fail(kind: str) -> AgentOutput:
        return AgentOutput(
            agent=agent,
            prediction=None,
            confidence=0.0,
            failed=True,
            failure_kind=kind,
            latency_ms=int((time.perf_counter() - start) * 1000),
        )

    prompt = build_prompt(template, format_features(features))
    try:
        raw = call_with_timeout(
            lambda: backend.complete(prompt, cfg.decoding, cfg.agent_timeout_ms),
            cfg.agent_timeout_ms,
        )
    except BackendTimeoutError:
        return fail("timeout")
    except TransportError:
        return fail("transport")
    try:
        parsed = parse_response_detailed(raw)
    except ParseError:
        return fail("parse")
    notes = ("confidence clamped to [0,1]",) if parsed.clamped else ()
    return AgentOutput(
        agent=agent,
        prediction=parsed.severity,
        confidence=calibrate(parsed.confidence, parsed.severity, cfg),
        reasoning=parsed.reasoning,
        raw_confidence=parsed.confidence,
        latency_ms=int((time.perf_counter() - start) * 1000),
        notes=notes,
    )


class SlmAgent:
    """Agent wrapper binding a domain, its template, a backend, and the config."""

    def __init__(
        self,
        kind: AgentId,
        backend: SlmBackend,
        cfg: EngineConfig,
        template: PromptTemplate | None = None,
    ):
        if not kind.is_slm:
            raise ValueError("SlmAgent serves SLM domains only")
        self._kind = kind
        self._backend = backend
        self._cfg = cfg
        self._template = template or DEFAULT_TEMPLATES[kind]

    def identity(self) -> AgentId:
        return self._kind

    def evaluate(self, features: Mapping[str, FeatureValue]) -> AgentOutput:
        return slm_evaluate(self._kind, features, self._template, self._backend, self._cfg)
