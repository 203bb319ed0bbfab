"""Evaluation harness: classification metrics, agent-ablation runs,
coordination-mode comparison, and class-imbalance robustness sweeps."""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .agents.backends import SlmBackend
from .agents.base import Agent
from .coordination import CoordinationMode, CoordinationResult, VoteBreakdown
from .core import ALL_SEVERITIES, AgentId, AgentOutput, EngineConfig, Severity
from .decision import FinalDecision
from .engine import run_instances
from .features import AccidentRecord, FeatureRegistry


class LengthMismatchError(ValueError):
    """Predictions and labels differ in length."""


class ScenarioError(ValueError):
    """An imbalance scenario is malformed or unsatisfiable from the source data."""


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    """Confusion-matrix-derived metrics; macro averaging over the 4 classes.

    Abstentions are excluded from the matrix and counted separately, so
    accuracy is taken over the non-abstained predictions.
    """

    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: Mapping[Severity, ClassMetrics]
    confusion: tuple[tuple[int, ...], ...]
    abstentions: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class": {
                str(int(k)): {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for k, m in self.per_class.items()
            },
            "confusion": [list(row) for row in self.confusion],
            "abstentions": self.abstentions,
        }


def _extract_prediction(item: object) -> Severity | None:
    if item is None:
        return None
    if isinstance(item, FinalDecision):
        return item.prediction
    if isinstance(item, Severity):
        return item
    return Severity(int(item))  # plain ints are accepted for oracle-style use


def compute_metrics(decisions: Sequence[object], labels: Sequence[Severity]) -> MetricsReport:
    """Standard 4-class metrics from paired predictions and ground truth."""
    if len(decisions) != len(labels):
        raise LengthMismatchError(f"{len(decisions)} decisions vs {len(labels)} labels")
    index = {k: i for i, k in enumerate(ALL_SEVERITIES)}
    matrix = [[0] * 4 for _ in range(4)]
    abstentions = 0
    for decision, label in zip(decisions, labels):
        prediction = _extract_prediction(decision)
        if prediction is None:
            abstentions += 1
            continue
        matrix[index[Severity(label)]][index[prediction]] += 1
    total = sum(sum(row) for row in matrix)
    correct = sum(matrix[i][i] for i in range(4))
    per_class: dict[Severity, ClassMetrics] = {}
    for k in ALL_SEVERITIES:
        i = index[k]
        tp = matrix[i][i]
        predicted = sum(matrix[r][i] for r in range(4))
        support = sum(matrix[i])
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[k] = ClassMetrics(precision, recall, f1, support)
    return MetricsReport(
        accuracy=correct / total if total else 0.0,
        precision=sum(m.precision for m in per_class.values()) / 4,
        recall=sum(m.recall for m in per_class.values()) / 4,
        f1=sum(m.f1 for m in per_class.values()) / 4,
        per_class=per_class,
        confusion=tuple(tuple(row) for row in matrix),
        abstentions=abstentions,
    )


def majority_vote_coordinator(
    outputs: Sequence[AgentOutput], cfg: EngineConfig
) -> CoordinationResult:
    """Degraded coordinator for the ablation study: unweighted one-agent-one-vote.

    Ties prefer rare classes, then the lower class index; confidence is the
    plain mean over the winning class's supporters, capped like the
    rule-based path.
    """
    votes: dict[Severity, list[AgentOutput]] = {k: [] for k in ALL_SEVERITIES}
    for output in outputs:
        if not output.failed:
            votes[output.prediction].append(output)
    winner = min(
        ALL_SEVERITIES, key=lambda k: (-len(votes[k]), 0 if k.is_rare else 1, int(k))
    )
    supporters = votes[winner]
    confidence = (
        min(cfg.confidence_cap, sum(o.confidence for o in supporters) / len(supporters))
        if supporters
        else cfg.fallback_confidence
    )
    breakdown = VoteBreakdown(
        scores={k: float(len(votes[k])) for k in ALL_SEVERITIES},
        supporters={k: tuple(o.agent for o in votes[k]) for k in ALL_SEVERITIES},
        slm_supporters={
            k: tuple(o.agent for o in votes[k] if o.agent.is_slm) for k in ALL_SEVERITIES
        },
    )
    return CoordinationResult(
        prediction=winner,
        confidence=confidence,
        method=CoordinationMode.RULE_BASED,
        breakdown=breakdown,
    )


def _require_labels(records: Sequence[AccidentRecord]) -> list[Severity]:
    labels = [r.label for r in records]
    if any(label is None for label in labels):
        raise ValueError("evaluation records must all carry labels")
    return labels  # type: ignore[return-value]


def run_ablation(
    records: Sequence[AccidentRecord],
    agents: Sequence[Agent],
    cfg: EngineConfig,
    *,
    registry: FeatureRegistry | None = None,
    coordination_backend: SlmBackend | None = None,
) -> dict[str, MetricsReport]:
    """Remove each agent in turn while holding everything else constant.

    Returns the baseline under key "none", one report per excluded agent,
    and a "coordinator" entry where rule-based fusion degrades to an
    unweighted majority vote: K agents give K+2 reports.
    """
    if len(agents) < 2:
        raise ValueError("ablation needs at least two agents")
    labels = _require_labels(records)

    def evaluate(subset: Sequence[Agent], coordinator=None) -> MetricsReport:
        results = run_instances(
            records,
            subset,
            cfg,
            registry=registry,
            coordination_backend=coordination_backend,
            coordinator=coordinator,
        )
        return compute_metrics([d for d, _ in results], labels)

    reports: dict[str, MetricsReport] = {"none": evaluate(agents)}
    for agent in agents:
        excluded = agent.identity().value
        reports[excluded] = evaluate([a for a in agents if a is not agent])
    reports["coordinator"] = evaluate(agents, coordinator=majority_vote_coordinator)
    return reports


def relative_accuracy_drops(reports: Mapping[str, MetricsReport]) -> dict[str, float]:
    """Relative accuracy drop of every exclusion against the "none" baseline."""
    baseline = reports["none"].accuracy
    return {
        key: (baseline - report.accuracy) / baseline if baseline else 0.0
        for key, report in reports.items()
        if key != "none"
    }


@dataclass(frozen=True)
class ImbalanceScenario:
    """A named target label distribution; proportions sum to one."""

    name: str
    distribution: Mapping[Severity, float]

    def __post_init__(self) -> None:
        if any(p < 0 for p in self.distribution.values()):
            raise ScenarioError(f"scenario {self.name!r}: proportions must be >= 0")
        total = sum(self.distribution.values())
        if abs(total - 1.0) > 1e-9:
            raise ScenarioError(f"scenario {self.name!r}: proportions sum to {total}, not 1")


def default_scenarios() -> list[ImbalanceScenario]:
    """Six stock distributions, from balanced to heavily skewed.

    Named after the robustness-sweep settings; the exact proportions are
    approximations and fully configurable.
    """
    def dist(p1: float, p2: float, p3: float, p4: float) -> dict[Severity, float]:
        return dict(zip(ALL_SEVERITIES, (p1, p2, p3, p4)))

    return [
        ImbalanceScenario("uniform", dist(0.25, 0.25, 0.25, 0.25)),
        ImbalanceScenario("mild_skew_common", dist(0.10, 0.40, 0.40, 0.10)),
        ImbalanceScenario("heavy_skew_common", dist(0.08, 0.50, 0.34, 0.08)),
        ImbalanceScenario("rare_fatal", dist(0.15, 0.45, 0.35, 0.05)),
        ImbalanceScenario("minor_fatal", dist(0.45, 0.05, 0.05, 0.45)),
        ImbalanceScenario("skew_rare", dist(0.35, 0.15, 0.15, 0.35)),
    ]


def sample_imbalance(
    records: Sequence[AccidentRecord],
    scenario: ImbalanceScenario,
    seed: int,
    *,
    size: int | None = None,
) -> list[AccidentRecord]:
    """Resample records to match the scenario's label distribution.

    Per-class counts follow the largest-remainder method, so they land
    within one record of the exact target. Classes short on source records
    are drawn with replacement. Deterministic per seed.
    """
    size = len(records) if size is None else size
    pools: dict[Severity, list[AccidentRecord]] = {k: [] for k in ALL_SEVERITIES}
    for record in records:
        if record.label is not None:
            pools[record.label].append(record)
    targets = _largest_remainder_counts(scenario.distribution, size)
    for k, count in targets.items():
        if count > 0 and not pools[k]:
            raise ScenarioError(
                f"scenario {scenario.name!r} requests class {int(k)} but the source has none"
            )
    rng = random.Random(seed)
    sampled: list[AccidentRecord] = []
    seen: dict[str, int] = {}
    for k in ALL_SEVERITIES:
        pool, count = pools[k], targets[k]
        if count == 0:
            continue
        if count <= len(pool):
            chosen = rng.sample(pool, count)
        else:
            chosen = list(pool)
            chosen.extend(rng.choices(pool, k=count - len(pool)))
        sampled.extend(chosen)
    rng.shuffle(sampled)
    # Re-id duplicates from replacement sampling so ids stay unique.
    out: list[AccidentRecord] = []
    for record in sampled:
        n = seen.get(record.id, 0)
        seen[record.id] = n + 1
        out.append(
            record if n == 0 else AccidentRecord(f"{record.id}~{n}", record.features, record.label)
        )
    return out


def _largest_remainder_counts(
    distribution: Mapping[Severity, float], size: int
) -> dict[Severity, int]:
    raw = {k: distribution.get(k, 0.0) * size for k in ALL_SEVERITIES}
    counts = {k: int(raw[k]) for k in ALL_SEVERITIES}
    shortfall = size - sum(counts.values())
    by_remainder = sorted(ALL_SEVERITIES, key=lambda k: (raw[k] - counts[k], -int(k)), reverse=True)
    for k in by_remainder[:shortfall]:
        counts[k] += 1
    return counts


@dataclass(frozen=True)
class ScenarioComparison:
    scenario: ImbalanceScenario
    rule_based: MetricsReport
    llm_based: MetricsReport
    llm_fallback_rate: float

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.name,
            "distribution": {str(int(k)): p for k, p in self.scenario.distribution.items()},
            "rule_based": self.rule_based.to_dict(),
            "llm_based": self.llm_based.to_dict(),
            "llm_fallback_rate": self.llm_fallback_rate,
        }


def run_imbalance_suite(
    records: Sequence[AccidentRecord],
    agents: Sequence[Agent],
    cfg: EngineConfig,
    scenarios: Sequence[ImbalanceScenario] | None = None,
    seed: int = 0,
    *,
    coordination_backend: SlmBackend | None = None,
    registry: FeatureRegistry | None = None,
    size: int | None = None,
) -> dict[str, ScenarioComparison]:
    """For each scenario, run both coordination modes on the identical
    resampled set and report both, plus the LLM fallback rate."""
    if coordination_backend is None:
        raise ValueError("the imbalance suite compares both modes; a coordination backend is required")
    scenarios = list(scenarios) if scenarios is not None else default_scenarios()
    results: dict[str, ScenarioComparison] = {}
    for scenario in scenarios:
        sampled = sample_imbalance(records, scenario, seed, size=size)
        labels = _require_labels(sampled)
        rb_cfg = replace(cfg, coordination_mode=CoordinationMode.RULE_BASED)
        rb_results = run_instances(sampled, agents, rb_cfg, registry=registry)
        llm_cfg = replace(cfg, coordination_mode=CoordinationMode.LLM_BASED)
        llm_results = run_instances(
            sampled, agents, llm_cfg, registry=registry, coordination_backend=coordination_backend
        )
        fallbacks = sum(
            1
            for _, trace in llm_results
            if trace.coordination is not None and trace.coordination.fallback is not None
        )
        results[scenario.name] = ScenarioComparison(
            scenario=scenario,
            rule_based=compute_metrics([d for d, _ in rb_results], labels),
            llm_based=compute_metrics([d for d, _ in llm_results], labels),
            llm_fallback_rate=fallbacks / len(sampled) if sampled else 0.0,
        )
    return results


def comparison_table(results: Mapping[str, ScenarioComparison]) -> list[dict]:
    """Flat rows (one per scenario and mode) suitable for CSV output."""
    rows: list[dict] = []
    for name, comparison in results.items():
        for mode, report in (("rule", comparison.rule_based), ("llm", comparison.llm_based)):
            rows.append(
                {
                    "scenario": name,
                    "mode": mode,
                    "accuracy": report.accuracy,
                    "precision": report.precision,
                    "recall": report.recall,
                    "f1": report.f1,
                    "abstentions": report.abstentions,
                    "llm_fallback_rate": comparison.llm_fallback_rate if mode == "llm" else 0.0,
                }
            )
    return rows
