"""The statistical agent: a smoothed class-conditional frequency classifier.

Numeric features are discretized into quintile bins learned from training
data (missing numerics take the per-feature training mean first); counts
get add-one smoothing. The model is dependency-free, deterministic, and
exposes exact posteriors, which keeps it easy to check against hand
computation. Any external model can stand in through the Agent protocol.
"""

from __future__ import annotations

import math
import statistics
import time
from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from ..core import ALL_SEVERITIES, AgentId, AgentOutput, Severity
from ..features import AccidentRecord, FeatureValue

_MISSING = "(missing)"


class TrainError(ValueError):
    """Training input cannot support a usable model."""


@dataclass(frozen=True)
class MlModel:
    """Per-class token statistics sufficient for posterior estimation."""

    class_counts: Mapping[int, int]
    feature_names: tuple[str, ...]
    numeric_features: frozenset[str]
    bins: Mapping[str, tuple[float, ...]]
    means: Mapping[str, float]
    tables: Mapping[str, Mapping[int, Mapping[str, int]]]
    vocab_sizes: Mapping[str, int]
    importance: Mapping[str, float]

    def predict_proba(self, features: Mapping[str, FeatureValue]) -> dict[Severity, float]:
        """Posterior over the four classes; always sums to 1."""
        total = sum(self.class_counts.values())
        log_scores: dict[Severity, float] = {}
        for k in ALL_SEVERITIES:
            n_k = self.class_counts[int(k)]
            score = math.log(n_k / total)
            for name in self.feature_names:
                token = self._token(name, features.get(name))
                count = self.tables[name][int(k)].get(token, 0)
                score += math.log((count + 1) / (n_k + self.vocab_sizes[name]))
            log_scores[k] = score
        peak = max(log_scores.values())
        raw = {k: math.exp(v - peak) for k, v in log_scores.items()}
        norm = sum(raw.values())
        return {k: v / norm for k, v in raw.items()}

    def feature_importance(self) -> dict[str, float]:
        return dict(self.importance)

    def _token(self, name: str, value: FeatureValue | None) -> str:
        if name in self.numeric_features:
            if value is None or value.kind != "numeric":
                number = self.means[name]  # mean imputation for missing numerics
            else:
                number = value.number
            return f"bin{bisect_right(self.bins[name], number)}"
        if value is None or value.is_missing:
            return _MISSING
        return value.render()


def ml_train(records: Sequence[AccidentRecord]) -> MlModel:
    """Fit the frequency model; every class must appear at least once."""
    labeled = [r for r in records if r.label is not None]
    if len(labeled) != len(records):
        raise TrainError("training records must all carry a severity label")
    counts = {int(k): 0 for k in ALL_SEVERITIES}
    for record in labeled:
        counts[int(record.label)] += 1
    for k in ALL_SEVERITIES:
        if counts[int(k)] == 0:
            raise TrainError(f"class {int(k)} unrepresented")

    feature_names = tuple(sorted({name for r in labeled for name in r.features}))
    numeric: set[str] = set()
    for name in feature_names:
        kinds = {r.features[name].kind for r in labeled if name in r.features}
        if "numeric" in kinds and "categorical" not in kinds:
            numeric.add(name)

    bins: dict[str, tuple[float, ...]] = {}
    means: dict[str, float] = {}
    for name in numeric:
        values = sorted(
            r.features[name].number
            for r in labeled
            if name in r.features and r.features[name].kind == "numeric"
        )
        means[name] = sum(values) / len(values)
        bins[name] = _quintile_cuts(values)

    tables: dict[str, dict[int, dict[str, int]]] = {
        name: {int(k): {} for k in ALL_SEVERITIES} for name in feature_names
    }
    vocab: dict[str, set[str]] = {name: set() for name in feature_names}
    probe = MlModel(
        class_counts=counts,
        feature_names=feature_names,
        numeric_features=frozenset(numeric),
        bins=bins,
        means=means,
        tables=tables,
        vocab_sizes={},
        importance={},
    )
    for record in labeled:
        for name in feature_names:
            token = probe._token(name, record.features.get(name))
            table = tables[name][int(record.label)]
            table[token] = table.get(token, 0) + 1
            vocab[name].add(token)
    vocab_sizes = {name: max(1, len(tokens)) for name, tokens in vocab.items()}
    importance = _importance(counts, tables, vocab_sizes, feature_names)
    return MlModel(
        class_counts=counts,
        feature_names=feature_names,
        numeric_features=frozenset(numeric),
        bins=bins,
        means=means,
        tables=tables,
        vocab_sizes=vocab_sizes,
        importance=importance,
    )


def _quintile_cuts(sorted_values: list[float]) -> tuple[float, ...]:
    if len(set(sorted_values)) < 2:
        return ()
    return tuple(statistics.quantiles(sorted_values, n=5, method="inclusive"))


def _importance(
    counts: Mapping[int, int],
    tables: Mapping[str, Mapping[int, Mapping[str, int]]],
    vocab_sizes: Mapping[str, int],
    feature_names: Iterable[str],
) -> dict[str, float]:
    """Spread of smoothed class-conditional token probabilities, marginal-weighted."""
    total = sum(counts.values())
    out: dict[str, float] = {}
    for name in feature_names:
        tokens = {t for k in counts for t in tables[name][k]}
        score = 0.0
        for token in tokens:
            marginal = sum(tables[name][k].get(token, 0) for k in counts) / total
            cond = [
                (tables[name][k].get(token, 0) + 1) / (counts[k] + vocab_sizes[name])
                for k in counts
            ]
            score += marginal * (max(cond) - min(cond))
        out[name] = score
    return out


def _argmax_lowest(probs: Mapping[Severity, float]) -> Severity:
    """Argmax over classes; exact ties resolve to the lower class index."""
    best = ALL_SEVERITIES[0]
    for k in ALL_SEVERITIES[1:]:
        if probs[k] > probs[best]:
            best = k
    return best


def ml_evaluate(model: MlModel, features: Mapping[str, FeatureValue]) -> AgentOutput:
    """Maximum-posterior prediction; confidence is that maximum, uncalibrated."""
    start = time.perf_counter()
    probs = model.predict_proba(features)
    prediction = _argmax_lowest(probs)
    confidence = probs[prediction]
    return AgentOutput(
        agent=AgentId.ML,
        prediction=prediction,
        confidence=confidence,
        reasoning="",
        raw_confidence=confidence,
        latency_ms=int((time.perf_counter() - start) * 1000),
    )


class MlAgent:
    """Agent wrapper around a trained MlModel."""

    def __init__(self, model: MlModel):
        self._model = model

    def identity(self) -> AgentId:
        return AgentId.ML

    def evaluate(self, features: Mapping[str, FeatureValue]) -> AgentOutput:
        return ml_evaluate(self._model, features)
