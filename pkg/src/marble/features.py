"""Accident record ingestion, per-agent feature projection, and prompt formatting.

The registry maps feature names to the SLM domain that reasons about them;
the ML agent always receives the full feature map. Projection and formatting
are pure, so identical inputs always yield byte-identical prompt text.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .core import AgentId, SLM_AGENT_IDS, Severity


class SchemaError(ValueError):
    """The input file lacks a usable header."""


class RowError(ValueError):
    """A single data row could not be ingested; collected, not fatal."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row
        self.message = message


_MISSING_TOKENS = {"", "n/a", "na", "none", "null", "unknown", "nan", "-"}


@dataclass(frozen=True)
class FeatureValue:
    """One feature cell: a categorical label, a finite number (with an
    optional unit tag), or an explicit missing marker."""

    kind: str  # "categorical" | "numeric" | "missing"
    text: str = ""
    number: float = 0.0
    unit: str = ""

    @classmethod
    def categorical(cls, label: str) -> "FeatureValue":
        return cls(kind="categorical", text=label)

    @classmethod
    def numeric(cls, value: float, unit: str = "") -> "FeatureValue":
        # Non-finite numerics are never stored; they degrade to missing.
        if not math.isfinite(value):
            return cls.missing()
        return cls(kind="numeric", number=float(value), unit=unit)

    @classmethod
    def missing(cls) -> "FeatureValue":
        return cls(kind="missing")

    @property
    def is_missing(self) -> bool:
        return self.kind == "missing"

    def render(self) -> str:
        """Display form used in prompts; missing values read as 'unknown'."""
        if self.kind == "categorical":
            return self.text
        if self.kind == "numeric":
            body = _format_number(self.number)
            return f"{body} {self.unit}" if self.unit else body
        return "unknown"

    def to_dict(self) -> dict:
        if self.kind == "categorical":
            return {"type": "categorical", "value": self.text}
        if self.kind == "numeric":
            out: dict = {"type": "numeric", "value": self.number}
            if self.unit:
                out["unit"] = self.unit
            return out
        return {"type": "missing"}


def _format_number(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


@dataclass(frozen=True)
class AccidentRecord:
    """One input instance: named feature values plus optional ground truth."""

    id: str
    features: Mapping[str, FeatureValue]
    label: Severity | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("record id must be non-empty")


def canonical_name(name: str) -> str:
    """Case/punctuation-insensitive feature-name key."""
    return " ".join(name.strip().lower().replace("_", " ").replace("-", " ").split())


# Default domain assignments. Declaration order here fixes feature order in
# projections and therefore in prompt text.
_DEFAULT_DOMAINS: dict[AgentId, tuple[str, ...]] = {
    AgentId.ENVIRONMENTAL: (
        "Weather Conditions",
        "Light Conditions",
        "Visibility",
        "Temperature",
        "Wind Speed",
        "Humidity",
    ),
    AgentId.TEMPORAL: (
        "Day of Week",
        "Time of Day",
        "Month",
        "Weekend/Holiday",
        "Day of Year",
        "Part of Day",
    ),
    AgentId.INFRASTRUCTURAL: (
        "Road Type",
        "Junction Detail",
        "Speed Limit",
        "Road Surface",
        "Special Conditions",
        "Carriageway Hazards",
    ),
    AgentId.SPATIAL: (
        "Point of Impact",
        "Travel Distance",
        "Vehicle Manoeuvres",
        "Longitude",
        "Latitude",
        "Spatial Extent",
    ),
}


@dataclass(frozen=True)
class FeatureRegistry:
    """Which SLM domain reads which features; ML implicitly reads them all.

    ``ml_only`` flags registered features deliberately assigned to no
    SLM domain.
    """

    domains: Mapping[AgentId, tuple[str, ...]] = field(
        default_factory=lambda: dict(_DEFAULT_DOMAINS)
    )
    ml_only: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for agent in self.domains:
            if not agent.is_slm:
                raise ValueError("only SLM domains take feature assignments")
        index: dict[str, list[AgentId]] = {}
        for agent, names in self.domains.items():
            for name in names:
                index.setdefault(canonical_name(name), []).append(agent)
        object.__setattr__(self, "_index", index)

    def domain_features(self, agent: AgentId) -> tuple[str, ...]:
        return tuple(self.domains.get(agent, ()))

    def domains_of(self, name: str) -> tuple[AgentId, ...]:
        return tuple(getattr(self, "_index").get(canonical_name(name), ()))

    def all_assigned(self) -> tuple[str, ...]:
        out: list[str] = []
        for agent in SLM_AGENT_IDS:
            out.extend(self.domains.get(agent, ()))
        return tuple(out)


def default_registry() -> FeatureRegistry:
    return FeatureRegistry()


def load_registry(path: str | Path) -> FeatureRegistry:
    """Load a JSON registry override: {"environmental": [...], ..., "ml_only": [...]}."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    domains: dict[AgentId, tuple[str, ...]] = {}
    ml_only: tuple[str, ...] = ()
    for key, names in data.items():
        if key == "ml_only":
            ml_only = tuple(names)
            continue
        agent = AgentId(key)
        domains[agent] = tuple(names)
    return FeatureRegistry(domains=domains, ml_only=ml_only)


def project(
    record: AccidentRecord,
    agent: AgentId,
    registry: FeatureRegistry | None = None,
) -> dict[str, FeatureValue]:
    """Select the feature subset the given agent reasons about.

    The ML agent gets the full map unchanged. An SLM agent gets exactly its
    registry features, in declaration order; features the record lacks are
    filled with missing markers so the prompt shape stays stable.
    """
    if agent is AgentId.ML:
        return dict(record.features)
    registry = registry or default_registry()
    by_canonical = {canonical_name(n): v for n, v in record.features.items()}
    out: dict[str, FeatureValue] = {}
    for name in registry.domain_features(agent):
        out[name] = by_canonical.get(canonical_name(name), FeatureValue.missing())
    return out


def format_features(subset: Mapping[str, FeatureValue]) -> str:
    """Serialize a projected subset as deterministic "Name: value" lines."""
    return "\n".join(f"{name}: {value.render()}" for name, value in subset.items())


def _parse_cell(text: str) -> FeatureValue:
    stripped = text.strip()
    if stripped.lower() in _MISSING_TOKENS:
        return FeatureValue.missing()
    try:
        number = float(stripped)
    except ValueError:
        return FeatureValue.categorical(stripped)
    return FeatureValue.numeric(number)  # non-finite degrades to missing


def _parse_label(text: str, row: int) -> Severity | None:
    stripped = text.strip()
    if stripped.lower() in _MISSING_TOKENS:
        return None
    try:
        value = int(float(stripped))
    except ValueError as exc:
        raise RowError(row, "label out of range") from exc
    if value not in (1, 2, 3, 4):
        raise RowError(row, "label out of range")
    return Severity(value)


def ingest_csv(
    path: str | Path,
    registry: FeatureRegistry | None = None,
    *,
    bad_row_budget: int = 100,
    errors_out: list[RowError] | None = None,
) -> list[AccidentRecord]:
    """Read a UTF-8, comma-delimited CSV into accident records.

    The first row names the features; an optional "severity" column holds
    labels in {1,2,3,4} and an optional "id" column supplies identifiers.
    Unparseable numerics become missing values. Bad rows raise RowError,
    which is collected (into ``errors_out`` when given) rather than fatal,
    until ``bad_row_budget`` is exhausted.
    """
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("missing header") from None
        if not header or all(not h.strip() for h in header):
            raise SchemaError("missing header")
        canon = [canonical_name(h) for h in header]
        if registry is not None:
            assigned = {canonical_name(n) for n in registry.all_assigned()}
            feature_cols = [c for c in canon if c not in ("id", "severity")]
            if feature_cols and not assigned.intersection(feature_cols):
                raise SchemaError("no registry feature matches the header")
        id_col = canon.index("id") if "id" in canon else None
        label_col = canon.index("severity") if "severity" in canon else None

        records: list[AccidentRecord] = []
        seen_ids: set[str] = set()
        bad = 0
        for row_num, cells in enumerate(reader, start=1):
            try:
                if len(cells) != len(header):
                    raise RowError(row_num, f"expected {len(header)} columns, got {len(cells)}")
                rec_id = cells[id_col].strip() if id_col is not None else f"row-{row_num}"
                if not rec_id:
                    rec_id = f"row-{row_num}"
                if rec_id in seen_ids:
                    raise RowError(row_num, f"duplicate id {rec_id!r}")
                label = _parse_label(cells[label_col], row_num) if label_col is not None else None
                features = {
                    header[i]: _parse_cell(cells[i])
                    for i in range(len(header))
                    if i != id_col and i != label_col
                }
                seen_ids.add(rec_id)
                records.append(AccidentRecord(id=rec_id, features=features, label=label))
            except RowError as err:
                bad += 1
                if errors_out is not None:
                    errors_out.append(err)
                if bad > bad_row_budget:
                    raise RowError(row_num, f"bad-row budget ({bad_row_budget}) exceeded: {err.message}") from err
        return records


def labels_of(records: Iterable[AccidentRecord]) -> list[Severity | None]:
    return [r.label for r in records]
