"""Command-line entry points: predict, eval, ablate, imbalance."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .agents import MlAgent, RemoteHttpBackend, ScriptedBackend, SlmAgent, ml_train
from .core import SLM_AGENT_IDS, CoordinationMode, EngineConfig, load_config, validate_config
from .engine import run_batch
from .features import default_registry, ingest_csv, load_registry
from .harness import (
    comparison_table,
    compute_metrics,
    default_scenarios,
    ImbalanceScenario,
    relative_accuracy_drops,
    run_ablation,
    run_imbalance_suite,
)
from .core import Severity


def _load_cfg(args) -> EngineConfig:
    cfg = load_config(args.config) if args.config else validate_config(EngineConfig())
    if getattr(args, "mode", None):
        cfg = replace(cfg, coordination_mode=CoordinationMode(args.mode))
    return cfg


def _build_agents(cfg: EngineConfig, args):
    scripted = {}
    if getattr(args, "scripted", None):
        scripted = json.loads(Path(args.scripted).read_text(encoding="utf-8"))
    agents = []
    if getattr(args, "train", None):
        model = ml_train(ingest_csv(args.train))
        agents.append(MlAgent(model))
    for kind in SLM_AGENT_IDS:
        if kind.value in scripted:
            backend = ScriptedBackend(scripted[kind.value])
        elif cfg.endpoint.url:
            backend = RemoteHttpBackend(cfg.endpoint)
        else:
            continue
        agents.append(SlmAgent(kind, backend, cfg))
    if not agents:
        raise SystemExit(
            "no agents configured: provide --train for the ML agent and/or an "
            "endpoint url (or --scripted) for the SLM agents"
        )
    if "coordinator" in scripted:
        coordination_backend = ScriptedBackend(scripted["coordinator"])
    elif cfg.endpoint.url:
        coordination_backend = RemoteHttpBackend(cfg.endpoint)
    else:
        coordination_backend = None
    return agents, coordination_backend


def _registry(args):
    return load_registry(args.registry) if getattr(args, "registry", None) else default_registry()


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _cmd_predict(args) -> int:
    cfg = _load_cfg(args)
    agents, coordination_backend = _build_agents(cfg, args)
    records = ingest_csv(args.input)
    decisions = run_batch(
        records,
        agents,
        cfg,
        args.trace,
        registry=_registry(args),
        coordination_backend=coordination_backend,
    )
    out = sys.stdout
    out.write("id,prediction,confidence,source,rule\n")
    for record, decision in zip(records, decisions):
        pred = "" if decision.prediction is None else int(decision.prediction)
        out.write(
            f"{record.id},{pred},{decision.confidence},{decision.source.value},{decision.rule_fired}\n"
        )
    return 0


def _labeled_records(path):
    records = ingest_csv(path)
    if any(r.label is None for r in records):
        raise SystemExit("every input record needs a severity label for evaluation")
    return records


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    agents, coordination_backend = _build_agents(cfg, args)
    records = _labeled_records(args.input)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    decisions = run_batch(
        records,
        agents,
        cfg,
        out_dir / "traces.jsonl",
        registry=_registry(args),
        coordination_backend=coordination_backend,
    )
    report = compute_metrics(decisions, [r.label for r in records])
    _write_json(out_dir / "metrics.json", report.to_dict())
    _write_csv(
        out_dir / "metrics.csv",
        [
            {
                "accuracy": report.accuracy,
                "precision": report.precision,
                "recall": report.recall,
                "f1": report.f1,
                "abstentions": report.abstentions,
            }
        ],
    )
    print(f"accuracy={report.accuracy:.4f} macro_f1={report.f1:.4f} abstentions={report.abstentions}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    agents, coordination_backend = _build_agents(cfg, args)
    records = _labeled_records(args.input)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = run_ablation(
        records, agents, cfg, registry=_registry(args), coordination_backend=coordination_backend
    )
    drops = relative_accuracy_drops(reports)
    _write_json(
        out_dir / "ablation.json",
        {
            "reports": {key: report.to_dict() for key, report in reports.items()},
            "relative_accuracy_drop": drops,
        },
    )
    _write_csv(
        out_dir / "ablation.csv",
        [
            {
                "excluded": key,
                "accuracy": report.accuracy,
                "f1": report.f1,
                "relative_drop": drops.get(key, 0.0),
            }
            for key, report in reports.items()
        ],
    )
    for key, report in reports.items():
        print(f"excluded={key} accuracy={report.accuracy:.4f}")
    return 0


def _load_scenarios(path: str | None) -> list[ImbalanceScenario]:
    if not path:
        return default_scenarios()
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        ImbalanceScenario(
            entry["name"],
            {Severity(int(k)): float(p) for k, p in entry["distribution"].items()},
        )
        for entry in data
    ]


def _cmd_imbalance(args) -> int:
    cfg = _load_cfg(args)
    agents, coordination_backend = _build_agents(cfg, args)
    if coordination_backend is None:
        raise SystemExit("the imbalance suite needs a coordination backend (endpoint or --scripted)")
    records = _labeled_records(args.input)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = run_imbalance_suite(
        records,
        agents,
        cfg,
        _load_scenarios(args.scenarios),
        args.seed,
        coordination_backend=coordination_backend,
        registry=_registry(args),
        size=args.size,
    )
    _write_json(out_dir / "imbalance.json", {k: v.to_dict() for k, v in results.items()})
    _write_csv(out_dir / "imbalance.csv", comparison_table(results))
    for name, comparison in results.items():
        print(
            f"scenario={name} rule_f1={comparison.rule_based.f1:.4f} "
            f"llm_f1={comparison.llm_based.f1:.4f} fallback={comparison.llm_fallback_rate:.2f}"
        )
    return 0


def _add_common(parser: argparse.ArgumentParser, with_mode: bool = True) -> None:
    parser.add_argument("--config", help="engine config JSON file")
    parser.add_argument("--input", required=True, help="input CSV of accident records")
    parser.add_argument("--train", help="labeled CSV to train the built-in ML agent")
    parser.add_argument("--scripted", help="JSON of canned backend responses per agent")
    parser.add_argument("--registry", help="JSON feature registry override")
    if with_mode:
        parser.add_argument("--mode", choices=["rule", "llm"], help="coordination mode override")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="marble", description="Multi-agent accident severity prediction engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_predict = sub.add_parser("predict", help="predict severities and write a trace file")
    _add_common(p_predict)
    p_predict.add_argument("--trace", required=True, help="JSONL trace output path")
    p_predict.set_defaults(func=_cmd_predict)

    p_eval = sub.add_parser("eval", help="evaluate predictions against labels")
    _add_common(p_eval)
    p_eval.add_argument("--output-dir", required=True)
    p_eval.set_defaults(func=_cmd_eval)

    p_ablate = sub.add_parser("ablate", help="leave-one-agent-out ablation study")
    _add_common(p_ablate)
    p_ablate.add_argument("--output-dir", required=True)
    p_ablate.set_defaults(func=_cmd_ablate)

    p_imb = sub.add_parser("imbalance", help="class-imbalance robustness sweep")
    _add_common(p_imb, with_mode=False)
    p_imb.add_argument("--scenarios", help="JSON list of scenarios (name + distribution)")
    p_imb.add_argument("--seed", type=int, default=0)
    p_imb.add_argument("--size", type=int, default=None, help="resampled set size per scenario")
    p_imb.add_argument("--output-dir", required=True)
    p_imb.set_defaults(func=_cmd_imbalance)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
