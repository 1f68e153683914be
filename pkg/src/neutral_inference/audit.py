"""End-to-end audit: simulate or ingest, run the three audits, assemble the report.

Exit status contract (bit flags, OR-ed together):

    0   every obligation passed or had insufficient data
    4   QoS parity violation
    8   routing transparency violation (chain breach, incomplete record, or bias)
    16  FRAND violation
    2   configuration or input error (nothing audited)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Sequence

from .frand import FrandAudit, audit_terms
from .gateway import CriteriaRef, init_gateway
from .probes import SampleSet, generate_schedule, run_probes
from .qos import QoSAudit, audit_samples
from .records import (
    read_benchmark,
    read_routing_log,
    read_samples,
    read_terms,
    write_benchmark,
    write_routing_log,
    write_samples,
    write_terms,
)
from .routing import GENESIS, ChainVerdict, RoutingBiasFinding, RoutingLog, ToolBenchmark, bias_test, validate_record, verify_chain
from .scenario import Scenario, load_scenario
from .settings import AuditSettings

TOOL_NAME = "neutral-inference-audit"
PASS, VIOLATION, INSUFFICIENT = "pass", "violation", "insufficient"
EXIT_CONFIG = 2
EXIT_BITS = {"qos": 4, "routing": 8, "frand": 16}


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class RoutingAudit:
    records: int
    complete: int
    incomplete: list[dict] = field(default_factory=list)
    chain: ChainVerdict | None = None
    bias: list[RoutingBiasFinding] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        if self.records == 0:
            return INSUFFICIENT
        if (self.chain and not self.chain.intact) or self.incomplete:
            return VIOLATION
        if any(f.flagged and not f.suppressed_by_criteria for f in self.bias):
            return VIOLATION
        if not any(not f.under_sampled for f in self.bias):
            return INSUFFICIENT
        return PASS

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "completeness": {
                "records": self.records,
                "complete": self.complete,
                "incomplete": len(self.incomplete),
                "violations": self.incomplete,
            },
            "chain": self.chain.to_dict() if self.chain else None,
            "bias": [f.to_dict() for f in self.bias if not f.suppressed_by_criteria],
            "suppressed": [f.to_dict() for f in self.bias if f.suppressed_by_criteria],
        }


def audit_routing(
    records: Sequence,
    benchmark: ToolBenchmark | None,
    settings: AuditSettings,
    criteria: CriteriaRef | None = None,
    genesis: str = GENESIS,
    seal: tuple[int, str] | None = None,
) -> RoutingAudit:
    dicts = [r.to_dict() if hasattr(r, "to_dict") else r for r in records]
    incomplete = []
    for pos, d in enumerate(dicts):
        v = validate_record(d)
        if not v.complete:
            incomplete.append({"position": pos, "request_id": d.get("request_id"), "violations": v.violations})
    result = RoutingAudit(records=len(dicts), complete=len(dicts) - len(incomplete), incomplete=incomplete)
    if not dicts:
        return result
    result.chain = verify_chain(dicts, genesis, seal)
    if benchmark is not None:
        # incomplete records cannot be scored; the completeness verdict already covers them
        usable = [d for d, ok in zip(dicts, (validate_record(d).complete for d in dicts)) if ok]
        findings = bias_test(usable, benchmark, settings.significance, settings.routing_min_n)
        if criteria is not None and criteria.covers_kind("routing_bias"):
            for f in findings:
                f.suppressed_by_criteria = True
        result.bias = findings
    return result


@dataclass
class AuditReport:
    seed: int
    settings: AuditSettings
    scenario_name: str | None = None
    scenario_digest: str | None = None
    inputs_digest: dict[str, str] | None = None
    qos: QoSAudit | None = None
    routing: RoutingAudit | None = None
    frand: FrandAudit | None = None

    @property
    def verdicts(self) -> dict[str, str]:
        return {
            "qos": self.qos.verdict if self.qos else INSUFFICIENT,
            "routing": self.routing.verdict if self.routing else INSUFFICIENT,
            "frand": self.frand.verdict if self.frand else INSUFFICIENT,
        }

    def exit_code(self) -> int:
        code = 0
        for name, verdict in self.verdicts.items():
            if verdict == VIOLATION:
                code |= EXIT_BITS[name]
        return code

    def to_dict(self, timestamp: bool = True) -> dict:
        meta = {"tool": TOOL_NAME, "version": _version()}
        if timestamp:
            meta["generated_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
        qos = None
        if self.qos is not None:
            qos = {
                "verdict": self.qos.verdict,
                "findings": [f.to_dict() for f in self.qos.findings if not f.suppressed_by_criteria],
                "suppressed": [f.to_dict() for f in self.qos.suppressed],
                "under_sampled": self.qos.under_sampled,
            }
        frand = None
        if self.frand is not None:
            frand = {
                "verdict": self.frand.verdict,
                "findings": [f.to_dict() for f in self.frand.violations],
                "suppressed": [f.to_dict() for f in self.frand.findings if f.suppressed_by_criteria],
                "uncomparable": [c.key.to_dict() for c in self.frand.cohorts if not c.comparable],
            }
        return {
            "meta": meta,
            "scenario": {"name": self.scenario_name, "digest": self.scenario_digest, "inputs": self.inputs_digest},
            "seed": self.seed,
            "settings": self.settings.to_dict(),
            "verdicts": self.verdicts,
            "exit_code": self.exit_code(),
            "qos": qos,
            "routing": self.routing.to_dict() if self.routing else None,
            "frand": frand,
        }

    def to_json(self, timestamp: bool = True) -> str:
        return json.dumps(self.to_dict(timestamp), indent=2, sort_keys=True, allow_nan=False) + "\n"


@dataclass
class Simulation:
    samples: SampleSet | None
    routing_log: RoutingLog


def simulate(scenario: Scenario) -> Simulation:
    state = init_gateway(scenario.policy, scenario.tenants, scenario.seed, scenario.service)
    samples = None
    if scenario.probes is not None:
        schedule = generate_schedule(scenario.probes, scenario.seed, scenario.tenants)
        samples = run_probes(state, schedule, scenario.probes)
    for task in scenario.routing.tasks():
        state.route(task)
    return Simulation(samples, state.routing_log)


def audit_scenario(scenario: Scenario, sim: Simulation | None = None) -> AuditReport:
    sim = sim or simulate(scenario)
    settings = scenario.audit
    criteria = scenario.policy.criteria_ref
    report = AuditReport(
        seed=scenario.seed,
        settings=settings,
        scenario_name=scenario.name,
        scenario_digest=scenario.digest,
    )
    if sim.samples is not None:
        report.qos = audit_samples(sim.samples, settings, scenario.seed, criteria)
    if sim.routing_log.records:
        report.routing = audit_routing(sim.routing_log.records, scenario.routing.benchmark(), settings, criteria)
    report.frand = audit_terms(scenario.buyers(), settings.price_tolerance, settings.terms_tolerance, criteria)
    return report


def export_artifacts(scenario: Scenario, sim: Simulation, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {}
    if sim.samples is not None:
        paths["samples"] = d / "samples.ndjson"
        write_samples(paths["samples"], sim.samples)
    if sim.routing_log.records:
        paths["routing_log"] = d / "routing.ndjson"
        write_routing_log(paths["routing_log"], sim.routing_log)
        paths["benchmark"] = d / "benchmark.json"
        write_benchmark(paths["benchmark"], scenario.routing.benchmark())
    paths["terms"] = d / "terms.ndjson"
    write_terms(paths["terms"], scenario.buyers())
    return paths


def run_scenario(
    config: str | Path | Scenario,
    seed_override: int | None = None,
    out: str | Path | None = None,
    export_dir: str | Path | None = None,
    timestamp: bool = True,
) -> AuditReport:
    scenario = config if isinstance(config, Scenario) else load_scenario(config)
    if seed_override is not None:
        scenario = scenario.with_seed(seed_override)
    sim = simulate(scenario)
    if export_dir is not None:
        export_artifacts(scenario, sim, export_dir)
    report = audit_scenario(scenario, sim)
    if out is not None:
        Path(out).write_text(report.to_json(timestamp), encoding="utf-8")
    return report


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def ingest(
    samples_path=None,
    routing_log_path=None,
    terms_path=None,
    benchmark_path=None,
    config=None,
    seed: int | None = None,
    out=None,
    timestamp: bool = True,
) -> AuditReport:
    """Audit externally captured artifacts; audits without input report insufficient.

    ``config`` (a scenario file or name) supplies thresholds and any
    objective-criteria reference; its seed drives the bootstrap unless
    ``seed`` is given.
    """
    if not any((samples_path, routing_log_path, terms_path)):
        raise ValueError("ingest needs at least one of samples, routing log, terms")
    settings, criteria, base_seed = AuditSettings(), None, 0
    if config is not None:
        scenario = config if isinstance(config, Scenario) else load_scenario(config)
        settings, criteria, base_seed = scenario.audit, scenario.policy.criteria_ref, scenario.seed
    seed = base_seed if seed is None else seed

    inputs = {}
    report = AuditReport(seed=seed, settings=settings)
    if samples_path:
        inputs["samples"] = _file_digest(samples_path)
        report.qos = audit_samples(read_samples(samples_path), settings, seed, criteria)
    if routing_log_path:
        inputs["routing_log"] = _file_digest(routing_log_path)
        header, records = read_routing_log(routing_log_path)
        benchmark = read_benchmark(benchmark_path) if benchmark_path else None
        if benchmark_path:
            inputs["benchmark"] = _file_digest(benchmark_path)
        seal = (header["records"], header["head"]) if "head" in header else None
        report.routing = audit_routing(records, benchmark, settings, criteria, header["genesis"], seal)
    if terms_path:
        inputs["terms"] = _file_digest(terms_path)
        report.frand = audit_terms(read_terms(terms_path), settings.price_tolerance, settings.terms_tolerance, criteria)
    report.inputs_digest = inputs
    if out is not None:
        Path(out).write_text(report.to_json(timestamp), encoding="utf-8")
    return report
