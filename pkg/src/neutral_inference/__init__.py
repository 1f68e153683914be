"""Simulate an inference gateway and audit it for non-price discrimination."""

from .audit import AuditReport, ingest, run_scenario
from .domain import Outcome, Party, RequestClass, Stratum, TenantProfile, Tier, ValidationError
from .frand import BuyerTerms, CohortKey, cohort, terms_disparity
from .gateway import PolicySpec, ProbeRequest, QoSSample, ServiceModel, Tool, ToolTask, init_gateway, route, serve
from .probes import ProbePlan, SampleSet, generate_schedule, run_probes, stratify
from .qos import WedgeFinding, WedgeMetric, percentile, rate, sustained_flags, wedge
from .routing import RoutingRecord, ToolBenchmark, bias_test, expected_share, validate_record, verify_chain
from .scenario import load_scenario

__all__ = [
    "AuditReport",
    "BuyerTerms",
    "CohortKey",
    "Outcome",
    "Party",
    "PolicySpec",
    "ProbePlan",
    "ProbeRequest",
    "QoSSample",
    "RequestClass",
    "RoutingRecord",
    "SampleSet",
    "ServiceModel",
    "Stratum",
    "TenantProfile",
    "Tier",
    "Tool",
    "ToolBenchmark",
    "ToolTask",
    "ValidationError",
    "WedgeFinding",
    "WedgeMetric",
    "bias_test",
    "cohort",
    "expected_share",
    "generate_schedule",
    "ingest",
    "init_gateway",
    "load_scenario",
    "percentile",
    "rate",
    "route",
    "run_probes",
    "run_scenario",
    "serve",
    "stratify",
    "sustained_flags",
    "terms_disparity",
    "validate_record",
    "verify_chain",
    "wedge",
]
