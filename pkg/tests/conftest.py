import pytest

from neutral_inference.domain import Party, RequestClass, Stratum, TenantProfile, Tier
from neutral_inference.gateway import PolicySpec, ServiceModel
from neutral_inference.probes import ProbePlan, StratumPlan

FP = TenantProfile("fp-a", Party.FIRST_PARTY, Tier.PRO, "eu-west")
TP = TenantProfile("tp-b", Party.THIRD_PARTY, Tier.PRO, "eu-west")


@pytest.fixture
def tenants():
    return [FP, TP]


def pair_plan(duration_ms, pair_rate, request_class=RequestClass.SHORT, region="eu-west"):
    return ProbePlan(
        duration_ms=duration_ms,
        pair_rate=pair_rate,
        strata=[StratumPlan(Stratum(region, Tier.PRO, request_class), FP.tenant_id, TP.tenant_id)],
    )


def policy_with(**qos) -> PolicySpec:
    p = PolicySpec.neutral()
    for knob, per_party in qos.items():
        getattr(p.qos, knob).update(per_party)
    return p.validate()


def loaded_service(concurrency=1) -> ServiceModel:
    return ServiceModel(concurrency=concurrency).validate()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        ok, title, detail = mod.RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
