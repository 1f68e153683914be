import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neutral_inference.domain import Party, RiskClass, TenantProfile, Tier, ValidationError, VolumeBand
from neutral_inference.frand import BuyerTerms, CohortKey, audit_terms, cohort, terms_disparity, volume_band_for
from neutral_inference.gateway import CriteriaRef


def buyer(tid, price=100.0, quota=50.0, context=128_000, features=(), region="eu-west", party=Party.THIRD_PARTY):
    p = TenantProfile(tid, party, Tier.PRO, region)
    return p, BuyerTerms(tid, price, quota, context, frozenset(features))


def _one(members, **kw):
    key = CohortKey.of(members[0][0])
    return terms_disparity(key, members, **kw)


def test_cohort_keys():
    assert len(cohort([buyer("a"), buyer("b")])) == 1
    assert len(cohort([buyer("a"), buyer("b", region="us-east")])) == 2


def test_cohort_rejects_mismatched_terms():
    p, _ = buyer("a")
    _, t = buyer("b")
    with pytest.raises(ValidationError):
        cohort([(p, t)])


def test_cohort_partitions_random_buyers():
    rng = random.Random(3)
    buyers = []
    for i in range(100):
        p = TenantProfile(
            f"t{i}",
            rng.choice(list(Party)),
            rng.choice(list(Tier)),
            rng.choice(["eu-west", "us-east"]),
            rng.choice(list(VolumeBand)),
            rng.choice(list(RiskClass)),
        )
        buyers.append((p, BuyerTerms(p.tenant_id, rng.uniform(5, 20), 10, 1000)))
    groups = cohort(buyers)
    assert Counter(b[0].tenant_id for g in groups.values() for b in g) == Counter(b[0].tenant_id for b in buyers)
    for key, members in groups.items():
        assert all(CohortKey.of(p) == key for p, _ in members)


def test_clone_cohort_has_no_findings():
    res = _one([buyer(f"b{i}", features=("tool_use",)) for i in range(5)])
    assert res.comparable and res.findings == []


def test_twenty_percent_premium():
    res = _one([buyer("a", 100.0), buyer("b", 120.0)])
    (f,) = res.findings
    assert f.kind == "price" and f.advantaged == ("a",) and f.disadvantaged == ("b",)
    assert f.disparity == pytest.approx(0.20)


def test_premium_inside_tolerance_passes():
    assert _one([buyer("a", 100.0), buyer("b", 104.0)]).findings == []


def test_feature_gating():
    res = _one([
        buyer("fp", features=("model:v2", "tool_use"), party=Party.FIRST_PARTY),
        buyer("tp", features=("tool_use",)),
    ])
    (f,) = res.findings
    assert (f.kind, f.feature, f.advantaged, f.disadvantaged) == ("feature", "model:v2", ("fp",), ("tp",))


def test_quota_and_context():
    res = _one([buyer("a", quota=100, context=128_000), buyer("b", quota=50, context=32_000)])
    kinds = {f.kind: f.disparity for f in res.findings}
    assert kinds == {"quota": 0.5, "context_limit": 0.75}


def test_singleton_is_uncomparable():
    res = _one([buyer("a")])
    assert not res.comparable and res.findings == []
    assert audit_terms([buyer("a")]).verdict == "insufficient"


def test_audit_verdicts_and_suppression():
    buyers = [buyer("a", 100.0), buyer("b", 120.0)]
    assert audit_terms(buyers).verdict == "violation"
    suppressed = audit_terms(buyers, criteria=CriteriaRef("cost-memo", frozenset({"price"})))
    assert suppressed.verdict == "pass"
    assert all(f.suppressed_by_criteria and f.criteria_ref == "cost-memo" for f in suppressed.findings)
    assert audit_terms([buyer("a"), buyer("b")]).verdict == "pass"


def test_invalid_terms():
    with pytest.raises(ValidationError):
        BuyerTerms("a", 1.0, -1.0, 10)
    with pytest.raises(ValidationError):
        BuyerTerms("a", 1.0, 1.0, 0)


def test_volume_bands():
    assert volume_band_for(1e7) is VolumeBand.LOW
    assert volume_band_for(1e8) is VolumeBand.MID
    assert volume_band_for(5e10) is VolumeBand.HIGH


terms_lists = st.lists(
    st.tuples(
        st.sampled_from([80.0, 100.0, 103.0, 120.0]),
        st.sampled_from([10.0, 50.0]),
        st.sampled_from([32_000, 128_000]),
        st.frozensets(st.sampled_from(["tool_use", "batch", "model:v2"])),
    ),
    min_size=2,
    max_size=6,
)


def _members(rows):
    return [buyer(f"b{i}", *row) for i, row in enumerate(rows)]


def _canon(res):
    return sorted(repr(f) for f in res.findings)


@settings(max_examples=80, deadline=None)
@given(terms_lists, st.randoms(use_true_random=False))
def test_permutation_invariance(rows, rnd):
    members = _members(rows)
    shuffled = list(members)
    rnd.shuffle(shuffled)
    assert _canon(_one(members)) == _canon(_one(shuffled))


@settings(max_examples=80, deadline=None)
@given(terms_lists, st.floats(0.0, 0.3), st.floats(0.0, 0.3))
def test_shrinking_tolerance_keeps_price_findings(rows, t1, t2):
    lo, hi = sorted((t1, t2))
    members = _members(rows)

    def prices(tol):
        return {(f.advantaged, f.disadvantaged) for f in _one(members, price_tolerance=tol).findings if f.kind == "price"}

    assert prices(hi) <= prices(lo)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([80.0, 100.0]), st.integers(2, 6))
def test_clones_never_flag(price, n):
    assert _one([buyer(f"c{i}", price) for i in range(n)]).findings == []
