"""Within-cohort comparison of access terms for similarly situated buyers."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .domain import RiskClass, TenantProfile, Tier, ValidationError, VolumeBand


@dataclass(frozen=True)
class BuyerTerms:
    tenant_id: str
    price_per_million_tokens: float
    quota_rps: float
    context_limit: int
    feature_set: frozenset[str] = frozenset()
    effective_date: str | None = None

    def __post_init__(self):
        if self.quota_rps < 0:
            raise ValidationError("quota_rps < 0", "quota_rps")
        if self.context_limit <= 0:
            raise ValidationError("context_limit <= 0", "context_limit")
        if self.price_per_million_tokens < 0:
            raise ValidationError("price < 0", "price_per_million_tokens")

    def to_dict(self) -> dict:
        return {
            "tenant_id": self.tenant_id,
            "price_per_million_tokens": self.price_per_million_tokens,
            "quota_rps": self.quota_rps,
            "context_limit": self.context_limit,
            "feature_set": sorted(self.feature_set),
            "effective_date": self.effective_date,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BuyerTerms":
        return cls(
            tenant_id=str(d["tenant_id"]),
            price_per_million_tokens=float(d["price_per_million_tokens"]),
            quota_rps=float(d["quota_rps"]),
            context_limit=int(d["context_limit"]),
            feature_set=frozenset(str(f) for f in d.get("feature_set") or ()),
            effective_date=d.get("effective_date"),
        )


@dataclass(frozen=True, order=True)
class CohortKey:
    tier: Tier
    volume_band: VolumeBand
    region: str
    risk_class: RiskClass

    @classmethod
    def of(cls, t: TenantProfile) -> "CohortKey":
        return cls(t.tier, t.volume_band, t.region, t.risk_class)

    def to_dict(self) -> dict:
        return {
            "tier": self.tier.value,
            "volume_band": self.volume_band.value,
            "region": self.region,
            "risk_class": self.risk_class.value,
        }


def volume_band_for(monthly_tokens: float, edges: Sequence[float] = (1e8, 1e10)) -> VolumeBand:
    """Map a usage volume to a band; ``edges`` are the low/mid and mid/high cut points."""
    lo, hi = edges
    if monthly_tokens < lo:
        return VolumeBand.LOW
    return VolumeBand.MID if monthly_tokens < hi else VolumeBand.HIGH


Buyer = tuple[TenantProfile, BuyerTerms]


def cohort(buyers: Iterable[Buyer]) -> dict[CohortKey, list[Buyer]]:
    groups: dict[CohortKey, list[Buyer]] = defaultdict(list)
    for profile, terms in buyers:
        if profile.tenant_id != terms.tenant_id:
            raise ValidationError(f"terms for {terms.tenant_id} paired with profile {profile.tenant_id}", "tenant_id")
        groups[CohortKey.of(profile)].append((profile, terms))
    return {k: sorted(v, key=lambda b: b[0].tenant_id) for k, v in sorted(groups.items())}


@dataclass(frozen=True)
class DisparityFinding:
    cohort: CohortKey
    kind: str  # price | quota | context_limit | feature
    advantaged: tuple[str, ...]
    disadvantaged: tuple[str, ...]
    disparity: float | None  # relative to the advantaged value; None for features
    feature: str | None = None
    suppressed_by_criteria: bool = False
    criteria_ref: str | None = None

    def to_dict(self) -> dict:
        d = self.disparity
        return {
            "cohort": self.cohort.to_dict(),
            "kind": self.kind,
            "feature": self.feature,
            "advantaged": list(self.advantaged),
            "disadvantaged": list(self.disadvantaged),
            "disparity": "inf" if d is not None and math.isinf(d) else d,
            "suppressed_by_criteria": self.suppressed_by_criteria,
            "criteria_ref": self.criteria_ref,
        }


@dataclass
class CohortResult:
    key: CohortKey
    findings: list[DisparityFinding] = field(default_factory=list)
    comparable: bool = True


def _gap(best: float, value: float) -> float:
    if best == value:
        return 0.0
    if best == 0:
        return math.inf
    return abs(value - best) / best


def terms_disparity(
    key: CohortKey,
    members: Sequence[Buyer],
    price_tolerance: float = 0.05,
    terms_tolerance: float = 0.05,
) -> CohortResult:
    """Flag price, quota, context and feature differences inside one cohort.

    Each numeric finding pairs one disadvantaged buyer with the best-placed
    buyer (cheapest price, highest quota or context; ties go to the
    smallest tenant id).  Feature findings are categorical: one per feature
    held by some members but not all.
    """
    if len(members) < 2:
        return CohortResult(key, comparable=False)
    terms = sorted((t for _, t in members), key=lambda t: t.tenant_id)
    found: list[DisparityFinding] = []

    def numeric(kind, get, lower_is_better, tol):
        best = min(terms, key=lambda t: (get(t) if lower_is_better else -get(t), t.tenant_id))
        for t in terms:
            gap = _gap(get(best), get(t))
            if gap > tol:
                found.append(DisparityFinding(key, kind, (best.tenant_id,), (t.tenant_id,), gap))

    numeric("price", lambda t: t.price_per_million_tokens, True, price_tolerance)
    numeric("quota", lambda t: t.quota_rps, False, terms_tolerance)
    numeric("context_limit", lambda t: t.context_limit, False, terms_tolerance)

    for feat in sorted(set().union(*(t.feature_set for t in terms))):
        have = tuple(t.tenant_id for t in terms if feat in t.feature_set)
        lack = tuple(t.tenant_id for t in terms if feat not in t.feature_set)
        if lack:
            found.append(DisparityFinding(key, "feature", have, lack, None, feature=feat))
    return CohortResult(key, found)


@dataclass
class FrandAudit:
    cohorts: list[CohortResult]

    @property
    def findings(self) -> list[DisparityFinding]:
        return [f for c in self.cohorts for f in c.findings]

    @property
    def violations(self) -> list[DisparityFinding]:
        return [f for f in self.findings if not f.suppressed_by_criteria]

    @property
    def verdict(self) -> str:
        if self.violations:
            return "violation"
        return "pass" if any(c.comparable for c in self.cohorts) else "insufficient"


def audit_terms(
    buyers: Iterable[Buyer],
    price_tolerance: float = 0.05,
    terms_tolerance: float = 0.05,
    criteria=None,
) -> FrandAudit:
    results = []
    for key, members in cohort(buyers).items():
        res = terms_disparity(key, members, price_tolerance, terms_tolerance)
        if criteria is not None:
            res.findings = [
                DisparityFinding(**{**f.__dict__, "suppressed_by_criteria": True, "criteria_ref": criteria.ref})
                if criteria.covers_kind(f.kind)
                else f
                for f in res.findings
            ]
        results.append(res)
    return FrandAudit(results)
