"""Shared vocabulary: tenant profiles, strata and the enumerated domains."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable


class ValidationError(ValueError):
    """Raised when an input violates a declared invariant.

    ``field`` names the offending knob or attribute so callers can point
    the user at it.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class _Choice(str, Enum):
    @classmethod
    def parse(cls, value: Any, field: str | None = None):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            allowed = ", ".join(m.value for m in cls)
            raise ValidationError(
                f"{value!r} is not one of {{{allowed}}}", field or cls.__name__
            ) from None

    def __str__(self) -> str:
        return self.value


class Party(_Choice):
    FIRST_PARTY = "first_party"
    THIRD_PARTY = "third_party"


class Tier(_Choice):
    BASIC = "basic"
    PRO = "pro"
    ENTERPRISE = "enterprise"


class VolumeBand(_Choice):
    LOW = "low"
    MID = "mid"
    HIGH = "high"


class RiskClass(_Choice):
    STANDARD = "standard"
    ELEVATED = "elevated"


class RequestClass(_Choice):
    SHORT = "short"
    LONG = "long"
    TOOL_USE = "tool_use"


class Outcome(_Choice):
    SUCCESS = "success"
    TIMEOUT = "timeout"
    ERROR = "error"
    QUOTA_DENIED = "quota_denied"


@dataclass(frozen=True, order=True)
class Stratum:
    region: str
    tier: Tier
    request_class: RequestClass

    def key(self) -> str:
        return f"{self.region}/{self.tier.value}/{self.request_class.value}"

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "tier": self.tier.value,
            "request_class": self.request_class.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Stratum":
        return cls(
            region=str(d["region"]),
            tier=Tier.parse(d["tier"], "tier"),
            request_class=RequestClass.parse(d["request_class"], "request_class"),
        )


@dataclass(frozen=True)
class TenantProfile:
    tenant_id: str
    party: Party
    tier: Tier
    region: str
    volume_band: VolumeBand = VolumeBand.MID
    risk_class: RiskClass = RiskClass.STANDARD

    @classmethod
    def from_dict(cls, d: dict) -> "TenantProfile":
        if not d.get("tenant_id"):
            raise ValidationError("missing tenant_id", "tenant_id")
        if not d.get("region"):
            raise ValidationError("missing region", "region")
        return cls(
            tenant_id=str(d["tenant_id"]),
            party=Party.parse(d.get("party"), "party"),
            tier=Tier.parse(d.get("tier"), "tier"),
            region=str(d["region"]),
            volume_band=VolumeBand.parse(d.get("volume_band", "mid"), "volume_band"),
            risk_class=RiskClass.parse(d.get("risk_class", "standard"), "risk_class"),
        )

    def to_dict(self) -> dict:
        return {
            "tenant_id": self.tenant_id,
            "party": self.party.value,
            "tier": self.tier.value,
            "region": self.region,
            "volume_band": self.volume_band.value,
            "risk_class": self.risk_class.value,
        }


def check_unique_tenants(tenants: Iterable[TenantProfile]) -> dict[str, TenantProfile]:
    by_id: dict[str, TenantProfile] = {}
    for t in tenants:
        if t.tenant_id in by_id:
            raise ValidationError(f"duplicate tenant id {t.tenant_id!r}", "tenant_id")
        by_id[t.tenant_id] = t
    return by_id


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def digest(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("ascii")).hexdigest()


def stable_key(*parts: Any) -> int:
    """64-bit integer derived from ``parts``; independent of PYTHONHASHSEED."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")
