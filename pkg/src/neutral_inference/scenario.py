"""Scenario configuration: one YAML file drives simulation and audit.

See docs/scenario.md for the schema.  Errors name the file, section and
field that failed.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .domain import Party, TenantProfile, Tier, ValidationError, check_unique_tenants, digest
from .frand import Buyer, BuyerTerms
from .gateway import PolicySpec, ServiceModel, Tool, ToolTask, per_party_tier
from .probes import ProbePlan
from .routing import ToolBenchmark
from .settings import AuditSettings

SECTIONS = ("name", "description", "seed", "tenants", "policy", "service", "probes", "routing", "frand", "audit")


class ConfigError(ValidationError):
    def __init__(self, path, section: str, field: str | None, message: str):
        self.path, self.section = str(path), section
        ValueError.__init__(self, f"{path}: [{section}] {field or '-'}: {message}")
        self.field = field


@dataclass
class RoutingPlan:
    catalog: dict[str, tuple[Tool, ...]] = field(default_factory=dict)
    tasks_per_class: int = 0

    def tasks(self) -> list[ToolTask]:
        classes = sorted(self.catalog)
        return [
            ToolTask(f"t{k:06d}-{tc}", tc, self.catalog[tc])
            for k in range(self.tasks_per_class)
            for tc in classes
        ]

    def benchmark(self) -> ToolBenchmark:
        return ToolBenchmark(
            {(tc, t.tool_id): (t.quality, t.first_party) for tc, tools in self.catalog.items() for t in tools}
        )

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "RoutingPlan":
        d = d or {}
        catalog = {}
        for tc, tools in (d.get("catalog") or {}).items():
            catalog[str(tc)] = tuple(
                Tool(str(t["tool_id"]), float(t["quality"]), bool(t.get("first_party", False))) for t in tools
            )
            if not catalog[str(tc)]:
                raise ValidationError("empty catalog", f"catalog.{tc}")
        n = int(d.get("tasks_per_class", 0))
        if n < 0:
            raise ValidationError("must be >= 0", "tasks_per_class")
        return cls(catalog, n)


@dataclass
class FrandPlan:
    price: dict[tuple[Party, Tier], float] = field(default_factory=dict)
    default_price: float = 10.0
    unlimited_quota_rps: float = 1_000.0
    unlimited_context: int = 128_000
    buyers: list[dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "FrandPlan":
        d = d or {}
        return cls(
            price=per_party_tier(d.get("price_per_million_tokens"), "price_per_million_tokens", float),
            default_price=float(d.get("default_price", 10.0)),
            unlimited_quota_rps=float(d.get("unlimited_quota_rps", 1_000.0)),
            unlimited_context=int(d.get("unlimited_context", 128_000)),
            buyers=list(d.get("buyers") or []),
        )


@dataclass
class Scenario:
    name: str
    seed: int
    tenants: list[TenantProfile]
    policy: PolicySpec
    service: ServiceModel
    probes: ProbePlan | None
    routing: RoutingPlan
    frand: FrandPlan
    audit: AuditSettings
    raw: dict = field(default_factory=dict, repr=False)
    source: str = "<memory>"

    @property
    def digest(self) -> str:
        body = {k: v for k, v in self.raw.items() if k != "seed"}
        return digest(body)

    def with_seed(self, seed: int) -> "Scenario":
        s = copy.copy(self)
        s.seed = int(seed)
        return s

    def buyers(self) -> list[Buyer]:
        """Terms per tenant: explicit ``frand.buyers`` entries, else derived from the policy."""
        explicit = {str(b["tenant_id"]): b for b in self.frand.buyers}
        g = self.policy.gating
        out = []
        for t in self.tenants:
            if t.tenant_id in explicit:
                terms = BuyerTerms.from_dict(explicit[t.tenant_id])
            else:
                quota = self.policy.qos.rate_limit.get((t.party, t.tier))
                context = g.context_for(t.party, t.tier)
                features = {f"model:{g.version_for(t.party, t.tier)}"}
                if g.tool_use_for(t.party, t.tier):
                    features.add("tool_use")
                terms = BuyerTerms(
                    tenant_id=t.tenant_id,
                    price_per_million_tokens=self.frand.price.get((t.party, t.tier), self.frand.default_price),
                    quota_rps=self.frand.unlimited_quota_rps if quota is None else quota,
                    context_limit=self.frand.unlimited_context if context is None else context,
                    feature_set=frozenset(features),
                )
            out.append((t, terms))
        return out


def _section(path, name, build, value):
    try:
        return build(value)
    except ConfigError:
        raise
    except ValidationError as e:
        msg = str(e)
        if e.field and msg.startswith(f"{e.field}: "):
            msg = msg[len(e.field) + 2 :]
        raise ConfigError(path, name, e.field, msg) from None
    except KeyError as e:
        raise ConfigError(path, name, str(e.args[0]), "missing field") from None
    except (TypeError, ValueError, AttributeError) as e:
        raise ConfigError(path, name, None, str(e)) from None


def parse_scenario(data: Mapping[str, Any], source: str = "<memory>") -> Scenario:
    if not isinstance(data, Mapping):
        raise ConfigError(source, "scenario", None, "top level must be a mapping")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(source, unknown[0], None, "unknown section")
    if "tenants" not in data:
        raise ConfigError(source, "tenants", None, "missing section")

    tenants = _section(source, "tenants", lambda v: [TenantProfile.from_dict(t) for t in v], data["tenants"])
    by_id = _section(source, "tenants", check_unique_tenants, tenants)
    policy = _section(source, "policy", PolicySpec.from_dict, data.get("policy"))
    service = _section(source, "service", ServiceModel.from_dict, data.get("service"))
    audit = _section(source, "audit", AuditSettings.from_dict, data.get("audit"))
    probes = None
    if data.get("probes"):
        probes = _section(source, "probes", ProbePlan.from_dict, data["probes"])
        _section(source, "probes", lambda p: p.validate(by_id, min_duration_ms=audit.window_ms), probes)
    routing = _section(source, "routing", RoutingPlan.from_dict, data.get("routing"))
    frand = _section(source, "frand", FrandPlan.from_dict, data.get("frand"))
    for b in frand.buyers:
        if str(b.get("tenant_id")) not in by_id:
            raise ConfigError(source, "frand", "buyers.tenant_id", f"unknown tenant {b.get('tenant_id')!r}")
    try:
        seed = int(data.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError(source, "seed", None, "must be an integer") from None
    return Scenario(
        name=str(data.get("name", Path(source).stem)),
        seed=seed,
        tenants=tenants,
        policy=policy,
        service=service,
        probes=probes,
        routing=routing,
        frand=frand,
        audit=audit,
        raw=dict(data),
        source=source,
    )


def bundled_scenarios() -> list[str]:
    root = resources.files("neutral_inference") / "scenarios"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve(path_or_name: str | Path) -> Path:
    p = Path(path_or_name)
    if p.exists():
        return p
    bundled = resources.files("neutral_inference") / "scenarios" / f"{path_or_name}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(path_or_name, "scenario", None, "no such file or bundled scenario")


def load_scenario(path_or_name: str | Path) -> Scenario:
    path = resolve(path_or_name)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "unknown line"
        raise ConfigError(path, "scenario", None, f"YAML parse error at {where}") from None
    return parse_scenario(data or {}, str(path))
