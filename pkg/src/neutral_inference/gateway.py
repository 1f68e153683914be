"""Discrete-event model of an inference gateway with non-price discrimination knobs.

The gateway serves first-party and third-party tenants.  Three lever
families are exposed on :class:`PolicySpec`:

* QoS knobs: queue priority weight, token-bucket rate limits, a service
  time multiplier, injected errors and spurious quota denials.
* Feature gating: context limits, tool-use enablement, model version.
* Steering: per-tool exclusion probabilities, additive rank boosts and
  commercial-preference flags, applied when routing tool tasks.

Time is integer milliseconds.  Every random draw comes from a stream
keyed by ``(seed, tenant_id)`` (or ``(seed, "routing")``), and each
request consumes a fixed number of draws whatever its outcome, so adding
a tenant or flipping a knob never shifts anyone else's randomness.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import (
    Outcome,
    Party,
    RequestClass,
    Stratum,
    TenantProfile,
    Tier,
    ValidationError,
    check_unique_tenants,
    stable_key,
)
from .routing import NON_OBJECTIVE_EXCLUSION, RoutingLog, RoutingRecord

PARTIES = (Party.FIRST_PARTY, Party.THIRD_PARTY)
TIERS = tuple(Tier)


def _prob(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise ValidationError(f"probability {value} outside [0, 1]", name)
    return value


@dataclass(frozen=True)
class CriteriaRef:
    """Pointer to a documented objective-criteria artifact.

    ``covers`` lists the metric / finding kinds the justification applies
    to, e.g. ``latency_p95``, ``routing_bias``, ``price``.  ``*`` covers
    everything.
    """

    ref: str
    covers: frozenset[str] = frozenset({"*"})

    def covers_kind(self, kind: str) -> bool:
        return "*" in self.covers or kind in self.covers

    @classmethod
    def from_dict(cls, d: Mapping | str | None) -> "CriteriaRef | None":
        if d is None:
            return None
        if isinstance(d, str):
            return cls(ref=d)
        if not d.get("ref"):
            raise ValidationError("criteria_ref needs a non-empty 'ref'", "criteria_ref.ref")
        covers = d.get("covers", ["*"])
        if isinstance(covers, str):
            covers = [covers]
        return cls(ref=str(d["ref"]), covers=frozenset(str(c) for c in covers))

    def to_dict(self) -> dict:
        return {"ref": self.ref, "covers": sorted(self.covers)}


@dataclass
class QoSKnobs:
    priority: dict[Party, float] = field(default_factory=lambda: {p: 1.0 for p in PARTIES})
    # requests per simulated second; None means unlimited
    rate_limit: dict[tuple[Party, Tier], float | None] = field(default_factory=dict)
    tail_multiplier: dict[Party, float] = field(default_factory=lambda: {p: 1.0 for p in PARTIES})
    error_rate: dict[Party, float] = field(default_factory=lambda: {p: 0.0 for p in PARTIES})
    quota_denial_bias: dict[Party, float] = field(default_factory=lambda: {p: 0.0 for p in PARTIES})


@dataclass
class Gating:
    # tokens; None means no limit
    context_limit: dict[tuple[Party, Tier], int | None] = field(default_factory=dict)
    tool_use_enabled: dict[tuple[Party, Tier], bool] = field(default_factory=dict)
    model_version: dict[tuple[Party, Tier], str] = field(default_factory=dict)

    def context_for(self, party: Party, tier: Tier) -> int | None:
        return self.context_limit.get((party, tier))

    def tool_use_for(self, party: Party, tier: Tier) -> bool:
        return self.tool_use_enabled.get((party, tier), True)

    def version_for(self, party: Party, tier: Tier) -> str:
        return self.model_version.get((party, tier), "default")


@dataclass
class Steering:
    exclusion_probability: dict[str, float] = field(default_factory=dict)
    rank_boost: dict[str, float] = field(default_factory=dict)
    commercial_preference: frozenset[str] = frozenset()


@dataclass
class PolicySpec:
    qos: QoSKnobs = field(default_factory=QoSKnobs)
    gating: Gating = field(default_factory=Gating)
    steering: Steering = field(default_factory=Steering)
    criteria_ref: CriteriaRef | None = None

    @classmethod
    def neutral(cls) -> "PolicySpec":
        return cls()

    def validate(self) -> "PolicySpec":
        q = self.qos
        for p in PARTIES:
            w = float(q.priority.get(p, 1.0))
            if w < 0 or math.isnan(w):
                raise ValidationError(f"priority weight {w} < 0", f"qos.priority.{p}")
            m = float(q.tail_multiplier.get(p, 1.0))
            if not m >= 1.0:
                raise ValidationError(f"tail_multiplier {m} < 1", f"qos.tail_multiplier.{p}")
            _prob(q.error_rate.get(p, 0.0), f"qos.error_rate.{p}")
            _prob(q.quota_denial_bias.get(p, 0.0), f"qos.quota_denial_bias.{p}")
        for (p, t), r in q.rate_limit.items():
            if r is not None and (r < 0 or math.isnan(r)):
                raise ValidationError(f"rate limit {r} < 0", f"qos.rate_limit.{p}.{t}")
        for (p, t), c in self.gating.context_limit.items():
            if c is not None and c <= 0:
                raise ValidationError(f"context limit {c} <= 0", f"gating.context_limit.{p}.{t}")
        for tool, pr in self.steering.exclusion_probability.items():
            _prob(pr, f"steering.exclusion_probability.{tool}")
        for tool, b in self.steering.rank_boost.items():
            if math.isnan(float(b)):
                raise ValidationError("rank boost is NaN", f"steering.rank_boost.{tool}")
        return self

    def is_neutral(self) -> bool:
        q = self.qos
        return (
            len({float(q.priority.get(p, 1.0)) for p in PARTIES}) == 1
            and all(float(q.tail_multiplier.get(p, 1.0)) == 1.0 for p in PARTIES)
            and all(float(q.error_rate.get(p, 0.0)) == 0.0 for p in PARTIES)
            and all(float(q.quota_denial_bias.get(p, 0.0)) == 0.0 for p in PARTIES)
            and all(
                q.rate_limit.get((Party.FIRST_PARTY, t)) == q.rate_limit.get((Party.THIRD_PARTY, t))
                for t in TIERS
            )
            and not any(self.steering.exclusion_probability.values())
            and not any(self.steering.rank_boost.values())
        )

    # -- (de)serialisation -------------------------------------------------

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "PolicySpec":
        d = d or {}
        qd = d.get("qos") or {}
        gd = d.get("gating") or {}
        sd = d.get("steering") or {}
        qos = QoSKnobs(
            priority=_per_party(qd.get("priority"), 1.0, "qos.priority"),
            rate_limit=per_party_tier(qd.get("rate_limit"), "qos.rate_limit", float),
            tail_multiplier=_per_party(qd.get("tail_multiplier"), 1.0, "qos.tail_multiplier"),
            error_rate=_per_party(qd.get("error_rate"), 0.0, "qos.error_rate"),
            quota_denial_bias=_per_party(qd.get("quota_denial_bias"), 0.0, "qos.quota_denial_bias"),
        )
        gating = Gating(
            context_limit=per_party_tier(gd.get("context_limit"), "gating.context_limit", int),
            tool_use_enabled=per_party_tier(gd.get("tool_use_enabled"), "gating.tool_use_enabled", bool),
            model_version=per_party_tier(gd.get("model_version"), "gating.model_version", str),
        )
        steering = Steering(
            exclusion_probability={str(k): float(v) for k, v in (sd.get("exclusion_probability") or {}).items()},
            rank_boost={str(k): float(v) for k, v in (sd.get("rank_boost") or {}).items()},
            commercial_preference=frozenset(str(t) for t in (sd.get("commercial_preference") or [])),
        )
        return cls(qos, gating, steering, CriteriaRef.from_dict(d.get("criteria_ref"))).validate()

    def to_dict(self) -> dict:
        def pt(m):
            return {
                p.value: {t.value: m[(p, t)] for t in TIERS if (p, t) in m}
                for p in PARTIES
                if any((p, t) in m for t in TIERS)
            }

        q = self.qos
        return {
            "qos": {
                "priority": {p.value: q.priority.get(p, 1.0) for p in PARTIES},
                "rate_limit": pt(q.rate_limit),
                "tail_multiplier": {p.value: q.tail_multiplier.get(p, 1.0) for p in PARTIES},
                "error_rate": {p.value: q.error_rate.get(p, 0.0) for p in PARTIES},
                "quota_denial_bias": {p.value: q.quota_denial_bias.get(p, 0.0) for p in PARTIES},
            },
            "gating": {
                "context_limit": pt(self.gating.context_limit),
                "tool_use_enabled": pt(self.gating.tool_use_enabled),
                "model_version": pt(self.gating.model_version),
            },
            "steering": {
                "exclusion_probability": dict(sorted(self.steering.exclusion_probability.items())),
                "rank_boost": dict(sorted(self.steering.rank_boost.items())),
                "commercial_preference": sorted(self.steering.commercial_preference),
            },
            "criteria_ref": self.criteria_ref.to_dict() if self.criteria_ref else None,
        }


def _per_party(raw, default, name) -> dict[Party, float]:
    out = {p: float(default) for p in PARTIES}
    if raw is None:
        return out
    if not isinstance(raw, Mapping):
        v = float(raw)
        return {p: v for p in PARTIES}
    for k, v in raw.items():
        out[Party.parse(k, f"{name}.{k}")] = float(v)
    return out


def per_party_tier(raw, name, conv) -> dict:
    """Accept ``{party: value}`` or ``{party: {tier: value}}``."""
    out: dict = {}
    if not raw:
        return out
    for pk, inner in raw.items():
        p = Party.parse(pk, f"{name}.{pk}")
        if isinstance(inner, Mapping):
            for tk, v in inner.items():
                out[(p, Tier.parse(tk, f"{name}.{pk}.{tk}"))] = None if v is None else conv(v)
        else:
            for t in TIERS:
                out[(p, t)] = None if inner is None else conv(inner)
    return out


@dataclass(frozen=True)
class ClassParams:
    median_ms: float
    sigma: float
    deadline_ms: int


DEFAULT_CLASSES = {
    RequestClass.SHORT: ClassParams(median_ms=300.0, sigma=0.35, deadline_ms=5_000),
    RequestClass.LONG: ClassParams(median_ms=1_500.0, sigma=0.45, deadline_ms=20_000),
    RequestClass.TOOL_USE: ClassParams(median_ms=800.0, sigma=0.5, deadline_ms=10_000),
}


@dataclass
class ServiceModel:
    """Service-time distribution and server shape.

    Service time is ``lognormal(median, sigma) * tail_multiplier[party]``
    plus a per-region additive offset.  The offset models legitimate
    topology (colocation, fewer hops) and is the same for both parties in a
    region.  ``concurrency`` is the number of service slots behind the
    priority queue; 1 gives a single-server queue.
    """

    classes: dict[RequestClass, ClassParams] = field(default_factory=lambda: dict(DEFAULT_CLASSES))
    region_offset_ms: dict[str, int] = field(default_factory=dict)
    concurrency: int = 8

    def validate(self) -> "ServiceModel":
        if self.concurrency < 1:
            raise ValidationError("concurrency must be >= 1", "service.concurrency")
        for rc in RequestClass:
            if rc not in self.classes:
                raise ValidationError("missing class parameters", f"service.classes.{rc}")
            c = self.classes[rc]
            if c.median_ms <= 0 or c.sigma < 0 or c.deadline_ms <= 0:
                raise ValidationError("median/deadline must be > 0, sigma >= 0", f"service.classes.{rc}")
        for r, off in self.region_offset_ms.items():
            if off < 0:
                raise ValidationError("offset must be >= 0", f"service.region_offset_ms.{r}")
        return self

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "ServiceModel":
        d = d or {}
        classes = dict(DEFAULT_CLASSES)
        for k, v in (d.get("classes") or {}).items():
            rc = RequestClass.parse(k, f"service.classes.{k}")
            base = classes[rc]
            classes[rc] = ClassParams(
                median_ms=float(v.get("median_ms", base.median_ms)),
                sigma=float(v.get("sigma", base.sigma)),
                deadline_ms=int(v.get("deadline_ms", base.deadline_ms)),
            )
        return cls(
            classes=classes,
            region_offset_ms={str(k): int(v) for k, v in (d.get("region_offset_ms") or {}).items()},
            concurrency=int(d.get("concurrency", 8)),
        ).validate()

    def to_dict(self) -> dict:
        return {
            "classes": {
                rc.value: {"median_ms": c.median_ms, "sigma": c.sigma, "deadline_ms": c.deadline_ms}
                for rc, c in self.classes.items()
            },
            "region_offset_ms": dict(sorted(self.region_offset_ms.items())),
            "concurrency": self.concurrency,
        }


@dataclass(frozen=True)
class ProbeRequest:
    request_id: str
    tenant_id: str
    region: str
    request_class: RequestClass
    arrival_time: int
    payload_tokens: int


@dataclass(frozen=True)
class QoSSample:
    request_id: str
    tenant_id: str
    party: Party
    stratum: Stratum
    outcome: Outcome
    queue_delay_ms: int
    service_ms: int
    latency_ms: int
    completed_at: int

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "tenant_id": self.tenant_id,
            "party": self.party.value,
            **self.stratum.to_dict(),
            "outcome": self.outcome.value,
            "queue_delay_ms": self.queue_delay_ms,
            "service_ms": self.service_ms,
            "latency_ms": self.latency_ms,
            "completed_at": self.completed_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "QoSSample":
        s = cls(
            request_id=str(d["request_id"]),
            tenant_id=str(d["tenant_id"]),
            party=Party.parse(d["party"], "party"),
            stratum=Stratum.from_dict(d),
            outcome=Outcome.parse(d["outcome"], "outcome"),
            queue_delay_ms=int(d["queue_delay_ms"]),
            service_ms=int(d["service_ms"]),
            latency_ms=int(d["latency_ms"]),
            completed_at=int(d["completed_at"]),
        )
        s.check()
        return s

    def check(self) -> None:
        if self.latency_ms < 0:
            raise ValidationError("latency_ms < 0", "latency_ms")
        if self.outcome is Outcome.SUCCESS and self.latency_ms != self.queue_delay_ms + self.service_ms:
            raise ValidationError("success latency != queue_delay + service", "latency_ms")
        if self.outcome is Outcome.QUOTA_DENIED and (self.queue_delay_ms or self.service_ms):
            raise ValidationError("denied sample with queue/service time", "queue_delay_ms")


@dataclass(frozen=True)
class Tool:
    tool_id: str
    quality: float
    first_party: bool = False


@dataclass(frozen=True)
class ToolTask:
    request_id: str
    task_class: str
    catalog: tuple[Tool, ...]


class _TokenBucket:
    __slots__ = ("rate", "capacity", "tokens", "last")

    def __init__(self, rate_per_s: float):
        self.rate = rate_per_s / 1000.0
        self.capacity = max(rate_per_s, 1.0) if rate_per_s > 0 else 0.0
        self.tokens = self.capacity
        self.last = 0

    def take(self, now: int) -> bool:
        if self.rate <= 0:
            return False
        self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
        self.last = now
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False


@dataclass
class _Job:
    request: ProbeRequest
    tenant: TenantProfile
    service_ms: int
    weight: float
    seq: int


class GatewayState:
    """Mutable simulation state: clock, server slots, limiter buckets, routing log.

    Not shareable across threads mid-run.  Build one with :func:`init_gateway`.
    """

    def __init__(
        self,
        policy: PolicySpec,
        tenants: Sequence[TenantProfile],
        seed: int,
        service: ServiceModel | None = None,
    ):
        policy.validate()
        self.policy = policy
        self.service = (service or ServiceModel()).validate()
        self.tenants = check_unique_tenants(tenants)
        self.seed = int(seed)
        self.clock = 0
        self._slots = [0] * self.service.concurrency
        self._seq = 0
        self._rngs: dict[str, np.random.Generator] = {}
        self._buckets: dict[str, _TokenBucket | None] = {}
        self._routing_rng = np.random.default_rng([self.seed, stable_key("routing")])
        self.routing_log = RoutingLog()

    def _rng(self, tenant_id: str) -> np.random.Generator:
        rng = self._rngs.get(tenant_id)
        if rng is None:
            rng = np.random.default_rng([self.seed, stable_key("tenant", tenant_id)])
            self._rngs[tenant_id] = rng
        return rng

    def _bucket(self, tenant: TenantProfile) -> _TokenBucket | None:
        if tenant.tenant_id not in self._buckets:
            limit = self.policy.qos.rate_limit.get((tenant.party, tenant.tier))
            self._buckets[tenant.tenant_id] = None if limit is None else _TokenBucket(limit)
        return self._buckets[tenant.tenant_id]

    # -- serving -----------------------------------------------------------

    def serve(self, request: ProbeRequest) -> QoSSample:
        return self.serve_batch([request])[0]

    def serve_batch(self, requests: Iterable[ProbeRequest]) -> list[QoSSample]:
        """Serve requests in arrival order and return one sample per request.

        Priority only reorders requests that are waiting together, so a
        batch should hold the whole schedule.  Requests already returned by
        an earlier call keep their committed start times.
        """
        requests = list(requests)
        q = self.policy.qos
        gating = self.policy.gating
        samples: list[QoSSample | None] = [None] * len(requests)
        jobs: list[tuple[int, _Job]] = []
        clock = self.clock
        for i, req in enumerate(requests):
            tenant = self.tenants.get(req.tenant_id)
            if tenant is None:
                raise ValidationError(f"unknown tenant {req.tenant_id!r} ({req.request_id})", "tenant_id")
            if req.arrival_time < clock:
                raise ValidationError(
                    f"arrival {req.arrival_time} precedes clock {clock} ({req.request_id})", "arrival_time"
                )
            if req.payload_tokens <= 0:
                raise ValidationError(f"payload_tokens must be > 0 ({req.request_id})", "payload_tokens")
            clock = req.arrival_time
            party = tenant.party
            rng = self._rng(tenant.tenant_id)
            u_deny, u_err = rng.random(2)
            z = rng.standard_normal()
            stratum = Stratum(req.region, tenant.tier, req.request_class)

            bucket = self._bucket(tenant)
            denied = (bucket is not None and not bucket.take(req.arrival_time)) or u_deny < q.quota_denial_bias[party]
            if denied:
                samples[i] = self._fast_sample(req, tenant, stratum, Outcome.QUOTA_DENIED)
                continue
            limit = gating.context_for(party, tenant.tier)
            gated = (limit is not None and req.payload_tokens > limit) or (
                req.request_class is RequestClass.TOOL_USE and not gating.tool_use_for(party, tenant.tier)
            )
            if gated or u_err < q.error_rate[party]:
                samples[i] = self._fast_sample(req, tenant, stratum, Outcome.ERROR)
                continue

            params = self.service.classes[req.request_class]
            base = params.median_ms * math.exp(params.sigma * z)
            service_ms = max(
                1, round(base * q.tail_multiplier[party]) + self.service.region_offset_ms.get(req.region, 0)
            )
            jobs.append((i, _Job(req, tenant, service_ms, float(q.priority[party]), self._seq)))
            self._seq += 1
        self.clock = clock

        for i, job, start in self._dispatch([j for _, j in jobs], [i for i, _ in jobs]):
            req = job.request
            queue = start - req.arrival_time
            latency = queue + job.service_ms
            deadline = self.service.classes[req.request_class].deadline_ms
            outcome = Outcome.SUCCESS
            if latency > deadline:
                outcome, latency = Outcome.TIMEOUT, deadline
            samples[i] = QoSSample(
                request_id=req.request_id,
                tenant_id=req.tenant_id,
                party=job.tenant.party,
                stratum=Stratum(req.region, job.tenant.tier, req.request_class),
                outcome=outcome,
                queue_delay_ms=queue,
                service_ms=job.service_ms,
                latency_ms=latency,
                completed_at=req.arrival_time + latency,
            )
        return samples  # type: ignore[return-value]

    def _dispatch(self, jobs: list[_Job], index: list[int]):
        """Non-preemptive weighted priority queue in front of ``concurrency`` slots.

        Waiting jobs are ordered by (weight desc, arrival asc, submission asc).
        """
        slots = self._slots
        heapq.heapify(slots)
        waiting: list = []
        n = len(jobs)
        k = 0
        now = 0
        while k < n or waiting:
            # idle slots report stale free times; decisions never move backwards
            t = max(slots[0], now)
            if not waiting:
                t = max(t, jobs[k].request.arrival_time)
            now = t
            while k < n and jobs[k].request.arrival_time <= t:
                j = jobs[k]
                heapq.heappush(waiting, (-j.weight, j.request.arrival_time, j.seq, k))
                k += 1
            _, _, _, idx = heapq.heappop(waiting)
            job = jobs[idx]
            heapq.heapreplace(slots, t + job.service_ms)
            yield index[idx], job, t

    def _fast_sample(self, req, tenant, stratum, outcome) -> QoSSample:
        return QoSSample(
            request_id=req.request_id,
            tenant_id=req.tenant_id,
            party=tenant.party,
            stratum=stratum,
            outcome=outcome,
            queue_delay_ms=0,
            service_ms=0,
            latency_ms=0,
            completed_at=req.arrival_time,
        )

    # -- routing -----------------------------------------------------------

    def route(self, task: ToolTask) -> RoutingRecord:
        """Filter the catalog by steering exclusions, then pick argmax(quality + boost).

        One uniform draw per catalog tool, in tool-id order, regardless of
        the exclusion probability.
        """
        if not task.catalog:
            raise ValidationError(f"empty tool catalog ({task.request_id})", "catalog")
        steering = self.policy.steering
        tools = sorted(task.catalog, key=lambda t: t.tool_id)
        if len({t.tool_id for t in tools}) != len(tools):
            raise ValidationError(f"duplicate tool ids in catalog ({task.request_id})", "catalog")
        draws = self._routing_rng.random(len(tools))
        eligible, excluded = [], []
        for tool, u in zip(tools, draws):
            if u < steering.exclusion_probability.get(tool.tool_id, 0.0):
                excluded.append((tool.tool_id, NON_OBJECTIVE_EXCLUSION))
            else:
                eligible.append(tool)
        # rank by effective score desc, tool id asc
        ranked = sorted(eligible, key=lambda t: (-(t.quality + steering.rank_boost.get(t.tool_id, 0.0)), t.tool_id))
        commercial = bool(excluded) or any(
            steering.rank_boost.get(t.tool_id, 0.0) != 0.0 or t.tool_id in steering.commercial_preference
            for t in tools
        )
        return self.routing_log.append(
            request_id=task.request_id,
            task_class=task.task_class,
            eligible_tools=[t.tool_id for t in ranked],
            excluded_tools=excluded,
            selected_tool=ranked[0].tool_id if ranked else None,
            selected_rank=1 if ranked else None,
            commercial_constraint=commercial,
            criteria_ref=self.policy.criteria_ref.ref if self.policy.criteria_ref else None,
        )


def init_gateway(
    policy: PolicySpec,
    tenants: Sequence[TenantProfile],
    seed: int,
    service: ServiceModel | None = None,
) -> GatewayState:
    return GatewayState(policy, tenants, seed, service)


def serve(state: GatewayState, request: ProbeRequest) -> QoSSample:
    return state.serve(request)


def route(state: GatewayState, task: ToolTask) -> RoutingRecord:
    return state.route(task)
