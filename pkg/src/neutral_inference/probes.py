"""Matched-pair probe schedules, execution against a gateway, stratification."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import (
    Party,
    RequestClass,
    Stratum,
    TenantProfile,
    ValidationError,
    digest,
    stable_key,
)
from .gateway import GatewayState, ProbeRequest, QoSSample

JITTER_MS = 100
DEFAULT_PAYLOAD = {
    RequestClass.SHORT: (64, 512),
    RequestClass.LONG: (2_048, 16_384),
    RequestClass.TOOL_USE: (256, 2_048),
}


@dataclass(frozen=True)
class StratumPlan:
    stratum: Stratum
    first_party: str
    third_party: str


@dataclass
class ProbePlan:
    duration_ms: int
    pair_rate: float  # matched pairs per simulated second, per stratum
    strata: list[StratumPlan]
    payload_tokens: dict[RequestClass, tuple[int, int]] = field(default_factory=lambda: dict(DEFAULT_PAYLOAD))
    jitter_ms: int = JITTER_MS
    start_ms: int = 0

    def validate(self, tenants: Mapping[str, TenantProfile], min_duration_ms: int | None = None) -> "ProbePlan":
        if self.pair_rate <= 0:
            raise ValidationError("pair_rate must be > 0", "probes.pair_rate")
        if self.duration_ms <= 0:
            raise ValidationError("duration must be > 0", "probes.duration_ms")
        if min_duration_ms is not None and self.duration_ms < min_duration_ms:
            raise ValidationError(
                f"duration {self.duration_ms} ms shorter than one audit window ({min_duration_ms} ms)",
                "probes.duration_ms",
            )
        if not 0 <= self.jitter_ms:
            raise ValidationError("jitter must be >= 0", "probes.jitter_ms")
        for rc, (lo, hi) in self.payload_tokens.items():
            if not 0 < lo <= hi:
                raise ValidationError("need 0 < low <= high", f"probes.payload_tokens.{rc}")
        seen = set()
        for i, sp in enumerate(self.strata):
            where = f"probes.strata[{i}]"
            if sp.stratum in seen:
                raise ValidationError(f"stratum {sp.stratum.key()} listed twice", where)
            seen.add(sp.stratum)
            fp, tp = tenants.get(sp.first_party), tenants.get(sp.third_party)
            if fp is None or tp is None:
                raise ValidationError("pairing names an unknown tenant", where)
            if fp.party is not Party.FIRST_PARTY or tp.party is not Party.THIRD_PARTY:
                raise ValidationError("pairing needs one first-party and one third-party tenant", where)
            for t in (fp, tp):
                if (t.region, t.tier) != (sp.stratum.region, sp.stratum.tier):
                    raise ValidationError(
                        f"tenant {t.tenant_id} is ({t.region}, {t.tier}) but stratum is "
                        f"({sp.stratum.region}, {sp.stratum.tier})",
                        where,
                    )
        return self

    def to_dict(self) -> dict:
        return {
            "duration_ms": self.duration_ms,
            "pair_rate": self.pair_rate,
            "jitter_ms": self.jitter_ms,
            "start_ms": self.start_ms,
            "strata": [
                {**sp.stratum.to_dict(), "first_party": sp.first_party, "third_party": sp.third_party}
                for sp in self.strata
            ],
            "payload_tokens": {rc.value: list(v) for rc, v in sorted(self.payload_tokens.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProbePlan":
        try:
            strata = [
                StratumPlan(Stratum.from_dict(s), str(s["first_party"]), str(s["third_party"]))
                for s in d.get("strata") or []
            ]
            payload = dict(DEFAULT_PAYLOAD)
            for k, v in (d.get("payload_tokens") or {}).items():
                payload[RequestClass.parse(k, f"probes.payload_tokens.{k}")] = (int(v[0]), int(v[1]))
            return cls(
                duration_ms=int(d["duration_ms"]),
                pair_rate=float(d["pair_rate"]),
                strata=strata,
                payload_tokens=payload,
                jitter_ms=int(d.get("jitter_ms", JITTER_MS)),
                start_ms=int(d.get("start_ms", 0)),
            )
        except KeyError as e:
            raise ValidationError("missing field", f"probes.{e.args[0]}") from None

    def digest(self) -> str:
        return digest(self.to_dict())


def generate_schedule(
    plan: ProbePlan,
    seed: int,
    tenants: Mapping[str, TenantProfile] | Sequence[TenantProfile] | None = None,
) -> list[ProbeRequest]:
    """Emit matched first/third-party request pairs for every stratum.

    Pair ``k`` of stratum ``i`` starts at ``start + (k + i/len(strata)) / pair_rate``.
    Both members share region, class and payload; the member that goes
    second arrives ``U{0..jitter}`` ms later, and which party goes first
    is a fair coin per pair.
    """
    if tenants is not None:
        if not isinstance(tenants, Mapping):
            tenants = {t.tenant_id: t for t in tenants}
        plan.validate(tenants)
    interval = 1000.0 / plan.pair_rate
    m = len(plan.strata)
    out: list[tuple[int, int, int, ProbeRequest]] = []
    for i, sp in enumerate(plan.strata):
        rng = np.random.default_rng([int(seed), stable_key("probe", sp.stratum.key())])
        lo, hi = plan.payload_tokens[sp.stratum.request_class]
        k = 0
        while True:
            base = plan.start_ms + int((k + i / m) * interval)
            if base >= plan.start_ms + plan.duration_ms:
                break
            tokens = int(rng.integers(lo, hi + 1))
            jitter = int(rng.integers(0, plan.jitter_ms + 1))
            fp_first = bool(rng.random() < 0.5)
            order = (sp.first_party, sp.third_party) if fp_first else (sp.third_party, sp.first_party)
            for slot, tenant_id in enumerate(order):
                tag = "fp" if tenant_id == sp.first_party else "tp"
                req = ProbeRequest(
                    request_id=f"s{i}-p{k}-{tag}",
                    tenant_id=tenant_id,
                    region=sp.stratum.region,
                    request_class=sp.stratum.request_class,
                    arrival_time=base + (jitter if slot else 0),
                    payload_tokens=tokens,
                )
                out.append((req.arrival_time, i, 2 * k + slot, req))
            k += 1
    out.sort(key=lambda x: x[:3])
    return [r for *_, r in out]


@dataclass
class SampleSet:
    samples: list[QoSSample]
    plan_digest: str | None
    window_bounds: tuple[int, int]
    under_sampled: list[Stratum] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def run_probes(
    state: GatewayState,
    schedule: Sequence[ProbeRequest],
    plan: ProbePlan | None = None,
) -> SampleSet:
    for a, b in zip(schedule, schedule[1:]):
        if b.arrival_time < a.arrival_time:
            raise ValidationError(f"schedule not sorted at {b.request_id}", "schedule")
    try:
        samples = state.serve_batch(schedule)
    except ValidationError as e:
        raise ValidationError(f"gateway rejected probe: {e}", e.field) from e

    if plan is not None:
        start, end = plan.start_ms, plan.start_ms + plan.duration_ms
    elif schedule:
        start, end = schedule[0].arrival_time, schedule[-1].arrival_time + 1
    else:
        start = end = state.clock
    if samples:
        # late completions stretch the window rather than fall outside it
        end = max(end, max(s.completed_at for s in samples) + 1)

    under: list[Stratum] = []
    if plan is not None:
        seen = {(s.stratum, s.party) for s in samples}
        under = [
            sp.stratum
            for sp in plan.strata
            if (sp.stratum, Party.FIRST_PARTY) not in seen or (sp.stratum, Party.THIRD_PARTY) not in seen
        ]
    return SampleSet(samples, plan.digest() if plan else None, (start, end), under)


def stratify(samples: SampleSet | Iterable[QoSSample]) -> dict[Stratum, dict[Party, list[QoSSample]]]:
    if isinstance(samples, SampleSet):
        samples = samples.samples
    out: dict[Stratum, dict[Party, list[QoSSample]]] = defaultdict(
        lambda: {Party.FIRST_PARTY: [], Party.THIRD_PARTY: []}
    )
    for s in samples:
        out[s.stratum][s.party].append(s)
    return dict(sorted(out.items()))
