"""QoS-wedge detection: stratified first- vs third-party comparisons.

Latency metrics use nearest-rank percentiles over samples that carry a
latency (successes, and timeouts at their deadline).  Rate metrics are
outcome fractions over all samples.  A positive ``relative_delta`` always
means the third party is worse off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import Outcome, Party, Stratum, ValidationError, stable_key
from .gateway import CriteriaRef, QoSSample
from .probes import SampleSet, stratify
from .settings import AuditSettings


class WedgeMetric(str, Enum):
    LATENCY_P50 = "latency_p50"
    LATENCY_P95 = "latency_p95"
    LATENCY_P99 = "latency_p99"
    TIMEOUT_RATE = "timeout_rate"
    ERROR_RATE = "error_rate"
    QUOTA_DENIAL_RATE = "quota_denial_rate"

    @property
    def quantile(self) -> float | None:
        return _QUANTILES.get(self)

    @property
    def outcome(self) -> Outcome | None:
        return _OUTCOMES.get(self)


_QUANTILES = {WedgeMetric.LATENCY_P50: 0.5, WedgeMetric.LATENCY_P95: 0.95, WedgeMetric.LATENCY_P99: 0.99}
_OUTCOMES = {
    WedgeMetric.TIMEOUT_RATE: Outcome.TIMEOUT,
    WedgeMetric.ERROR_RATE: Outcome.ERROR,
    WedgeMetric.QUOTA_DENIAL_RATE: Outcome.QUOTA_DENIED,
}
LATENCY_METRICS = tuple(_QUANTILES)
ALL_METRICS = tuple(WedgeMetric)
_OUTCOME_CODE = {o: i for i, o in enumerate(Outcome)}


def rank_index(q: float, n: int) -> int:
    """0-based nearest-rank index ``ceil(q*n) - 1``.

    ``q`` is taken at its shortest decimal repr, so 0.95 means 95/100
    rather than the binary float just below it.
    """
    if not 0 < q < 1:
        raise ValueError(f"quantile {q} outside (0, 1)")
    return max(0, math.ceil(Fraction(repr(float(q))) * n) - 1)


def percentile(values: Sequence[float], q: float) -> float:
    if len(values) == 0:
        raise ValueError("percentile of empty input")
    return sorted(values)[rank_index(q, len(values))]


def rate(samples: Sequence[QoSSample], outcome: Outcome | str) -> float:
    if not samples:
        raise ValueError("rate of empty input")
    outcome = Outcome.parse(outcome)
    return float(Fraction(sum(s.outcome is outcome for s in samples), len(samples)))


def relative_delta(first_party: float, third_party: float) -> float:
    if first_party > 0:
        return (third_party - first_party) / first_party
    if third_party == first_party:
        return 0.0
    return math.inf


@dataclass(frozen=True)
class WedgeFinding:
    stratum: Stratum
    metric: WedgeMetric
    window: tuple[int, int]
    first_party_value: float | None
    third_party_value: float | None
    relative_delta: float | None
    confidence: tuple[float, float] | None
    sample_counts: dict[str, int]
    sustained: bool = False
    suppressed_by_criteria: bool = False
    under_sampled: bool = False
    # first-party value is zero: compared on the absolute difference, and the
    # confidence interval is on that difference
    manual_review: bool = False
    daily_deltas: tuple[float | None, ...] = ()
    criteria_ref: str | None = None

    @property
    def absolute_delta(self) -> float | None:
        if self.first_party_value is None or self.third_party_value is None:
            return None
        return self.third_party_value - self.first_party_value

    def to_dict(self) -> dict:
        return {
            "stratum": self.stratum.to_dict(),
            "metric": self.metric.value,
            "window": list(self.window),
            "first_party_value": _num(self.first_party_value),
            "third_party_value": _num(self.third_party_value),
            "relative_delta": _num(self.relative_delta),
            "confidence": None if self.confidence is None else [_num(c) for c in self.confidence],
            "sample_counts": dict(sorted(self.sample_counts.items())),
            "sustained": self.sustained,
            "suppressed_by_criteria": self.suppressed_by_criteria,
            "under_sampled": self.under_sampled,
            "manual_review": self.manual_review,
            "daily_deltas": [_num(d) for d in self.daily_deltas],
            "criteria_ref": self.criteria_ref,
        }


def _num(x):
    if x is None:
        return None
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


# -- per-party arrays -----------------------------------------------------


@dataclass
class _Arrays:
    t: np.ndarray  # completed_at
    latency: np.ndarray  # NaN where the outcome carries no latency
    outcome: np.ndarray  # small int codes

    @classmethod
    def of(cls, samples: Sequence[QoSSample]) -> "_Arrays":
        n = len(samples)
        t = np.fromiter((s.completed_at for s in samples), dtype=np.int64, count=n)
        code = np.fromiter((_OUTCOME_CODE[s.outcome] for s in samples), dtype=np.int8, count=n)
        lat = np.fromiter((s.latency_ms for s in samples), dtype=np.float64, count=n)
        carries = (code == _OUTCOME_CODE[Outcome.SUCCESS]) | (code == _OUTCOME_CODE[Outcome.TIMEOUT])
        lat[~carries] = np.nan
        order = np.argsort(t, kind="stable")
        return cls(t[order], lat[order], code[order])

    def window(self, start: int, end: int) -> "_Arrays":
        lo, hi = np.searchsorted(self.t, [start, end], side="left")
        return _Arrays(self.t[lo:hi], self.latency[lo:hi], self.outcome[lo:hi])


def _point(arr: _Arrays, metric: WedgeMetric) -> float | None:
    n = len(arr.t)
    if metric.quantile is not None:
        lat = arr.latency[~np.isnan(arr.latency)]
        if len(lat) == 0:
            return None
        k = rank_index(metric.quantile, len(lat))
        return float(np.partition(lat, k)[k])
    if n == 0:
        return None
    return float(Fraction(int(np.count_nonzero(arr.outcome == _OUTCOME_CODE[metric.outcome])), n))


_BLOCK_ELEMS = 4_000_000


def _boot_latency(lat: np.ndarray, metrics: Sequence[WedgeMetric], rng, B: int) -> dict:
    n = len(lat)
    ks = sorted({rank_index(m.quantile, n) for m in metrics})
    out = np.empty((B, len(ks)))
    block = max(1, _BLOCK_ELEMS // max(n, 1))
    for b0 in range(0, B, block):
        b1 = min(B, b0 + block)
        res = lat[rng.integers(0, n, size=(b1 - b0, n))]
        out[b0:b1] = np.partition(res, ks, axis=1)[:, ks]
    return {m: out[:, ks.index(rank_index(m.quantile, n))] for m in metrics}


def _window_findings(
    stratum: Stratum,
    fp: _Arrays,
    tp: _Arrays,
    window: tuple[int, int],
    metrics: Sequence[WedgeMetric],
    settings: AuditSettings,
    seed: int,
) -> dict[WedgeMetric, WedgeFinding]:
    fp, tp = fp.window(*window), tp.window(*window)
    counts = {Party.FIRST_PARTY.value: len(fp.t), Party.THIRD_PARTY.value: len(tp.t)}
    short = min(counts.values()) < settings.min_samples
    values = {m: (_point(fp, m), _point(tp, m)) for m in metrics}

    rng = np.random.default_rng([int(seed), stable_key("bootstrap", stratum.key(), *window)])
    B = settings.bootstrap_resamples
    boot: dict[WedgeMetric, tuple[np.ndarray, np.ndarray]] = {}
    lat_metrics = [m for m in metrics if m.quantile is not None and None not in values[m]]
    if lat_metrics and not short:
        a = fp.latency[~np.isnan(fp.latency)]
        b = tp.latency[~np.isnan(tp.latency)]
        ba, bb = _boot_latency(a, lat_metrics, rng, B), _boot_latency(b, lat_metrics, rng, B)
        boot.update({m: (ba[m], bb[m]) for m in lat_metrics})
    for m in metrics:
        if m.outcome is None or None in values[m] or short:
            continue
        pa, pb = values[m]
        boot[m] = (rng.binomial(len(fp.t), pa, size=B) / len(fp.t), rng.binomial(len(tp.t), pb, size=B) / len(tp.t))

    alpha = 1.0 - settings.confidence
    found = {}
    for m in metrics:
        a, b = values[m]
        missing = a is None or b is None
        delta = None if missing else relative_delta(a, b)
        review = not missing and a == 0 and b > 0
        ci = None
        if m in boot:
            ra, rb = boot[m]
            if review:
                stat, point = rb - ra, b - a
            else:
                with np.errstate(divide="ignore", invalid="ignore"):
                    stat = np.where(ra > 0, (rb - ra) / np.where(ra > 0, ra, 1.0), np.where(rb > ra, np.inf, 0.0))
                point = delta
            lo_q, hi_q = np.quantile(stat, [alpha / 2, 1 - alpha / 2], method="inverted_cdf")
            # basic bootstrap interval
            ci = (float(2 * point - hi_q), float(2 * point - lo_q))
        found[m] = WedgeFinding(
            stratum=stratum,
            metric=m,
            window=window,
            first_party_value=a,
            third_party_value=b,
            relative_delta=delta,
            confidence=ci,
            sample_counts=counts,
            under_sampled=short or missing,
            manual_review=review,
        )
    return found


def wedge(
    stratum_samples: Mapping[Party, Sequence[QoSSample]],
    metric: WedgeMetric | str,
    window: tuple[int, int],
    settings: AuditSettings | None = None,
    seed: int = 0,
) -> WedgeFinding:
    """Compare one metric between parties over ``window``; never decides sustainment."""
    settings = settings or AuditSettings()
    metric = WedgeMetric(metric)
    fp = list(stratum_samples.get(Party.FIRST_PARTY, []))
    tp = list(stratum_samples.get(Party.THIRD_PARTY, []))
    strata = {s.stratum for s in fp + tp}
    if len(strata) > 1:
        raise ValidationError("samples span more than one stratum", "stratum")
    if not strata:
        raise ValidationError("no samples", "stratum")
    (stratum,) = strata
    return _window_findings(stratum, _Arrays.of(fp), _Arrays.of(tp), window, [metric], settings, seed)[metric]


def _exceeds(f: WedgeFinding, threshold: float, rate_floor: float) -> bool:
    if f.under_sampled or f.relative_delta is None:
        return False
    if f.manual_review:
        return f.absolute_delta >= rate_floor
    return f.relative_delta > threshold


def sustained_flags(
    daily: Sequence[WedgeFinding],
    aggregates: Sequence[WedgeFinding] | None = None,
    threshold: float = 0.15,
    window: int = 7,
    required: int | None = None,
    rate_floor: float = 0.01,
    criteria: CriteriaRef | None = None,
) -> list[WedgeFinding]:
    """Apply the sustainment rule over rolling spans of ``window`` daily findings.

    ``daily`` holds consecutive sub-window findings for one stratum and
    metric.  ``aggregates[j]`` is the finding over days ``j .. j+window-1``;
    without it the daily finding that opens the span stands in.  A span is
    sustained when at least ``required`` (default: all) days exceed the
    threshold and the aggregate's lower confidence bound is above zero.
    With fewer than ``window`` days, the daily findings come back unflagged.
    """
    required = window if required is None else required
    if len(daily) < window:
        return [replace(f, sustained=False) for f in daily]
    spans = len(daily) - window + 1
    if aggregates is None:
        aggregates = list(daily[:spans])
    if len(aggregates) != spans:
        raise ValueError(f"expected {spans} aggregate findings, got {len(aggregates)}")
    out = []
    for j, agg in enumerate(aggregates):
        days = daily[j : j + window]
        hits = sum(_exceeds(d, threshold, rate_floor) for d in days)
        # a span where too few days can be judged cannot pass either
        thin = agg.under_sampled or sum(not d.under_sampled for d in days) < required
        lower = agg.confidence[0] if agg.confidence else None
        sustained = hits >= required and not thin and lower is not None and lower > 0
        covered = criteria is not None and criteria.covers_kind(agg.metric.value)
        out.append(
            replace(
                agg,
                sustained=sustained,
                under_sampled=thin,
                suppressed_by_criteria=covered,
                criteria_ref=criteria.ref if covered else None,
                daily_deltas=tuple(d.relative_delta if not d.under_sampled else None for d in days),
            )
        )
    return out


@dataclass
class QoSAudit:
    findings: list[WedgeFinding] = field(default_factory=list)
    under_sampled: list[dict] = field(default_factory=list)
    decided: bool = False

    @property
    def violations(self) -> list[WedgeFinding]:
        return [f for f in self.findings if f.sustained and not f.suppressed_by_criteria]

    @property
    def suppressed(self) -> list[WedgeFinding]:
        return [f for f in self.findings if f.suppressed_by_criteria]

    @property
    def verdict(self) -> str:
        if self.violations:
            return "violation"
        return "pass" if self.decided else "insufficient"


def audit_samples(
    sample_set: SampleSet | Iterable[QoSSample],
    settings: AuditSettings | None = None,
    seed: int = 0,
    criteria: CriteriaRef | None = None,
    metrics: Sequence[WedgeMetric] = ALL_METRICS,
    window_bounds: tuple[int, int] | None = None,
) -> QoSAudit:
    """Run the wedge test over every stratum and every rolling window."""
    settings = (settings or AuditSettings()).validate()
    if isinstance(sample_set, SampleSet):
        samples, bounds = sample_set.samples, sample_set.window_bounds
    else:
        samples = list(sample_set)
        bounds = (min((s.completed_at for s in samples), default=0), max((s.completed_at for s in samples), default=-1) + 1)
    start, end = window_bounds or bounds
    day = settings.sub_window_ms
    n_days = max(0, (end - start) // day)
    span_days = settings.sub_windows

    audit = QoSAudit()
    for stratum, parties in stratify(samples).items():
        fp, tp = _Arrays.of(parties[Party.FIRST_PARTY]), _Arrays.of(parties[Party.THIRD_PARTY])
        days = [
            _window_findings(stratum, fp, tp, (start + d * day, start + (d + 1) * day), metrics, settings, seed)
            for d in range(n_days)
        ]
        short_days = [
            d for d, found in enumerate(days) if any(f.under_sampled for f in found.values())
        ]
        if short_days or n_days < span_days:
            audit.under_sampled.append(
                {"stratum": stratum.to_dict(), "days": n_days, "under_sampled_days": short_days}
            )
        if n_days < span_days:
            continue
        spans = [
            _window_findings(
                stratum, fp, tp, (start + j * day, start + j * day + settings.window_ms), metrics, settings, seed
            )
            for j in range(n_days - span_days + 1)
        ]
        for m in metrics:
            flagged = sustained_flags(
                [d[m] for d in days],
                [s[m] for s in spans],
                threshold=settings.threshold,
                window=span_days,
                required=settings.required,
                rate_floor=settings.rate_floor,
                criteria=criteria,
            )
            audit.findings.extend(flagged)
            if any(not f.under_sampled for f in flagged):
                audit.decided = True
    audit.findings.sort(key=lambda f: (f.stratum, ALL_METRICS.index(f.metric), f.window))
    return audit
