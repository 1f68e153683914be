"""Tamper-evident routing records and the routing-bias test.

Record wire format (one JSON object per line, see docs/formats.md):

    {"kind":"header","format":"routing-log/1","algorithm":"sha256","genesis":"<64 hex>"}
    {"record_index":0,"request_id":...,...,"prev_hash":"<hex>","record_hash":"<hex>"}

``record_hash`` is the SHA-256 of the canonical serialisation of every
other field, in declared order, with no insignificant whitespace.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from .domain import ValidationError

FORMAT = "routing-log/1"
ALGORITHM = "sha256"
GENESIS = "0" * 64

NON_OBJECTIVE_EXCLUSION = "provider_policy"
# exclusions that a benchmark-optimal router would also make
OBJECTIVE_EXCLUSIONS = frozenset({"capability_mismatch", "unavailable", "documented_criteria"})

FIELDS = (
    "record_index",
    "request_id",
    "task_class",
    "eligible_tools",
    "excluded_tools",
    "selected_tool",
    "selected_rank",
    "commercial_constraint",
    "criteria_ref",
    "prev_hash",
    "record_hash",
)
HASHED_FIELDS = FIELDS[:-1]


def canonical(record: Mapping[str, Any], fields: Sequence[str] = FIELDS) -> str:
    # json.dumps keeps dict insertion order, which gives the declared field order
    ordered = {k: record[k] for k in fields if k in record}
    return json.dumps(ordered, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def record_digest(record: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical(record, HASHED_FIELDS).encode("ascii")).hexdigest()


@dataclass(frozen=True)
class RoutingRecord:
    record_index: int
    request_id: str
    task_class: str
    eligible_tools: tuple[str, ...]
    excluded_tools: tuple[tuple[str, str], ...]
    selected_tool: str | None
    selected_rank: int | None
    commercial_constraint: bool
    criteria_ref: str | None
    prev_hash: str
    record_hash: str

    def to_dict(self) -> dict:
        return {
            "record_index": self.record_index,
            "request_id": self.request_id,
            "task_class": self.task_class,
            "eligible_tools": list(self.eligible_tools),
            "excluded_tools": [[t, r] for t, r in self.excluded_tools],
            "selected_tool": self.selected_tool,
            "selected_rank": self.selected_rank,
            "commercial_constraint": self.commercial_constraint,
            "criteria_ref": self.criteria_ref,
            "prev_hash": self.prev_hash,
            "record_hash": self.record_hash,
        }

    def serialize(self) -> str:
        return canonical(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RoutingRecord":
        missing = [k for k in FIELDS if k not in d]
        if missing:
            raise ValidationError(f"missing fields {missing}", missing[0])
        return cls(
            record_index=d["record_index"],
            request_id=d["request_id"],
            task_class=d["task_class"],
            eligible_tools=tuple(d["eligible_tools"]),
            excluded_tools=tuple((t, r) for t, r in d["excluded_tools"]),
            selected_tool=d["selected_tool"],
            selected_rank=d["selected_rank"],
            commercial_constraint=d["commercial_constraint"],
            criteria_ref=d["criteria_ref"],
            prev_hash=d["prev_hash"],
            record_hash=d["record_hash"],
        )


class RoutingLog:
    """Append-only hash chain of routing records."""

    def __init__(self, genesis: str = GENESIS):
        self.genesis = genesis
        self.records: list[RoutingRecord] = []

    @property
    def head(self) -> str:
        return self.records[-1].record_hash if self.records else self.genesis

    def append(self, **fields: Any) -> RoutingRecord:
        body = {
            "record_index": len(self.records),
            "request_id": fields["request_id"],
            "task_class": fields["task_class"],
            "eligible_tools": list(fields["eligible_tools"]),
            "excluded_tools": [[t, r] for t, r in fields.get("excluded_tools", ())],
            "selected_tool": fields.get("selected_tool"),
            "selected_rank": fields.get("selected_rank"),
            "commercial_constraint": bool(fields["commercial_constraint"]),
            "criteria_ref": fields.get("criteria_ref"),
            "prev_hash": self.head,
        }
        body["record_hash"] = record_digest(body)
        record = RoutingRecord.from_dict(body)
        self.records.append(record)
        return record

    def header(self, sealed: bool = True) -> dict:
        head = {"kind": "header", "format": FORMAT, "algorithm": ALGORITHM, "genesis": self.genesis}
        if sealed:
            # the seal lets a verifier spot truncation or appends at the tail
            head["records"] = len(self.records)
            head["head"] = self.head
        return head

    def dumps(self, sealed: bool = True) -> str:
        lines = [json.dumps(self.header(sealed), separators=(",", ":"))]
        lines += [r.serialize() for r in self.records]
        return "\n".join(lines) + "\n"


# -- completeness ---------------------------------------------------------


@dataclass
class CompletenessVerdict:
    complete: bool
    violations: list[str] = field(default_factory=list)


def validate_record(record: Mapping[str, Any] | RoutingRecord) -> CompletenessVerdict:
    """Check field presence and the record invariants; violations are returned, not raised."""
    d = record.to_dict() if isinstance(record, RoutingRecord) else dict(record)
    v: list[str] = []

    if "commercial_constraint" not in d or not isinstance(d.get("commercial_constraint"), bool):
        v.append("undisclosed commercial constraint")
    for name in ("record_index", "request_id", "task_class", "prev_hash", "record_hash"):
        if d.get(name) is None:
            v.append(f"missing {name}")
    eligible = d.get("eligible_tools")
    if not isinstance(eligible, list):
        v.append("missing eligibility")
        eligible = []
    excluded = d.get("excluded_tools")
    if not isinstance(excluded, list) or not all(isinstance(e, (list, tuple)) and len(e) == 2 for e in excluded):
        v.append("missing exclusion reasons")
        excluded = []
    if "selected_tool" not in d:
        v.append("missing selection")
    if "selected_rank" not in d:
        v.append("missing rank")

    selected = d.get("selected_tool")
    rank = d.get("selected_rank")
    if selected is not None:
        if selected not in eligible:
            v.append("selection outside eligibility")
        if "selected_rank" in d and not (isinstance(rank, int) and not isinstance(rank, bool) and rank >= 1):
            v.append("missing rank")
        elif isinstance(rank, int) and selected in eligible and eligible.index(selected) + 1 != rank:
            v.append("rank inconsistent with eligibility order")
    elif rank is not None:
        v.append("rank without selection")
    if {e[0] for e in excluded} & set(eligible):
        v.append("eligible and excluded overlap")
    if all(k in d for k in HASHED_FIELDS) and d.get("record_hash") is not None:
        try:
            if record_digest(d) != d["record_hash"]:
                v.append("record hash mismatch")
        except (TypeError, ValueError):
            v.append("record not serialisable")
    # de-duplicate while keeping first-seen order
    v = list(dict.fromkeys(v))
    return CompletenessVerdict(complete=not v, violations=v)


# -- chain integrity ------------------------------------------------------


@dataclass
class ChainVerdict:
    intact: bool
    breach_position: int | None = None
    breach_record_index: Any = None
    reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "intact": self.intact,
            "breach_position": self.breach_position,
            "breach_record_index": self.breach_record_index,
            "reason": self.reason,
        }


def verify_chain(
    log: Sequence[Mapping[str, Any] | RoutingRecord],
    genesis: str = GENESIS,
    seal: tuple[int, str] | None = None,
) -> ChainVerdict:
    """Recompute every link from ``genesis``; report the first breach.

    ``breach_position`` is the 0-based position in ``log``;
    ``breach_record_index`` is the ``record_index`` carried by the record
    found there.  ``seal`` is the (record count, head hash) a writer
    published; without it, dropping or appending records at the tail
    goes unnoticed.
    """
    if not log:
        raise ValidationError("empty routing log", "log")
    prev = genesis
    for pos, rec in enumerate(log):
        d = rec.to_dict() if isinstance(rec, RoutingRecord) else rec
        idx = d.get("record_index")
        reason = None
        if idx != pos:
            reason = f"record_index {idx!r} where {pos} expected"
        elif d.get("prev_hash") != prev:
            reason = "prev_hash does not link to predecessor"
        else:
            try:
                if record_digest(d) != d.get("record_hash"):
                    reason = "record_hash mismatch"
            except (KeyError, TypeError, ValueError):
                reason = "record not serialisable"
        if reason:
            return ChainVerdict(False, pos, idx, reason)
        prev = d["record_hash"]
    if seal is not None:
        count, head = seal
        if count != len(log):
            pos = min(count, len(log))
            idx = _as_dict(log[pos]).get("record_index") if pos < len(log) else None
            return ChainVerdict(False, pos, idx, f"log holds {len(log)} records, seal says {count}")
        if head != prev:
            return ChainVerdict(False, len(log) - 1, len(log) - 1, "head hash differs from seal")
    return ChainVerdict(True)


# -- routing bias ---------------------------------------------------------


class ToolBenchmark:
    """Objective quality score and first-party flag per (task_class, tool)."""

    def __init__(self, entries: Mapping[tuple[str, str], tuple[float, bool]]):
        self.entries = {k: (float(q), bool(fp)) for k, (q, fp) in entries.items()}

    def quality(self, task_class: str, tool: str) -> float:
        try:
            return self.entries[(task_class, tool)][0]
        except KeyError:
            raise ValidationError(
                f"benchmark has no score for tool {tool!r} in task class {task_class!r}", "benchmark"
            ) from None

    def first_party(self, task_class: str, tool: str) -> bool:
        self.quality(task_class, tool)
        return self.entries[(task_class, tool)][1]

    @classmethod
    def from_dict(cls, d: Mapping[str, Iterable[Mapping]]) -> "ToolBenchmark":
        """``{task_class: [{tool_id, quality, first_party}, ...]}``"""
        entries = {}
        for tc, tools in d.items():
            for t in tools:
                entries[(str(tc), str(t["tool_id"]))] = (float(t["quality"]), bool(t.get("first_party", False)))
        return cls(entries)

    def to_dict(self) -> dict:
        out: dict[str, list] = {}
        for (tc, tool), (q, fp) in sorted(self.entries.items()):
            out.setdefault(tc, []).append({"tool_id": tool, "quality": q, "first_party": fp})
        return out


def _as_dict(r) -> Mapping[str, Any]:
    return r.to_dict() if isinstance(r, RoutingRecord) else r


def candidate_tools(record: Mapping[str, Any]) -> list[str]:
    """Tools a neutral router could have chosen: eligible plus non-objective exclusions."""
    tools = list(record.get("eligible_tools") or [])
    for tool, reason in record.get("excluded_tools") or []:
        if reason not in OBJECTIVE_EXCLUSIONS:
            tools.append(tool)
    return tools


def optimal_first_party_mass(benchmark: ToolBenchmark, record: Mapping[str, Any]) -> Fraction:
    tc = record["task_class"]
    tools = candidate_tools(record)
    scores = {t: benchmark.quality(tc, t) for t in tools}
    best = max(scores.values())
    tied = [t for t, s in scores.items() if s == best]
    return Fraction(sum(benchmark.first_party(tc, t) for t in tied), len(tied))


def _selected(records) -> list[Mapping[str, Any]]:
    return [d for d in map(_as_dict, records) if d.get("selected_tool") is not None and candidate_tools(d)]


def expected_share(benchmark: ToolBenchmark, records) -> dict[str, float]:
    """Benchmark-implied first-party selection share per task class.

    Only records that made a selection are counted, matching the
    denominator of the observed share.
    """
    # exact rational sums, rounded once at the end
    sums: dict[str, Fraction] = {}
    counts: dict[str, int] = {}
    for d in _selected(records):
        tc = d["task_class"]
        sums[tc] = sums.get(tc, Fraction(0)) + optimal_first_party_mass(benchmark, d)
        counts[tc] = counts.get(tc, 0) + 1
    return {tc: float(sums[tc] / counts[tc]) for tc in sorted(sums)}


def _log_pmf(k: int, n: int, p: float) -> float:
    if p == 0.0:
        return 0.0 if k == 0 else -math.inf
    if p == 1.0:
        return 0.0 if k == n else -math.inf
    return (
        math.lgamma(n + 1)
        - math.lgamma(k + 1)
        - math.lgamma(n - k + 1)
        + k * math.log(p)
        + (n - k) * math.log1p(-p)
    )


def binomial_two_sided(k: int, n: int, p: float) -> float:
    """Exact two-sided binomial p-value: mass of outcomes no likelier than ``k``."""
    if not 0 <= k <= n:
        raise ValueError("k must lie in [0, n]")
    if n == 0:
        return 1.0
    observed = _log_pmf(k, n, p)
    if observed == -math.inf:
        return 0.0
    # relative tolerance absorbs rounding between equally likely outcomes
    cutoff = observed + 1e-7
    total = sum(math.exp(lp) for i in range(n + 1) if (lp := _log_pmf(i, n, p)) <= cutoff)
    return min(1.0, total)


@dataclass
class RoutingBiasFinding:
    task_class: str
    n: int
    observed_share: float
    expected_share: float
    p_value: float
    flagged: bool
    under_sampled: bool = False
    suppressed_by_criteria: bool = False

    def to_dict(self) -> dict:
        return {
            "task_class": self.task_class,
            "n": self.n,
            "observed_share": self.observed_share,
            "expected_share": self.expected_share,
            "p_value": self.p_value,
            "flagged": self.flagged,
            "under_sampled": self.under_sampled,
            "suppressed_by_criteria": self.suppressed_by_criteria,
        }


def bias_test(
    records,
    benchmark: ToolBenchmark,
    significance: float = 0.01,
    min_n: int = 100,
) -> list[RoutingBiasFinding]:
    """One finding per task class; flags only an excess first-party share."""
    selected = _selected(records)
    expected = expected_share(benchmark, selected)
    findings = []
    for tc in sorted(expected):
        rows = [d for d in selected if d["task_class"] == tc]
        n = len(rows)
        k = sum(benchmark.first_party(tc, d["selected_tool"]) for d in rows)
        observed = k / n
        exp = expected[tc]
        p = binomial_two_sided(k, n, min(1.0, max(0.0, exp)))
        under = n < min_n
        flagged = (not under) and observed > exp and p < significance
        findings.append(RoutingBiasFinding(tc, n, observed, exp, p, flagged, under))
    return findings
