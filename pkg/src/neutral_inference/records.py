"""Newline-delimited JSON record files: samples, routing logs, buyer terms.

Formats are documented byte-for-byte in docs/formats.md.  Every reader
reports malformed input with the 1-based line number.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

from .domain import TenantProfile, ValidationError
from .frand import Buyer, BuyerTerms
from .gateway import QoSSample
from .probes import SampleSet
from .routing import ALGORITHM, FORMAT as ROUTING_FORMAT, GENESIS, RoutingLog, ToolBenchmark

SAMPLES_FORMAT = "qos-samples/1"
TERMS_FORMAT = "buyer-terms/1"


class RecordError(ValidationError):
    def __init__(self, path, line: int, message: str):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {message}")


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def _lines(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for no, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise RecordError(path, no, f"not valid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise RecordError(path, no, "record is not a JSON object")
            yield no, obj


def _header(path, rows: list[tuple[int, dict]], fmt: str) -> dict:
    if not rows or rows[0][1].get("kind") != "header":
        raise RecordError(path, rows[0][0] if rows else 1, "missing header record")
    head = rows[0][1]
    if head.get("format") != fmt:
        raise RecordError(path, rows[0][0], f"format {head.get('format')!r}, expected {fmt!r}")
    return head


# -- samples --------------------------------------------------------------


def dump_samples(sample_set: SampleSet) -> str:
    start, end = sample_set.window_bounds
    head = {
        "kind": "header",
        "format": SAMPLES_FORMAT,
        "plan_digest": sample_set.plan_digest,
        "window_start": start,
        "window_end": end,
    }
    lines = [_dump(head)] + [_dump({"kind": "sample", **s.to_dict()}) for s in sample_set.samples]
    return "\n".join(lines) + "\n"


def write_samples(path, sample_set: SampleSet) -> None:
    Path(path).write_text(dump_samples(sample_set), encoding="utf-8")


def read_samples(path) -> SampleSet:
    rows = list(_lines(path))
    head = _header(path, rows, SAMPLES_FORMAT)
    samples = []
    for no, obj in rows[1:]:
        if obj.get("kind") != "sample":
            raise RecordError(path, no, f"unexpected record kind {obj.get('kind')!r}")
        try:
            samples.append(QoSSample.from_dict(obj))
        except KeyError as e:
            raise RecordError(path, no, f"missing field {e.args[0]!r}") from None
        except (TypeError, ValueError) as e:
            raise RecordError(path, no, str(e)) from None
    try:
        bounds = (int(head["window_start"]), int(head["window_end"]))
    except (KeyError, TypeError, ValueError):
        raise RecordError(path, rows[0][0], "header needs integer window_start/window_end") from None
    for s in samples:
        if not bounds[0] <= s.completed_at < bounds[1]:
            raise ValidationError(f"{path}: sample {s.request_id} outside window bounds", "completed_at")
    return SampleSet(samples, head.get("plan_digest"), bounds)


# -- routing log ----------------------------------------------------------


def write_routing_log(path, log: RoutingLog) -> None:
    Path(path).write_text(log.dumps(), encoding="utf-8")


def read_routing_log(path) -> tuple[dict, list[dict]]:
    """Return the header and the raw record dicts.

    Records are left as parsed so that missing fields and broken links
    surface as audit findings rather than parse errors.
    """
    rows = list(_lines(path))
    head = _header(path, rows, ROUTING_FORMAT)
    if head.get("algorithm") != ALGORITHM:
        raise RecordError(path, rows[0][0], f"unsupported digest algorithm {head.get('algorithm')!r}")
    head.setdefault("genesis", GENESIS)
    if ("records" in head) != ("head" in head):
        raise RecordError(path, rows[0][0], "seal needs both 'records' and 'head'")
    if "records" in head and not isinstance(head["records"], int):
        raise RecordError(path, rows[0][0], "'records' must be an integer")
    return head, [obj for _, obj in rows[1:]]


def write_benchmark(path, benchmark: ToolBenchmark) -> None:
    Path(path).write_text(json.dumps(benchmark.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_benchmark(path) -> ToolBenchmark:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return ToolBenchmark.from_dict(data)
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
        raise ValidationError(f"{path}: malformed benchmark ({e})", "benchmark") from None


# -- buyer terms ----------------------------------------------------------


def dump_terms(buyers: Iterable[Buyer]) -> str:
    lines = [_dump({"kind": "header", "format": TERMS_FORMAT})]
    for profile, terms in sorted(buyers, key=lambda b: b[0].tenant_id):
        lines.append(_dump({"kind": "buyer", **profile.to_dict(), **terms.to_dict()}))
    return "\n".join(lines) + "\n"


def write_terms(path, buyers: Iterable[Buyer]) -> None:
    Path(path).write_text(dump_terms(buyers), encoding="utf-8")


def read_terms(path) -> list[Buyer]:
    rows = list(_lines(path))
    _header(path, rows, TERMS_FORMAT)
    out = []
    seen = set()
    for no, obj in rows[1:]:
        if obj.get("kind") != "buyer":
            raise RecordError(path, no, f"unexpected record kind {obj.get('kind')!r}")
        try:
            buyer = (TenantProfile.from_dict(obj), BuyerTerms.from_dict(obj))
        except KeyError as e:
            raise RecordError(path, no, f"missing field {e.args[0]!r}") from None
        except (TypeError, ValueError) as e:
            raise RecordError(path, no, str(e)) from None
        if buyer[0].tenant_id in seen:
            raise RecordError(path, no, f"duplicate tenant {buyer[0].tenant_id!r}")
        seen.add(buyer[0].tenant_id)
        out.append(buyer)
    return out
