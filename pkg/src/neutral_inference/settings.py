"""Audit constants.  Every value the audit protocol leaves open lives here."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

from .domain import ValidationError

DAY_MS = 86_400_000
WEEK_MS = 7 * DAY_MS


@dataclass(frozen=True)
class AuditSettings:
    threshold: float = 0.15
    window_ms: int = WEEK_MS
    sub_window_ms: int = DAY_MS
    # daily sub-windows that must exceed the threshold; None means all of them
    required_sub_windows: int | None = None
    min_samples: int = 200
    bootstrap_resamples: int = 1_000
    confidence: float = 0.95
    rate_floor: float = 0.01
    significance: float = 0.01
    routing_min_n: int = 100
    price_tolerance: float = 0.05
    terms_tolerance: float = 0.05

    @property
    def sub_windows(self) -> int:
        return self.window_ms // self.sub_window_ms

    @property
    def required(self) -> int:
        return self.sub_windows if self.required_sub_windows is None else self.required_sub_windows

    def validate(self) -> "AuditSettings":
        if self.threshold < 0:
            raise ValidationError("must be >= 0", "audit.threshold")
        if self.sub_window_ms <= 0 or self.window_ms % self.sub_window_ms:
            raise ValidationError("window must be a whole number of sub-windows", "audit.window_ms")
        if not 1 <= self.required <= self.sub_windows:
            raise ValidationError(f"must lie in [1, {self.sub_windows}]", "audit.required_sub_windows")
        if self.min_samples < 1:
            raise ValidationError("must be >= 1", "audit.min_samples")
        if self.bootstrap_resamples < 1:
            raise ValidationError("must be >= 1", "audit.bootstrap_resamples")
        for name in ("confidence", "significance"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError("must lie in (0, 1)", f"audit.{name}")
        for name in ("rate_floor", "price_tolerance", "terms_tolerance"):
            if getattr(self, name) < 0:
                raise ValidationError("must be >= 0", f"audit.{name}")
        return self

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "AuditSettings":
        d = dict(d or {})
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValidationError(f"unknown setting {unknown[0]!r}", f"audit.{unknown[0]}")
        kwargs = {}
        for k, v in d.items():
            if v is None:
                kwargs[k] = None
            elif k in ("window_ms", "sub_window_ms", "min_samples", "bootstrap_resamples", "routing_min_n",
                       "required_sub_windows"):
                kwargs[k] = int(v)
            else:
                kwargs[k] = float(v)
        return cls(**kwargs).validate()

    def to_dict(self) -> dict:
        return asdict(self)
