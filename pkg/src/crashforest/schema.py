"""Accident record model, canonical CSV parsing and the head-on/front filter.

Unknown values are represented as ``None`` on every input field.
"""
from __future__ import annotations

import csv
import enum
import io
import os
from collections import Counter
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping, Optional, Union


class SchemaError(ValueError):
    """The CSV header does not carry a mandatory column."""


class InjurySeverity(enum.IntEnum):
    NoInjury = 0
    PossibleInjury = 1
    NonIncapacitating = 2
    Incapacitating = 3
    Fatal = 4

    @property
    def token(self) -> str:
        return SEVERITY_TOKENS[self]

    @property
    def label(self) -> str:
        return SEVERITY_LABELS[self]

    @classmethod
    def from_token(cls, token: str) -> "InjurySeverity":
        try:
            return _SEVERITY_BY_TOKEN[token.strip().lower()]
        except KeyError:
            raise ValueError(
                f"unknown severity token {token!r}; valid: {', '.join(SEVERITY_TOKENS.values())}"
            ) from None


SEVERITY_TOKENS = {
    InjurySeverity.NoInjury: "none",
    InjurySeverity.PossibleInjury: "possible",
    InjurySeverity.NonIncapacitating: "nonincap",
    InjurySeverity.Incapacitating: "incap",
    InjurySeverity.Fatal: "fatal",
}
_SEVERITY_BY_TOKEN = {v: k for k, v in SEVERITY_TOKENS.items()}

SEVERITY_LABELS = {
    InjurySeverity.NoInjury: "No Injury",
    InjurySeverity.PossibleInjury: "Possible Injury",
    InjurySeverity.NonIncapacitating: "Non-incapacitating Injury",
    InjurySeverity.Incapacitating: "Incapacitating Injury",
    InjurySeverity.Fatal: "Fatal Injury",
}


class ImpactPoint(enum.Enum):
    NoDamage = "none"
    Front = "front"
    RightSide = "right"
    LeftSide = "left"
    Back = "back"
    FrontRightCorner = "front_right"
    FrontLeftCorner = "front_left"
    BackRightCorner = "back_right"
    BackLeftCorner = "back_left"


HEAD_ON = "head_on"

LABEL_FIELDS = (
    "year",
    "month",
    "region",
    "psu",
    "jurisdiction",
    "case_number",
    "person_number",
    "vehicle_number",
    "vehicle_make_model",
)

# Order of the modelled inputs; also the tie-break order for tree splits.
MODEL_FIELDS = (
    "driver_age",
    "gender",
    "alcohol_use",
    "restraint_used",
    "ejected",
    "vehicle_body_type",
    "vehicle_role",
    "vehicle_age",
    "rollover",
    "road_surface",
    "light_condition",
)

NUMERIC_FIELDS = ("driver_age", "vehicle_age", "travel_speed", "speed_limit")

INPUT_FIELDS = MODEL_FIELDS + (
    "manner_of_collision",
    "initial_impact",
    "travel_speed",
    "speed_limit",
)

# Closed vocabularies; any other non-sentinel value rejects the row.
CLOSED_VOCAB = {
    "gender": ("female", "male"),
    "alcohol_use": ("no", "yes"),
    "restraint_used": ("no", "yes"),
    "ejected": ("no", "yes"),
    "rollover": ("no", "yes"),
    "initial_impact": tuple(p.value for p in ImpactPoint),
}

CSV_COLUMNS = LABEL_FIELDS + INPUT_FIELDS + ("severity",)

Value = Union[str, int, ImpactPoint, None]


@dataclass(frozen=True)
class AccidentRecord:
    severity: InjurySeverity
    driver_age: Optional[int] = None
    gender: Optional[str] = None
    alcohol_use: Optional[str] = None
    restraint_used: Optional[str] = None
    ejected: Optional[str] = None
    vehicle_body_type: Optional[str] = None
    vehicle_role: Optional[str] = None
    vehicle_age: Optional[int] = None
    rollover: Optional[str] = None
    road_surface: Optional[str] = None
    light_condition: Optional[str] = None
    manner_of_collision: Optional[str] = None
    initial_impact: Optional[ImpactPoint] = None
    travel_speed: Optional[int] = None
    speed_limit: Optional[int] = None
    year: str = ""
    month: str = ""
    region: str = ""
    psu: str = ""
    jurisdiction: str = ""
    case_number: str = ""
    person_number: str = ""
    vehicle_number: str = ""
    vehicle_make_model: str = ""

    def __post_init__(self):
        for name in NUMERIC_FIELDS:
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")


@dataclass(frozen=True)
class ModelRow:
    """The eleven modelled inputs plus the target."""

    driver_age: Optional[int]
    gender: Optional[str]
    alcohol_use: Optional[str]
    restraint_used: Optional[str]
    ejected: Optional[str]
    vehicle_body_type: Optional[str]
    vehicle_role: Optional[str]
    vehicle_age: Optional[int]
    rollover: Optional[str]
    road_surface: Optional[str]
    light_condition: Optional[str]
    severity: InjurySeverity

    def inputs(self) -> tuple:
        return tuple(getattr(self, f) for f in MODEL_FIELDS)


@dataclass(frozen=True)
class Schema:
    """Maps record fields to CSV column names and declares Unknown sentinels.

    ``sentinels`` lists extra per-field tokens (e.g. ``"999"`` for an age)
    that mean Unknown, on top of the empty cell and ``"unknown"``.
    """

    columns: Mapping[str, str] = field(default_factory=lambda: {c: c for c in CSV_COLUMNS})
    sentinels: Mapping[str, frozenset] = field(default_factory=dict)


CANONICAL_SCHEMA = Schema()


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_parsed: int = 0
    rows_rejected: int = 0
    rejections: Counter = field(default_factory=Counter)
    missingness: dict = field(default_factory=dict)


class _RowError(Exception):
    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


_GENERIC_UNKNOWN = frozenset({"", "unknown"})


def _parse_value(name, raw, sentinels):
    token = raw.strip()
    if token.lower() in _GENERIC_UNKNOWN or token in sentinels.get(name, ()):
        return None
    if name in NUMERIC_FIELDS:
        try:
            v = int(token)
        except ValueError:
            raise _RowError(f"bad_{name}") from None
        if v < 0:
            raise _RowError(f"negative_{name}")
        return v
    token = token.lower()
    if name in CLOSED_VOCAB and token not in CLOSED_VOCAB[name]:
        raise _RowError(f"bad_{name}")
    if name == "initial_impact":
        return ImpactPoint(token)
    return token


def _read_text(source) -> str:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            source = fh.read()
    elif not isinstance(source, (bytes, bytearray)):
        source = source.read()
    if isinstance(source, str):
        return source
    return bytes(source).decode("utf-8")


def parse_csv(source, schema: Schema = CANONICAL_SCHEMA):
    """Parse a canonical accident CSV.

    ``source`` may be a path, raw bytes, or a binary/text stream. Returns
    ``(records, report)``; malformed rows are tallied in the report by reason.
    """
    reader = csv.reader(io.StringIO(_read_text(source), newline=""))
    header = next(reader, None)
    if header is None:
        raise SchemaError("missing header row")
    header = [h.strip() for h in header]
    position = {name: i for i, name in enumerate(header)}
    sev_col = schema.columns.get("severity", "severity")
    if sev_col not in position:
        raise SchemaError(f"missing mandatory column {sev_col!r}")
    lookup = {}
    for name in LABEL_FIELDS + INPUT_FIELDS:
        col = schema.columns.get(name, name)
        if col in position:
            lookup[name] = position[col]

    report = IngestReport()
    records = []
    for row in reader:
        if not row:
            continue
        report.rows_read += 1
        try:
            records.append(_parse_row(row, len(header), position[sev_col], lookup, schema))
        except _RowError as exc:
            report.rows_rejected += 1
            report.rejections[exc.reason] += 1
    report.rows_parsed = len(records)
    report.missingness = missingness(records)
    return records, report


def _parse_row(row, width, sev_idx, lookup, schema):
    if len(row) != width:
        raise _RowError("field_count")
    try:
        severity = InjurySeverity.from_token(row[sev_idx])
    except ValueError:
        raise _RowError("severity") from None
    values = {}
    for name, idx in lookup.items():
        if name in LABEL_FIELDS:
            values[name] = row[idx]
        else:
            values[name] = _parse_value(name, row[idx], schema.sentinels)
    return AccidentRecord(severity=severity, **values)


def missingness(records: Iterable[AccidentRecord]) -> dict:
    """Fraction of Unknown cells per input field."""
    records = list(records)
    if not records:
        return {name: 0.0 for name in INPUT_FIELDS}
    n = len(records)
    return {
        name: sum(getattr(r, name) is None for r in records) / n for name in INPUT_FIELDS
    }


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, ImpactPoint):
        return value.value
    if isinstance(value, InjurySeverity):
        return value.token
    return str(value)


def record_to_row(record: AccidentRecord) -> list:
    return [format_value(getattr(record, name)) for name in CSV_COLUMNS]


def filter_head_on_front(records: Iterable[AccidentRecord]) -> list:
    return [
        r
        for r in records
        if r.manner_of_collision == HEAD_ON and r.initial_impact is ImpactPoint.Front
    ]


def select_model_variables(records: Iterable[AccidentRecord]) -> list:
    """Project records onto the modelled inputs; speed fields are dropped."""
    return [
        ModelRow(severity=r.severity, **{name: getattr(r, name) for name in MODEL_FIELDS})
        for r in records
    ]


assert len(fields(ModelRow)) == len(MODEL_FIELDS) + 1
