"""Seeded synthetic accident data with planted severity rules.

Input fields are drawn independently from declared marginals, so the
Bayes-optimal one-against-all accuracy of every class follows exactly from
the rule table. Missingness and the head-on/front share are placed by exact
count rather than by coin flips.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .prep import round_half_up
from .schema import (
    CSV_COLUMNS,
    HEAD_ON,
    MODEL_FIELDS,
    NUMERIC_FIELDS,
    AccidentRecord,
    ImpactPoint,
    InjurySeverity,
    record_to_row,
)

N_CLASSES = len(InjurySeverity)


class SpecError(ValueError):
    pass


def _uniform(values) -> dict:
    values = list(values)
    return {v: 1.0 / len(values) for v in values}


DEFAULT_MARGINALS = {
    "driver_age": _uniform(range(16, 91)),
    "gender": {"female": 0.45, "male": 0.55},
    "alcohol_use": {"no": 0.8, "yes": 0.2},
    "restraint_used": {"no": 0.25, "yes": 0.75},
    "ejected": {"no": 0.95, "yes": 0.05},
    "vehicle_body_type": {"car": 0.5, "pickup": 0.15, "suv": 0.2, "truck": 0.05, "van": 0.1},
    "vehicle_role": {"both": 0.1, "struck": 0.45, "striking": 0.45},
    "vehicle_age": _uniform(range(0, 21)),
    "rollover": {"no": 0.95, "yes": 0.05},
    "road_surface": {"dry": 0.7, "ice": 0.05, "snow": 0.05, "wet": 0.2},
    "light_condition": {"dark": 0.25, "dark_lighted": 0.1, "dawn_dusk": 0.05, "daylight": 0.6},
    "travel_speed": _uniform(range(15, 86)),
    "speed_limit": {25: 0.15, 35: 0.25, 45: 0.25, 55: 0.25, 65: 0.1},
}

OTHER_MANNERS = ("angle", "rear_end", "sideswipe_opposite", "sideswipe_same", "not_collision")


@dataclass(frozen=True)
class Rule:
    """``when`` maps a field to allowed categorical values, or to an inclusive
    ``(lo, hi)`` range for a numeric field. ``dist`` is over severities."""

    when: Mapping[str, tuple]
    dist: tuple

    def matches(self, values: Mapping) -> bool:
        for name, cond in self.when.items():
            v = values[name]
            if name in NUMERIC_FIELDS:
                if not (cond[0] <= v <= cond[1]):
                    return False
            elif v not in cond:
                return False
        return True


def _dominant(cls: InjurySeverity, p: float, fatal_share: Optional[float] = None) -> tuple:
    dist = np.zeros(N_CLASSES)
    dist[cls] = p
    others = [c for c in InjurySeverity if c != cls]
    if fatal_share is not None and cls != InjurySeverity.Fatal:
        dist[InjurySeverity.Fatal] = fatal_share
        others.remove(InjurySeverity.Fatal)
    rest = 1.0 - dist.sum()
    for c in others:
        dist[c] = rest / len(others)
    return tuple(float(v) for v in dist)


S = InjurySeverity

PLANTED_RULES = (
    Rule({"restraint_used": ("no",), "alcohol_use": ("yes",)}, _dominant(S.Fatal, 0.97)),
    Rule({"restraint_used": ("no",), "light_condition": ("dark",)}, _dominant(S.Fatal, 0.97)),
    Rule({"alcohol_use": ("yes",), "light_condition": ("dark",)}, _dominant(S.Fatal, 0.97)),
    Rule({"restraint_used": ("no",)}, _dominant(S.Incapacitating, 0.85, 0.01)),
    Rule({"alcohol_use": ("yes",)}, _dominant(S.NonIncapacitating, 0.85, 0.01)),
    Rule({"driver_age": (60, 200)}, _dominant(S.PossibleInjury, 0.85, 0.01)),
    Rule({}, _dominant(S.NoInjury, 0.85, 0.01)),
)

RESTRAINT_RULES = (
    Rule({"restraint_used": ("no",)}, _dominant(S.Fatal, 0.9)),
    Rule({}, _dominant(S.NoInjury, 0.7, 0.01)),
)

RULE_PRESETS = {
    "planted": PLANTED_RULES,
    "restraint": RESTRAINT_RULES,
    "noise": (),
}


@dataclass(frozen=True)
class GeneratorSpec:
    n_rows: int = 10_000
    seed: int = 0
    class_weights: tuple = (0.35, 0.25, 0.15, 0.15, 0.10)
    rule_table: tuple = PLANTED_RULES
    missingness: Mapping[str, float] = field(
        default_factory=lambda: {"travel_speed": 0.6768, "speed_limit": 0.1,
                                 "driver_age": 0.01, "vehicle_age": 0.03}
    )
    proxy_pairs: tuple = (("restraint_used", "ejected", 0.9),)
    head_on_front_fraction: float = 0.987
    marginals: Mapping[str, Mapping] = field(default_factory=lambda: DEFAULT_MARGINALS)

    def validate(self):
        if self.n_rows < 0:
            raise SpecError("n_rows must be >= 0")
        if len(self.class_weights) != N_CLASSES or abs(sum(self.class_weights) - 1.0) > 1e-12:
            raise SpecError("class_weights must be five reals summing to 1")
        if not 0.0 <= self.head_on_front_fraction <= 1.0:
            raise SpecError("head_on_front_fraction must lie in [0, 1]")
        for name, frac in self.missingness.items():
            if name not in self.marginals:
                raise SpecError(f"missingness names unknown field {name!r}")
            if not 0.0 <= frac <= 1.0:
                raise SpecError(f"missingness for {name!r} must lie in [0, 1]")
        for name, probs in self.marginals.items():
            if abs(sum(probs.values()) - 1.0) > 1e-9:
                raise SpecError(f"marginal for {name!r} does not sum to 1")
        proxies = set()
        for source, proxy, level in self.proxy_pairs:
            for name in (source, proxy):
                if name not in MODEL_FIELDS:
                    raise SpecError(f"proxy pair names non-model field {name!r}")
            if not 0.0 <= level <= 1.0:
                raise SpecError("proxy agreement must lie in [0, 1]")
            if set(self.marginals[source]) - set(self.marginals[proxy]):
                raise SpecError(f"proxy {proxy!r} cannot take every value of {source!r}")
            proxies.add(proxy)
        for i, rule in enumerate(self.rule_table):
            if len(rule.dist) != N_CLASSES or abs(sum(rule.dist) - 1.0) > 1e-9:
                raise SpecError(f"rule {i}: distribution must be five reals summing to 1")
            for name, cond in rule.when.items():
                if name not in MODEL_FIELDS:
                    raise SpecError(f"rule {i}: {name!r} is not a model input field")
                if name in proxies:
                    raise SpecError(f"rule {i}: {name!r} is a proxy field")
                support = {v for v, p in self.marginals[name].items() if p > 0}
                if name in NUMERIC_FIELDS:
                    ok = any(cond[0] <= v <= cond[1] for v in support)
                else:
                    ok = bool(set(cond) & support)
                    bad = set(cond) - set(self.marginals[name])
                    if bad:
                        raise SpecError(f"rule {i}: impossible {name} value(s) {sorted(bad)}")
                if not ok:
                    raise SpecError(f"rule {i}: condition on {name!r} can never hold")


@dataclass
class GroundTruth:
    n_rows: int
    bayes_accuracy: dict
    class_marginals: dict
    head_on_front_count: int = 0
    missing_counts: dict = field(default_factory=dict)
    proxy_agreement: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_rows": self.n_rows,
                "bayes_accuracy": self.bayes_accuracy,
                "class_marginals": self.class_marginals,
                "head_on_front_count": self.head_on_front_count,
                "missing_counts": self.missing_counts,
                "proxy_agreement": self.proxy_agreement,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"


def _cell_dist(spec: GeneratorSpec, values: Mapping) -> np.ndarray:
    for rule in spec.rule_table:
        if rule.matches(values):
            return np.asarray(rule.dist)
    return np.asarray(spec.class_weights)


def bayes_truth(spec: GeneratorSpec):
    """Exact rule-implied class marginals and one-vs-all Bayes accuracies."""
    referenced = sorted({name for rule in spec.rule_table for name in rule.when})
    supports = [list(spec.marginals[name].items()) for name in referenced]
    n_cells = int(np.prod([len(s) for s in supports])) if supports else 1
    if n_cells > 2_000_000:
        raise SpecError("rule table references too many field combinations")
    marginal = np.zeros(N_CLASSES)
    correct = np.zeros(N_CLASSES)
    for combo in itertools.product(*supports):
        prob = 1.0
        values = {}
        for name, (v, p) in zip(referenced, combo):
            values[name] = v
            prob *= p
        dist = _cell_dist(spec, values)
        marginal += prob * dist
        correct += prob * np.maximum(dist, 1.0 - dist)
    tokens = [c.token for c in InjurySeverity]
    return dict(zip(tokens, map(float, marginal))), dict(zip(tokens, map(float, correct)))


def generate(spec: GeneratorSpec = GeneratorSpec()):
    """Return ``(records, ground_truth)``; a pure function of ``spec``."""
    spec.validate()
    marginals, bayes = bayes_truth(spec)
    n = spec.n_rows
    if n == 0:
        return [], GroundTruth(0, bayes, marginals)
    rng = np.random.default_rng(spec.seed)

    cols = {}
    for name in MODEL_FIELDS + ("travel_speed", "speed_limit"):
        support = list(spec.marginals[name])
        probs = np.array([spec.marginals[name][v] for v in support])
        draw = rng.choice(len(support), size=n, p=probs / probs.sum())
        cols[name] = [support[k] for k in draw]

    u = rng.random(n)
    severity = np.empty(n, dtype=int)
    for i in range(n):
        cdf = np.cumsum(_cell_dist(spec, {f: cols[f][i] for f in MODEL_FIELDS}))
        severity[i] = min(int(np.searchsorted(cdf, u[i], side="right")), N_CLASSES - 1)

    proxy_agreement = {}
    for source, proxy, level in spec.proxy_pairs:
        order = rng.permutation(n)
        n_agree = round_half_up(level * n)
        support = spec.marginals[proxy]
        picks = rng.random(n)
        for rank, i in enumerate(order):
            src = cols[source][i]
            if rank < n_agree:
                cols[proxy][i] = src
            else:
                alts = [v for v in support if v != src]
                w = np.array([support[v] for v in alts], dtype=float)
                w = w / w.sum() if w.sum() > 0 else np.full(len(alts), 1.0 / len(alts))
                cols[proxy][i] = alts[min(int(np.searchsorted(np.cumsum(w), picks[i], side="right")), len(alts) - 1)]
        proxy_agreement[f"{source}->{proxy}"] = n_agree / n

    n_hof = round_half_up(spec.head_on_front_fraction * n)
    hof = np.zeros(n, dtype=bool)
    hof[rng.permutation(n)[:n_hof]] = True
    impacts = list(ImpactPoint)
    non_front = [p for p in impacts if p is not ImpactPoint.Front]
    manner_draw = rng.integers(0, len(OTHER_MANNERS) + 1, size=n)
    impact_draw = rng.integers(0, len(impacts), size=n)
    non_front_draw = rng.integers(0, len(non_front), size=n)
    manner, impact = [], []
    for i in range(n):
        if hof[i]:
            manner.append(HEAD_ON)
            impact.append(ImpactPoint.Front)
            continue
        m = HEAD_ON if manner_draw[i] == len(OTHER_MANNERS) else OTHER_MANNERS[manner_draw[i]]
        p = impacts[impact_draw[i]]
        if m == HEAD_ON and p is ImpactPoint.Front:
            p = non_front[non_front_draw[i]]
        manner.append(m)
        impact.append(p)
    cols["manner_of_collision"] = manner
    cols["initial_impact"] = impact

    missing_counts = {}
    for name in sorted(spec.missingness):
        k = round_half_up(spec.missingness[name] * n)
        for i in rng.permutation(n)[:k]:
            cols[name][i] = None
        missing_counts[name] = k

    years = rng.integers(1995, 2001, size=n)
    months = rng.integers(1, 13, size=n)
    regions = rng.integers(1, 5, size=n)
    psus = rng.integers(1, 61, size=n)
    makes = rng.integers(1, 100, size=n)
    records = []
    for i in range(n):
        values = {name: cols[name][i] for name in cols}
        records.append(
            AccidentRecord(
                severity=InjurySeverity(int(severity[i])),
                year=str(years[i]),
                month=str(months[i]),
                region=str(regions[i]),
                psu=str(psus[i]),
                jurisdiction=str(psus[i] * 10 + regions[i]),
                case_number=f"{i + 1:06d}",
                person_number="1",
                vehicle_number="1",
                vehicle_make_model=f"{makes[i]:02d}-{(makes[i] * 7) % 100:03d}",
                **values,
            )
        )
    truth = GroundTruth(n, bayes, marginals, n_hof, missing_counts, proxy_agreement)
    return records, truth


def to_csv_text(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(record_to_row(r))
    return buf.getvalue()


def write_csv(records, sink) -> int:
    """Write the canonical CSV to a path or stream; returns the byte count."""
    data = to_csv_text(records).encode("utf-8")
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(data)
    elif isinstance(sink, io.TextIOBase):
        sink.write(data.decode("utf-8"))
    else:
        sink.write(data)
    return len(data)
