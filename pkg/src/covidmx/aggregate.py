"""Mergeable stratified counting and the case-fatality-rate arithmetic.

The accumulator is a dense int64 array over the full label cross
(state × sex × result × care × ICU × intubation × vital), so its memory
footprint is a constant independent of row count, merging is an elementwise
sum (a commutative monoid), and parallel chunked aggregation is
bit-reproducible for any worker count or chunk split.

Rates are computed on exact integers and rounded half-up to 2 decimals;
floating point never touches a published number.
"""

from __future__ import annotations

import datetime as _dt
import json
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from .model import (
    CareStatus,
    Classification,
    COMORBIDITY_FIELDS,
    IcuStatus,
    IntubationStatus,
    PatientRecord,
    STATE_NAMES,
    Sex,
    TestStatus,
    TriState,
    VitalStatus,
)
from .tables import ReportKind, ReportTable, UnknownKindError

#: Axis sizes: states 0..32 (0 = unattributed), sex 3, result 3, care 3,
#: ICU 4, intubation 4, vital 2.
SHAPE = (33, 3, 3, 3, 4, 4, 2)
N_CELLS = 33 * 3 * 3 * 3 * 4 * 4 * 2

SNAPSHOT_VERSION = 1

_DIAG_NAMES = ("intubated_outside_icu", "filtered_out", "age_warnings")


class InconsistentCountsError(ValueError):
    """Deaths without positives in a slice: the cohort arithmetic is broken."""


class MergeUniverseError(ValueError):
    """Accumulators built against different grouping universes."""


def cell_index(state: int, sex: int, test: int, care: int, icu: int, intub: int, vital: int) -> int:
    """Flat index into the dense counter array (states 0..32)."""
    return (((((state * 3 + sex) * 3 + test) * 3 + care) * 4 + icu) * 4 + intub) * 2 + vital


@dataclass(frozen=True)
class CohortFilter:
    """Subpopulation predicate; the empty filter accepts every record."""

    indigenous_only: bool = False
    states: frozenset[int] | None = None
    municipalities: frozenset[tuple[int, int]] | None = None
    date_window: tuple[_dt.date, _dt.date] | None = None

    def accepts(self, record: PatientRecord, attribution_state: int) -> bool:
        if self.indigenous_only and record.indigenous_speaker is not TriState.YES:
            return False
        if self.states is not None and attribution_state not in self.states:
            return False
        if self.municipalities is not None:
            res = record.residence
            if res is None or res.municipality_code is None:
                return False
            if (res.state_code, res.municipality_code) not in self.municipalities:
                return False
        if self.date_window is not None:
            onset = record.symptom_onset_date
            if onset is None:
                return False
            lo, hi = self.date_window
            if not lo <= onset <= hi:
                return False
        return True


class CohortAccumulator:
    """Single-writer stratified counters; combine across workers via merge().

    attribution picks which state keys the geographic axis: "reporting"
    (medical-unit entity, always 1..32) or "residence" (may be
    unattributed, index 0).
    """

    __slots__ = ("cells", "comorb", "diag", "rejected_by_kind", "attribution")

    def __init__(self, attribution: str = "reporting"):
        if attribution not in ("reporting", "residence"):
            raise ValueError(f"unknown attribution {attribution!r}")
        self.cells = np.zeros(N_CELLS, dtype=np.int64)
        self.comorb = np.zeros(len(COMORBIDITY_FIELDS), dtype=np.int64)
        self.diag = np.zeros(len(_DIAG_NAMES), dtype=np.int64)
        self.rejected_by_kind: dict[str, int] = {}
        self.attribution = attribution

    # -- views ---------------------------------------------------------------

    def grid(self) -> np.ndarray:
        return self.cells.reshape(SHAPE)

    def total(self) -> int:
        return int(self.cells.sum())

    @property
    def intubated_outside_icu(self) -> int:
        return int(self.diag[0])

    @property
    def filtered_out(self) -> int:
        return int(self.diag[1])

    @property
    def age_warnings(self) -> int:
        return int(self.diag[2])

    @property
    def rejected_rows(self) -> int:
        return sum(self.rejected_by_kind.values())

    def memory_footprint(self) -> int:
        """Bytes held by aggregation state (constant by construction)."""
        return int(self.cells.nbytes + self.comorb.nbytes + self.diag.nbytes)

    # -- identity / equality --------------------------------------------------

    def __eq__(self, other) -> bool:
        if not isinstance(other, CohortAccumulator):
            return NotImplemented
        return (
            self.attribution == other.attribution
            and bool(np.array_equal(self.cells, other.cells))
            and bool(np.array_equal(self.comorb, other.comorb))
            and bool(np.array_equal(self.diag, other.diag))
            and self.rejected_by_kind == other.rejected_by_kind
        )

    def copy(self) -> "CohortAccumulator":
        out = CohortAccumulator(self.attribution)
        out.cells[:] = self.cells
        out.comorb[:] = self.comorb
        out.diag[:] = self.diag
        out.rejected_by_kind = dict(self.rejected_by_kind)
        return out

    # -- serialization ---------------------------------------------------------

    def to_snapshot(self) -> str:
        nonzero = {str(i): int(v) for i, v in enumerate(self.cells) if v}
        doc = {
            "version": SNAPSHOT_VERSION,
            "attribution": self.attribution,
            "cells": nonzero,
            "comorb": [int(v) for v in self.comorb],
            "diag": [int(v) for v in self.diag],
            "rejected_by_kind": dict(sorted(self.rejected_by_kind.items())),
        }
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_snapshot(cls, text: str) -> "CohortAccumulator":
        doc = json.loads(text)
        if doc.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
        acc = cls(doc["attribution"])
        for key, value in doc["cells"].items():
            acc.cells[int(key)] = value
        acc.comorb[:] = doc["comorb"]
        acc.diag[:] = doc["diag"]
        acc.rejected_by_kind = {str(k): int(v) for k, v in doc["rejected_by_kind"].items()}
        return acc


def attribution_state(record: PatientRecord, attribution: str) -> int:
    """State index on the geographic axis; 0 = unattributed."""
    if attribution == "reporting":
        return record.reporting_state
    return record.residence.state_code if record.residence is not None else 0


def accumulate(
    acc: CohortAccumulator,
    record: PatientRecord,
    classification: Classification,
    cohort: CohortFilter,
) -> CohortAccumulator:
    """Count one classified record iff the filter accepts it (in place)."""
    state = attribution_state(record, acc.attribution)
    if not cohort.accepts(record, state):
        acc.diag[1] += 1
        return acc
    c = classification
    idx = cell_index(
        state,
        int(record.sex),
        int(c.test_status),
        int(c.care_status),
        int(c.icu_status),
        int(c.intubation_status),
        int(c.vital_status),
    )
    acc.cells[idx] += 1
    if c.test_status is TestStatus.POSITIVE and c.care_status is CareStatus.HOSPITALIZED:
        for i, name in enumerate(COMORBIDITY_FIELDS):
            if record.comorbidities.get(name) is TriState.YES:
                acc.comorb[i] += 1
    if c.intubated_outside_icu:
        acc.diag[0] += 1
    return acc


def merge(a: CohortAccumulator, b: CohortAccumulator) -> CohortAccumulator:
    """Cell-wise sum; commutative monoid with the empty accumulator as identity."""
    if a.attribution != b.attribution:
        raise MergeUniverseError(f"{a.attribution!r} vs {b.attribution!r}")
    out = a.copy()
    out.cells += b.cells
    out.comorb += b.comorb
    out.diag += b.diag
    for kind, count in b.rejected_by_kind.items():
        out.rejected_by_kind[kind] = out.rejected_by_kind.get(kind, 0) + count
    return out


# -- rate arithmetic -----------------------------------------------------------

_HUNDRED = Decimal(100)
_CENT = Decimal("0.01")


def _round_half_up_percent(numerator: int, denominator: int) -> Decimal:
    """100*numerator/denominator as an exact half-up 2-decimal Decimal."""
    q, r = divmod(10000 * numerator, denominator)
    if 2 * r >= denominator:
        q += 1
    return (Decimal(q) / _HUNDRED).quantize(_CENT)


def fatality_rate(deaths: int, positives: int) -> Decimal | None:
    """Case-fatality percentage: deaths among confirmed positives × 100.

    Undefined (None) for an empty slice; deaths without positives mean the
    slice arithmetic is broken upstream.
    """
    if deaths < 0 or positives < 0:
        raise ValueError("counts must be non-negative")
    if positives == 0:
        if deaths == 0:
            return None
        raise InconsistentCountsError(f"{deaths} deaths with zero positives")
    return _round_half_up_percent(deaths, positives)


def icu_intubated_death_share(icu_intubated_deaths: int, all_deaths: int) -> Decimal | None:
    """Share of deaths that were in intensive care with intubation."""
    if icu_intubated_deaths < 0 or all_deaths < 0:
        raise ValueError("counts must be non-negative")
    if all_deaths == 0:
        return None
    return _round_half_up_percent(icu_intubated_deaths, all_deaths)


# -- published-table construction ----------------------------------------------

_SEX_LABELS = ("Women", "Men", "Unspecified")
_RESULT_LABELS = ("Positive", "Negative", "Pending result")
_CARE_LABELS = ("Ambulatory", "Hospitalized", "Unspecified")


@dataclass(frozen=True)
class FatalityRateRow:
    """One region's deaths/positives/rate triple."""

    region: int | str
    name: str
    deaths: int
    positives: int
    rate_percent: Decimal | None


def _int_rows(rows: list[list[int]]) -> list[list[int]]:
    return [[int(v) for v in row] for row in rows]


def _cross_with_margins(grid2: np.ndarray) -> list[list[int]]:
    """rows×cols counts plus a Total column and a Total row."""
    body = [[int(v) for v in row] + [int(row.sum())] for row in grid2]
    totals = [int(v) for v in grid2.sum(axis=0)] + [int(grid2.sum())]
    return body + [totals]


def fatality_rows(acc: CohortAccumulator) -> list[FatalityRateRow]:
    """Per-state deaths/positives/rate, plus the Total row.

    With residence attribution an Unattributed row precedes the total so
    the total stays the sum of its rows.
    """
    grid = acc.grid()
    positives_by_state = grid[:, :, TestStatus.POSITIVE, :, :, :, :].sum(axis=(1, 2, 3, 4, 5))
    deaths_by_state = grid[:, :, TestStatus.POSITIVE, :, :, :, VitalStatus.DECEASED].sum(
        axis=(1, 2, 3, 4)
    )
    rows = []
    for code in range(1, 33):
        deaths = int(deaths_by_state[code])
        positives = int(positives_by_state[code])
        rows.append(
            FatalityRateRow(
                region=code,
                name=STATE_NAMES[code],
                deaths=deaths,
                positives=positives,
                rate_percent=fatality_rate(deaths, positives),
            )
        )
    if acc.attribution == "residence":
        deaths = int(deaths_by_state[0])
        positives = int(positives_by_state[0])
        rows.append(
            FatalityRateRow(
                region="Unattributed",
                name="Unattributed",
                deaths=deaths,
                positives=positives,
                rate_percent=fatality_rate(deaths, positives),
            )
        )
    total_deaths = int(deaths_by_state.sum())
    total_positives = int(positives_by_state.sum())
    rows.append(
        FatalityRateRow(
            region="Total",
            name="Total",
            deaths=total_deaths,
            positives=total_positives,
            rate_percent=fatality_rate(total_deaths, total_positives),
        )
    )
    return rows


def build_table(acc: CohortAccumulator, kind: ReportKind) -> ReportTable:
    """One published-table layout from the accumulated counters.

    Cross-tabs carry an Unspecified row/column beyond the published layout
    so every margin is exactly the sum of its cells even on real data.
    """
    if not isinstance(kind, ReportKind):
        raise UnknownKindError(f"unknown report kind {kind!r}")
    grid = acc.grid()

    if kind is ReportKind.RESULT_BY_SEX:
        # result rows × sex columns
        by = grid.sum(axis=(0, 3, 4, 5, 6)).T  # (test, sex)
        return ReportTable(
            kind=kind.value,
            columns=list(_SEX_LABELS) + ["Total"],
            rows=list(_RESULT_LABELS) + ["Total"],
            cells=_cross_with_margins(by),
        )

    if kind is ReportKind.CARE_BY_RESULT:
        by = grid.sum(axis=(0, 1, 4, 5, 6))  # (test, care)
        return ReportTable(
            kind=kind.value,
            columns=list(_CARE_LABELS) + ["Total"],
            rows=list(_RESULT_LABELS) + ["Total"],
            cells=_cross_with_margins(by),
        )

    if kind is ReportKind.CARE_BY_SEX:
        by = grid.sum(axis=(0, 2, 4, 5, 6))  # (sex, care)
        return ReportTable(
            kind=kind.value,
            columns=list(_CARE_LABELS) + ["Total"],
            rows=list(_SEX_LABELS) + ["Total"],
            cells=_cross_with_margins(by),
        )

    if kind is ReportKind.ICU_AMONG_HOSPITALIZED_POSITIVES:
        hosp_pos = grid[:, :, TestStatus.POSITIVE, CareStatus.HOSPITALIZED, :, :, :].sum(
            axis=(0, 1, 3, 4)
        )
        cells = [
            int(hosp_pos[IcuStatus.IN_ICU]),
            int(hosp_pos[IcuStatus.NOT_IN_ICU]),
            int(hosp_pos[IcuStatus.UNSPECIFIED]),
        ]
        return ReportTable(
            kind=kind.value,
            columns=["Intensive care", "No intensive care", "Unspecified", "Total"],
            rows=["Hospitalized positive"],
            cells=[cells + [sum(cells)]],
        )

    if kind is ReportKind.INTUBATION_AMONG_ICU:
        icu_pos = grid[:, :, TestStatus.POSITIVE, CareStatus.HOSPITALIZED, IcuStatus.IN_ICU, :, :].sum(
            axis=(0, 1, 3)
        )
        cells = [
            int(icu_pos[IntubationStatus.INTUBATED]),
            int(icu_pos[IntubationStatus.NOT_INTUBATED]),
            int(icu_pos[IntubationStatus.UNSPECIFIED]),
        ]
        return ReportTable(
            kind=kind.value,
            columns=["Intubated", "Not intubated", "Unspecified", "Total"],
            rows=["Hospitalized intensive care"],
            cells=[cells + [sum(cells)]],
        )

    if kind is ReportKind.DEATHS_SUMMARY:
        pos = grid[:, :, TestStatus.POSITIVE, :, :, :, VitalStatus.DECEASED]
        deaths_by_sex = pos.sum(axis=(0, 2, 3, 4))  # (sex,)
        icu_intub = pos[:, :, CareStatus.HOSPITALIZED, IcuStatus.IN_ICU, IntubationStatus.INTUBATED]
        icu_intub_by_sex = icu_intub.sum(axis=0)
        deaths = [int(v) for v in deaths_by_sex] + [int(deaths_by_sex.sum())]
        icu_deaths = [int(v) for v in icu_intub_by_sex] + [int(icu_intub_by_sex.sum())]
        shares = [icu_intubated_death_share(i, d) for i, d in zip(icu_deaths, deaths)]
        return ReportTable(
            kind=kind.value,
            columns=list(_SEX_LABELS) + ["Total"],
            rows=["Deaths among positives", "Intensive care with intubation", "Share percent"],
            cells=[deaths, icu_deaths, shares],
        )

    if kind is ReportKind.FATALITY_BY_STATE:
        rows = fatality_rows(acc)
        return ReportTable(
            kind=kind.value,
            columns=["Deaths", "Positives", "Rate percent"],
            rows=[r.name for r in rows],
            cells=[[r.deaths, r.positives, r.rate_percent] for r in rows],
        )

    if kind is ReportKind.COMORBIDITY_FREQUENCIES:
        denominator = int(
            grid[:, :, TestStatus.POSITIVE, CareStatus.HOSPITALIZED, :, :, :].sum()
        )
        cells = []
        for i, _name in enumerate(COMORBIDITY_FIELDS):
            count = int(acc.comorb[i])
            share = (
                _round_half_up_percent(count, denominator) if denominator else None
            )
            cells.append([count, share])
        return ReportTable(
            kind=kind.value,
            columns=["Count", "Percent of hospitalized positives"],
            rows=[name.replace("_", " ") for name in COMORBIDITY_FIELDS],
            cells=cells,
        )

    raise UnknownKindError(f"unknown report kind {kind!r}")


def summary_counts(acc: CohortAccumulator) -> dict[str, int]:
    """Headline totals for the CLI summary."""
    grid = acc.grid()
    by_test = grid.sum(axis=(0, 1, 3, 4, 5, 6))
    by_care = grid.sum(axis=(0, 1, 2, 4, 5, 6))
    hosp_pos = grid[:, :, TestStatus.POSITIVE, CareStatus.HOSPITALIZED]
    deaths_pos = int(grid[:, :, TestStatus.POSITIVE, :, :, :, VitalStatus.DECEASED].sum())
    return {
        "accumulated": acc.total(),
        "positive": int(by_test[TestStatus.POSITIVE]),
        "negative": int(by_test[TestStatus.NEGATIVE]),
        "pending": int(by_test[TestStatus.PENDING]),
        "ambulatory": int(by_care[CareStatus.AMBULATORY]),
        "hospitalized": int(by_care[CareStatus.HOSPITALIZED]),
        "care_unspecified": int(by_care[CareStatus.UNSPECIFIED]),
        "icu": int(hosp_pos[:, :, IcuStatus.IN_ICU].sum()),
        "intubated": int(hosp_pos[:, :, IcuStatus.IN_ICU, IntubationStatus.INTUBATED].sum()),
        "deaths_among_positives": deaths_pos,
    }
