"""Report table containers shared by the pipeline and the counting oracle.

Deliberately logic-free: cells are plain ints for counts, Decimal
(quantized to 2 places) for rates, None for undefined rates. Keeping this
module free of aggregation code lets the brute-force oracle share it
without compromising its independence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum


class ReportKind(Enum):
    RESULT_BY_SEX = "result_by_sex"
    CARE_BY_RESULT = "care_by_result"
    CARE_BY_SEX = "care_by_sex"
    ICU_AMONG_HOSPITALIZED_POSITIVES = "icu_among_hospitalized_positives"
    INTUBATION_AMONG_ICU = "intubation_among_icu"
    DEATHS_SUMMARY = "deaths_summary"
    FATALITY_BY_STATE = "fatality_by_state"
    COMORBIDITY_FREQUENCIES = "comorbidity_frequencies"


ALL_KINDS: tuple[ReportKind, ...] = tuple(ReportKind)


class UnknownKindError(ValueError):
    """Requested report kind does not exist."""


Cell = int | Decimal | None


@dataclass(frozen=True)
class ReportTable:
    """Rectangular labelled grid mirroring one published table."""

    kind: str
    columns: list[str]
    rows: list[str]
    cells: list[list[Cell]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.cells) != len(self.rows):
            raise ValueError(f"{self.kind}: {len(self.rows)} rows vs {len(self.cells)} cell rows")
        for label, row in zip(self.rows, self.cells):
            if len(row) != len(self.columns):
                raise ValueError(f"{self.kind}: row {label!r} is not rectangular")

    def cell(self, row_label: str, column_label: str) -> Cell:
        return self.cells[self.rows.index(row_label)][self.columns.index(column_label)]
