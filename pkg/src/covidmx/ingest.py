"""Streaming CSV ingestion with a row-level error taxonomy.

One pass, bounded buffers: memory use does not depend on file size. Each
data row yields either a PatientRecord or a RowError; a malformed row never
disturbs its neighbours. UTF-8 input is decoded with surrogateescape so a
stray invalid byte rejects one row instead of killing the stream.

Field processing order is canonical (see FIELD_ORDER): "first failing
field" is deterministic and the compiled row kernel follows the same order.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import dataclass, field as dc_field
from enum import Enum
from typing import Iterator, TextIO

from .model import (
    AGE_WARN_CAP,
    COMORBIDITY_FIELDS,
    MalformedDateError,
    PatientRecord,
    RegionKey,
    SchemaConfig,
    TriState,
    decode_sex,
    decode_tristate,
    parse_death_date,
    parse_int_cell,
    parse_optional_date,
)


class ErrorKind(Enum):
    MISSING_COLUMN = "missing_column"
    MALFORMED_DATE = "malformed_date"
    MALFORMED_INTEGER = "malformed_integer"
    EMPTY_REQUIRED = "empty_required"
    ENCODING_ERROR = "encoding_error"


#: Canonical per-row field order; comorbidities and extras follow in their
#: declared order after the named fields.
FIELD_ORDER: tuple[str, ...] = (
    "record_id",
    "sex",
    "age",
    "reporting_state",
    "residence_state",
    "residence_municipality",
    "patient_type",
    "icu",
    "intubated",
    "lab_result",
    "death_date",
    "symptom_onset_date",
    "indigenous_speaker",
)

EXCERPT_CAP = 128


class MissingColumnError(Exception):
    """A mapped column is absent from the CSV header (open-time)."""

    def __init__(self, fieldname: str, column: str):
        super().__init__(f"column {column!r} (field {fieldname!r}) not in header")
        self.fieldname = fieldname
        self.column = column


@dataclass(frozen=True)
class RowError:
    """One rejected data row; row_number is 1-based, header excluded."""

    row_number: int
    field: str
    kind: ErrorKind
    raw_excerpt: str


def make_row_error(row_number: int, fieldname: str, kind: ErrorKind, cell: str) -> RowError:
    """Shared constructor (also called by the compiled kernel)."""
    excerpt = cell[:EXCERPT_CAP]
    if not excerpt.isascii():
        # Surrogates from surrogateescape decoding must not leak into reports.
        excerpt = excerpt.encode("utf-8", "backslashreplace").decode("utf-8")[:EXCERPT_CAP]
    return RowError(row_number=row_number, field=fieldname, kind=kind, raw_excerpt=excerpt)


@dataclass
class ValidationReport:
    """Tally of one full pass over a dataset."""

    rows_total: int = 0
    rows_accepted: int = 0
    rows_rejected: int = 0
    errors_by_kind: dict[str, int] = dc_field(default_factory=dict)
    first_errors: list[RowError] = dc_field(default_factory=list)
    warnings: dict[str, int] = dc_field(default_factory=dict)
    duplicate_ids: int = 0

    def to_dict(self) -> dict:
        return {
            "rows_total": self.rows_total,
            "rows_accepted": self.rows_accepted,
            "rows_rejected": self.rows_rejected,
            "errors_by_kind": dict(sorted(self.errors_by_kind.items())),
            "first_errors": [
                {
                    "row_number": e.row_number,
                    "field": e.field,
                    "kind": e.kind.value,
                    "raw_excerpt": e.raw_excerpt,
                }
                for e in self.first_errors
            ],
            "warnings": dict(sorted(self.warnings.items())),
            "duplicate_ids": self.duplicate_ids,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"


def sniff_encoding(path) -> str:
    """BOM/validity probe: utf-8-sig, utf-8, or latin-1."""
    with open(path, "rb") as fh:
        prefix = fh.read(65536)
    if prefix.startswith(b"\xef\xbb\xbf"):
        return "utf-8-sig"
    probe = prefix
    for _ in range(4):  # avoid a false negative from a split multibyte char
        try:
            probe.decode("utf-8")
            return "utf-8"
        except UnicodeDecodeError as exc:
            if exc.start < len(probe) - 4:
                break
            probe = probe[: exc.start]
    return "latin-1"


def _has_surrogate(cell: str) -> bool:
    if cell.isascii():
        return False
    return any("\ud800" <= ch <= "\udfff" for ch in cell)


@dataclass(frozen=True)
class RowLayout:
    """Schema bound to a concrete header: semantic field → cell index.

    Index -1 marks a field that is configured absent; parse_row substitutes
    the field's neutral default.
    """

    schema: SchemaConfig
    indexes: dict[str, int]
    comorb_indexes: tuple[tuple[str, int], ...]
    extra_indexes: tuple[tuple[str, int], ...]
    width: int


def bind_header(schema: SchemaConfig, header: list[str]) -> RowLayout:
    """Resolve column names to indexes; raises MissingColumnError.

    Header matching is exact and case-sensitive; the first occurrence wins
    when a name repeats.
    """
    pos: dict[str, int] = {}
    for i, name in enumerate(header):
        pos.setdefault(name, i)

    def resolve(fieldname: str, column: str) -> int:
        if column not in pos:
            raise MissingColumnError(fieldname, column)
        return pos[column]

    indexes: dict[str, int] = {}
    for fieldname in FIELD_ORDER:
        column = schema.column_map.get(fieldname)
        if column is None or schema.is_absent(fieldname):
            indexes[fieldname] = -1
        else:
            indexes[fieldname] = resolve(fieldname, column)
    comorb = tuple(
        (name, resolve(name, schema.comorbidity_columns[name]))
        for name in COMORBIDITY_FIELDS
        if name in schema.comorbidity_columns
    )
    extras = tuple(
        (name, resolve(name, column)) for name, column in schema.extra_columns.items()
    )
    return RowLayout(
        schema=schema,
        indexes=indexes,
        comorb_indexes=comorb,
        extra_indexes=extras,
        width=len(header),
    )


class _RowReject(Exception):
    def __init__(self, err: RowError):
        self.err = err


def _cell(cells: list[str], idx: int, fieldname: str, row_number: int) -> str:
    if idx < 0:
        return ""
    if idx >= len(cells):
        raise _RowReject(
            make_row_error(row_number, fieldname, ErrorKind.MISSING_COLUMN, "")
        )
    cell = cells[idx]
    if _has_surrogate(cell):
        raise _RowReject(
            make_row_error(row_number, fieldname, ErrorKind.ENCODING_ERROR, cell)
        )
    return cell


def parse_row(cells: list[str], layout: RowLayout, row_number: int = 1) -> PatientRecord | RowError:
    """Decode one raw row; the first failing field rejects the row."""
    schema = layout.schema
    idx = layout.indexes
    try:
        rid = _cell(cells, idx["record_id"], "record_id", row_number)

        sex_cell = _cell(cells, idx["sex"], "sex", row_number)
        sex = decode_sex(schema.catalog_for("sex"), sex_cell)

        age_cell = _cell(cells, idx["age"], "age", row_number)
        age = 0
        if idx["age"] >= 0:
            if not age_cell.strip(" \t"):
                raise _RowReject(
                    make_row_error(row_number, "age", ErrorKind.EMPTY_REQUIRED, age_cell)
                )
            parsed = parse_int_cell(age_cell)
            if parsed is None or parsed < 0:
                raise _RowReject(
                    make_row_error(row_number, "age", ErrorKind.MALFORMED_INTEGER, age_cell)
                )
            age = parsed

        state_cell = _cell(cells, idx["reporting_state"], "reporting_state", row_number)
        if not state_cell.strip(" \t"):
            raise _RowReject(
                make_row_error(row_number, "reporting_state", ErrorKind.EMPTY_REQUIRED, state_cell)
            )
        reporting_state = parse_int_cell(state_cell)
        if reporting_state is None or not 1 <= reporting_state <= 32:
            raise _RowReject(
                make_row_error(
                    row_number, "reporting_state", ErrorKind.MALFORMED_INTEGER, state_cell
                )
            )

        residence = None
        res_cell = _cell(cells, idx["residence_state"], "residence_state", row_number)
        res_stripped = res_cell.strip(" \t")
        if res_stripped:
            res_state = parse_int_cell(res_cell)
            if res_state is None:
                raise _RowReject(
                    make_row_error(
                        row_number, "residence_state", ErrorKind.MALFORMED_INTEGER, res_cell
                    )
                )
            if 1 <= res_state <= 32:
                muni = None
                muni_cell = _cell(
                    cells, idx["residence_municipality"], "residence_municipality", row_number
                )
                muni_stripped = muni_cell.strip(" \t")
                if muni_stripped and muni_stripped not in schema.municipality_unspecified_codes:
                    muni = parse_int_cell(muni_cell)
                    if muni is None or muni < 1:
                        raise _RowReject(
                            make_row_error(
                                row_number,
                                "residence_municipality",
                                ErrorKind.MALFORMED_INTEGER,
                                muni_cell,
                            )
                        )
                residence = RegionKey(state_code=res_state, municipality_code=muni)

        patient_type = _cell(cells, idx["patient_type"], "patient_type", row_number)
        icu = _cell(cells, idx["icu"], "icu", row_number)
        intubated = _cell(cells, idx["intubated"], "intubated", row_number)
        lab_result = _cell(cells, idx["lab_result"], "lab_result", row_number)

        death_date: _dt.date | None = None
        if idx["death_date"] >= 0:
            death_cell = _cell(cells, idx["death_date"], "death_date", row_number)
            try:
                death_date = parse_death_date(death_cell, schema)
            except MalformedDateError:
                raise _RowReject(
                    make_row_error(row_number, "death_date", ErrorKind.MALFORMED_DATE, death_cell)
                )

        onset: _dt.date | None = None
        if idx["symptom_onset_date"] >= 0:
            onset_cell = _cell(cells, idx["symptom_onset_date"], "symptom_onset_date", row_number)
            try:
                onset = parse_optional_date(onset_cell, schema)
            except MalformedDateError:
                raise _RowReject(
                    make_row_error(
                        row_number, "symptom_onset_date", ErrorKind.MALFORMED_DATE, onset_cell
                    )
                )

        indig_cell = _cell(cells, idx["indigenous_speaker"], "indigenous_speaker", row_number)
        indigenous = (
            decode_tristate(schema.catalog_for("indigenous_speaker"), indig_cell)
            if idx["indigenous_speaker"] >= 0
            else TriState.UNSPECIFIED
        )

        comorbidities: dict[str, TriState] = {}
        for name, cidx in layout.comorb_indexes:
            ccell = _cell(cells, cidx, name, row_number)
            comorbidities[name] = decode_tristate(schema.catalog_for(name), ccell)
        for name in COMORBIDITY_FIELDS:
            comorbidities.setdefault(name, TriState.UNSPECIFIED)

        extras: dict[str, TriState] = {}
        for name, eidx in layout.extra_indexes:
            ecell = _cell(cells, eidx, name, row_number)
            extras[name] = decode_tristate(schema.catalog_for(name), ecell)
    except _RowReject as reject:
        return reject.err

    return PatientRecord(
        record_id=rid,
        sex=sex,
        age=age,
        residence=residence,
        reporting_state=reporting_state,
        patient_type_code=patient_type,
        icu_code=icu,
        intubated_code=intubated,
        lab_result_code=lab_result,
        death_date=death_date,
        symptom_onset_date=onset,
        indigenous_speaker=indigenous,
        comorbidities=comorbidities,
        extras=extras,
    )


def _open_text(path, encoding: str | None) -> TextIO:
    enc = encoding or sniff_encoding(path)
    errors = "surrogateescape" if enc.startswith("utf-8") else "strict"
    return open(path, "r", encoding=enc, errors=errors, newline="")


def open_rows(path, schema: SchemaConfig, *, encoding: str | None = None):
    """Low-level stream: (layout, iterator of (row_number, cells))."""
    fh = _open_text(path, encoding)
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise MissingColumnError("header", "<empty file>") from None
    except Exception:
        fh.close()
        raise
    try:
        layout = bind_header(schema, header)
    except Exception:
        fh.close()
        raise

    def rows() -> Iterator[tuple[int, list[str]]]:
        with fh:
            for row_number, cells in enumerate(reader, start=1):
                yield row_number, cells

    return layout, rows()


def open_dataset(path, schema: SchemaConfig, *, encoding: str | None = None) -> Iterator[PatientRecord | RowError]:
    """Stream a snapshot: one PatientRecord or RowError per data row, in order."""
    layout, rows = open_rows(path, schema, encoding=encoding)
    for row_number, cells in rows:
        yield parse_row(cells, layout, row_number)


def validate_dataset(
    path,
    schema: SchemaConfig,
    *,
    encoding: str | None = None,
    first_errors_cap: int = 50,
    track_duplicates: bool = True,
) -> ValidationReport:
    """Full-pass tally. Duplicate-id tracking keeps a seen-id set (memory
    grows with unique ids), so it is a validation-only feature."""
    report = ValidationReport()
    seen_ids: set[str] = set()
    for item in open_dataset(path, schema, encoding=encoding):
        report.rows_total += 1
        if isinstance(item, RowError):
            report.rows_rejected += 1
            kind = item.kind.value
            report.errors_by_kind[kind] = report.errors_by_kind.get(kind, 0) + 1
            if len(report.first_errors) < first_errors_cap:
                report.first_errors.append(item)
            continue
        report.rows_accepted += 1
        if item.age > AGE_WARN_CAP:
            report.warnings["age_above_cap"] = report.warnings.get("age_above_cap", 0) + 1
        if track_duplicates and item.record_id:
            if item.record_id in seen_ids:
                report.duplicate_ids += 1
            else:
                seen_ids.add(item.record_id)
    return report
