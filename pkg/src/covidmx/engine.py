"""Pipeline orchestration: chunked streaming, backend selection, workers.

Two row-processing backends produce identical accumulators from identical
chunks:

* "compiled" — the Cython row kernel (covidmx._rowkernel), a fused
  decode/classify/count loop over prepared lookup tables;
* "python" — the object pipeline (parse_row → classify_patient →
  accumulate), which is also the semantic reference.

The file is streamed sequentially (quoted fields may contain newlines, so
byte-range splitting is unsound); chunks of rows fan out to a process pool
when workers > 1. Each task fills its own accumulator and the results are
merged, which is order-independent, so outputs are byte-identical for any
worker count or chunk size.
"""

from __future__ import annotations

import datetime as _dt
import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from .aggregate import (
    CohortAccumulator,
    CohortFilter,
    accumulate,
    build_table,
    fatality_rows,
    merge,
    summary_counts,
)
from .classify import classify_patient
from .ingest import (
    RowError,
    RowLayout,
    ValidationReport,
    bind_header,
    open_rows,
    parse_row,
)
from .model import (
    AGE_WARN_CAP,
    COMORBIDITY_FIELDS,
    SchemaConfig,
    TriState,
    default_schema,
    load_schema,
)
from .report import atomic_write_text, emit_choropleth, emit_csv, emit_json
from .tables import ALL_KINDS, ReportKind

try:
    from . import _rowkernel
except ImportError:  # pure-Python install
    _rowkernel = None

DEFAULT_CHUNK_ROWS = 8192

_TRI_YES, _TRI_NO, _TRI_UNSPEC = 0, 1, 2


def compiled_available() -> bool:
    return _rowkernel is not None


def select_backend(name: str = "auto") -> str:
    """Resolve a backend name; COVIDMX_BACKEND overrides "auto"."""
    if name == "auto":
        name = os.environ.get("COVIDMX_BACKEND", "auto")
    if name == "auto":
        return "compiled" if compiled_available() else "python"
    if name == "compiled" and not compiled_available():
        raise RuntimeError("compiled row kernel is not available in this install")
    if name not in ("compiled", "python"):
        raise ValueError(f"unknown backend {name!r}")
    return name


@dataclass(frozen=True)
class KernelTables:
    """Prepared lookup tables for the compiled kernel (plain, picklable)."""

    idx_record_id: int
    idx_sex: int
    idx_age: int
    idx_reporting_state: int
    idx_residence_state: int
    idx_residence_municipality: int
    idx_patient_type: int
    idx_icu: int
    idx_intubated: int
    idx_lab_result: int
    idx_death_date: int
    idx_onset_date: int
    idx_indigenous: int
    comorb_slots: tuple[tuple[int, int], ...]  # (counter slot, cell index)
    extra_idx: tuple[int, ...]
    sex_map: dict[str, int]
    sex_default: int
    care_map: dict[str, int]
    care_default: int
    icu_map: dict[str, int]
    icu_default: int
    intub_map: dict[str, int]
    intub_default: int
    indig_map: dict[str, int]
    indig_default: int
    comorb_maps: tuple[dict[str, int], ...]
    comorb_defaults: tuple[int, ...]
    result_map: dict[str, int]
    sentinels: frozenset[str]
    date_format: str
    iso_fast: bool
    muni_unspec: frozenset[str]
    indigenous_only: bool
    states_mask: bytes | None
    munis: frozenset[tuple[int, int]] | None
    window_lo: int
    window_hi: int
    attr_residence: bool
    age_cap: int


_SEX_LABEL_CODE = {"female": 0, "male": 1, "unspecified": 2}
_CARE_LABEL_CODE = {"ambulatory": 0, "hospitalized": 1, "unspecified": 2}
_TRI_LABEL_CODE = {"yes": 0, "no": 1, "unspecified": 2}


def _catalog_to_codes(schema: SchemaConfig, fieldname: str, labels: dict[str, int]):
    catalog = schema.catalog_for(fieldname)
    table = {code: labels[meaning] for code, meaning in catalog.entries.items()}
    return table, labels[catalog.default]


def _ymd(d: _dt.date) -> int:
    return d.year * 10000 + d.month * 100 + d.day


def compile_kernel_tables(
    layout: RowLayout, cohort: CohortFilter, attribution: str
) -> KernelTables:
    schema = layout.schema
    idx = layout.indexes

    sex_map, sex_default = _catalog_to_codes(schema, "sex", _SEX_LABEL_CODE)
    care_map, care_default = _catalog_to_codes(schema, "patient_type", _CARE_LABEL_CODE)
    icu_map, icu_default = _catalog_to_codes(schema, "icu", _TRI_LABEL_CODE)
    intub_map, intub_default = _catalog_to_codes(schema, "intubated", _TRI_LABEL_CODE)
    indig_map, indig_default = _catalog_to_codes(schema, "indigenous_speaker", _TRI_LABEL_CODE)

    slot_of = {name: i for i, name in enumerate(COMORBIDITY_FIELDS)}
    comorb_slots = []
    comorb_maps = []
    comorb_defaults = []
    for name, cidx in layout.comorb_indexes:
        cmap, cdefault = _catalog_to_codes(schema, name, _TRI_LABEL_CODE)
        comorb_slots.append((slot_of[name], cidx))
        comorb_maps.append(cmap)
        comorb_defaults.append(cdefault)

    result_map: dict[str, int] = {}
    for code in schema.positive_codes:
        result_map[code] = 0
    for code in schema.negative_codes:
        result_map[code] = 1
    for code in schema.pending_codes:
        result_map[code] = 2

    states_mask = None
    if cohort.states is not None:
        mask = bytearray(33)
        for code in cohort.states:
            if 0 <= code <= 32:
                mask[code] = 1
        states_mask = bytes(mask)

    window_lo = window_hi = -1
    if cohort.date_window is not None:
        window_lo = _ymd(cohort.date_window[0])
        window_hi = _ymd(cohort.date_window[1])

    return KernelTables(
        idx_record_id=idx["record_id"],
        idx_sex=idx["sex"],
        idx_age=idx["age"],
        idx_reporting_state=idx["reporting_state"],
        idx_residence_state=idx["residence_state"],
        idx_residence_municipality=idx["residence_municipality"],
        idx_patient_type=idx["patient_type"],
        idx_icu=idx["icu"],
        idx_intubated=idx["intubated"],
        idx_lab_result=idx["lab_result"],
        idx_death_date=idx["death_date"],
        idx_onset_date=idx["symptom_onset_date"],
        idx_indigenous=idx["indigenous_speaker"],
        comorb_slots=tuple(comorb_slots),
        extra_idx=tuple(i for _, i in layout.extra_indexes),
        sex_map=sex_map,
        sex_default=sex_default,
        care_map=care_map,
        care_default=care_default,
        icu_map=icu_map,
        icu_default=icu_default,
        intub_map=intub_map,
        intub_default=intub_default,
        indig_map=indig_map,
        indig_default=indig_default,
        comorb_maps=tuple(comorb_maps),
        comorb_defaults=tuple(comorb_defaults),
        result_map=result_map,
        sentinels=schema.sentinels(),
        date_format=schema.date_format,
        iso_fast=schema.date_format == "%Y-%m-%d",
        muni_unspec=schema.municipality_unspecified_codes,
        indigenous_only=cohort.indigenous_only,
        states_mask=states_mask,
        munis=cohort.municipalities,
        window_lo=window_lo,
        window_hi=window_hi,
        attr_residence=attribution == "residence",
        age_cap=AGE_WARN_CAP,
    )


@dataclass(frozen=True)
class RowPlan:
    """Everything a worker needs to process raw rows."""

    layout: RowLayout
    cohort: CohortFilter
    attribution: str
    backend: str
    kernel: KernelTables | None

    @classmethod
    def compile(
        cls,
        layout: RowLayout,
        cohort: CohortFilter,
        attribution: str = "reporting",
        backend: str = "auto",
    ) -> "RowPlan":
        backend = select_backend(backend)
        kernel = (
            compile_kernel_tables(layout, cohort, attribution)
            if backend == "compiled"
            else None
        )
        return cls(
            layout=layout,
            cohort=cohort,
            attribution=attribution,
            backend=backend,
            kernel=kernel,
        )


def process_chunk(
    plan: RowPlan, rows: list[list[str]], start_row: int, acc: CohortAccumulator
) -> list[RowError]:
    """Decode/classify/count one chunk into acc; returns its row errors."""
    if plan.backend == "compiled":
        errors: list[RowError] = []
        _rowkernel.process_rows(
            rows, start_row, plan.kernel, acc.cells, acc.comorb, acc.diag, errors
        )
    else:
        errors = []
        layout, cohort, schema = plan.layout, plan.cohort, plan.layout.schema
        for offset, cells in enumerate(rows):
            item = parse_row(cells, layout, start_row + offset)
            if isinstance(item, RowError):
                errors.append(item)
                continue
            if item.age > AGE_WARN_CAP:
                acc.diag[2] += 1
            accumulate(acc, item, classify_patient(item, schema), cohort)
    for err in errors:
        kind = err.kind.value
        acc.rejected_by_kind[kind] = acc.rejected_by_kind.get(kind, 0) + 1
    return errors


# -- worker pool ----------------------------------------------------------------

_WORKER_PLAN: RowPlan | None = None


def _init_worker(plan: RowPlan) -> None:
    global _WORKER_PLAN
    _WORKER_PLAN = plan


def _run_task(args: tuple[int, list[list[str]]]):
    start_row, rows = args
    acc = CohortAccumulator(_WORKER_PLAN.attribution)
    errors = process_chunk(_WORKER_PLAN, rows, start_row, acc)
    return acc, errors


def _chunks(rows, chunk_rows: int):
    start = 1
    batch: list[list[str]] = []
    for _row_number, cells in rows:
        batch.append(cells)
        if len(batch) >= chunk_rows:
            yield start, batch
            start += len(batch)
            batch = []
    if batch:
        yield start, batch


@dataclass
class StreamResult:
    accumulator: CohortAccumulator
    report: ValidationReport


def run_stream(
    path,
    schema: SchemaConfig,
    cohort: CohortFilter | None = None,
    *,
    attribution: str = "reporting",
    backend: str = "auto",
    workers: int = 1,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
    encoding: str | None = None,
    first_errors_cap: int = 50,
    progress=None,
) -> StreamResult:
    """Aggregate one snapshot end to end (ingest → classify → count)."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    cohort = cohort or CohortFilter()
    layout, rows = open_rows(path, schema, encoding=encoding)
    plan = RowPlan.compile(layout, cohort, attribution, backend)

    acc = CohortAccumulator(attribution)
    report = ValidationReport()
    rows_done = 0

    def absorb(chunk_len: int, errors: list[RowError]) -> None:
        nonlocal rows_done
        rows_done += chunk_len
        report.rows_total += chunk_len
        report.rows_rejected += len(errors)
        for err in errors:
            kind = err.kind.value
            report.errors_by_kind[kind] = report.errors_by_kind.get(kind, 0) + 1
            if len(report.first_errors) < first_errors_cap:
                report.first_errors.append(err)
        if progress is not None:
            progress(rows_done)

    if workers == 1:
        for start_row, batch in _chunks(rows, chunk_rows):
            errors = process_chunk(plan, batch, start_row, acc)
            absorb(len(batch), errors)
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(plan,)
        ) as pool:
            window: deque = deque()
            for start_row, batch in _chunks(rows, chunk_rows):
                window.append((len(batch), pool.submit(_run_task, (start_row, batch))))
                if len(window) >= workers * 2:
                    chunk_len, fut = window.popleft()
                    task_acc, errors = fut.result()
                    acc = merge(acc, task_acc)
                    absorb(chunk_len, errors)
            while window:
                chunk_len, fut = window.popleft()
                task_acc, errors = fut.result()
                acc = merge(acc, task_acc)
                absorb(chunk_len, errors)

    report.rows_accepted = report.rows_total - report.rows_rejected
    if acc.age_warnings:
        report.warnings["age_above_cap"] = acc.age_warnings
    return StreamResult(accumulator=acc, report=report)


# -- full report run --------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """One cmd_report invocation, fully resolved (flags already win)."""

    input_path: str
    schema_path: str | None = None
    out_dir: str = "."
    kinds: tuple[ReportKind, ...] = ALL_KINDS
    indigenous_only: bool = False
    states: frozenset[int] | None = None
    municipalities: frozenset[tuple[int, int]] | None = None
    date_window: tuple[_dt.date, _dt.date] | None = None
    boundaries_path: str | None = None
    join_key: str = "state_code"
    workers: int = 1
    encoding: str | None = None
    backend: str = "auto"
    attribution: str = "reporting"
    chunk_rows: int = DEFAULT_CHUNK_ROWS

    def cohort(self) -> CohortFilter:
        return CohortFilter(
            indigenous_only=self.indigenous_only,
            states=self.states,
            municipalities=self.municipalities,
            date_window=self.date_window,
        )


@dataclass
class RunResult:
    summary: dict
    report: ValidationReport
    accumulator: CohortAccumulator
    written: list[str] = field(default_factory=list)
    join_misses: list[int] = field(default_factory=list)


def run_report(cfg: RunConfig, progress=None) -> RunResult:
    """ingest → classify → aggregate → tables → files; atomic and all-or-nothing."""
    if cfg.workers < 1:
        raise ValueError("workers must be >= 1")
    schema = load_schema(cfg.schema_path) if cfg.schema_path else default_schema()
    os.makedirs(cfg.out_dir, exist_ok=True)
    if not os.access(cfg.out_dir, os.W_OK):
        raise PermissionError(f"output directory not writable: {cfg.out_dir}")

    stream = run_stream(
        cfg.input_path,
        schema,
        cfg.cohort(),
        attribution=cfg.attribution,
        backend=cfg.backend,
        workers=cfg.workers,
        chunk_rows=cfg.chunk_rows,
        encoding=cfg.encoding,
        progress=progress,
    )
    acc = stream.accumulator

    written: list[str] = []
    join_misses: list[int] = []
    try:
        for kind in cfg.kinds:
            table = build_table(acc, kind)
            csv_path = os.path.join(cfg.out_dir, f"{kind.value}.csv")
            json_path = os.path.join(cfg.out_dir, f"{kind.value}.json")
            atomic_write_text(csv_path, emit_csv(table))
            written.append(csv_path)
            atomic_write_text(json_path, emit_json(table))
            written.append(json_path)
        if cfg.boundaries_path is not None:
            with open(cfg.boundaries_path, "r", encoding="utf-8") as fh:
                boundaries = fh.read()
            joined = emit_choropleth(fatality_rows(acc), boundaries, cfg.join_key)
            geo_path = os.path.join(cfg.out_dir, "fatality_by_state.geojson")
            atomic_write_text(geo_path, joined.text)
            written.append(geo_path)
            join_misses = joined.join_misses
    except BaseException:
        for path in written:
            try:
                os.unlink(path)
            except OSError:
                pass
        raise

    summary = dict(summary_counts(acc))
    summary["rows_total"] = stream.report.rows_total
    summary["rows_accepted"] = stream.report.rows_accepted
    summary["rows_rejected"] = stream.report.rows_rejected
    summary["filtered_out"] = acc.filtered_out
    summary["intubated_outside_icu"] = acc.intubated_outside_icu
    return RunResult(
        summary=summary,
        report=stream.report,
        accumulator=acc,
        written=written,
        join_misses=join_misses,
    )


__all__ = [
    "DEFAULT_CHUNK_ROWS",
    "KernelTables",
    "RowPlan",
    "RunConfig",
    "RunResult",
    "StreamResult",
    "compiled_available",
    "process_chunk",
    "run_report",
    "run_stream",
    "select_backend",
]
