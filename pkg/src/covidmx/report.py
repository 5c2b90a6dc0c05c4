"""Serialization of report tables and the choropleth GeoJSON join.

Everything emitted here is byte-deterministic: fixed key order, no
timestamps, rates always printed with exactly two decimals. The GeoJSON
join re-serializes boundaries with numeric literals passed through
verbatim (the parser keeps the raw token text), so coordinate bytes never
drift; only feature properties change.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from decimal import Decimal

from .aggregate import FatalityRateRow
from .tables import ReportTable


class DuplicateRegionError(ValueError):
    """A state code appears more than once in the rate rows."""


class ChoroplethJoinError(ValueError):
    """Boundaries input is not a usable FeatureCollection."""


def _format_cell(cell) -> str:
    if cell is None:
        return ""
    if isinstance(cell, Decimal):
        return f"{cell:.2f}"
    return str(cell)


def emit_csv(table: ReportTable) -> str:
    """RFC-4180 text: header row of column labels, one labelled row per line."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow([""] + list(table.columns))
    for label, row in zip(table.rows, table.cells):
        writer.writerow([label] + [_format_cell(c) for c in row])
    return buf.getvalue()


def _json_cell(cell):
    if isinstance(cell, Decimal):
        return f"{cell:.2f}"
    return cell


def emit_json(table: ReportTable) -> str:
    """Fixed-key-order JSON object; rates are 2-decimal strings (exact)."""
    doc = {
        "kind": table.kind,
        "columns": list(table.columns),
        "rows": list(table.rows),
        "cells": [[_json_cell(c) for c in row] for row in table.cells],
    }
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":")) + "\n"


def parse_json(text: str) -> ReportTable:
    """Inverse of emit_json."""
    doc = json.loads(text)

    def revive(cell):
        if isinstance(cell, str):
            return Decimal(cell)
        return cell

    return ReportTable(
        kind=doc["kind"],
        columns=list(doc["columns"]),
        rows=list(doc["rows"]),
        cells=[[revive(c) for c in row] for row in doc["cells"]],
    )


# -- literal-preserving JSON for boundary files ---------------------------------


class _NumberLiteral(str):
    """Raw numeric token from the source file, re-emitted byte-for-byte."""


def _loads_preserving(text: str):
    return json.loads(text, parse_float=_NumberLiteral, parse_int=_NumberLiteral)


def _dump_preserving(node, out: list[str]) -> None:
    if isinstance(node, _NumberLiteral):
        out.append(str(node))
    elif node is None:
        out.append("null")
    elif node is True:
        out.append("true")
    elif node is False:
        out.append("false")
    elif isinstance(node, Decimal):
        out.append(f"{node:.2f}")
    elif isinstance(node, int):
        out.append(str(node))
    elif isinstance(node, str):
        out.append(json.dumps(node, ensure_ascii=False))
    elif isinstance(node, dict):
        out.append("{")
        for i, (key, value) in enumerate(node.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(key), ensure_ascii=False))
            out.append(":")
            _dump_preserving(value, out)
        out.append("}")
    elif isinstance(node, (list, tuple)):
        out.append("[")
        for i, value in enumerate(node):
            if i:
                out.append(",")
            _dump_preserving(value, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(node).__name__}")


def dumps_preserving(node) -> str:
    out: list[str] = []
    _dump_preserving(node, out)
    return "".join(out)


def _normalize_code(value) -> int | None:
    """State code from a feature property: int-like regardless of padding."""
    if value is None or isinstance(value, (dict, list, bool)):
        return None
    try:
        return int(str(value).strip())
    except ValueError:
        return None


@dataclass(frozen=True)
class ChoroplethResult:
    text: str
    join_misses: list[int]


def emit_choropleth(
    rates: list[FatalityRateRow],
    boundaries_text: str,
    join_key: str = "state_code",
) -> ChoroplethResult:
    """Attach deaths/positives/rate_percent to matching boundary features.

    Unmatched features get rate_percent = null; rate rows whose state code
    matches no feature are returned as join misses. Geometry passes through
    untouched.
    """
    doc = _loads_preserving(boundaries_text)
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise ChoroplethJoinError("boundaries must be a GeoJSON FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list):
        raise ChoroplethJoinError("FeatureCollection has no features array")

    by_code: dict[int, FatalityRateRow] = {}
    for row in rates:
        if not isinstance(row.region, int):
            continue  # Total / Unattributed rows never join
        if row.region in by_code:
            raise DuplicateRegionError(f"state code {row.region} appears twice")
        by_code[row.region] = row

    matched: set[int] = set()
    for feature in features:
        if not isinstance(feature, dict):
            continue
        props = feature.get("properties")
        if not isinstance(props, dict):
            props = {}
            feature["properties"] = props
        code = _normalize_code(props.get(join_key))
        row = by_code.get(code) if code is not None else None
        if row is not None:
            matched.add(code)
            props["deaths"] = row.deaths
            props["positives"] = row.positives
            props["rate_percent"] = row.rate_percent
        else:
            props["rate_percent"] = None

    misses = sorted(code for code in by_code if code not in matched)
    return ChoroplethResult(text=dumps_preserving(doc) + "\n", join_misses=misses)


def atomic_write_text(path, text: str) -> None:
    """Write via temp file + rename so partial output is never observable."""
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".covidmx-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
