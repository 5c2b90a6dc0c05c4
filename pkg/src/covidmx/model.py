"""Domain types and coded-catalog semantics for surveillance records.

Everything downstream (ingest, classification, aggregation) shares the types
in this module. Decoding is table-driven: the raw CSV carries numeric codes
(sex 1/2/99, yes/no 1/2/97/98/99, ...) whose meanings live in a SchemaConfig
loaded from a TOML profile, never in code. All types are immutable after
construction and safe to share across workers.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from importlib import resources

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class ConfigError(Exception):
    """Schema profile is malformed or internally inconsistent."""


class MalformedDateError(ValueError):
    """Date cell is neither the sentinel nor a parseable date."""


class TriState(IntEnum):
    """Decoded yes/no/unknown catalog cell."""

    YES = 0
    NO = 1
    UNSPECIFIED = 2


class Sex(IntEnum):
    FEMALE = 0
    MALE = 1
    UNSPECIFIED = 2


class TestStatus(IntEnum):
    POSITIVE = 0
    NEGATIVE = 1
    PENDING = 2


class CareStatus(IntEnum):
    AMBULATORY = 0
    HOSPITALIZED = 1
    UNSPECIFIED = 2


class IcuStatus(IntEnum):
    IN_ICU = 0
    NOT_IN_ICU = 1
    NOT_APPLICABLE = 2
    UNSPECIFIED = 3


class IntubationStatus(IntEnum):
    INTUBATED = 0
    NOT_INTUBATED = 1
    NOT_APPLICABLE = 2
    UNSPECIFIED = 3


class VitalStatus(IntEnum):
    NOT_RECORDED_DECEASED = 0
    DECEASED = 1


class SuspectType(Enum):
    TYPE1 = "type1"
    TYPE2 = "type2"
    TYPE3 = "type3"
    NOT_SUSPECT = "not_suspect"
    INDETERMINATE = "indeterminate"


#: INEGI federal-entity codes. Note these are NOT alphabetical positions:
#: Coahuila is 5, Colima 6, Chiapas 7, Chihuahua 8, Ciudad de México 9.
STATE_NAMES: dict[int, str] = {
    1: "Aguascalientes",
    2: "Baja California",
    3: "Baja California Sur",
    4: "Campeche",
    5: "Coahuila de Zaragoza",
    6: "Colima",
    7: "Chiapas",
    8: "Chihuahua",
    9: "Ciudad de México",
    10: "Durango",
    11: "Guanajuato",
    12: "Guerrero",
    13: "Hidalgo",
    14: "Jalisco",
    15: "México",
    16: "Michoacán de Ocampo",
    17: "Morelos",
    18: "Nayarit",
    19: "Nuevo León",
    20: "Oaxaca",
    21: "Puebla",
    22: "Querétaro",
    23: "Quintana Roo",
    24: "San Luis Potosí",
    25: "Sinaloa",
    26: "Sonora",
    27: "Tabasco",
    28: "Tamaulipas",
    29: "Tlaxcala",
    30: "Veracruz de Ignacio de la Llave",
    31: "Yucatán",
    32: "Zacatecas",
}

STATE_CODES: dict[str, int] = {name: code for code, name in STATE_NAMES.items()}

#: Comorbidity flags carried per record, in canonical order.
COMORBIDITY_FIELDS: tuple[str, ...] = (
    "diabetes",
    "hypertension",
    "obesity",
    "pneumonia",
    "copd",
    "asthma",
    "immunosuppression",
    "cardiovascular",
    "renal_chronic",
    "smoking",
    "other",
)

#: Age values above this are accepted but flagged as warnings, not rejected.
AGE_WARN_CAP = 150

_ASCII_DIGITS = frozenset("0123456789")


def parse_int_cell(cell: str) -> int | None:
    """Strict ASCII integer parse shared by both row-processing backends.

    Accepts optional surrounding spaces/tabs and an optional leading minus;
    anything else (unicode digits, '+', separators) is None. Bare int()
    would accept forms the compiled kernel rejects, so don't use it here.
    """
    s = cell.strip(" \t")
    if not s:
        return None
    body = s[1:] if s[0] == "-" else s
    if not body or not all(c in _ASCII_DIGITS for c in body):
        return None
    return int(s)


@dataclass(frozen=True)
class RegionKey:
    """Federal entity plus optional municipality."""

    state_code: int
    municipality_code: int | None = None


@dataclass(frozen=True)
class CatalogTable:
    """Total code→meaning mapping: unknown codes decode to the default."""

    entries: dict[str, str]
    default: str = "unspecified"

    def inverse(self) -> dict[str, str] | None:
        """meaning→code map, or None when decoding is not injective."""
        inv: dict[str, str] = {}
        for code, meaning in self.entries.items():
            if meaning in inv:
                return None
            inv[meaning] = code
        return inv


def decode_code(catalog: CatalogTable, code: str) -> str:
    """Decode a raw catalog cell; total by contract (falls back to default)."""
    return catalog.entries.get(code, catalog.default)


_TRISTATE_LABELS = {
    "yes": TriState.YES,
    "no": TriState.NO,
    "unspecified": TriState.UNSPECIFIED,
}

_SEX_LABELS = {
    "female": Sex.FEMALE,
    "male": Sex.MALE,
    "unspecified": Sex.UNSPECIFIED,
}

_CARE_LABELS = {
    "ambulatory": CareStatus.AMBULATORY,
    "hospitalized": CareStatus.HOSPITALIZED,
    "unspecified": CareStatus.UNSPECIFIED,
}


def decode_tristate(catalog: CatalogTable, code: str) -> TriState:
    return _TRISTATE_LABELS[decode_code(catalog, code)]


def decode_sex(catalog: CatalogTable, code: str) -> Sex:
    return _SEX_LABELS[decode_code(catalog, code)]


def decode_care(catalog: CatalogTable, code: str) -> CareStatus:
    return _CARE_LABELS[decode_code(catalog, code)]


#: Semantic fields the classifier consumes; each must be mapped to a column
#: or listed in absent_fields.
CLASSIFIER_FIELDS: tuple[str, ...] = (
    "sex",
    "patient_type",
    "icu",
    "intubated",
    "lab_result",
    "death_date",
)

#: Every mappable single-column semantic field.
KNOWN_FIELDS: tuple[str, ...] = CLASSIFIER_FIELDS + (
    "record_id",
    "age",
    "reporting_state",
    "residence_state",
    "residence_municipality",
    "symptom_onset_date",
    "indigenous_speaker",
)


@dataclass(frozen=True)
class SchemaConfig:
    """Contract between a raw CSV snapshot and the domain model."""

    column_map: dict[str, str]
    absent_fields: frozenset[str]
    comorbidity_columns: dict[str, str]
    extra_columns: dict[str, str]
    catalogs: dict[str, CatalogTable]
    date_sentinel: str
    date_sentinel_aliases: frozenset[str]
    date_format: str
    positive_codes: frozenset[str]
    negative_codes: frozenset[str]
    pending_codes: frozenset[str]
    municipality_unspecified_codes: frozenset[str]

    def catalog_for(self, fieldname: str) -> CatalogTable:
        """Field-specific catalog, falling back to the shared yes/no table."""
        cat = self.catalogs.get(fieldname)
        if cat is None:
            cat = self.catalogs["yes_no"]
        return cat

    def sentinels(self) -> frozenset[str]:
        return self.date_sentinel_aliases | {self.date_sentinel}

    def is_absent(self, fieldname: str) -> bool:
        return fieldname in self.absent_fields


def parse_date_cell(cell: str, date_format: str) -> _dt.date:
    """Strict full-string date parse. Raises ValueError when unparseable."""
    return _dt.datetime.strptime(cell, date_format).date()


def parse_death_date(cell: str, schema: SchemaConfig) -> _dt.date | None:
    """Death-date decode: sentinel means "no death recorded".

    Returns None for any configured sentinel (surrounding ASCII blanks
    ignored); raises MalformedDateError for anything else unparseable.
    """
    stripped = cell.strip(" \t")
    if stripped in schema.sentinels():
        return None
    try:
        return parse_date_cell(stripped, schema.date_format)
    except ValueError:
        raise MalformedDateError(f"not a {schema.date_format} date: {stripped!r}") from None


def parse_optional_date(cell: str, schema: SchemaConfig) -> _dt.date | None:
    """Onset-date decode: empty or sentinel means unknown."""
    stripped = cell.strip(" \t")
    if not stripped or stripped in schema.sentinels():
        return None
    try:
        return parse_date_cell(stripped, schema.date_format)
    except ValueError:
        raise MalformedDateError(f"not a {schema.date_format} date: {stripped!r}") from None


@dataclass(frozen=True)
class PatientRecord:
    """One decoded surveillance row.

    Coded care/lab fields keep their raw codes (classification decodes them
    against the schema later); yes/no fields arrive already decoded. The
    dict fields are filled at parse time and never mutated afterwards.
    """

    record_id: str
    sex: Sex
    age: int
    residence: RegionKey | None
    reporting_state: int
    patient_type_code: str
    icu_code: str
    intubated_code: str
    lab_result_code: str
    death_date: _dt.date | None
    symptom_onset_date: _dt.date | None
    indigenous_speaker: TriState
    comorbidities: dict[str, TriState]
    extras: dict[str, TriState] = field(default_factory=dict)


@dataclass(frozen=True)
class Classification:
    """Derived labels per patient.

    Gating invariants: icu_status is NOT_APPLICABLE unless care_status is
    HOSPITALIZED; intubation_status is NOT_APPLICABLE unless icu_status is
    IN_ICU. intubated_outside_icu preserves a raw "yes" intubation flag that
    the gating rules suppressed, so the aggregator can count it.
    """

    test_status: TestStatus
    care_status: CareStatus
    icu_status: IcuStatus
    intubation_status: IntubationStatus
    vital_status: VitalStatus
    suspect_type: SuspectType
    intubated_outside_icu: bool = False


def _parse_catalog(fieldname: str, raw: dict) -> CatalogTable:
    entries: dict[str, str] = {}
    default = "unspecified"
    for code, meaning in raw.items():
        if code == "default":
            default = str(meaning)
        else:
            entries[str(code)] = str(meaning)
    table = CatalogTable(entries=entries, default=default)
    _validate_catalog_labels(fieldname, table)
    return table


def _validate_catalog_labels(fieldname: str, table: CatalogTable) -> None:
    if fieldname == "sex":
        allowed = _SEX_LABELS
    elif fieldname == "patient_type":
        allowed = _CARE_LABELS
    else:
        allowed = _TRISTATE_LABELS
    bad = [m for m in list(table.entries.values()) + [table.default] if m not in allowed]
    if bad:
        raise ConfigError(f"catalog {fieldname!r}: unknown meaning labels {sorted(set(bad))}")


def schema_from_dict(doc: dict) -> SchemaConfig:
    """Build and validate a SchemaConfig from a parsed TOML document."""
    columns = {str(k): str(v) for k, v in doc.get("columns", {}).items()}
    absent = frozenset(str(f) for f in doc.get("absent_fields", []))
    unknown = set(columns) - set(KNOWN_FIELDS)
    if unknown:
        raise ConfigError(f"unknown fields in [columns]: {sorted(unknown)}")
    missing = [f for f in CLASSIFIER_FIELDS if f not in columns and f not in absent]
    if missing:
        raise ConfigError(f"classifier fields neither mapped nor absent: {missing}")
    if "reporting_state" not in columns:
        raise ConfigError("reporting_state must be mapped (per-state attribution key)")

    comorb = {str(k): str(v) for k, v in doc.get("comorbidities", {}).items()}
    bad_comorb = set(comorb) - set(COMORBIDITY_FIELDS)
    if bad_comorb:
        raise ConfigError(f"unknown comorbidity fields: {sorted(bad_comorb)}")
    extras = {str(k): str(v) for k, v in doc.get("extras", {}).items()}

    catalogs = {
        name: _parse_catalog(name, table)
        for name, table in doc.get("catalogs", {}).items()
    }
    if "yes_no" not in catalogs:
        raise ConfigError("profile must define [catalogs.yes_no]")
    for required in ("sex", "patient_type"):
        if required not in catalogs:
            raise ConfigError(f"profile must define [catalogs.{required}]")

    results = doc.get("result_codes", {})
    positive = frozenset(str(c) for c in results.get("positive", []))
    negative = frozenset(str(c) for c in results.get("negative", []))
    pending = frozenset(str(c) for c in results.get("pending", []))
    if positive & negative or positive & pending or negative & pending:
        raise ConfigError("result code sets must be pairwise disjoint")
    if not positive:
        raise ConfigError("result_codes.positive must not be empty")

    dates = doc.get("dates", {})
    sentinel = str(dates.get("sentinel", "9999-99-99"))
    aliases = frozenset(str(a) for a in dates.get("sentinel_aliases", []))
    fmt = str(dates.get("format", "%Y-%m-%d"))
    if not sentinel or not fmt:
        raise ConfigError("dates.sentinel and dates.format must be set")

    muni_unspec = frozenset(
        str(c) for c in doc.get("regions", {}).get("municipality_unspecified", ["999"])
    )

    return SchemaConfig(
        column_map=columns,
        absent_fields=absent,
        comorbidity_columns=comorb,
        extra_columns=extras,
        catalogs=catalogs,
        date_sentinel=sentinel,
        date_sentinel_aliases=aliases,
        date_format=fmt,
        positive_codes=positive,
        negative_codes=negative,
        pending_codes=pending,
        municipality_unspecified_codes=muni_unspec,
    )


def load_schema_text(text: str) -> SchemaConfig:
    return schema_from_dict(tomllib.loads(text))


def load_schema(path) -> SchemaConfig:
    with open(path, "rb") as fh:
        return schema_from_dict(tomllib.load(fh))


def load_config_document(path) -> dict:
    """Raw TOML document (schema + suspect rules + run defaults)."""
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def default_profile_text() -> str:
    return resources.files("covidmx.data").joinpath("default_schema.toml").read_text("utf-8")


def default_schema() -> SchemaConfig:
    """The shipped profile for the national open-data snapshots."""
    return load_schema_text(default_profile_text())
