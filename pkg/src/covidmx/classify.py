"""Patient identification rules: one label per axis, gated top-down.

The flow is test result → care modality → ICU → intubation, with death
detected independently from the death-date field. ICU is a question asked
only of hospitalized patients and intubation only of ICU patients; outside
those scopes the status is NOT_APPLICABLE regardless of what the raw cell
says (a raw "yes" intubation flag outside the ICU is preserved on the
Classification for diagnostic counting, never as a status).

All functions are pure over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import (
    CareStatus,
    Classification,
    ConfigError,
    IcuStatus,
    IntubationStatus,
    PatientRecord,
    SchemaConfig,
    SuspectType,
    TestStatus,
    TriState,
    VitalStatus,
    decode_care,
    decode_code,
    decode_tristate,
)

_OPS = ("eq", "ne", "in")


@dataclass(frozen=True)
class SuspectRule:
    """One (field, op, value) clause; clauses of a rule are conjoined."""

    field: str
    op: str
    value: object


@dataclass(frozen=True)
class SuspectRuleSet:
    """Ordered type1/type2/type3 predicates; first decisive rule wins."""

    type1: tuple[SuspectRule, ...] = ()
    type2: tuple[SuspectRule, ...] = ()
    type3: tuple[SuspectRule, ...] = ()

    def in_order(self):
        yield SuspectType.TYPE1, self.type1
        yield SuspectType.TYPE2, self.type2
        yield SuspectType.TYPE3, self.type3


def rules_from_dict(doc: dict) -> SuspectRuleSet:
    """Parse the [suspect_rules] config section."""

    def parse(clauses) -> tuple[SuspectRule, ...]:
        out = []
        for clause in clauses:
            if len(clause) != 3:
                raise ConfigError(f"suspect rule clause must be [field, op, value]: {clause!r}")
            fieldname, op, value = clause
            if op not in _OPS:
                raise ConfigError(f"unknown suspect rule op {op!r} (use eq/ne/in)")
            out.append(SuspectRule(field=str(fieldname), op=str(op), value=value))
        return tuple(out)

    section = doc.get("suspect_rules", {})
    return SuspectRuleSet(
        type1=parse(section.get("type1", [])),
        type2=parse(section.get("type2", [])),
        type3=parse(section.get("type3", [])),
    )


def default_rules() -> SuspectRuleSet:
    from .model import default_profile_text, tomllib

    return rules_from_dict(tomllib.loads(default_profile_text()))


def classify_test_status(record: PatientRecord, schema: SchemaConfig) -> TestStatus:
    """Positive/negative by configured code sets; everything else pending."""
    code = record.lab_result_code
    if code in schema.positive_codes:
        return TestStatus.POSITIVE
    if code in schema.negative_codes:
        return TestStatus.NEGATIVE
    return TestStatus.PENDING


def classify_care(record: PatientRecord, schema: SchemaConfig) -> CareStatus:
    return decode_care(schema.catalog_for("patient_type"), record.patient_type_code)


_TRI_TO_ICU = {
    TriState.YES: IcuStatus.IN_ICU,
    TriState.NO: IcuStatus.NOT_IN_ICU,
    TriState.UNSPECIFIED: IcuStatus.UNSPECIFIED,
}

_TRI_TO_INTUB = {
    TriState.YES: IntubationStatus.INTUBATED,
    TriState.NO: IntubationStatus.NOT_INTUBATED,
    TriState.UNSPECIFIED: IntubationStatus.UNSPECIFIED,
}


def classify_icu(record: PatientRecord, care: CareStatus, schema: SchemaConfig) -> IcuStatus:
    if care is not CareStatus.HOSPITALIZED:
        return IcuStatus.NOT_APPLICABLE
    flag = decode_tristate(schema.catalog_for("icu"), record.icu_code)
    return _TRI_TO_ICU[flag]


def classify_intubation(
    record: PatientRecord, icu: IcuStatus, schema: SchemaConfig
) -> IntubationStatus:
    if icu is not IcuStatus.IN_ICU:
        return IntubationStatus.NOT_APPLICABLE
    flag = decode_tristate(schema.catalog_for("intubated"), record.intubated_code)
    return _TRI_TO_INTUB[flag]


def is_deceased(record: PatientRecord) -> VitalStatus:
    """A recorded (non-sentinel) death date is the only death signal."""
    return VitalStatus.DECEASED if record.death_date is not None else VitalStatus.NOT_RECORDED_DECEASED


def _predicate_value(record: PatientRecord, fieldname: str, schema: SchemaConfig):
    """Decoded value a suspect-rule clause compares against, or None when
    the field is absent from the schema."""
    if schema.is_absent(fieldname):
        return None
    if fieldname in record.extras:
        return record.extras[fieldname].name.lower()
    if fieldname in record.comorbidities:
        return record.comorbidities[fieldname].name.lower()
    if fieldname == "indigenous_speaker":
        return record.indigenous_speaker.name.lower()
    if fieldname == "sex":
        return record.sex.name.lower()
    if fieldname == "age":
        return record.age
    if fieldname == "patient_type":
        return decode_code(schema.catalog_for("patient_type"), record.patient_type_code)
    if fieldname == "icu":
        return decode_code(schema.catalog_for("icu"), record.icu_code)
    if fieldname == "intubated":
        return decode_code(schema.catalog_for("intubated"), record.intubated_code)
    if fieldname == "lab_result":
        return record.lab_result_code
    return None


def _norm(value) -> str:
    return str(value).lower()


def _clause_holds(record: PatientRecord, clause: SuspectRule, schema: SchemaConfig) -> bool | None:
    actual = _predicate_value(record, clause.field, schema)
    if actual is None:
        return None
    if clause.op == "eq":
        return _norm(actual) == _norm(clause.value)
    if clause.op == "ne":
        return _norm(actual) != _norm(clause.value)
    wanted = clause.value if isinstance(clause.value, (list, tuple)) else [clause.value]
    return _norm(actual) in {_norm(v) for v in wanted}


def classify_suspect_type(
    record: PatientRecord, rules: SuspectRuleSet, schema: SchemaConfig
) -> SuspectType:
    """Strict-precedence evaluation: the first rule that matches returns its
    type; the first rule over an absent field returns INDETERMINATE (a later
    match cannot override an earlier unknown); NOT_SUSPECT when every rule
    evaluated and none matched."""
    for suspect_type, clauses in rules.in_order():
        if not clauses:
            continue
        matched = True
        for clause in clauses:
            holds = _clause_holds(record, clause, schema)
            if holds is None:
                return SuspectType.INDETERMINATE
            if not holds:
                matched = False
                break
        if matched:
            return suspect_type
    return SuspectType.NOT_SUSPECT


def classify_patient(
    record: PatientRecord, schema: SchemaConfig, rules: SuspectRuleSet | None = None
) -> Classification:
    """Compose all classifiers; gating invariants hold by construction."""
    test = classify_test_status(record, schema)
    care = classify_care(record, schema)
    icu = classify_icu(record, care, schema)
    intubation = classify_intubation(record, icu, schema)
    vital = is_deceased(record)
    suspect = (
        classify_suspect_type(record, rules, schema)
        if rules is not None
        else SuspectType.INDETERMINATE
    )
    outside = False
    if icu is not IcuStatus.IN_ICU:
        raw = decode_tristate(schema.catalog_for("intubated"), record.intubated_code)
        outside = raw is TriState.YES
    return Classification(
        test_status=test,
        care_status=care,
        icu_status=icu,
        intubation_status=intubation,
        vital_status=vital,
        suspect_type=suspect,
        intubated_outside_icu=outside,
    )
