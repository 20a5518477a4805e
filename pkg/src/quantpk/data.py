"""NONMEM-style dataset parsing and per-subject grouping.

Expected columns (case-insensitive, any order)::

    ID, BW, COMED, DOSE, TIME, DV, EVID, MDV, AMT, CMT, DVID

DV, CMT and DVID may be missing ('.', '' or 'NA'), which is normal on
dosing rows.  Extra columns are ignored with a warning.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

from .errors import EmptyDatasetError, ParseError, SchemaError, ValidationError

log = logging.getLogger(__name__)

COLUMNS = ("ID", "BW", "COMED", "DOSE", "TIME", "DV", "EVID", "MDV", "AMT", "CMT", "DVID")
MISSING_TOKENS = frozenset({".", "", "NA"})
_OPTIONAL = frozenset({"DV", "CMT", "DVID"})
_INTEGER = frozenset({"ID", "COMED", "EVID", "MDV", "CMT", "DVID"})

PK, PD = 1, 2


@dataclass(frozen=True)
class DatasetRecord:
    id: int
    bw: float
    comed: int
    dose: float
    time: float
    dv: float | None
    evid: int
    mdv: int
    amt: float
    cmt: int | None
    dvid: int | None

    @property
    def is_dose(self) -> bool:
        return self.evid == 1

    @property
    def is_observation(self) -> bool:
        return self.evid == 0 and self.mdv == 0


@dataclass(frozen=True)
class Subject:
    id: int
    bw: float
    comed: int
    dose_events: tuple[tuple[float, float], ...]
    pk_observations: tuple[tuple[float, float], ...]
    pd_observations: tuple[tuple[float, float], ...]
    n_missing: int = 0
    nominal_dose: float = 0.0

    @property
    def n_observations(self) -> int:
        return len(self.pk_observations) + len(self.pd_observations)

    @property
    def last_time(self) -> float:
        times = [t for t, _ in self.dose_events]
        times += [t for t, _ in self.pk_observations]
        times += [t for t, _ in self.pd_observations]
        return max(times)


def _cell(raw: str, column: str, line: int):
    token = raw.strip()
    if token in MISSING_TOKENS:
        if column in _OPTIONAL:
            return None
        raise ParseError(line, column, raw, "missing")
    try:
        value = float(token)
    except ValueError:
        raise ParseError(line, column, raw) from None
    if column in _INTEGER:
        if not value.is_integer():
            raise ParseError(line, column, raw, "not an integer")
        return int(value)
    if not math.isfinite(value):
        raise ParseError(line, column, raw, "not finite")
    return value


def validate_record(rec: DatasetRecord, line: int | None = None) -> None:
    where = f"line {line}: " if line is not None else ""
    if rec.time < 0:
        raise ValidationError(f"{where}negative TIME {rec.time}")
    if rec.bw <= 0:
        raise ValidationError(f"{where}non-positive BW {rec.bw}")
    if rec.comed not in (0, 1):
        raise ValidationError(f"{where}COMED must be 0 or 1, got {rec.comed}")
    if rec.evid not in (0, 1):
        raise ValidationError(f"{where}EVID must be 0 or 1, got {rec.evid}")
    if rec.mdv not in (0, 1):
        raise ValidationError(f"{where}MDV must be 0 or 1, got {rec.mdv}")
    if rec.evid == 1:
        if not rec.amt > 0:
            raise ValidationError(f"{where}dosing row needs AMT > 0")
        if rec.mdv != 1:
            raise ValidationError(f"{where}dosing row needs MDV = 1")
    else:
        if rec.amt != 0:
            raise ValidationError(f"{where}observation row needs AMT = 0")
        if rec.mdv == 0:
            if rec.dv is None:
                raise ValidationError(f"{where}MDV = 0 but DV is missing")
            if rec.dvid not in (PK, PD):
                raise ValidationError(f"{where}DVID must be 1 or 2 on observation rows")


def _read_text(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8-sig")
    if isinstance(source, str):
        return source
    data = source.read()
    if isinstance(data, bytes):
        return data.decode("utf-8-sig")
    return data


def parse_dataset(source: bytes | str | IO) -> list[DatasetRecord]:
    """Parse comma-separated NONMEM-style text into validated records.

    ``source`` may be bytes, a str holding the file contents, or an open
    binary/text stream.
    """
    text = _read_text(source)
    rows = csv.reader(io.StringIO(text))
    header = None
    for header in rows:
        if any(cell.strip() for cell in header):
            break
    else:
        header = None
    if header is None:
        raise EmptyDatasetError("dataset is empty")

    names = [h.strip().upper() for h in header]
    index = {}
    for pos, name in enumerate(names):
        if name in COLUMNS and name not in index:
            index[name] = pos
    for col in COLUMNS:
        if col not in index:
            raise SchemaError(col)
    extra = [h for h in names if h not in COLUMNS]
    if extra:
        log.warning("ignoring extra columns: %s", ", ".join(extra))

    records = []
    for row in rows:
        line = rows.line_num
        if not any(cell.strip() for cell in row):
            continue
        if len(row) < len(names):
            raise ParseError(line, names[len(row)], "", "missing")
        values = {col.lower(): _cell(row[index[col]], col, line) for col in COLUMNS}
        rec = DatasetRecord(**values)
        validate_record(rec, line)
        records.append(rec)
    return records


def read_dataset(path: str | Path) -> list[DatasetRecord]:
    with open(path, "rb") as fh:
        return parse_dataset(fh)


def _fmt(value) -> str:
    if value is None:
        return "."
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def format_records(records: Iterable[DatasetRecord]) -> str:
    """Serialize records back to CSV text; ``parse_dataset`` inverts this."""
    out = io.StringIO()
    out.write(",".join(COLUMNS) + "\n")
    for r in records:
        out.write(",".join(_fmt(getattr(r, c.lower())) for c in COLUMNS) + "\n")
    return out.getvalue()


def build_subjects(records: Sequence[DatasetRecord]) -> list[Subject]:
    """Group records by ID into time-sorted per-subject timelines."""
    grouped: dict[int, list[DatasetRecord]] = {}
    for r in records:
        grouped.setdefault(r.id, []).append(r)

    subjects = []
    for sid, recs in grouped.items():
        bws = {r.bw for r in recs}
        comeds = {r.comed for r in recs}
        if len(bws) > 1:
            raise ValidationError(f"subject {sid}: conflicting BW values {sorted(bws)}")
        if len(comeds) > 1:
            raise ValidationError(f"subject {sid}: conflicting COMED values {sorted(comeds)}")
        doses = sorted((r.time, r.amt) for r in recs if r.is_dose)
        pk = sorted((r.time, r.dv) for r in recs if r.is_observation and r.dvid == PK)
        pd = sorted((r.time, r.dv) for r in recs if r.is_observation and r.dvid == PD)
        n_missing = sum(1 for r in recs if not r.is_dose and r.mdv == 1)
        if not doses:
            raise ValidationError(f"subject {sid}: no dose event")
        nominal = next((r.dose for r in recs if r.is_dose), recs[0].dose)
        subjects.append(Subject(sid, recs[0].bw, recs[0].comed, tuple(doses),
                                tuple(pk), tuple(pd), n_missing, nominal))
    return subjects


def summarize(records: Sequence[DatasetRecord], subjects: Sequence[Subject]) -> dict:
    """Dataset diagnostics used by the ``validate`` command."""
    times = [r.time for r in records]
    return {
        "n_records": len(records),
        "n_subjects": len(subjects),
        "dose_levels": sorted({s.nominal_dose for s in subjects}),
        "n_dose_events": sum(len(s.dose_events) for s in subjects),
        "n_pk_observations": sum(len(s.pk_observations) for s in subjects),
        "n_pd_observations": sum(len(s.pd_observations) for s in subjects),
        "n_missing_dv": sum(s.n_missing for s in subjects),
        "time_range": [min(times), max(times)] if times else None,
        "bw_range": [min(s.bw for s in subjects), max(s.bw for s in subjects)] if subjects else None,
        "n_comed": sum(s.comed for s in subjects),
    }
