"""Call detail record ingestion.

Parses the quoted 30-column CDR text export produced by carrier billing
systems, extracts login/logout location observations from records that
carry a serving-cell column, and derives slot-indexed cell-to-cell
transitions from observation streams.

Two text formats live here:

* CDR text: a header line of 30 quoted field names followed by one
  quoted record per line.  Decoded exports in the wild mix ASCII double
  quotes with a couple of mojibake byte sequences; all are accepted and
  normalised to ASCII on output.
* Observation log: one event per line, tab separated,
  ``entity_id  bts_id  login|logout  timestamp_seconds``.  This is the
  primary ingestion format for the rest of the pipeline; CDR text is
  converted into it rather than consumed directly downstream.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from datetime import date, datetime, time
from typing import Iterable, Sequence

CDR_FIELD_COUNT = 30

#: Wall-clock zero for timestamps derived from CDR date/time fields.
DEFAULT_EPOCH = datetime(1970, 1, 1)

# Quote bytes seen in decoded exports: ASCII, typographic curly quotes,
# and the o-macron / o-diaeresis pair that curly quotes decay into when
# the decoder guesses the wrong codepage.
_QUOTES = frozenset('"“”ōö')

_DATE_FORMAT = "%d/%m/%Y"
_TIME_FORMAT = "%H:%M:%S"


class CdrError(Exception):
    """Base class for ingestion failures."""


class HeaderMissing(CdrError):
    pass


class CdrFormatError(CdrError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class FieldCountMismatch(CdrError):
    def __init__(self, line_no: int, expected: int, got: int):
        super().__init__(f"line {line_no}: expected {expected} fields, got {got}")
        self.line_no = line_no
        self.expected = expected
        self.got = got


class BadDate(CdrError):
    def __init__(self, line_no: int, value: str):
        super().__init__(f"line {line_no}: bad call date {value!r}")
        self.line_no = line_no


class BadTime(CdrError):
    def __init__(self, line_no: int, value: str):
        super().__init__(f"line {line_no}: bad call time {value!r}")
        self.line_no = line_no


class BadDuration(CdrError):
    def __init__(self, line_no: int, value: str):
        super().__init__(f"line {line_no}: bad duration {value!r}")
        self.line_no = line_no


class MissingColumn(CdrError):
    def __init__(self, name: str):
        super().__init__(f"column {name!r} not present in header")
        self.name = name


class NoCellColumn(CdrError):
    def __init__(self) -> None:
        super().__init__("field mapping declares no cell column; records cannot "
                         "yield location observations")


class UnsortedInput(CdrError):
    def __init__(self, index: int):
        super().__init__(f"observation {index} breaks timestamp order")
        self.index = index


class ObservationLogError(CdrError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ObsKind(enum.Enum):
    LOGIN = "login"
    LOGOUT = "logout"


@dataclass(frozen=True)
class CdrRecord:
    """One parsed CDR line: raw field values in header order.

    The seven leading columns of the standard layout get typed accessors;
    everything else is preserved verbatim and never interpreted.
    """

    header: tuple[str, ...]
    values: tuple[str, ...]
    line_no: int = 0

    @property
    def call_type(self) -> str:
        return self.values[0]

    @property
    def call_cause(self) -> str:
        return self.values[1]

    @property
    def customer_identifier(self) -> str:
        return self.values[2]

    @property
    def telephone_number_dialled(self) -> str:
        return self.values[3]

    @property
    def call_date(self) -> date | None:
        v = self.values[4]
        return datetime.strptime(v, _DATE_FORMAT).date() if v else None

    @property
    def call_time(self) -> time | None:
        v = self.values[5]
        return datetime.strptime(v, _TIME_FORMAT).time() if v else None

    @property
    def duration_seconds(self) -> int | None:
        v = self.values[6]
        return int(v) if v else None

    def field(self, name: str) -> str:
        try:
            return self.values[self.header.index(name)]
        except ValueError:
            raise MissingColumn(name) from None


@dataclass(frozen=True)
class LocationObservation:
    """An entity entering (login) or leaving (logout) a BTS area."""

    entity_id: str
    bts_id: str
    kind: ObsKind
    timestamp: float

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class Transition:
    """A jump between two distinct cells, indexed by arrival slot."""

    entity_id: str
    from_bts: str
    to_bts: str
    slot: int
    elapsed: float

    def __post_init__(self) -> None:
        if self.from_bts == self.to_bts:
            raise ValueError(f"transition must change cell ({self.from_bts})")
        if self.slot < 0:
            raise ValueError(f"negative slot {self.slot}")
        if self.elapsed < 0:
            raise ValueError(f"negative elapsed {self.elapsed}")


@dataclass(frozen=True)
class FieldMapping:
    """Names of the CDR columns that carry entity, cell and time data.

    The standard layout has no serving-cell column, so ``cell_column``
    stays optional and must be supplied for carrier exports that add one.
    """

    entity_column: str = "Customer Identifier"
    cell_column: str | None = None
    date_column: str = "Call Date"
    time_column: str = "Call Time"

    def resolve(self, header: Sequence[str]) -> tuple[int, int, int, int]:
        if self.cell_column is None:
            raise NoCellColumn()
        indices = []
        for name in (self.entity_column, self.cell_column,
                     self.date_column, self.time_column):
            try:
                indices.append(header.index(name))
            except ValueError:
                raise MissingColumn(name) from None
        return tuple(indices)  # type: ignore[return-value]


@dataclass(frozen=True)
class SkipNote:
    """Why a record or event was left out of a conversion result."""

    where: str
    reason: str


@dataclass
class ObservationBatch:
    observations: list[LocationObservation] = field(default_factory=list)
    skipped: list[SkipNote] = field(default_factory=list)


@dataclass
class TransitionBatch:
    transitions: list[Transition] = field(default_factory=list)
    dropped: list[SkipNote] = field(default_factory=list)


def observation_sort_key(obs: LocationObservation) -> tuple:
    """Total order for observation streams: time, entity, cell, then kind
    with logins ahead of logouts.  Every downstream stage relies on it."""
    return (obs.timestamp, obs.entity_id, obs.bts_id, obs.kind is ObsKind.LOGOUT)


def _split_quoted(line: str, line_no: int) -> list[str]:
    """Split one CDR line into raw field values.

    Any recognised quote byte opens a field and the next recognised quote
    byte closes it (the export format never embeds quotes in values).
    Whitespace around separators is tolerated because real exports carry
    stray spaces such as ``"ON" ,``.
    """
    fields: list[str] = []
    i, n = 0, len(line)
    while True:
        while i < n and line[i] in " \t":
            i += 1
        if i < n and line[i] in _QUOTES:
            close = -1
            for j in range(i + 1, n):
                if line[j] in _QUOTES:
                    close = j
                    break
            if close == -1:
                raise CdrFormatError(line_no, "unterminated quoted field")
            fields.append(line[i + 1:close])
            i = close + 1
            while i < n and line[i] in " \t":
                i += 1
        else:
            j = i
            while j < n and line[j] != ",":
                j += 1
            fields.append(line[i:j].strip())
            i = j
        if i >= n:
            break
        if line[i] != ",":
            raise CdrFormatError(line_no, f"expected separator at column {i + 1}")
        i += 1
        if i >= n:
            fields.append("")
            break
    return fields


def _validate_record(record: CdrRecord) -> None:
    v = record.values[6]
    if v:
        try:
            if int(v) < 0:
                raise ValueError
        except ValueError:
            raise BadDuration(record.line_no, v) from None
    v = record.values[4]
    if v:
        try:
            datetime.strptime(v, _DATE_FORMAT)
        except ValueError:
            raise BadDate(record.line_no, v) from None
    v = record.values[5]
    if v:
        try:
            datetime.strptime(v, _TIME_FORMAT)
        except ValueError:
            raise BadTime(record.line_no, v) from None


def parse_cdr(text: str | Iterable[str]) -> list[CdrRecord]:
    """Parse CDR text into records.

    The first line must be the 30-name header; each following non-empty
    line yields one record with exactly as many fields as the header.
    """
    lines = text.splitlines() if isinstance(text, str) else list(text)
    if not lines or not lines[0].strip():
        raise HeaderMissing("input has no header line")
    try:
        header = tuple(_split_quoted(lines[0], 1))
    except CdrFormatError as exc:
        raise HeaderMissing(f"first line is not a valid header: {exc}") from None
    if len(header) != CDR_FIELD_COUNT or any(not name for name in header):
        raise HeaderMissing(
            f"first line is not a {CDR_FIELD_COUNT}-field header "
            f"(got {len(header)} fields)")

    records: list[CdrRecord] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        values = _split_quoted(line, line_no)
        if len(values) != len(header):
            raise FieldCountMismatch(line_no, len(header), len(values))
        record = CdrRecord(header=header, values=tuple(values), line_no=line_no)
        _validate_record(record)
        records.append(record)
    return records


def serialize_cdr(records: Sequence[CdrRecord],
                  header: Sequence[str] | None = None) -> str:
    """Render records back to CDR text with ASCII quotes and no padding."""
    if header is None:
        if not records:
            raise ValueError("cannot serialize an empty record list without a header")
        header = records[0].header
    lines = [",".join(f'"{name}"' for name in header)]
    for record in records:
        lines.append(",".join(f'"{value}"' for value in record.values))
    return "\n".join(lines) + "\n"


def records_to_observations(records: Sequence[CdrRecord],
                            mapping: FieldMapping,
                            epoch: datetime = DEFAULT_EPOCH) -> ObservationBatch:
    """Turn records into login/logout observation pairs.

    Each record with a non-empty cell field produces a login at
    call date + call time and a logout ``duration`` seconds later.
    Records without a usable cell or timestamp are skipped and counted,
    never dropped silently.
    """
    batch = ObservationBatch()
    if not records:
        return batch
    entity_i, cell_i, date_i, time_i = mapping.resolve(records[0].header)
    for record in records:
        where = f"line {record.line_no}"
        cell = record.values[cell_i].strip()
        if not cell:
            batch.skipped.append(SkipNote(where, "empty cell field"))
            continue
        day_raw, tod_raw = record.values[date_i], record.values[time_i]
        if not day_raw or not tod_raw:
            batch.skipped.append(SkipNote(where, "missing date or time"))
            continue
        day = datetime.strptime(day_raw, _DATE_FORMAT).date()
        tod = datetime.strptime(tod_raw, _TIME_FORMAT).time()
        start = (datetime.combine(day, tod) - epoch).total_seconds()
        duration = record.duration_seconds or 0
        entity = record.values[entity_i]
        batch.observations.append(
            LocationObservation(entity, cell, ObsKind.LOGIN, start))
        batch.observations.append(
            LocationObservation(entity, cell, ObsKind.LOGOUT, start + duration))
    batch.observations.sort(key=observation_sort_key)
    return batch


def observations_to_transitions(observations: Sequence[LocationObservation],
                                slot_len: float,
                                verify_sorted: bool = True) -> TransitionBatch:
    """Derive per-entity cell jumps from a time-sorted observation stream.

    A transition fires when an entity's next observation names a different
    cell; its slot is the arrival slot and its elapsed time runs from the
    last observation at the previous cell.  Consecutive observations at
    one cell (periodic mid-call updates) produce nothing.
    """
    if slot_len <= 0:
        raise ValueError(f"slot_len must be positive, got {slot_len}")
    if verify_sorted:
        for i in range(1, len(observations)):
            if observations[i].timestamp < observations[i - 1].timestamp:
                raise UnsortedInput(i)
    batch = TransitionBatch()
    last: dict[str, LocationObservation] = {}
    for obs in observations:
        prev = last.get(obs.entity_id)
        if prev is not None and prev.bts_id != obs.bts_id:
            elapsed = obs.timestamp - prev.timestamp
            if elapsed < 0:
                batch.dropped.append(
                    SkipNote(obs.entity_id, "clock regression, transition dropped"))
            else:
                batch.transitions.append(
                    Transition(obs.entity_id, prev.bts_id, obs.bts_id,
                               int(obs.timestamp // slot_len), elapsed))
        last[obs.entity_id] = obs
    return batch


def _format_timestamp(value: float) -> str:
    if value == int(value):
        return str(int(value))
    return repr(value)


def format_observation_log(observations: Iterable[LocationObservation]) -> str:
    lines = [
        f"{o.entity_id}\t{o.bts_id}\t{o.kind.value}\t{_format_timestamp(o.timestamp)}"
        for o in observations
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_observation_log(text: str) -> list[LocationObservation]:
    observations: list[LocationObservation] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 4:
            raise ObservationLogError(line_no, f"expected 4 fields, got {len(parts)}")
        entity, cell, kind_raw, ts_raw = parts
        try:
            kind = ObsKind(kind_raw)
        except ValueError:
            raise ObservationLogError(line_no, f"unknown event kind {kind_raw!r}") from None
        try:
            ts = float(ts_raw)
        except ValueError:
            raise ObservationLogError(line_no, f"bad timestamp {ts_raw!r}") from None
        if ts < 0:
            raise ObservationLogError(line_no, f"negative timestamp {ts_raw}")
        observations.append(LocationObservation(entity, cell, kind, ts))
    return observations
