"""Final mode decisions and the historical store behind them.

The decision table turns a speed class plus optional line evidence plus a
historical prior into one of the mode labels.  The history store plays
the maintainer/mining roles: it accumulates trip records and occupancy
counters per entity, detects home and work cells, mines periodic routes
and travel companions, and keeps the Laplace-smoothed public-vs-car prior
used as a tie-break for medium-speed travel.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

from .cdr import DEFAULT_EPOCH, LocationObservation
from .topology import SpeedThresholds

PRIOR_MIN_SUPPORT = 3


class BehaviorError(Exception):
    pass


class LabelNotApplicable(BehaviorError):
    def __init__(self, label: "ModeLabel"):
        super().__init__(f"label {label.value} does not move the public/car prior")
        self.label = label


class HistoryFormatError(BehaviorError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ModeLabel(enum.Enum):
    STATIC = "static"
    WALKING = "walking"
    PUBLIC_TRANSPORT = "public_transport"
    PRIVATE_CAR = "private_car"
    UNRESOLVED = "unresolved"


class SpeedClass(enum.Enum):
    SLOW = "slow"
    MEDIUM = "medium"
    FAST = "fast"
    UNKNOWN = "unknown"


class LineVerdict(enum.Enum):
    PUBLIC_CONFIRMED = "public_confirmed"
    STILL_CANDIDATE = "still_candidate"
    NOT_PUBLIC = "not_public"


def speed_class(speed_kmh: float | None,
                thresholds: SpeedThresholds) -> SpeedClass:
    if speed_kmh is None:
        return SpeedClass.UNKNOWN
    if speed_kmh < thresholds.walk_max:
        return SpeedClass.SLOW
    if speed_kmh < thresholds.medium_max:
        return SpeedClass.MEDIUM
    return SpeedClass.FAST


@dataclass(frozen=True)
class Prior:
    """Public-transport propensity: Laplace-smoothed fraction of past
    motorised trips that were public transport."""

    p_public: float = 0.5
    support: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_public <= 1.0:
            raise BehaviorError(f"prior probability {self.p_public} out of range")


def decide_mode(speed: SpeedClass,
                line: LineVerdict | None,
                prior: Prior = Prior(),
                min_support: int = PRIOR_MIN_SUPPORT) -> ModeLabel:
    """The mode decision table.  Total: every input combination maps to a
    label.  Slow means walking, fast means private car; medium-speed
    travel is public transport or a car depending on live line evidence
    first and the historical prior as tie-break."""
    if speed is SpeedClass.UNKNOWN:
        return ModeLabel.UNRESOLVED
    if speed is SpeedClass.SLOW:
        return ModeLabel.WALKING
    if speed is SpeedClass.FAST:
        return ModeLabel.PRIVATE_CAR
    if line is LineVerdict.PUBLIC_CONFIRMED:
        return ModeLabel.PUBLIC_TRANSPORT
    if line is LineVerdict.NOT_PUBLIC:
        return ModeLabel.PRIVATE_CAR
    if prior.support >= min_support:
        if prior.p_public > 0.5:
            return ModeLabel.PUBLIC_TRANSPORT
        if prior.p_public < 0.5:
            return ModeLabel.PRIVATE_CAR
    return ModeLabel.UNRESOLVED


@dataclass(frozen=True)
class TripEvidence:
    speed_kmh: float | None = None
    coverage: float | None = None
    line_id: str | None = None
    group_id: str | None = None


@dataclass(frozen=True)
class TripRecord:
    entity_id: str
    path: tuple[tuple[int, str], ...]  # (slot, cell) in slot order
    label: ModeLabel
    evidence: TripEvidence = TripEvidence()

    @property
    def start_slot(self) -> int:
        return self.path[0][0] if self.path else 0

    @property
    def cells(self) -> tuple[str, ...]:
        return tuple(cell for _, cell in self.path)


@dataclass(frozen=True)
class HomeWorkRule:
    """Quantifies "registered at night during certain days": defaults are
    a 22:00-06:00 night window, a 09:00-17:00 weekday work window, 60%
    dominance and at least 5 distinct days."""

    night_start_hour: int = 22
    night_end_hour: int = 6
    work_start_hour: int = 9
    work_end_hour: int = 17
    min_days: int = 5
    dominance: float = 0.6


@dataclass
class _EntityHistory:
    trips: list[TripRecord] = field(default_factory=list)
    mode_counts: Counter = field(default_factory=Counter)
    night_counts: Counter = field(default_factory=Counter)
    night_days: dict[str, set[date]] = field(default_factory=dict)
    work_counts: Counter = field(default_factory=Counter)
    work_days: dict[str, set[date]] = field(default_factory=dict)


class HistoryStore:
    """Single-writer per-entity history: trips, occupancy counters, mode
    counters and priors.  Counters are pure aggregates of what was fed in,
    so replaying a persisted trip log reconstructs them exactly."""

    def __init__(self, slot_len: float = 180.0, epoch: datetime = DEFAULT_EPOCH,
                 rule: HomeWorkRule = HomeWorkRule()):
        self.slot_len = slot_len
        self.epoch = epoch
        self.rule = rule
        self._entities: dict[str, _EntityHistory] = {}

    def _entity(self, entity_id: str) -> _EntityHistory:
        return self._entities.setdefault(entity_id, _EntityHistory())

    def entities(self) -> list[str]:
        return sorted(self._entities)

    def trips(self, entity_id: str) -> list[TripRecord]:
        return list(self._entity(entity_id).trips)

    def mode_count(self, entity_id: str, label: ModeLabel) -> int:
        return self._entity(entity_id).mode_counts[label]

    def record_observation(self, obs: LocationObservation) -> None:
        moment = self.epoch + timedelta(seconds=obs.timestamp)
        entry = self._entity(obs.entity_id)
        rule = self.rule
        if moment.hour >= rule.night_start_hour or moment.hour < rule.night_end_hour:
            entry.night_counts[obs.bts_id] += 1
            entry.night_days.setdefault(obs.bts_id, set()).add(moment.date())
        if moment.weekday() < 5 and rule.work_start_hour <= moment.hour < rule.work_end_hour:
            entry.work_counts[obs.bts_id] += 1
            entry.work_days.setdefault(obs.bts_id, set()).add(moment.date())

    def add_trip(self, trip: TripRecord) -> None:
        if trip.label is ModeLabel.UNRESOLVED:
            raise BehaviorError("unresolved trips are not stored")
        entry = self._entity(trip.entity_id)
        entry.trips.append(trip)
        entry.mode_counts[trip.label] += 1

    def prior(self, entity_id: str) -> Prior:
        entry = self._entity(entity_id)
        public = entry.mode_counts[ModeLabel.PUBLIC_TRANSPORT]
        car = entry.mode_counts[ModeLabel.PRIVATE_CAR]
        return Prior((public + 1) / (public + car + 2), public + car)

    # -- persistence ------------------------------------------------------

    def trip_log_text(self) -> str:
        lines = []
        for entity_id in self.entities():
            for trip in self._entity(entity_id).trips:
                cells = " ".join(f"{cell}@{slot}" for slot, cell in trip.path)
                lines.append(f"{entity_id}\t{trip.label.value}\t{trip.start_slot}\t{cells}")
        return "\n".join(lines) + ("\n" if lines else "")

    def save_trips(self, path: str | Path) -> None:
        Path(path).write_text(self.trip_log_text())

    def load_trips(self, text: str) -> None:
        for line_no, raw in enumerate(text.splitlines(), start=1):
            stripped = raw.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split("\t")
            if len(parts) != 4:
                raise HistoryFormatError(line_no, f"expected 4 columns, got {len(parts)}")
            entity_id, label_raw, start_raw, cells_raw = parts
            try:
                label = ModeLabel(label_raw)
            except ValueError:
                raise HistoryFormatError(line_no, f"unknown label {label_raw!r}") from None
            path: list[tuple[int, str]] = []
            for token in cells_raw.split():
                cell, sep, slot_raw = token.rpartition("@")
                if not sep or not cell:
                    raise HistoryFormatError(line_no, f"bad path token {token!r}")
                try:
                    path.append((int(slot_raw), cell))
                except ValueError:
                    raise HistoryFormatError(line_no, f"bad path token {token!r}") from None
            if path and str(path[0][0]) != start_raw:
                raise HistoryFormatError(line_no, "start slot disagrees with path")
            self.add_trip(TripRecord(entity_id, tuple(path), label))


def update_prior(store: HistoryStore, entity_id: str, trip: TripRecord) -> Prior:
    """Fold a finished motorised trip into the entity's prior.  Only
    public-transport and private-car trips move it."""
    if trip.label not in (ModeLabel.PUBLIC_TRANSPORT, ModeLabel.PRIVATE_CAR):
        raise LabelNotApplicable(trip.label)
    if trip.entity_id != entity_id:
        trip = replace(trip, entity_id=entity_id)
    store.add_trip(trip)
    return store.prior(entity_id)


def detect_home_work(store: HistoryStore,
                     entity_id: str) -> tuple[str | None, str | None]:
    """Home is the dominant night cell, work the dominant weekday-daytime
    cell; each needs the configured dominance share and day support, and
    an exact tie yields absence."""
    entry = store._entity(entity_id)
    rule = store.rule

    def dominant(counts: Counter, days: dict[str, set[date]]) -> str | None:
        total = sum(counts.values())
        if total == 0:
            return None
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        top_cell, top_count = ranked[0]
        if len(ranked) > 1 and ranked[1][1] == top_count:
            return None
        if top_count < rule.dominance * total:
            return None
        if len(days.get(top_cell, ())) < rule.min_days:
            return None
        return top_cell

    home = dominant(entry.night_counts, entry.night_days)
    work = dominant(entry.work_counts, entry.work_days)
    return home, work


@dataclass(frozen=True)
class PeriodicRoute:
    cells: tuple[str, ...]
    window: tuple[float, float]  # start time of day, seconds, [min, max]
    weekdays: frozenset[int]


def mine_periodic_routes(store: HistoryStore, entity_id: str,
                         min_days: int = 3,
                         band_seconds: float = 1800.0) -> list[PeriodicRoute]:
    """Routes the entity repeats: identical cell paths starting inside one
    time-of-day band on enough distinct days.  Bands are found by a greedy
    sweep over sorted start times, so a path repeated mornings and
    evenings yields two schedules."""
    trips = store.trips(entity_id)
    by_cells: dict[tuple[str, ...], list[TripRecord]] = {}
    for trip in trips:
        if trip.path:
            by_cells.setdefault(trip.cells, []).append(trip)

    def start_seconds(trip: TripRecord) -> float:
        return trip.start_slot * store.slot_len

    found: list[PeriodicRoute] = []
    for cells in sorted(by_cells):
        # Band detection runs over time-of-day order; a band never wraps
        # across midnight.
        group = sorted(by_cells[cells],
                       key=lambda t: (start_seconds(t) % 86400.0, start_seconds(t)))
        i = 0
        while i < len(group):
            band_start = start_seconds(group[i]) % 86400.0
            cluster = [group[i]]
            j = i + 1
            while j < len(group) and (start_seconds(group[j]) % 86400.0) - band_start <= band_seconds:
                cluster.append(group[j])
                j += 1
            moments = [store.epoch + timedelta(seconds=start_seconds(t)) for t in cluster]
            distinct_days = {m.date() for m in moments}
            if len(distinct_days) >= min_days:
                tods = sorted(start_seconds(t) % 86400.0 for t in cluster)
                found.append(PeriodicRoute(
                    cells, (tods[0], tods[-1]),
                    frozenset(m.weekday() for m in moments)))
            i = j
    return sorted(found, key=lambda r: (r.cells, r.window))


def mine_companions(store: HistoryStore,
                    min_trips: int = 3) -> list[tuple[str, str, int]]:
    """Entity pairs that shared a confirmed co-travel group on enough
    trips; each pair appears once, smaller id first."""
    by_group: dict[str, set[str]] = {}
    for entity_id in store.entities():
        for trip in store.trips(entity_id):
            if trip.evidence.group_id:
                by_group.setdefault(trip.evidence.group_id, set()).add(entity_id)
    pair_counts: Counter = Counter()
    for members in by_group.values():
        ordered = sorted(members)
        for i, a in enumerate(ordered):
            for b in ordered[i + 1:]:
                pair_counts[(a, b)] += 1
    return sorted((a, b, n) for (a, b), n in pair_counts.items() if n >= min_trips)
