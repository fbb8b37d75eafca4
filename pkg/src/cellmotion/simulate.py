"""Deterministic synthetic-city event generator with exact ground truth.

Entities traverse cell routes at fixed speeds.  Arrival at a cell emits a
login; departure emits a logout at the same instant, so the time between
a logout and the next login is exactly the hop's travel time (that is
what the speed rules downstream measure).  The final cell of a route gets
a login only, and stationary entities emit a single login.

Dwell jitter is multiplicative on hop times and drawn from a generator
seeded by (scenario seed, entity id, hop index), which makes every
randomized run byte-reproducible.

Buses are implicit: passengers of one line share a route and a schedule,
so a traveling group looks like a virtual bus without any vehicle entity.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Sequence

from .behavior import ModeLabel
from .cdr import LocationObservation, ObsKind, observation_sort_key
from .topology import Topology

FIGURE_PASSENGER_IDS = tuple(str(n) for n in range(51, 72))
FIGURE_CAR_ID = "14"
FIGURE_BUS_KMH = 20.0
FIGURE_CAR_KMH = 60.0
WALK_KMH = 5.0

#: Entities start mid-slot for the default 180 s slot length, which keeps
#: fixture arrival times away from slot boundaries.
FIXTURE_START_TIME = 90.0


class SimulationError(Exception):
    pass


class InvalidSpec(SimulationError):
    pass


class UnsuitableTopology(SimulationError):
    pass


class ScenarioFormatError(SimulationError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Walker:
    route: tuple[str, ...]


@dataclass(frozen=True)
class BusPassenger:
    line_id: str


@dataclass(frozen=True)
class Car:
    route: tuple[str, ...]


@dataclass(frozen=True)
class Stationary:
    cell: str


Mode = Walker | BusPassenger | Car | Stationary

_TRUE_LABEL = {
    Walker: ModeLabel.WALKING,
    BusPassenger: ModeLabel.PUBLIC_TRANSPORT,
    Car: ModeLabel.PRIVATE_CAR,
    Stationary: ModeLabel.STATIC,
}


@dataclass(frozen=True)
class EntitySpec:
    entity_id: str
    mode: Mode
    speed_kmh: float = 0.0
    start_time: float = 0.0
    start_offset: int = 0


@dataclass(frozen=True)
class ScenarioSpec:
    topology: Topology
    entities: tuple[EntitySpec, ...]
    jitter_fraction: float = 0.0
    seed: int = 0


@dataclass
class GroundTruth:
    labels: dict[str, ModeLabel] = field(default_factory=dict)
    paths: dict[str, list[tuple[str, float]]] = field(default_factory=dict)


def _jitter(seed: int, entity_id: str, hop: int, fraction: float) -> float:
    if fraction == 0.0:
        return 0.0
    digest = hashlib.sha256(f"{seed}:{entity_id}:{hop}".encode()).digest()
    rng = random.Random(int.from_bytes(digest[:8], "big"))
    return rng.uniform(-fraction, fraction)


def _route_of(entity: EntitySpec, topo: Topology) -> tuple[str, ...]:
    mode = entity.mode
    if isinstance(mode, Stationary):
        return (mode.cell,)
    if isinstance(mode, BusPassenger):
        line = topo.lines.get(mode.line_id)
        if line is None:
            raise InvalidSpec(f"entity {entity.entity_id}: unknown line {mode.line_id!r}")
        cells = line.cells
    else:
        cells = mode.route
    if not 0 <= entity.start_offset < len(cells):
        raise InvalidSpec(f"entity {entity.entity_id}: start offset "
                          f"{entity.start_offset} outside route")
    return tuple(cells[entity.start_offset:])


def _validate(spec: ScenarioSpec) -> None:
    if not 0.0 <= spec.jitter_fraction < 1.0:
        raise InvalidSpec(f"jitter fraction {spec.jitter_fraction} outside [0, 1)")
    seen: set[str] = set()
    for entity in spec.entities:
        if entity.entity_id in seen:
            raise InvalidSpec(f"duplicate entity id {entity.entity_id!r}")
        seen.add(entity.entity_id)
        if entity.start_time < 0:
            raise InvalidSpec(f"entity {entity.entity_id}: negative start time")
        route = _route_of(entity, spec.topology)
        for cell_id in route:
            if cell_id not in spec.topology.cells:
                raise InvalidSpec(f"entity {entity.entity_id}: unknown cell {cell_id!r}")
        for i in range(1, len(route)):
            if not spec.topology.adjacent(route[i - 1], route[i]):
                raise InvalidSpec(
                    f"entity {entity.entity_id}: route step "
                    f"{route[i - 1]} -> {route[i]} joins non-adjacent cells")
        if not isinstance(entity.mode, Stationary) and len(route) > 1 \
                and entity.speed_kmh <= 0:
            raise InvalidSpec(f"entity {entity.entity_id}: moving entity needs "
                              f"a positive speed")


def simulate(spec: ScenarioSpec) -> tuple[list[LocationObservation], GroundTruth]:
    """Run a scenario; returns the sorted observation log and the ground
    truth (true label plus timed cell path per entity).  Identical specs
    produce byte-identical logs."""
    _validate(spec)
    topo = spec.topology
    observations: list[LocationObservation] = []
    truth = GroundTruth()
    for entity in spec.entities:
        route = _route_of(entity, topo)
        label = _TRUE_LABEL[type(entity.mode)]
        t = entity.start_time
        path = [(route[0], t)]
        observations.append(
            LocationObservation(entity.entity_id, route[0], ObsKind.LOGIN, t))
        speed_ms = entity.speed_kmh / 3.6 if entity.speed_kmh else 0.0
        for hop in range(len(route) - 1):
            # Departure: the entity leaves the cell the moment it arrived
            # there, spending the whole hop between the two cells.
            observations.append(
                LocationObservation(entity.entity_id, route[hop], ObsKind.LOGOUT, t))
            hop_seconds = topo.distance(route[hop], route[hop + 1]) / speed_ms
            hop_seconds *= 1.0 + _jitter(spec.seed, entity.entity_id, hop,
                                         spec.jitter_fraction)
            t += hop_seconds
            observations.append(
                LocationObservation(entity.entity_id, route[hop + 1], ObsKind.LOGIN, t))
            path.append((route[hop + 1], t))
        truth.labels[entity.entity_id] = label
        truth.paths[entity.entity_id] = path
    observations.sort(key=observation_sort_key)
    return observations, truth


# -- the bundled demonstration city ---------------------------------------

def figure_city() -> Topology:
    """Two parallel east-west streets of eight cells, 1000 m apart in both
    directions, with a tram line along the northern street.  Big enough
    for a group to ride the tram while a car overlaps it and then turns
    off."""
    from .topology import BtsCell, TransitLine

    cells = []
    adjacency = []
    for i in range(8):
        cells.append(BtsCell(f"A{i}", i * 1000.0, 0.0, 500.0))
        cells.append(BtsCell(f"B{i}", i * 1000.0, 1000.0, 500.0))
        if i > 0:
            adjacency.append((f"A{i - 1}", f"A{i}"))
            adjacency.append((f"B{i - 1}", f"B{i}"))
        adjacency.append((f"A{i}", f"B{i}"))
    line = TransitLine("tram1", tuple(f"A{i}" for i in range(8)))
    return Topology(cells, adjacency, [line])


def _diverging_route(topo: Topology, min_overlap: int = 4,
                     tail: int = 2) -> tuple[str, tuple[str, ...]] | None:
    """Find a line and a car route that follows its first cells and then
    leaves it.  Deterministic: smallest line id, earliest divergence."""
    for line_id in sorted(topo.lines):
        cells = topo.lines[line_id].cells
        if len(cells) < min_overlap:
            continue
        on_line = set(cells)
        prefix = list(cells[:min_overlap])
        route = list(prefix)
        current = prefix[-1]
        for _ in range(tail):
            options = sorted(n for n in topo._adjacency[current]
                             if n not in on_line and n not in route)
            if not options:
                break
            current = options[0]
            route.append(current)
        if len(route) > min_overlap:
            return line_id, tuple(route)
    return None


def figure4_scenario(topo: Topology, jitter_fraction: float = 0.0,
                     seed: int = 0) -> ScenarioSpec:
    """The demonstration scenario: passengers 51..71 ride one line
    together while car 14 overlaps the line and then diverges."""
    found = _diverging_route(topo)
    if found is None:
        raise UnsuitableTopology(
            "topology has no transit line with an overlapping-then-diverging "
            "car route")
    line_id, car_route = found
    entities = [
        EntitySpec(entity_id, BusPassenger(line_id), FIGURE_BUS_KMH,
                   FIXTURE_START_TIME)
        for entity_id in FIGURE_PASSENGER_IDS
    ]
    entities.append(
        EntitySpec(FIGURE_CAR_ID, Car(car_route), FIGURE_CAR_KMH,
                   FIXTURE_START_TIME))
    return ScenarioSpec(topo, tuple(entities), jitter_fraction, seed)


# -- scenario and ground-truth text formats --------------------------------

def format_scenario(spec: ScenarioSpec) -> str:
    out = [f"seed {spec.seed}", f"jitter {spec.jitter_fraction:g}"]
    for e in spec.entities:
        m = e.mode
        if isinstance(m, Stationary):
            out.append(f"entity {e.entity_id} stationary {m.cell} {e.start_time:g}")
        elif isinstance(m, BusPassenger):
            out.append(f"entity {e.entity_id} bus {m.line_id} {e.speed_kmh:g} "
                       f"{e.start_time:g} {e.start_offset}")
        else:
            kind = "walker" if isinstance(m, Walker) else "car"
            cells = " ".join(m.route)
            out.append(f"entity {e.entity_id} {kind} {e.speed_kmh:g} "
                       f"{e.start_time:g} {e.start_offset} {cells}")
    return "\n".join(out) + "\n"


def parse_scenario(text: str, topo: Topology) -> ScenarioSpec:
    seed = 0
    jitter = 0.0
    entities: list[EntitySpec] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        try:
            if tokens[0] == "seed" and len(tokens) == 2:
                seed = int(tokens[1])
            elif tokens[0] == "jitter" and len(tokens) == 2:
                jitter = float(tokens[1])
            elif tokens[0] == "entity":
                entity_id, kind = tokens[1], tokens[2]
                if kind == "stationary":
                    entities.append(EntitySpec(entity_id, Stationary(tokens[3]),
                                               0.0, float(tokens[4])))
                elif kind == "bus":
                    entities.append(EntitySpec(
                        entity_id, BusPassenger(tokens[3]), float(tokens[4]),
                        float(tokens[5]), int(tokens[6])))
                elif kind in ("walker", "car"):
                    mode_type = Walker if kind == "walker" else Car
                    route = tuple(tokens[6:])
                    if not route:
                        raise ScenarioFormatError(line_no, f"{kind} needs a route")
                    entities.append(EntitySpec(
                        entity_id, mode_type(route), float(tokens[3]),
                        float(tokens[4]), int(tokens[5])))
                else:
                    raise ScenarioFormatError(line_no, f"unknown mode {kind!r}")
            else:
                raise ScenarioFormatError(line_no, f"unknown directive {tokens[0]!r}")
        except (IndexError, ValueError):
            raise ScenarioFormatError(line_no, "malformed scenario line") from None
    return ScenarioSpec(topo, tuple(entities), jitter, seed)


def format_ground_truth(truth: GroundTruth) -> str:
    out = []
    for entity_id in sorted(truth.labels):
        path = truth.paths.get(entity_id, [])
        cells = " ".join(f"{cell}@{t:g}" for cell, t in path)
        out.append(f"{entity_id}\t{truth.labels[entity_id].value}\t{cells}")
    return "\n".join(out) + ("\n" if out else "")


def parse_ground_truth(text: str) -> GroundTruth:
    truth = GroundTruth()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split("\t")
        if len(parts) < 2:
            raise ScenarioFormatError(line_no, "expected entity and label columns")
        entity_id, label_raw = parts[0], parts[1]
        try:
            truth.labels[entity_id] = ModeLabel(label_raw)
        except ValueError:
            raise ScenarioFormatError(line_no, f"unknown label {label_raw!r}") from None
        path: list[tuple[str, float]] = []
        if len(parts) > 2 and parts[2]:
            for token in parts[2].split():
                cell, sep, t_raw = token.rpartition("@")
                if not sep:
                    raise ScenarioFormatError(line_no, f"bad path token {token!r}")
                path.append((cell, float(t_raw)))
        truth.paths[entity_id] = path
    return truth
