"""Slot-synchronous multi-agent classification engine.

Roles, mirrored as deterministic state machines driven by slot epochs:

* personal agents: one per entity, holding the arrival trace (cell per
  slot, latest observation wins and holds until the next arrival), the
  kept jump history and the open-trip bookkeeping;
* BTS agents: per destination cell, group one slot's arrivals by source
  cell and spawn one ephemeral coordination task per (source, destination)
  pair;
* coordination tasks: build a travel graph for their jumpers, enrich it
  backward from agent traces, classify every jumper by the speed rule
  (slow walks, fast drives, medium asks the transit manager), report,
  and die within the same epoch;
* transit manager: tracks candidate traveling groups and confirms them as
  public transport once they stay on a line across consecutive sightings;
* history: the store from :mod:`cellmotion.behavior`, updated when trips
  close.

Determinism contract: for a fixed (log, config) the full report stream is
byte-identical across runs.  Within an epoch, coordination tasks touch no
shared state while building graphs and measuring speeds, so that phase
may run in any order (or in parallel); the transit-manager round and the
report emission always happen in canonical task order.  Everything across
epochs is strictly sequential.
"""

from __future__ import annotations

import enum
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

from . import travel_graph as tg
from .behavior import (
    HistoryStore,
    LineVerdict,
    ModeLabel,
    SpeedClass,
    TripEvidence,
    TripRecord,
    decide_mode,
    speed_class,
    update_prior,
)
from .cdr import (
    LocationObservation,
    Transition,
    observations_to_transitions,
)
from .topology import (
    EmptyPath,
    SpeedThresholds,
    Topology,
    WindowTooShort,
    ZeroElapsed,
    line_coverage,
    travel_speed,
)


class EngineError(Exception):
    pass


class ConfigInvalid(EngineError):
    pass


class ForeignTransition(EngineError):
    def __init__(self, bts_id: str, transition: Transition):
        super().__init__(f"transition into {transition.to_bts!r} handed to "
                         f"BTS agent {bts_id!r}")
        self.bts_id = bts_id
        self.transition = transition


class LifecycleError(EngineError):
    pass


@dataclass
class EngineConfig:
    """Run parameters; flags of the command line mirror these one-to-one."""

    slot_len: float = 180.0
    walk_max: float = 7.0
    medium_max: float = 45.0
    theta: float = 0.8
    group_min: int = 3
    shared_levels: int = 3
    depth: int = 8
    gap_slots: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.slot_len <= 0:
            raise ConfigInvalid(f"slot_len must be positive, got {self.slot_len}")
        if not 0 < self.walk_max < self.medium_max:
            raise ConfigInvalid("need 0 < walk_max < medium_max")
        if not 0 < self.theta <= 1:
            raise ConfigInvalid(f"theta must lie in (0, 1], got {self.theta}")
        if self.group_min < 1:
            raise ConfigInvalid("group_min must be >= 1")
        if self.shared_levels < 2:
            raise ConfigInvalid("shared_levels must be >= 2")
        if self.depth < 1:
            raise ConfigInvalid("depth must be >= 1")
        if self.gap_slots < 1:
            raise ConfigInvalid("gap_slots must be >= 1")

    @property
    def thresholds(self) -> SpeedThresholds:
        return SpeedThresholds(self.walk_max, self.medium_max)


# -- messages ---------------------------------------------------------------

class MsgKind(enum.Enum):
    JUMP_LIST = "jump_list"
    TRACE_REQUEST = "trace_request"
    TRACE_REPLY = "trace_reply"
    LINE_MATCH_REQUEST = "line_match_request"
    LINE_MATCH_REPLY = "line_match_reply"
    CLASSIFICATION_REPORT = "classification_report"
    TRIP_CLOSED = "trip_closed"


#: Each request kind pairs with exactly one reply kind.
REPLY_KIND = {
    MsgKind.TRACE_REQUEST: MsgKind.TRACE_REPLY,
    MsgKind.LINE_MATCH_REQUEST: MsgKind.LINE_MATCH_REPLY,
}


@dataclass(frozen=True)
class EngineMessage:
    kind: MsgKind
    sender: str
    recipient: str
    request_id: str | None
    payload: object = None


# -- coordination tasks ------------------------------------------------------

class TaskLifecycle(enum.IntEnum):
    CREATED = 0
    ENRICHING = 1
    CLASSIFYING = 2
    REPORTED = 3
    DEAD = 4


@dataclass
class CoordinationTask:
    """Ephemeral owner of one travel graph; forward-only lifecycle, graph
    released on death."""

    task_id: str
    anchor_bts: str
    slot: int
    jumpers: tuple[tuple[str, str], ...]  # (agent id, from cell)
    graph: tg.TravelGraph | None = None
    lifecycle: TaskLifecycle = TaskLifecycle.CREATED
    speeds: dict[str, float | None] = field(default_factory=dict)
    classes: dict[str, SpeedClass] = field(default_factory=dict)
    groups: list[list[str]] = field(default_factory=list)

    def advance(self, to: TaskLifecycle) -> None:
        if to < self.lifecycle:
            raise LifecycleError(
                f"task {self.task_id} cannot move back from "
                f"{self.lifecycle.name} to {to.name}")
        self.lifecycle = to
        if to is TaskLifecycle.DEAD:
            self.graph = None


def bts_epoch(bts_id: str,
              transitions: Sequence[Transition]) -> list[CoordinationTask]:
    """One BTS agent's work for one slot: group the arrivals by source
    cell and spawn a coordination task per non-empty pair."""
    if not transitions:
        return []
    slots = {t.slot for t in transitions}
    if len(slots) > 1:
        raise EngineError(f"BTS {bts_id!r} handed transitions from several "
                          f"slots {sorted(slots)}")
    for t in transitions:
        if t.to_bts != bts_id:
            raise ForeignTransition(bts_id, t)
    slot = transitions[0].slot
    by_source: dict[str, list[str]] = {}
    for t in transitions:
        by_source.setdefault(t.from_bts, []).append(t.entity_id)
    tasks = []
    for from_bts in sorted(by_source):
        jumpers = tuple((agent, from_bts) for agent in sorted(by_source[from_bts]))
        tasks.append(CoordinationTask(
            task_id=f"ca-s{slot}-{from_bts}-{bts_id}",
            anchor_bts=bts_id, slot=slot, jumpers=jumpers))
    return tasks


# -- personal agents and the trace registry ----------------------------------

@dataclass
class PersonalAgentState:
    """Per-entity bookkeeping: the slot-indexed arrival trace plus the
    open-trip accumulator."""

    entity_id: str
    arrival_slots: list[int] = field(default_factory=list)
    arrival_cells: list[str] = field(default_factory=list)
    transitions: list[Transition] = field(default_factory=list)
    last_active_slot: int = -1
    trip_open: bool = False
    trip_start_slot: int = 0
    trip_transitions: int = 0
    trip_label: ModeLabel = ModeLabel.UNRESOLVED
    trip_evidence: TripEvidence = TripEvidence()

    @property
    def trace(self) -> dict[int, str]:
        return dict(zip(self.arrival_slots, self.arrival_cells))

    def record_arrival(self, slot: int, cell: str) -> None:
        # Latest observation inside a slot wins; the cell then holds for
        # every later slot until the next arrival.
        if self.arrival_slots and self.arrival_slots[-1] == slot:
            self.arrival_cells[-1] = cell
        else:
            self.arrival_slots.append(slot)
            self.arrival_cells.append(cell)

    def cell_of(self, level: int) -> str | None:
        i = bisect_right(self.arrival_slots, level)
        return self.arrival_cells[i - 1] if i else None


class PaTraceSource(Protocol):
    """What a coordination task may ask personal agents: positions per
    level, co-location per level, and the recent jump history."""

    def cell_of(self, agent_id: str, level: int) -> str | None: ...

    def agents_at(self, cell_id: str, level: int) -> Iterable[str]: ...

    def recent_transitions(self, agent_id: str) -> Sequence[Transition]: ...


class TraceRegistry:
    """Single-writer view over all personal agents, read by coordination
    tasks.  Levels strictly below the current epoch are complete, so their
    co-location index is cached."""

    def __init__(self) -> None:
        self.agents: dict[str, PersonalAgentState] = {}
        self.current_slot = -1
        self._level_cache: dict[int, dict[str, list[str]]] = {}

    def state(self, entity_id: str) -> PersonalAgentState:
        state = self.agents.get(entity_id)
        if state is None:
            state = self.agents[entity_id] = PersonalAgentState(entity_id)
        return state

    def cell_of(self, agent_id: str, level: int) -> str | None:
        state = self.agents.get(agent_id)
        return state.cell_of(level) if state else None

    def _level_index(self, level: int) -> dict[str, list[str]]:
        cached = self._level_cache.get(level)
        if cached is not None:
            return cached
        index: dict[str, list[str]] = {}
        for entity_id in sorted(self.agents):
            cell = self.agents[entity_id].cell_of(level)
            if cell is not None:
                index.setdefault(cell, []).append(entity_id)
        if level < self.current_slot:
            self._level_cache[level] = index
        return index

    def agents_at(self, cell_id: str, level: int) -> Iterable[str]:
        return self._level_index(level).get(cell_id, [])

    def recent_transitions(self, agent_id: str) -> Sequence[Transition]:
        state = self.agents.get(agent_id)
        return tuple(state.transitions) if state else ()


class _LoggingTrace:
    """Trace source that mirrors position queries into the message log as
    request/reply pairs.  Values are identical with or without logging."""

    def __init__(self, registry: TraceRegistry, ca_id: str, engine: "Engine"):
        self._registry = registry
        self._ca_id = ca_id
        self._engine = engine

    def cell_of(self, agent_id: str, level: int) -> str | None:
        cell = self._registry.cell_of(agent_id, level)
        engine = self._engine
        if engine.record_messages:
            request_id = engine._next_request_id()
            engine.messages.append(EngineMessage(
                MsgKind.TRACE_REQUEST, self._ca_id, f"pa:{agent_id}",
                request_id, {"level": level}))
            engine.messages.append(EngineMessage(
                MsgKind.TRACE_REPLY, f"pa:{agent_id}", self._ca_id,
                request_id, {"level": level, "cell": cell}))
        return cell

    def agents_at(self, cell_id: str, level: int) -> Iterable[str]:
        return self._registry.agents_at(cell_id, level)

    def recent_transitions(self, agent_id: str) -> Sequence[Transition]:
        return self._registry.recent_transitions(agent_id)


# -- public transport manager -------------------------------------------------

class GroupStatus(enum.Enum):
    CANDIDATE = "candidate"
    CONFIRMED = "confirmed_public"


@dataclass
class GroupTrack:
    group_id: str
    members: set[str]
    path: list[tuple[int, str]]
    status: GroupStatus = GroupStatus.CANDIDATE
    streak: int = 0
    last_epoch: int = -1


@dataclass(frozen=True)
class LineMatchRequest:
    request_id: str
    ca_id: str
    epoch: int
    members: tuple[str, ...]
    path: tuple[tuple[int, str], ...]  # (slot, cell), consecutive repeats collapsed


@dataclass(frozen=True)
class LineMatchReply:
    request_id: str
    verdict: LineVerdict
    coverage: float
    line_id: str | None = None
    group_id: str | None = None
    reason: str | None = None


REASON_OFF_LINE = "off_line"
REASON_GROUP_TOO_SMALL = "group_too_small"


@dataclass
class PtmState:
    """Tracked traveling groups.  Member sets of live groups stay
    disjoint; a group confirms as public transport once its path keeps
    line coverage across two consecutive sightings after creation."""

    theta: float = 0.8
    group_min: int = 3
    tracked: dict[str, GroupTrack] = field(default_factory=dict)
    _counter: int = 0

    def _new_group_id(self) -> str:
        self._counter += 1
        return f"g{self._counter}"

    def _best_match(self, members: Iterable[str]) -> GroupTrack | None:
        member_set = set(members)
        best: GroupTrack | None = None
        best_overlap = 0
        for group_id in sorted(self.tracked):
            track = self.tracked[group_id]
            overlap = len(track.members & member_set)
            if overlap > best_overlap:
                best, best_overlap = track, overlap
        return best

    def _drop_members(self, members: set[str], keep: str | None = None) -> None:
        for group_id in sorted(self.tracked):
            if group_id == keep:
                continue
            track = self.tracked[group_id]
            track.members -= members
            if len(track.members) < self.group_min:
                del self.tracked[group_id]

    def retire_entity(self, entity_id: str) -> None:
        self._drop_members({entity_id})

    def prune(self, epoch: int, gap: int) -> None:
        for group_id in sorted(self.tracked):
            if epoch - self.tracked[group_id].last_epoch > gap:
                del self.tracked[group_id]


def ptm_resolve(ptm: PtmState, request: LineMatchRequest,
                topo: Topology) -> LineMatchReply:
    """The transit manager's answer for one traveling group.

    On-line groups are tracked and confirmed after two further consecutive
    sightings; groups that leave the line (the split of a car column) get
    not_public and their members are dropped from tracking; groups too
    small to be a plausible vehicle are not tracked at all and their
    members fall back to individual resolution.
    """
    if not request.path:
        raise EmptyPath()
    cells = [cell for _, cell in request.path]
    line_id, coverage = line_coverage(topo, cells)
    match = ptm._best_match(request.members)
    members = set(request.members)

    if coverage < ptm.theta:
        if match is not None:
            match.members -= members
            if len(match.members) < ptm.group_min:
                del ptm.tracked[match.group_id]
        return LineMatchReply(request.request_id, LineVerdict.NOT_PUBLIC,
                              coverage, line_id, None, REASON_OFF_LINE)

    if match is not None:
        match.members |= members
        ptm._drop_members(members, keep=match.group_id)
        known = {slot for slot, _ in match.path}
        match.path.extend(p for p in request.path if p[0] not in known)
        match.path.sort()
        if request.epoch > match.last_epoch:
            match.streak += 1
            match.last_epoch = request.epoch
        if match.streak >= 2:
            match.status = GroupStatus.CONFIRMED
        verdict = (LineVerdict.PUBLIC_CONFIRMED
                   if match.status is GroupStatus.CONFIRMED
                   else LineVerdict.STILL_CANDIDATE)
        return LineMatchReply(request.request_id, verdict, coverage,
                              line_id, match.group_id)

    if len(members) < ptm.group_min:
        return LineMatchReply(request.request_id, LineVerdict.NOT_PUBLIC,
                              coverage, line_id, None, REASON_GROUP_TOO_SMALL)

    group_id = ptm._new_group_id()
    ptm.tracked[group_id] = GroupTrack(
        group_id, set(members), list(request.path), GroupStatus.CANDIDATE,
        streak=0, last_epoch=request.epoch)
    return LineMatchReply(request.request_id, LineVerdict.STILL_CANDIDATE,
                          coverage, line_id, group_id)


# -- classification reports ---------------------------------------------------

@dataclass(frozen=True)
class ClassificationReport:
    slot: int
    entity_id: str
    label: ModeLabel
    speed_kmh: float | None = None
    coverage: float | None = None
    line_id: str | None = None
    group_id: str | None = None
    prior_p: float | None = None

    def format_line(self) -> str:
        def num(value: float | None) -> str:
            return "-" if value is None else format(value, ".6g")

        evidence = (f"speed={num(self.speed_kmh)}"
                    f";coverage={num(self.coverage)}"
                    f";line={self.line_id or '-'}"
                    f";group={self.group_id or '-'}"
                    f";prior={num(self.prior_p)}")
        return f"{self.slot}\t{self.entity_id}\t{self.label.value}\t{evidence}"


def parse_report_line(line: str) -> ClassificationReport:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 4:
        raise EngineError(f"malformed report line {line!r}")
    slot_raw, entity_id, label_raw, evidence_raw = parts
    values: dict[str, str] = {}
    for item in evidence_raw.split(";"):
        key, _, value = item.partition("=")
        values[key] = value

    def num(key: str) -> float | None:
        raw = values.get(key, "-")
        return None if raw in ("-", "") else float(raw)

    def name(key: str) -> str | None:
        raw = values.get(key, "-")
        return None if raw in ("-", "") else raw

    return ClassificationReport(
        int(slot_raw), entity_id, ModeLabel(label_raw),
        speed_kmh=num("speed"), coverage=num("coverage"),
        line_id=name("line"), group_id=name("group"), prior_p=num("prior"))


# -- the coordination task algorithm ------------------------------------------

def _speed_window(transitions: Sequence[Transition]) -> list[Transition] | None:
    """Smallest suffix of the jump history that covers three distinct
    regions; None when the history never does."""
    regions: set[str] = set()
    window: list[Transition] = []
    for t in reversed(transitions):
        window.append(t)
        regions.add(t.from_bts)
        regions.add(t.to_bts)
        if len(window) >= 2 and len(regions) >= 3:
            return window[::-1]
    return None


def _measure_speed(trace: PaTraceSource, topo: Topology,
                   agent_id: str) -> float | None:
    window = _speed_window(trace.recent_transitions(agent_id))
    if window is None:
        return None
    try:
        return travel_speed(topo, window)
    except (WindowTooShort, ZeroElapsed):
        return None


def _shared_path(graph: tg.TravelGraph,
                 members: Sequence[str]) -> tuple[tuple[int, str], ...]:
    """Deepest run of levels over which every member sits at one common
    cell, ending at the anchor level, with consecutive repeats collapsed."""
    raw: list[tuple[int, str]] = []
    for level in range(graph.max_level, graph.min_level - 1, -1):
        cells = {graph.cell_at(m, level) for m in members}
        if len(cells) != 1 or None in cells:
            break
        raw.append((level, next(iter(cells))))
    raw.reverse()
    collapsed: list[tuple[int, str]] = []
    for slot, cell in raw:
        if not collapsed or collapsed[-1][1] != cell:
            collapsed.append((slot, cell))
    return tuple(collapsed)


def _build_graph(task: CoordinationTask, trace: PaTraceSource,
                 config: EngineConfig) -> None:
    task.advance(TaskLifecycle.ENRICHING)
    graph = tg.build_initial(task.anchor_bts, task.slot, task.jumpers)
    tg.enrich_backward(graph, trace, config.depth)
    task.graph = graph
    for agent_id, _ in task.jumpers:
        task.speeds[agent_id] = None
    task.advance(TaskLifecycle.CLASSIFYING)


def _classify_jumpers(task: CoordinationTask, trace: PaTraceSource,
                      topo: Topology, config: EngineConfig) -> None:
    thresholds = config.thresholds
    for agent_id, _ in task.jumpers:
        speed = _measure_speed(trace, topo, agent_id)
        task.speeds[agent_id] = speed
        task.classes[agent_id] = speed_class(speed, thresholds)
    jumper_ids = {agent_id for agent_id, _ in task.jumpers}
    assert task.graph is not None
    groups = tg.co_travel_groups(task.graph, config.shared_levels)
    task.groups = [group for group in groups
                   if any(agent in jumper_ids for agent in group)]


def _requests_for(task: CoordinationTask,
                  request_ids: Callable[[], str]) -> list[LineMatchRequest]:
    """One line-match request per co-travel group that contains at least
    one medium-speed jumper."""
    assert task.graph is not None
    requests = []
    for group in task.groups:
        if not any(task.classes.get(a) is SpeedClass.MEDIUM for a in group):
            continue
        path = _shared_path(task.graph, group)
        if not path:
            continue
        requests.append(LineMatchRequest(
            request_id=request_ids(), ca_id=task.task_id, epoch=task.slot,
            members=tuple(group), path=path))
    return requests


def _finalize_task(task: CoordinationTask,
                   replies: dict[str, LineMatchReply],
                   requests: Sequence[LineMatchRequest],
                   history: HistoryStore) -> list[ClassificationReport]:
    reply_of: dict[str, LineMatchReply] = {}
    for request in requests:
        reply = replies[request.request_id]
        for member in request.members:
            reply_of[member] = reply
    reports = []
    for agent_id, _ in task.jumpers:
        klass = task.classes[agent_id]
        reply = reply_of.get(agent_id)
        verdict = None
        coverage = line_id = group_id = None
        if reply is not None and klass is SpeedClass.MEDIUM:
            coverage, line_id, group_id = reply.coverage, reply.line_id, reply.group_id
            if reply.reason == REASON_GROUP_TOO_SMALL:
                # Too few co-movers to be a vehicle: no group evidence,
                # the agent resolves individually.
                verdict = None
                group_id = None
            else:
                verdict = reply.verdict
        prior = history.prior(agent_id)
        label = decide_mode(klass, verdict, prior)
        reports.append(ClassificationReport(
            slot=task.slot, entity_id=agent_id, label=label,
            speed_kmh=task.speeds[agent_id], coverage=coverage,
            line_id=line_id, group_id=group_id,
            prior_p=prior.p_public if prior.support > 0 else None))
    task.advance(TaskLifecycle.REPORTED)
    task.advance(TaskLifecycle.DEAD)
    return reports


def ca_run(task: CoordinationTask, trace: PaTraceSource, topo: Topology,
           ptm: PtmState, history: HistoryStore,
           config: EngineConfig) -> list[ClassificationReport]:
    """Run a single coordination task to completion: graph, speeds, the
    transit-manager round for medium-speed groups, one report per jumper,
    then death.  Degraded inputs (short histories, unknown traces) yield
    unresolved labels rather than raising."""
    counter = iter(range(1, 10 ** 9))
    _build_graph(task, trace, config)
    _classify_jumpers(task, trace, topo, config)
    requests = _requests_for(task, lambda: f"{task.task_id}-r{next(counter)}")
    replies = {r.request_id: ptm_resolve(ptm, r, topo) for r in requests}
    return _finalize_task(task, replies, requests, history)


# -- the engine ----------------------------------------------------------------

@dataclass
class EngineResult:
    reports: list[ClassificationReport] = field(default_factory=list)
    history: HistoryStore | None = None
    anomalies: list[str] = field(default_factory=list)
    messages: list[EngineMessage] = field(default_factory=list)

    def report_text(self) -> str:
        lines = [r.format_line() for r in self.reports]
        return "\n".join(lines) + ("\n" if lines else "")

    def final_labels(self) -> dict[str, ModeLabel]:
        labels: dict[str, ModeLabel] = {}
        for report in self.reports:
            labels[report.entity_id] = report.label
        return labels


class Engine:
    def __init__(self, topo: Topology, config: EngineConfig,
                 history: HistoryStore | None = None,
                 graph_hook: Callable[[CoordinationTask], None] | None = None,
                 record_messages: bool = False):
        config.validate()
        self.topo = topo
        self.config = config
        self.history = history if history is not None else HistoryStore(
            slot_len=config.slot_len)
        self.graph_hook = graph_hook
        self.record_messages = record_messages
        self.registry = TraceRegistry()
        self.ptm = PtmState(theta=config.theta, group_min=config.group_min)
        self.messages: list[EngineMessage] = []
        self.anomalies: list[str] = []
        self.reports: list[ClassificationReport] = []
        self._request_counter = 0

    def _next_request_id(self) -> str:
        self._request_counter += 1
        return f"r{self._request_counter:06d}"

    def _execution_order(self,
                         tasks: list[CoordinationTask]) -> list[CoordinationTask]:
        # Graph building and speed measurement touch no shared state, so
        # any order must produce identical output; tests override this to
        # prove it.
        return tasks

    # -- per-epoch steps ----------------------------------------------------

    def _keep_last_per_slot(self, transitions: Sequence[Transition]) -> list[Transition]:
        kept: dict[tuple[str, int], Transition] = {}
        extra = 0
        for t in transitions:
            if (t.entity_id, t.slot) in kept:
                extra += 1
            kept[(t.entity_id, t.slot)] = t
        if extra:
            self.anomalies.append(
                f"{extra} extra jumps inside single slots collapsed to the "
                f"latest arrival (an agent occupies one cell per slot)")
        return list(kept.values())

    def _register_observation(self, obs: LocationObservation, slot: int) -> None:
        state = self.registry.state(obs.entity_id)
        state.record_arrival(slot, obs.bts_id)
        state.last_active_slot = slot
        if not state.trip_open:
            state.trip_open = True
            state.trip_start_slot = slot
            state.trip_transitions = 0
            state.trip_label = ModeLabel.UNRESOLVED
            state.trip_evidence = TripEvidence()
        self.history.record_observation(obs)

    def _close_trip(self, state: PersonalAgentState, close_slot: int) -> None:
        label = state.trip_label
        if label is ModeLabel.UNRESOLVED and state.trip_transitions == 0:
            label = ModeLabel.STATIC
        path = tuple(
            (slot, cell)
            for slot, cell in zip(state.arrival_slots, state.arrival_cells)
            if slot >= state.trip_start_slot)
        evidence = state.trip_evidence
        self.reports.append(ClassificationReport(
            slot=close_slot, entity_id=state.entity_id, label=label,
            speed_kmh=evidence.speed_kmh, coverage=evidence.coverage,
            line_id=evidence.line_id, group_id=evidence.group_id))
        if label is not ModeLabel.UNRESOLVED:
            trip = TripRecord(state.entity_id, path, label, evidence)
            if label in (ModeLabel.PUBLIC_TRANSPORT, ModeLabel.PRIVATE_CAR):
                update_prior(self.history, state.entity_id, trip)
            else:
                self.history.add_trip(trip)
        if self.record_messages:
            self.messages.append(EngineMessage(
                MsgKind.TRIP_CLOSED, f"pa:{state.entity_id}", "hdm", None,
                {"slot": close_slot, "label": label.value}))
        self.ptm.retire_entity(state.entity_id)
        state.trip_open = False

    def _run_epoch(self, slot: int,
                   observations: Sequence[LocationObservation],
                   transitions: Sequence[Transition]) -> None:
        self.registry.current_slot = slot
        for obs in observations:
            self._register_observation(obs, slot)
        for t in transitions:
            self.registry.state(t.entity_id).transitions.append(t)
            self.registry.state(t.entity_id).trip_transitions += 1

        tasks: list[CoordinationTask] = []
        by_destination: dict[str, list[Transition]] = {}
        for t in transitions:
            by_destination.setdefault(t.to_bts, []).append(t)
        for bts_id in sorted(by_destination):
            spawned = bts_epoch(bts_id, by_destination[bts_id])
            for task in spawned:
                if self.record_messages:
                    self.messages.append(EngineMessage(
                        MsgKind.JUMP_LIST, f"bts:{bts_id}", task.task_id, None,
                        {"jumpers": task.jumpers}))
            tasks.extend(spawned)

        # Independent phase: graphs and speeds, any execution order.
        for task in self._execution_order(tasks):
            trace = _LoggingTrace(self.registry, task.task_id, self)
            _build_graph(task, trace, self.config)
            _classify_jumpers(task, trace, self.topo, self.config)
            if self.graph_hook is not None:
                self.graph_hook(task)

        # Single-writer transit-manager round, canonical task order.
        requests: list[LineMatchRequest] = []
        requests_by_task: dict[str, list[LineMatchRequest]] = {}
        for task in tasks:
            task_requests = _requests_for(task, self._next_request_id)
            requests_by_task[task.task_id] = task_requests
            requests.extend(task_requests)
        replies: dict[str, LineMatchReply] = {}
        for request in sorted(requests, key=lambda r: (r.ca_id, r.request_id)):
            if self.record_messages:
                self.messages.append(EngineMessage(
                    MsgKind.LINE_MATCH_REQUEST, request.ca_id, "ptm",
                    request.request_id,
                    {"members": request.members, "path": request.path}))
            reply = ptm_resolve(self.ptm, request, self.topo)
            replies[request.request_id] = reply
            if self.record_messages:
                self.messages.append(EngineMessage(
                    MsgKind.LINE_MATCH_REPLY, "ptm", request.ca_id,
                    request.request_id, reply))

        # Reports in canonical task order; tasks die here.
        for task in tasks:
            for report in _finalize_task(task, replies,
                                         requests_by_task[task.task_id],
                                         self.history):
                self.reports.append(report)
                if self.record_messages:
                    self.messages.append(EngineMessage(
                        MsgKind.CLASSIFICATION_REPORT, task.task_id, "engine",
                        None, report))
                if report.label is not ModeLabel.UNRESOLVED:
                    state = self.registry.state(report.entity_id)
                    state.trip_label = report.label
                    state.trip_evidence = TripEvidence(
                        report.speed_kmh, report.coverage,
                        report.line_id, report.group_id)

        for entity_id in sorted(self.registry.agents):
            state = self.registry.agents[entity_id]
            if state.trip_open and slot - state.last_active_slot >= self.config.gap_slots:
                self._close_trip(state, slot)
        self.ptm.prune(slot, self.config.gap_slots)

    def run(self, observations: Sequence[LocationObservation]) -> EngineResult:
        batch = observations_to_transitions(observations, self.config.slot_len,
                                            verify_sorted=True)
        for note in batch.dropped:
            self.anomalies.append(f"{note.where}: {note.reason}")
        kept = self._keep_last_per_slot(batch.transitions)

        obs_by_slot: dict[int, list[LocationObservation]] = {}
        for obs in observations:
            obs_by_slot.setdefault(int(obs.timestamp // self.config.slot_len),
                                   []).append(obs)
        trans_by_slot: dict[int, list[Transition]] = {}
        for t in kept:
            trans_by_slot.setdefault(t.slot, []).append(t)

        for slot in sorted(set(obs_by_slot) | set(trans_by_slot)):
            self._run_epoch(slot, obs_by_slot.get(slot, ()),
                            trans_by_slot.get(slot, ()))

        if obs_by_slot or trans_by_slot:
            flush_slot = max(set(obs_by_slot) | set(trans_by_slot)) + self.config.gap_slots
            for entity_id in sorted(self.registry.agents):
                state = self.registry.agents[entity_id]
                if state.trip_open:
                    self._close_trip(state, flush_slot)

        return EngineResult(reports=self.reports, history=self.history,
                            anomalies=self.anomalies, messages=self.messages)


def run_engine(observations: Sequence[LocationObservation], topo: Topology,
               config: EngineConfig | None = None,
               history: HistoryStore | None = None,
               graph_hook: Callable[[CoordinationTask], None] | None = None,
               record_messages: bool = False) -> EngineResult:
    """Run the full pipeline over a sorted observation log.

    Raises :class:`cellmotion.cdr.UnsortedInput` when the log is out of
    order and :class:`ConfigInvalid` for bad parameters; everything else
    degrades to unresolved labels instead of failing.
    """
    engine = Engine(topo, config or EngineConfig(), history=history,
                    graph_hook=graph_hook, record_messages=record_messages)
    return engine.run(observations)
