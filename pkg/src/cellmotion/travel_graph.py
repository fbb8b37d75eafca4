"""Leveled multi-edge travel graphs.

A travel graph records which agents moved where, slot by slot.  Nodes are
(cell, slot) pairs; a node's slot is its level.  Edges always point
forward in time, connect consecutive levels, and carry the id of the
agent that moved, so two agents taking the same hop produce two parallel
edges.  A graph starts from a single anchor node (the arrival cell of the
jump that triggered it) and grows backward in time by querying agent
traces, level by level, down to a configurable depth.

Level -1 can appear when the anchoring jump arrives in the very first
slot; backward enrichment itself never descends below level 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence


class TravelGraphError(Exception):
    pass


class EmptyJumperList(TravelGraphError):
    def __init__(self) -> None:
        super().__init__("a coordination graph needs at least one jumper")


class SelfJump(TravelGraphError):
    def __init__(self, agent_id: str):
        super().__init__(f"agent {agent_id!r} cannot jump from the anchor cell "
                         f"to itself")
        self.agent_id = agent_id


class KTooSmall(TravelGraphError):
    def __init__(self, k: int):
        super().__init__(f"co-travel grouping needs k >= 2, got {k}")
        self.k = k


@dataclass(frozen=True)
class TravelNode:
    bts_id: str
    slot: int


@dataclass(frozen=True)
class TravelEdge:
    src: TravelNode
    dst: TravelNode
    label: str


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str


@dataclass
class EnrichmentReport:
    """Completeness accounting for one enrichment pass: trace queries that
    came back unknown and therefore terminated an agent's chain."""

    unknown: list[tuple[str, int]] = field(default_factory=list)

    @property
    def unknown_count(self) -> int:
        return len(self.unknown)


class TraceSource(Protocol):
    """Where enrichment looks up agent positions.

    ``cell_of`` answers "where was this agent at this level" (None when
    unknown); ``agents_at`` answers the reverse, "who was at this cell at
    this level", and feeds the growth of node associations.
    """

    def cell_of(self, agent_id: str, level: int) -> str | None: ...

    def agents_at(self, cell_id: str, level: int) -> Iterable[str]: ...


@dataclass
class MappingTrace:
    """Dict-backed trace source for tests and offline graph work."""

    cells: dict[tuple[str, int], str] = field(default_factory=dict)

    def cell_of(self, agent_id: str, level: int) -> str | None:
        return self.cells.get((agent_id, level))

    def agents_at(self, cell_id: str, level: int) -> Iterable[str]:
        return sorted(agent for (agent, lvl), cell in self.cells.items()
                      if lvl == level and cell == cell_id)


class TravelGraph:
    """Mutable while its owning coordination task builds it, then frozen
    by convention and shared read-only."""

    def __init__(self, anchor: TravelNode, max_level: int | None = None):
        self.anchor = anchor
        self.max_level = anchor.slot if max_level is None else max_level
        self.nodes: set[TravelNode] = {anchor}
        self.edges: set[TravelEdge] = set()

    def add_node(self, node: TravelNode) -> TravelNode:
        self.nodes.add(node)
        return node

    def add_edge(self, src: TravelNode, dst: TravelNode, label: str) -> TravelEdge:
        self.nodes.add(src)
        self.nodes.add(dst)
        edge = TravelEdge(src, dst, label)
        self.edges.add(edge)
        return edge

    @property
    def min_level(self) -> int:
        return min(node.slot for node in self.nodes)

    def agents(self) -> list[str]:
        return sorted({edge.label for edge in self.edges})

    def nodes_at(self, level: int) -> list[TravelNode]:
        return sorted((n for n in self.nodes if n.slot == level),
                      key=lambda n: n.bts_id)

    def cell_at(self, agent_id: str, level: int) -> str | None:
        """The cell this agent's edges place it at for a level, preferring
        the incoming edge when both sides are present."""
        fallback: str | None = None
        for edge in self.edges:
            if edge.label != agent_id:
                continue
            if edge.dst.slot == level:
                return edge.dst.bts_id
            if edge.src.slot == level:
                fallback = edge.src.bts_id
        return fallback

    def sorted_edges(self) -> list[TravelEdge]:
        return sorted(self.edges,
                      key=lambda e: (e.dst.slot, e.src.bts_id, e.dst.bts_id, e.label))


def build_initial(anchor_bts: str, slot: int,
                  jumpers: Sequence[tuple[str, str]]) -> TravelGraph:
    """The graph as it exists the moment a coordination task is created:
    the anchor node plus one labeled edge per jumper from its source cell
    at the previous level."""
    if not jumpers:
        raise EmptyJumperList()
    anchor = TravelNode(anchor_bts, slot)
    graph = TravelGraph(anchor)
    for agent_id, from_bts in jumpers:
        if from_bts == anchor_bts:
            raise SelfJump(agent_id)
        graph.add_edge(TravelNode(from_bts, slot - 1), anchor, agent_id)
    return graph


def enrich_backward(graph: TravelGraph,
                    trace_source: TraceSource,
                    depth: int,
                    report: EnrichmentReport | None = None) -> TravelGraph:
    """Grow the graph backward in time from agent traces.

    Level by level below the anchor: every agent associated with a node
    (it jumped out of that node, or the trace source reports it was
    co-located there) gets an incoming edge from its previous cell.
    Unknown trace entries terminate that agent's chain and are counted in
    the report.  Recursion stops at max(0, anchor - depth).  The pass is
    monotone and idempotent: rerunning it adds nothing.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    floor = max(0, graph.anchor.slot - depth)
    for level in range(graph.anchor.slot - 1, floor - 1, -1):
        for node in graph.nodes_at(level):
            associated = {e.label for e in graph.edges if e.src == node}
            associated.update(trace_source.agents_at(node.bts_id, level))
            if level - 1 < floor:
                continue
            for agent_id in sorted(associated):
                previous = trace_source.cell_of(agent_id, level - 1)
                if previous is None:
                    if report is not None:
                        report.unknown.append((agent_id, level - 1))
                    continue
                graph.add_edge(TravelNode(previous, level - 1), node, agent_id)
    return graph


def validate(graph: TravelGraph) -> list[Violation]:
    """Check the travel-graph rules; returns violations instead of raising.

    Rules: edges join consecutive levels; an agent occupies one edge per
    level; and an agent's edges place it at a single cell per level (the
    endpoint/occupancy consistency rule; this reading of the rule is an
    interpretation, hence the category name).
    """
    violations: list[Violation] = []
    for edge in graph.sorted_edges():
        if edge.dst.slot != edge.src.slot + 1:
            violations.append(Violation(
                "level-rule",
                f"edge {edge.src.bts_id}@{edge.src.slot} -> "
                f"{edge.dst.bts_id}@{edge.dst.slot} [{edge.label}] skips levels"))
        if edge.src not in graph.nodes or edge.dst not in graph.nodes:
            violations.append(Violation(
                "structure",
                f"edge endpoints missing from node set for label {edge.label}"))
    seen: dict[tuple[str, int], TravelEdge] = {}
    for edge in graph.sorted_edges():
        key = (edge.label, edge.dst.slot)
        if key in seen:
            violations.append(Violation(
                "label-uniqueness",
                f"agent {edge.label} has two edges into level {edge.dst.slot}"))
        else:
            seen[key] = edge
    for agent_id in graph.agents():
        cells_per_level: dict[int, set[str]] = {}
        for edge in graph.edges:
            if edge.label != agent_id:
                continue
            cells_per_level.setdefault(edge.dst.slot, set()).add(edge.dst.bts_id)
            cells_per_level.setdefault(edge.src.slot, set()).add(edge.src.bts_id)
        for level in sorted(cells_per_level):
            cells = cells_per_level[level]
            if len(cells) > 1:
                violations.append(Violation(
                    "cell-consistency-interpreted",
                    f"agent {agent_id} occupies {sorted(cells)} at level {level}"))
    return violations


def co_travel_groups(graph: TravelGraph, k: int) -> list[list[str]]:
    """Partition the graph's agents by identical node paths over the top k
    levels.  Agents whose path is not fully known over those levels become
    singletons.  The result is an order-independent partition, sorted by
    first member for determinism."""
    if k < 2:
        raise KTooSmall(k)
    top_levels = range(graph.max_level - k + 1, graph.max_level + 1)
    by_path: dict[tuple[str, ...], list[str]] = {}
    singletons: list[list[str]] = []
    for agent_id in graph.agents():
        path = tuple(graph.cell_at(agent_id, level) for level in top_levels)
        if any(cell is None for cell in path):
            singletons.append([agent_id])
        else:
            by_path.setdefault(path, []).append(agent_id)  # type: ignore[arg-type]
    groups = [sorted(members) for members in by_path.values()] + singletons
    return sorted(groups, key=lambda g: g[0])


def export_dot(graph: TravelGraph) -> str:
    """Graphviz rendering: nodes named ``<cell>_<slot>``, one edge statement
    per labeled edge, byte-stable ordering."""
    out = ["digraph travel_graph {"]
    for node in sorted(graph.nodes, key=lambda n: (n.slot, n.bts_id)):
        out.append(f'  "{node.bts_id}_{node.slot}";')
    for edge in graph.sorted_edges():
        out.append(f'  "{edge.src.bts_id}_{edge.src.slot}" -> '
                   f'"{edge.dst.bts_id}_{edge.dst.slot}" [label="{edge.label}"];')
    out.append("}")
    return "\n".join(out) + "\n"


def dump_edges(graph: TravelGraph) -> str:
    """Line-oriented edge dump for golden tests:
    ``edge <from_bts> <from_slot> <to_bts> <to_slot> <label>``."""
    out = [f"edge {e.src.bts_id} {e.src.slot} {e.dst.bts_id} {e.dst.slot} {e.label}"
           for e in graph.sorted_edges()]
    return "\n".join(out) + ("\n" if out else "")
