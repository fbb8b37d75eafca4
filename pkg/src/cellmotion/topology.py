"""City model: BTS cells on a planar frame, cell adjacency, transit lines
and the speed thresholds that split slow, medium and fast travel.

Coordinates are meters in a flat city frame rather than geodetic
latitude/longitude; distances stay exact and fixtures stay hand-checkable.
A topology is immutable after construction and safe to share between any
number of readers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .cdr import Transition

DEFAULT_WALK_MAX_KMH = 7.0
DEFAULT_MEDIUM_MAX_KMH = 45.0


class TopologyError(Exception):
    """Base class for topology construction and query failures."""


class DuplicateCellId(TopologyError):
    def __init__(self, cell_id: str):
        super().__init__(f"duplicate cell id {cell_id!r}")
        self.cell_id = cell_id


class DanglingAdjacency(TopologyError):
    def __init__(self, cell_id: str):
        super().__init__(f"adjacency references unknown cell {cell_id!r}")
        self.cell_id = cell_id


class UnknownLineCell(TopologyError):
    def __init__(self, line_id: str, cell_id: str):
        super().__init__(f"line {line_id!r} references unknown cell {cell_id!r}")
        self.line_id = line_id
        self.cell_id = cell_id


class NonAdjacentLineStep(TopologyError):
    def __init__(self, line_id: str, index: int):
        super().__init__(f"line {line_id!r} step {index} joins non-adjacent cells")
        self.line_id = line_id
        self.index = index


class UnknownCell(TopologyError):
    def __init__(self, cell_id: str):
        super().__init__(f"unknown cell {cell_id!r}")
        self.cell_id = cell_id


class TopologyFormatError(TopologyError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyPath(TopologyError):
    def __init__(self) -> None:
        super().__init__("path must contain at least one cell")


class WindowTooShort(TopologyError):
    def __init__(self, regions: int):
        super().__init__(f"speed window covers {regions} distinct regions, "
                         f"need at least 3")
        self.regions = regions


class ZeroElapsed(TopologyError):
    def __init__(self) -> None:
        super().__init__("speed window has zero total elapsed time")


class DegeneratePercentiles(UserWarning):
    """Calibration percentiles coincide; defaults were used instead."""


@dataclass(frozen=True)
class BtsCell:
    id: str
    centroid_x: float
    centroid_y: float
    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise TopologyError(f"cell {self.id!r} needs a positive radius")


@dataclass(frozen=True)
class SpeedThresholds:
    """Boundaries between the slow / medium / fast speed bands, km/h.

    Defaults quantify a brisk walk and an urban speed limit; calibration
    from observed speeds overrides them per deployment area.
    """

    walk_max: float = DEFAULT_WALK_MAX_KMH
    medium_max: float = DEFAULT_MEDIUM_MAX_KMH

    def __post_init__(self) -> None:
        if not 0 < self.walk_max < self.medium_max:
            raise TopologyError(
                f"need 0 < walk_max < medium_max, got "
                f"({self.walk_max}, {self.medium_max})")


@dataclass(frozen=True)
class TransitLine:
    id: str
    cells: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.cells) < 2:
            raise TopologyError(f"line {self.id!r} needs at least 2 cells")
        for i in range(1, len(self.cells)):
            if self.cells[i] == self.cells[i - 1]:
                raise TopologyError(
                    f"line {self.id!r} repeats cell {self.cells[i]!r} at step {i}")


class Topology:
    """Validated, immutable city model."""

    def __init__(self,
                 cells: Iterable[BtsCell],
                 adjacency: Iterable[tuple[str, str]] = (),
                 lines: Iterable[TransitLine] = (),
                 thresholds: SpeedThresholds = SpeedThresholds()):
        cell_map: dict[str, BtsCell] = {}
        for cell in cells:
            if cell.id in cell_map:
                raise DuplicateCellId(cell.id)
            cell_map[cell.id] = cell
        adj: dict[str, set[str]] = {cid: set() for cid in cell_map}
        for a, b in adjacency:
            if a not in cell_map:
                raise DanglingAdjacency(a)
            if b not in cell_map:
                raise DanglingAdjacency(b)
            if a == b:
                raise TopologyError(f"cell {a!r} cannot be adjacent to itself")
            adj[a].add(b)
            adj[b].add(a)
        line_map: dict[str, TransitLine] = {}
        for line in lines:
            if line.id in line_map:
                raise TopologyError(f"duplicate line id {line.id!r}")
            for cell_id in line.cells:
                if cell_id not in cell_map:
                    raise UnknownLineCell(line.id, cell_id)
            for i in range(1, len(line.cells)):
                if line.cells[i] not in adj[line.cells[i - 1]]:
                    raise NonAdjacentLineStep(line.id, i)
            line_map[line.id] = line
        self._cells = cell_map
        self._adjacency = {cid: frozenset(partners) for cid, partners in adj.items()}
        self._lines = line_map
        self.thresholds = thresholds

    @property
    def cells(self) -> Mapping[str, BtsCell]:
        return self._cells

    @property
    def lines(self) -> Mapping[str, TransitLine]:
        return self._lines

    @property
    def adjacency_pairs(self) -> list[tuple[str, str]]:
        pairs = {tuple(sorted((a, b)))
                 for a, partners in self._adjacency.items() for b in partners}
        return sorted(pairs)  # type: ignore[arg-type]

    def cell(self, cell_id: str) -> BtsCell:
        try:
            return self._cells[cell_id]
        except KeyError:
            raise UnknownCell(cell_id) from None

    def adjacent(self, a: str, b: str) -> bool:
        return b in self._adjacency.get(a, frozenset())

    def distance(self, a: str, b: str) -> float:
        ca, cb = self.cell(a), self.cell(b)
        return math.hypot(ca.centroid_x - cb.centroid_x,
                          ca.centroid_y - cb.centroid_y)

    def with_thresholds(self, thresholds: SpeedThresholds) -> "Topology":
        return Topology(self._cells.values(), self.adjacency_pairs,
                        self._lines.values(), thresholds)


def neighbors(topo: Topology, cell_id: str) -> set[str]:
    """The adjacency partners of a cell."""
    topo.cell(cell_id)
    return set(topo._adjacency[cell_id])


def _longest_shared_run(path: Sequence[str], line_cells: Sequence[str]) -> int:
    # Longest common contiguous cell subsequence, counted in steps: a run
    # of m shared consecutive cells is m - 1 shared consecutive steps.
    best = 0
    prev = [0] * (len(line_cells) + 1)
    for cell in path:
        cur = [0] * (len(line_cells) + 1)
        for j, line_cell in enumerate(line_cells, start=1):
            if cell == line_cell:
                cur[j] = prev[j - 1] + 1
                if cur[j] > best:
                    best = cur[j]
        prev = cur
    return max(0, best - 1)


def line_coverage(topo: Topology,
                  path: Sequence[str]) -> tuple[str | None, float]:
    """How much of a path rides some transit line.

    Returns the line whose longest run of consecutive steps (in either
    direction) covers the largest fraction of the path's steps, and that
    fraction.  A single-cell path has no steps and yields (None, 0.0).
    Ties go to the lexicographically smallest line id.
    """
    if len(path) == 0:
        raise EmptyPath()
    for cell_id in path:
        topo.cell(cell_id)
    if len(path) == 1:
        return None, 0.0
    steps = len(path) - 1
    best_line: str | None = None
    best_run = 0
    for line_id in sorted(topo.lines):
        cells = topo.lines[line_id].cells
        run = max(_longest_shared_run(path, cells),
                  _longest_shared_run(path, cells[::-1]))
        if run > best_run:
            best_run, best_line = run, line_id
    if best_run == 0:
        return None, 0.0
    return best_line, best_run / steps


def travel_speed(topo: Topology, transitions: Sequence[Transition]) -> float:
    """Average speed over a window of jumps, km/h.

    The window must cover at least three distinct regions (at least two
    transitions); speed is total centroid distance over total elapsed time,
    so dwell time inside cells between recorded jumps is not counted.
    """
    window = list(transitions)
    if not window:
        raise WindowTooShort(0)
    entities = {t.entity_id for t in window}
    if len(entities) > 1:
        raise ValueError(f"speed window mixes entities {sorted(entities)}")
    regions: set[str] = set()
    for t in window:
        regions.add(t.from_bts)
        regions.add(t.to_bts)
    if len(window) < 2 or len(regions) < 3:
        raise WindowTooShort(len(regions))
    total_m = sum(topo.distance(t.from_bts, t.to_bts) for t in window)
    total_s = sum(t.elapsed for t in window)
    if total_s <= 0:
        raise ZeroElapsed()
    return total_m / total_s * 3.6


def _nearest_rank(sorted_samples: Sequence[float], percentile: float) -> float:
    rank = math.ceil(percentile / 100.0 * len(sorted_samples))
    return sorted_samples[max(rank, 1) - 1]


def calibrate_thresholds(topo: Topology,
                         observed_speeds: Iterable[float]) -> SpeedThresholds:
    """Fit the slow/medium/fast boundaries to speeds seen in the area.

    With at least 30 samples the 33rd and 67th nearest-rank percentiles
    become the boundaries; with fewer, or when the percentiles coincide,
    the defaults are returned (the degenerate case is reported as a
    warning).
    """
    samples = sorted(observed_speeds)
    if len(samples) < 30:
        return SpeedThresholds()
    walk = _nearest_rank(samples, 33)
    medium = _nearest_rank(samples, 67)
    if not 0 < walk < medium:
        warnings.warn(
            DegeneratePercentiles(
                f"33rd/67th percentiles degenerate at ({walk}, {medium}); "
                f"falling back to defaults"))
        return SpeedThresholds()
    return SpeedThresholds(walk, medium)


def load_topology(text: str) -> Topology:
    """Parse the line-oriented topology format.

    Directives: ``cell <id> <x_m> <y_m> <radius_m>``, ``adj <a> <b>``,
    ``line <id> <cell> <cell> ...``; ``#`` starts a comment.  The
    canonical file order is cells, then adjacency, then lines, but the
    parser accepts any order and validates references at the end.
    """
    cells: list[BtsCell] = []
    adjacency: list[tuple[str, str]] = []
    lines: list[TransitLine] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        kind = tokens[0]
        if kind == "cell":
            if len(tokens) != 5:
                raise TopologyFormatError(line_no, "cell needs id, x, y, radius")
            try:
                cells.append(BtsCell(tokens[1], float(tokens[2]),
                                     float(tokens[3]), float(tokens[4])))
            except ValueError:
                raise TopologyFormatError(line_no, "bad cell coordinates") from None
        elif kind == "adj":
            if len(tokens) != 3:
                raise TopologyFormatError(line_no, "adj needs two cell ids")
            adjacency.append((tokens[1], tokens[2]))
        elif kind == "line":
            if len(tokens) < 4:
                raise TopologyFormatError(line_no, "line needs an id and >= 2 cells")
            lines.append(TransitLine(tokens[1], tuple(tokens[2:])))
        else:
            raise TopologyFormatError(line_no, f"unknown directive {kind!r}")
    return Topology(cells, adjacency, lines)


def _num(value: float) -> str:
    return f"{value:g}"


def save_topology(topo: Topology) -> str:
    """Render a topology in canonical file order."""
    out: list[str] = []
    for cell_id in sorted(topo.cells):
        c = topo.cells[cell_id]
        out.append(f"cell {c.id} {_num(c.centroid_x)} {_num(c.centroid_y)} "
                   f"{_num(c.radius)}")
    for a, b in topo.adjacency_pairs:
        out.append(f"adj {a} {b}")
    for line_id in sorted(topo.lines):
        out.append(f"line {line_id} " + " ".join(topo.lines[line_id].cells))
    return "\n".join(out) + ("\n" if out else "")
