"""Travel-mode mining over BTS-level phone location events.

The pipeline: parse carrier CDR text or observation logs into login and
logout events, derive slot-indexed cell jumps, run the slot-synchronous
multi-agent engine (travel graphs, co-movement grouping, transit-line
matching) and label every entity as static, walking, public transport or
private car.  A deterministic synthetic-city simulator with ground truth
backs the test and demo suites.
"""

from .behavior import (
    HistoryStore,
    LineVerdict,
    ModeLabel,
    Prior,
    SpeedClass,
    TripRecord,
    decide_mode,
    detect_home_work,
    mine_companions,
    mine_periodic_routes,
    update_prior,
)
from .cdr import (
    CdrRecord,
    FieldMapping,
    LocationObservation,
    ObsKind,
    Transition,
    format_observation_log,
    observations_to_transitions,
    parse_cdr,
    parse_observation_log,
    records_to_observations,
    serialize_cdr,
)
from .engine import (
    ClassificationReport,
    EngineConfig,
    EngineResult,
    run_engine,
)
from .simulate import (
    EntitySpec,
    GroundTruth,
    ScenarioSpec,
    figure4_scenario,
    figure_city,
    simulate,
)
from .topology import (
    BtsCell,
    SpeedThresholds,
    Topology,
    TransitLine,
    calibrate_thresholds,
    line_coverage,
    load_topology,
    neighbors,
    save_topology,
    travel_speed,
)
from .travel_graph import (
    TravelGraph,
    TravelNode,
    build_initial,
    co_travel_groups,
    enrich_backward,
    export_dot,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "BtsCell",
    "CdrRecord",
    "ClassificationReport",
    "EngineConfig",
    "EngineResult",
    "EntitySpec",
    "FieldMapping",
    "GroundTruth",
    "HistoryStore",
    "LineVerdict",
    "LocationObservation",
    "ModeLabel",
    "ObsKind",
    "Prior",
    "ScenarioSpec",
    "SpeedClass",
    "SpeedThresholds",
    "Topology",
    "TransitLine",
    "Transition",
    "TravelGraph",
    "TravelNode",
    "TripRecord",
    "build_initial",
    "calibrate_thresholds",
    "co_travel_groups",
    "decide_mode",
    "detect_home_work",
    "enrich_backward",
    "export_dot",
    "figure4_scenario",
    "figure_city",
    "format_observation_log",
    "line_coverage",
    "load_topology",
    "mine_companions",
    "mine_periodic_routes",
    "neighbors",
    "observations_to_transitions",
    "parse_cdr",
    "parse_observation_log",
    "records_to_observations",
    "run_engine",
    "save_topology",
    "serialize_cdr",
    "simulate",
    "travel_speed",
    "update_prior",
    "validate",
]
