"""Model-based fault detection for the arm."""

from .coordinator import CoordinationResult, TimeSlice, coordinate
from .engine import (
    DetectionParams,
    Engine,
    Health,
    HealthStatus,
    NoMatch,
    check_consistency,
    identify,
    propagate,
    read_health_jsonl,
    write_health_jsonl,
)
from .graph import AmbiguityGroup, ComponentGraph, analyze_ambiguity_groups, format_group_table
