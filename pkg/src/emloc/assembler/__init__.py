"""Offline map building from mapping traces."""

from .assemble import AssemblyConfig, AssemblyReport, assemble, assemble_with_report
from .colocation import CoLocationLink, detect_colocations
from .posegraph import Constraint, PoseGraphProblem, PoseGraphResult, optimize_graph
from .traces import DataTrace, GroundTruth, TraceFrame, load_ground_truth, load_trace, save_ground_truth, save_trace
from .visibility import DepthModel, compute_visibility, segment_blocked, trace_segments, visible_sets
from .vocabulary import build_vocabulary

__all__ = [
    "AssemblyConfig", "AssemblyReport", "CoLocationLink", "Constraint", "DataTrace", "DepthModel",
    "GroundTruth", "PoseGraphProblem", "PoseGraphResult", "TraceFrame", "assemble", "assemble_with_report",
    "build_vocabulary", "compute_visibility", "detect_colocations", "load_ground_truth", "load_trace",
    "optimize_graph", "save_ground_truth", "save_trace", "segment_blocked", "trace_segments", "visible_sets",
]
