"""Cluster scheduling simulator: curves, traces, overheads, policies."""
from .curves import ThroughputCurve, default_library
from .overhead import EDL, IDEAL, STOP_RESUME, OverheadModel, transient_value
from .policies import ElasticTiresias, Static, Tiresias, make_policy
from .simulator import ClusterSim, Metrics, simulate
from .trace import JobSpec, Trace, generate_trace, read_trace, write_trace
