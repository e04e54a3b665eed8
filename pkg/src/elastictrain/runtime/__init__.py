"""Elastic training job runtime on a simulated clock."""
from .config import APPROXIMATE, CONSISTENT, RunConfig
from .job import ElasticJob, ProfileReport, RecoveryReport
from .scenario import ScenarioInvalid, ScenarioRunner, load_scenario, run_scenario
