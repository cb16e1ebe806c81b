"""
LAQ Simulator
Lazily aggregated quantized gradient descent over simulated workers.
"""

__version__ = "1.0.0"
__author__ = "LAQ Simulator Team"

from laq_sim.codec import QuantizedInnovation, WireMessage, quantize_innovation, decode_innovation
from laq_sim.criterion import SkipConfig, WorkerState, should_skip
from laq_sim.engine import RunConfig, Problem, run, validate_recipe
from laq_sim.metrics import TelemetryLog, export_csv, read_csv

__all__ = [
    "QuantizedInnovation", "WireMessage", "quantize_innovation", "decode_innovation",
    "SkipConfig", "WorkerState", "should_skip",
    "RunConfig", "Problem", "run", "validate_recipe",
    "TelemetryLog", "export_csv", "read_csv",
]
