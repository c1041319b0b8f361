"""Aircraft localization over crowdsourced, unsynchronized receiver networks.

The pipeline: ingest transmission records, opportunistically synchronize
sensor pairs from position-bearing traffic, localize transmitters by
hyperbolic (TDoA) positioning over the paired sensors, and score the
predictions. A synthetic-world generator provides exact oracles for
verification at desk scale.
"""

from .dataset import (
    AircraftInfo,
    Measurement,
    RawSample,
    SensorInfo,
    SensorTable,
    TransmissionRecord,
)
from .evaluate import EvalConfig, EvalReport, position_error, score
from .geo import (
    SPEED_OF_LIGHT_MPS,
    EcefPosition,
    GeoPosition,
    ecef_to_geodetic,
    geodetic_to_ecef,
    propagation_delay,
)
from .locate import (
    LocalizationResult,
    LocateConfig,
    PairEquation,
    Prediction,
    localize_stream,
    solve_position,
)
from .sync import OffsetSample, PairGraph, PairOffsetTracker, SyncConfig, build_pair_graph
from .synth import ClockModel, Scenario, Trajectory, generate, reference_scenarios

__version__ = "0.1.0"

__all__ = [
    "AircraftInfo",
    "ClockModel",
    "EcefPosition",
    "EvalConfig",
    "EvalReport",
    "GeoPosition",
    "LocalizationResult",
    "LocateConfig",
    "Measurement",
    "OffsetSample",
    "PairEquation",
    "PairGraph",
    "PairOffsetTracker",
    "Prediction",
    "RawSample",
    "Scenario",
    "SensorInfo",
    "SensorTable",
    "SPEED_OF_LIGHT_MPS",
    "SyncConfig",
    "Trajectory",
    "TransmissionRecord",
    "build_pair_graph",
    "ecef_to_geodetic",
    "generate",
    "geodetic_to_ecef",
    "localize_stream",
    "position_error",
    "propagation_delay",
    "reference_scenarios",
    "score",
    "solve_position",
    "__version__",
]
