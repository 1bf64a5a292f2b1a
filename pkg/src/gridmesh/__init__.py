"""gridmesh: desk-scale IoT-cloud distribution system state estimation.

Emulated PMUs stream synchrophasor frames to edge Virtual Objects that
adapt their reporting rate to grid dynamics; a cloud-style service runs
WLS branch-current state estimation per received report, persists the
results, and issues commands over pub/sub. The bench harness reproduces
the bandwidth and latency-class analysis end to end.
"""

__version__ = "0.1.0"

from .wire import (  # noqa: F401
    GpsTimestamp,
    Phasor,
    PmuDataFrame,
    decode_frame,
    encode_frame,
    frame_size,
)
from .grid import (  # noqa: F401
    GridModel,
    ScenarioScript,
    TruthSeries,
    load_bundled,
    load_grid_model,
    run_scenario,
    solve_radial_power_flow,
)
