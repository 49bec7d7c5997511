"""ringmux: multiplexed heralded single-photon source simulator."""

from .dynamics import (
    DynamicsParams,
    TrajectoryRecord,
    TwoModeState,
    calibrate_pump,
    master_equation_evolve,
    pump_energy,
    release_probabilities,
    run_trajectory,
)
from .geometry import DeviceGeometry, ModeTriplet, make_geometry, mode_offsets
from .inference import (
    acceptance_verdict,
    estimate_state,
    g2_of,
    pump_kernel,
    pump_update,
    release_kernel,
    release_multinomial,
    release_update,
    storage_update,
    thin_detector,
)
from .protocol import (
    ControlAction,
    KernelContext,
    ProtocolConfig,
    decide_action,
    evaluate_protocol,
    frequency_multiplex_combine,
    modes_for_target,
    optimize,
    release_success_closed_form,
)
from .tables import BinOutcomeTable, build_bin_table

__all__ = [
    "BinOutcomeTable",
    "ControlAction",
    "DeviceGeometry",
    "DynamicsParams",
    "KernelContext",
    "ModeTriplet",
    "ProtocolConfig",
    "TrajectoryRecord",
    "TwoModeState",
    "acceptance_verdict",
    "build_bin_table",
    "calibrate_pump",
    "decide_action",
    "estimate_state",
    "evaluate_protocol",
    "frequency_multiplex_combine",
    "g2_of",
    "make_geometry",
    "master_equation_evolve",
    "mode_offsets",
    "modes_for_target",
    "optimize",
    "pump_energy",
    "pump_kernel",
    "pump_update",
    "release_kernel",
    "release_multinomial",
    "release_probabilities",
    "release_success_closed_form",
    "release_update",
    "run_trajectory",
    "storage_update",
    "thin_detector",
]

__version__ = "0.1.0"
