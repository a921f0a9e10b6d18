from .base import DynamicsStrategy, ExtendedState, FlowState, StepResult, Walk, run_lanes
from .billiard import BilliardDynamics, TrajectoryRecord, TRAJECTORY_COLUMNS
from .birkhoff import (
    birkhoff_sums,
    birkhoff_discrete,
    birkhoff_interpolated,
    flow_sums,
    birkhoff_flow,
    induced_return,
    induced_excursions,
    ReturnResult,
    ExcursionSample,
)
