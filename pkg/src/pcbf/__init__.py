"""Predictive control barrier functions for layered (RoM -> FoM) safety filtering."""
from .barrier import (BarrierSpec, FilterResult, ObstacleField, constant_controller, halfspace_barrier,
                      lie_derivatives, obstacle_barrier, safety_filter, saturated_proportional)
from .dynamics import (ControlAffineModel, LayeredSystem, Trajectory, check_projection_consistency,
                       fom_closed_loop_field, integrate, make_double_integrator, make_single_integrator)
from .errors import (ConfigError, DivergenceError, FormatError, InfeasibleFilterError, PCBFError,
                     ShapeError, SingularityError, TrainingError)
from .predictor import (INFEASIBLE, DeltaOutcome, OptimizedDelta, PredictorConfig, RealtimeDelta,
                        optimize_delta, optimize_delta_many, realtime_step, rollout_margin, simulate,
                        simulate_many, tabulate_delta)

__all__ = [name for name in dir() if not name.startswith("_")]
