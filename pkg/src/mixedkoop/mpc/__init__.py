"""Quadratic-program model predictive control of CAV jerk."""

from .controller import ConstraintSet, ControlResult, MpcWeights, SegmentController, build_qp, control_step
from .qp import (IterationLimitError, NotPositiveDefiniteError, QpError, QpInfeasibleError, QpProblem, QpSolution,
                 enumerate_active_sets, kkt_residual, solve_qp)

__all__ = [
    "ConstraintSet", "ControlResult", "IterationLimitError", "MpcWeights", "NotPositiveDefiniteError",
    "QpError", "QpInfeasibleError", "QpProblem", "QpSolution", "SegmentController", "build_qp",
    "control_step", "enumerate_active_sets", "kkt_residual", "solve_qp",
]
