"""jumplab: simulate and interrogate dissipative evolution equations
driven by compensated Poisson jump noise on a discretized interval."""

from .spaces import GridSpace, Mode
from .noise import (CouplingKind, JumpCoupling, JumpStream, MarkSpace,
                    NoiseSpec, compensator_drift, g_norm_sq, sample_stream,
                    substream)
from .operators import (Condition, ConditionReport, MonotoneOperatorSpec,
                        OperatorKind, RegularizationParams, apply,
                        apply_regularized, check_condition, mollify,
                        pairing_with_self, regularization_error, yosida_flux)
from .integrator import (EnsembleSummary, NonConvergedError, SimConfig,
                         TrajectoryRecord, implicit_step, simulate,
                         simulate_coupled, simulate_ensemble)

__all__ = [
    "GridSpace", "Mode",
    "CouplingKind", "JumpCoupling", "JumpStream", "MarkSpace", "NoiseSpec",
    "compensator_drift", "g_norm_sq", "sample_stream", "substream",
    "Condition", "ConditionReport", "MonotoneOperatorSpec", "OperatorKind",
    "RegularizationParams", "apply", "apply_regularized", "check_condition",
    "mollify", "pairing_with_self", "regularization_error", "yosida_flux",
    "EnsembleSummary", "NonConvergedError", "SimConfig", "TrajectoryRecord",
    "implicit_step", "simulate", "simulate_coupled", "simulate_ensemble",
]
