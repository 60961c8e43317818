"""Rectified-flow training, piecewise sampling, and anchored guidance solvers
on low-dimensional synthetic distributions."""

from .autodiff import (AutodiffError, ComputeTape, DimensionMismatch,
                       NonFiniteValue, ParameterStore, central_difference,
                       forward, grad_check, vjp)
from .flow import (ConstantVelocityField, LinearVelocityField,
                   MlpVelocityField, SyntheticDataset, TrainingConfig,
                   TrainingDiverged, VelocityField, flow_matching_loss,
                   interpolate, make_velocity_field, reflow, train_flow)
from .guidance import (GuidanceConfig, PiecewiseState, SolverReport,
                       advance_reference, anchored_fixed_point_straight,
                       anchored_piecewise_solve, contraction_estimate,
                       guided_ode_sample, noise_gradient_descent,
                       normalize_gradient, reference_update, target_update,
                       unanchored_fixed_point, vanilla_guided_velocity)
from .objectives import (ClassifierFamily, ClassifierObjective,
                         CompositeObjective, FeatureEncoder,
                         FeatureSimilarityObjective, GaussianObjective,
                         GuidanceObjective, NoiseAwareObjective,
                         QuadraticGrowthObjective, ZeroObjective,
                         composite_objective, feature_similarity_objective,
                         gaussian_objective, prop1_construction,
                         train_clean_classifier, train_feature_encoder,
                         train_noise_aware_classifier)
from .sampler import (TimeWindows, Trajectory, chain_window_vjps,
                      endpoint_vjp, euler_sample, piecewise_sample,
                      straightness_deviation, window_entry_vjp)

__version__ = "0.1.0"

__all__ = [
    "AutodiffError", "ComputeTape", "DimensionMismatch", "NonFiniteValue",
    "ParameterStore", "central_difference", "forward", "grad_check", "vjp",
    "ConstantVelocityField", "LinearVelocityField", "MlpVelocityField",
    "SyntheticDataset", "TrainingConfig", "TrainingDiverged", "VelocityField",
    "flow_matching_loss", "interpolate", "make_velocity_field", "reflow",
    "train_flow",
    "GuidanceConfig", "PiecewiseState", "SolverReport", "advance_reference",
    "anchored_fixed_point_straight", "anchored_piecewise_solve",
    "contraction_estimate", "guided_ode_sample", "noise_gradient_descent",
    "normalize_gradient", "reference_update", "target_update",
    "unanchored_fixed_point", "vanilla_guided_velocity",
    "ClassifierFamily", "ClassifierObjective", "CompositeObjective",
    "FeatureEncoder", "FeatureSimilarityObjective", "GaussianObjective",
    "GuidanceObjective", "NoiseAwareObjective", "QuadraticGrowthObjective",
    "ZeroObjective", "composite_objective", "feature_similarity_objective",
    "gaussian_objective", "prop1_construction", "train_clean_classifier",
    "train_feature_encoder", "train_noise_aware_classifier",
    "TimeWindows", "Trajectory", "chain_window_vjps", "endpoint_vjp",
    "euler_sample", "piecewise_sample", "straightness_deviation",
    "window_entry_vjp",
]
