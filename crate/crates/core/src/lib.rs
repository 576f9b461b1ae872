//! Augmented primal-dual dynamics for distributed optimization over
//! directed graphs, with tools that evaluate the transient cost functional
//! the nominal augmented controller minimizes.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix the common double-precision case.

pub mod convex;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod scalar;
pub mod simulate;

pub use convex::{
    kkt_residual, reference_solution, ConsensusProblem, CouplingProblem, Problem, ReferenceSolution,
    ScalarConvexFunction,
};
pub use cost::{
    control_cost_matrix, evaluate_cost, state_cost, storage_value, verify_identities, verify_optimality, ControlCostMatrix,
    CostBreakdown, IdentityReport, OptimalityReport, PerturbationOutcome, Reference, StateCostTerms,
};
pub use dynamics::{
    derivative, feedforward_transform, nominal_controller, outputs_of, positive_projection, vector_field,
    AugmentationProfile, Block, ControlInput, Controller, Layout, NominalController, OutputSnapshot,
    Perturbation, PerturbedController, System, SystemState, Variant,
};
pub use error::{Error, Result};
pub use graph::{incidence_matrix, weighted_laplacian, Graph, IncidenceMatrix, RoutingMatrix};
pub use linalg::Matrix;
pub use scalar::Scalar;
pub use simulate::{
    default_window, equilibrium_of, integrate, simulate, transient_metrics, Equilibrium, ProjectedField, RawTrajectory,
    Trajectory, TransientMetrics,
};

pub type Matrix64 = Matrix<f64>;
pub type Function64 = ScalarConvexFunction<f64>;
pub type Problem64 = Problem<f64>;
pub type System64 = System<f64>;
pub type Profile64 = AugmentationProfile<f64>;
pub type Trajectory64 = Trajectory<f64>;
