//! Vibration-based finite element model updating.
//!
//! The crate calibrates material parameters of 2D plane-strain structures so
//! that computed natural frequencies and mode shapes match measured ones. The
//! pipeline is:
//!
//! 1. [`mesh`]: structural model (nodes, quad4 elements, regions, constraints)
//! 2. [`assembly`]: affine parametric stiffness/mass `K(x) = K0 + sum x_i K_i`
//!    and exact elimination of fixed dofs and master-slave relations
//! 3. [`eigen`]: shift-invert Lanczos for the smallest eigenpairs, plus a
//!    dense oracle
//! 4. [`rom`]: local parametric reduced-order models built from the Lanczos
//!    subspace at an expansion point
//! 5. [`objective`]: MAC indicators, weighted residual and objective
//! 6. [`optimizer`]: trust-region loop over local ROMs and a black-box
//!    baseline
//! 7. [`sensitivity`]: residual Jacobian, scaled SVD, perturbation analysis
//!    and noise sweeps

pub mod assembly;
pub mod eigen;
pub mod error;
pub mod fixture;
pub mod mesh;
pub mod objective;
pub mod optimizer;
pub mod rom;
pub mod sensitivity;
pub mod sparse;

pub use assembly::{
    element_matrices, ConstrainedSystem, NullSpace, ParamSpace, Parameter, ParametricSystem,
    Property,
};
pub use eigen::{dense_oracle, solve_smallest, EigenOptions, EigenSolution};
pub use error::{Error, Result};
pub use mesh::{
    build_arch_on_piers, ArchGeometry, ConstraintSet, Direction, Dof, DofMap, MasterSlave,
    MaterialRegion, Mesh, Model, RegionId,
};
pub use objective::{
    mac, pair_modes, project_mode, residual, ModalTarget, Pairing, PairingMode, Residual,
    SensorMap, WeightScheme, WeightSpec,
};
pub use optimizer::{
    blackbox_baseline, solve_subproblem, update, BaselineOptions, StepRecord, Termination,
    TrustRegionOptions, UpdateResult,
};
pub use rom::LocalRom;
pub use sensitivity::{
    jacobian, noise_sweep, perturb_solution, svd_report, JacobianReport, NoiseSweepOptions,
    Perturbation, SvdReport, SweepRow,
};

/// Converts an eigenvalue `omega^2` (rad^2/s^2) to a frequency in Hz.
pub fn eigenvalue_to_hz(lambda: f64) -> f64 {
    lambda.max(0.0).sqrt() / (2.0 * std::f64::consts::PI)
}
