//! Numerical engine for one-dimensional limit models of thin curved elastic rods.
//!
//! The crate covers adapted frames on space curves, normalized cross-section meshes,
//! the cross-section cell problems, the limit rod energies and their minimization, and
//! a harness that evaluates the three-dimensional elastic energy on recovery sequences.

pub mod cell_problems;
pub mod cross_section;
pub mod error;
pub mod frame_geometry;
pub mod gamma_harness;
pub mod quadrature;
pub mod rod_functionals;
pub mod rod_minimizer;
pub mod sparse;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use cell_problems::{CellData, CellProblem, CellSolution, Material};
pub use cross_section::{make_section, normalize_section, torsional_rigidity, SectionMesh, SectionPreset};
pub use error::{Error, Result};
pub use frame_geometry::{adapted_frame, make_curve, CurvePreset, FrameMode, FramePoint, FramedCurve, Regime, ScalingRegime};
pub use gamma_harness::{
    convergence_study, energy_3d, extract_fields, recovery_intermediate, recovery_ring, recovery_standard,
    reference_energy, ConvergenceRecord, Deformation3D, NonlinearDensity, QuadratureSpec,
};
pub use rod_functionals::{AnalyticSpec, AnalyticState, FourierSeries, QForm, RodState};
pub use rod_minimizer::{minimize_quadratic, minimize_von_karman, BoundarySpec, LoadCase, MinimizationReport, SolverOptions};
