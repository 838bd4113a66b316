//! Exact population gradient flow and its diagnostics.

pub mod conservation;
pub mod field;
pub mod integrate;
pub mod io;
pub mod mc;
pub mod plateau;

pub use conservation::{conservation_drift, conserved_quantities, ConservationDrift, ConservationLaw};
pub use field::{grad_merged, grad_separate, loss_of_matrix, population_loss, residual_matrix, FlowField};
pub use integrate::{default_dt, integrate, integrate_partial, FlowConfig, Integrator, Outcome, SnapshotSchedule, Trajectory};
pub use io::{csv_header, read_csv, write_csv};
pub use mc::{mc_gradient, mc_gradient_with, mc_loss, Execution, McEstimate, Sample};
pub use plateau::{detect_plateaus, drop_times, PlateauConfig, PlateauReport, PlateauSegment};
