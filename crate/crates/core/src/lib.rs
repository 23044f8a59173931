//! Microscopic CO₂ emission toolkit: a reference operating-mode emission
//! engine, per-second extraction by cycle differencing, a compact neural
//! surrogate family, validation over synthetic driving cycles, and an
//! eco-driving model predictive controller built on the surrogate's gradients.

pub mod cycles;
pub mod dataset;
pub mod ecodrive;
pub mod extraction;
pub mod factors;
pub mod oracle;
pub mod surrogate;
pub mod validation;

pub use cycles::{CycleSpec, LabeledCycle, Strategy};
pub use dataset::{DatasetPartition, EmissionRecord};
pub use ecodrive::{EcoProblem, SolverOptions, Trajectory};
pub use factors::{DynamicsPoint, FactorGrid, FactorVector, Fuel, VehicleClass, VehicleType};
pub use oracle::{DrivingCycle, OpModeTable};
pub use surrogate::{MlpParameters, SurrogateFamily, TrainConfig};
pub use validation::{ErrorStats, ErrorSummary};
