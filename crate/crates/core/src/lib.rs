//! Continuous data assimilation (nudging) for POD-Galerkin reduced order
//! models of 2D incompressible flow on a periodic box.

pub mod dns;
pub mod error;
pub mod experiment;
pub mod field;
pub mod io;
pub mod observation;
pub mod plot;
pub mod pod;
pub mod rom;
pub mod signal;

pub use dns::{dns_run, DnsConfig, DnsOutput, Forcing, InitialCondition, SnapshotSet, TimeScheme};
pub use error::{Error, Result};
pub use field::{Grid, ScalarField, VelocityField};
pub use observation::{build_observation_stream, CellMeans, CoarseMesh, ObservationStream};
pub use pod::{build_pod, build_pod_with, Normalization, PodBasis, PodOptions};
pub use rom::{assemble, DaConfig, DaRun, RomOperators, RomStepper};
