//! Filter-function noise spectroscopy.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod error;
pub mod experiment;
pub mod filterfn;
pub mod fisher;
pub mod modulation;
pub mod ocf;
pub mod probe;
pub mod quad;
pub mod reconstruct;
pub mod simplex;
pub mod spectra;
pub mod tracking;

pub use error::{Error, Result};
pub use filterfn::{FilterFunction, FrequencyGrid};
pub use fisher::FisherOperator;
pub use modulation::{ContinuousModulation, ModulationSet, PulseSequence};
pub use probe::{MeasurementRecord, NoiseModel};
pub use reconstruct::{ReconstructionResult, Retention};
pub use spectra::{CompositeSignal, LorentzianComponent, SpectralDensity};
