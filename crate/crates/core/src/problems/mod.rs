//! Problem oracles.

pub mod composition;
pub mod dro;
pub mod mdp;
pub mod synthetic;

pub use composition::{CompositionProblem, CompositionSpec};
pub use dro::{DroDataset, DroProblem, UncertaintySet};
pub use mdp::{MdpProblem, TabularMdp};
pub use synthetic::{BiasProfile, SyntheticOracle, SyntheticSpec};
