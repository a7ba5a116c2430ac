//! Doubly robust evaluation and optimization of policies from pairwise
//! preference data, on finite synthetic environments where every population
//! quantity can be enumerated exactly.

pub mod datagen;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod json;
pub mod model;
pub mod nuisance;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod selftest;
pub mod testbeds;
pub mod train;

pub use error::{LabError, Result};
pub use json::Document;
pub use model::{Environment, Policy, PreferenceDataset, PreferenceModel, PreferenceTuple, RewardTable, VocabShape};
