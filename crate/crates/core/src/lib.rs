//! Multi-modal domain-generalisation toolkit for motor fault diagnosis.
//!
//! Pipeline: [`synthgen`] produces synchronised vibration / current / acoustic
//! segments, [`preprocess`] turns them into network inputs, [`augment`]
//! performs cross-domain mixed fusion, [`encoders`] extract per-modality
//! features, [`disentangle`] and [`fusion`] implement the modality-level and
//! domain-level disentanglement with cross-attention fusion in between, and
//! [`harness`] trains, evaluates and runs ablations and sweeps.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod disentangle;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
pub use exec::Execution;

/// The three sensing modalities, in the fixed order used throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    #[serde(rename = "v")]
    Vibration,
    #[serde(rename = "c")]
    Current,
    #[serde(rename = "a")]
    Acoustic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Vibration, Modality::Current, Modality::Acoustic];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Vibration => "v",
            Modality::Current => "c",
            Modality::Acoustic => "a",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Vibration => 0,
            Modality::Current => 1,
            Modality::Acoustic => 2,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Vibration => "vibration",
            Modality::Current => "current",
            Modality::Acoustic => "acoustic",
        })
    }
}

/// Number of health-state classes.
pub const NUM_CLASSES: usize = 8;
