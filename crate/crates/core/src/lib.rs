//! Cross-state ECG biometrics.
//!
//! The crate covers the whole pipeline from raw single-lead recordings to
//! authentication decisions:
//!
//! * [`data_io`] record files, manifests, synthetic subjects, splits
//! * [`preprocess`] Butterworth filtering, R-peak detection, segmentation, quality gating
//! * [`autodiff`] a small reverse-mode tensor engine
//! * [`model`] the multi-scale convolutional embedding network with self-attention
//! * [`losses`] focal loss and the truncated multi-similarity loss
//! * [`training`] Adam, plateau schedule, P×K batch sampling, the fit loop
//! * [`adaptive_auth`] enrollment and the three-factor adaptive threshold
//! * [`evaluate`] FAR/FRR/EER/AUC metrics, scenario and ablation runners
//! * [`cli`] the `crossstate` command line front end

pub mod adaptive_auth;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod model;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};

/// Physiological state of a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum State {
    Rest,
    Exercise,
}

impl State {
    pub fn as_str(self) -> &'static str {
        match self {
            State::Rest => "rest",
            State::Exercise => "exercise",
        }
    }

    /// Segment duration used for this state, in seconds.
    pub fn segment_seconds(self) -> f64 {
        match self {
            State::Rest => 6.0,
            State::Exercise => 4.0,
        }
    }

    /// Heart-rate band (bpm) the synthetic generator draws from.
    pub fn hr_band(self) -> (f64, f64) {
        match self {
            State::Rest => (60.0, 80.0),
            State::Exercise => (90.0, 150.0),
        }
    }
}

impl std::fmt::Display for State {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for State {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rest" => Ok(State::Rest),
            "exercise" => Ok(State::Exercise),
            other => Err(format!("unknown state '{other}'")),
        }
    }
}
