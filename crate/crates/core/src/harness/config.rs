//! Plain-text `key = value` configuration with one section per module.
//!
//! ```text
//! [general]
//! preset = kitti
//!
//! [search]
//! r_min = 7.5
//! n_n_max = none
//! ```
//!
//! Values are applied on top of the chosen preset in file order; command
//! line overrides go through [`HarnessConfig::set`] afterwards.

use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::HistogramSpec;
use crate::detector::DEFAULT_ROUNDS;
use crate::loopsearch::SearchConfig;
use crate::registration::RegistrationParams;

use super::replay::ReplayConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config syntax: {0}")]
    Parse(String),
    #[error("unknown preset `{0}` (expected campus, kitti or desk)")]
    Preset(String),
    #[error("unknown key `{section}.{key}`")]
    UnknownKey { section: String, key: String },
    #[error("bad value `{value}` for `{section}.{key}`")]
    BadValue { section: String, key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub rounds: usize,
    /// Overrides the loop distance stored in dataset manifests.
    pub loop_distance: Option<f64>,
    /// Number of candidate detectors trained on different negative subsets.
    pub candidates: usize,
    pub seed: u64,
    pub fa_target: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            loop_distance: None,
            candidates: 50,
            seed: 0,
            fa_target: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub preset: String,
    pub descriptor: HistogramSpec,
    pub training: TrainingConfig,
    pub replay: ReplayConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self::preset("campus").unwrap()
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        section: section.into(),
        key: key.into(),
        value: value.into(),
    })
}

fn parse_list(section: &str, key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse(section, key, s))
        .collect()
}

fn parse_optional(section: &str, key: &str, value: &str) -> Result<Option<usize>, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "none" | "unbounded" | "" => Ok(None),
        v => parse(section, key, v).map(Some),
    }
}

impl HarnessConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let mut descriptor = HistogramSpec::default();
        let (search, registration) = match name {
            "campus" => (SearchConfig::campus(), RegistrationParams::campus()),
            "kitti" => {
                descriptor.r_max = 50.0;
                (SearchConfig::kitti(), RegistrationParams::kitti())
            }
            "desk" => (SearchConfig::campus(), RegistrationParams::desk()),
            other => return Err(ConfigError::Preset(other.into())),
        };
        Ok(Self {
            preset: name.into(),
            descriptor,
            training: TrainingConfig::default(),
            replay: ReplayConfig {
                search,
                registration,
                ..ReplayConfig::default()
            },
        })
    }

    /// Reads the `[general] preset` key first, then applies every other key.
    pub fn from_ini_str(text: &str) -> Result<Self, ConfigError> {
        Self::from_ini_str_with_preset(text, None)
    }

    /// Like [`from_ini_str`](Self::from_ini_str), but `preset`, when given,
    /// wins over the file's own `[general] preset`.
    pub fn from_ini_str_with_preset(text: &str, preset: Option<&str>) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let preset = preset
            .or_else(|| ini.section(Some("general")).and_then(|s| s.get("preset")))
            .unwrap_or("campus");
        let mut cfg = Self::preset(preset.trim())?;
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("general");
            for (key, value) in props.iter() {
                if section == "general" && key == "preset" {
                    continue;
                }
                cfg.set(section, key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_ini_str(&std::fs::read_to_string(path)?)
    }

    /// Applies `section.key=value`.
    pub fn set_dotted(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (lhs, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse(format!("expected section.key=value, got `{assignment}`")))?;
        let (section, key) = lhs
            .trim()
            .split_once('.')
            .ok_or_else(|| ConfigError::Parse(format!("expected section.key=value, got `{assignment}`")))?;
        self.set(section, key, value)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let p = |v: &str| parse::<f64>(section, key, v);
        let u = |v: &str| parse::<usize>(section, key, v);
        let s = &mut self.replay.search;
        let r = &mut self.replay.registration;
        match (section, key) {
            ("descriptor", "r_max") => self.descriptor.r_max = p(value)?,
            ("descriptor", "bins") => {
                let bins = parse_list(section, key, value)?;
                if bins.len() != self.descriptor.bin_widths.len() {
                    return Err(ConfigError::BadValue {
                        section: section.into(),
                        key: key.into(),
                        value: value.into(),
                    });
                }
                self.descriptor.bin_widths.copy_from_slice(&bins);
            }

            ("training", "rounds" | "T") => self.training.rounds = u(value)?,
            ("training", "loop_distance") => {
                self.training.loop_distance = match value.trim().to_ascii_lowercase().as_str() {
                    "none" | "" => None,
                    v => Some(p(v)?),
                }
            }
            ("training", "candidates") => self.training.candidates = u(value)?,
            ("training", "seed") => self.training.seed = parse(section, key, value)?,
            ("training", "fa_target") => self.training.fa_target = p(value)?,

            ("search", "r_min") => s.r_min = p(value)?,
            ("search", "beta") => s.beta = p(value)?,
            ("search", "p_min") => s.p_min = p(value)?,
            ("search", "n_v") => s.n_v = u(value)?,
            ("search", "n_n_max") => s.n_n_max = parse_optional(section, key, value)?,
            ("search", "alpha_min") => s.alpha_min = p(value)?,
            ("search", "n_ms") => s.n_ms = u(value)?,
            ("search", "r_ms") => s.r_ms = p(value)?,
            ("search", "n_start") => s.n_start = u(value)?,
            ("search", "n_buffer") => s.n_buffer = u(value)?,
            ("search", "seed") => s.seed = parse(section, key, value)?,

            ("filter", "voxel_size" | "l") => r.filter.voxel_size = p(value)?,
            ("filter", "z_lim") => r.filter.z_lim = p(value)?,
            ("filter", "i_lim") => r.filter.i_lim = p(value)?,
            ("filter", "r_lim") => r.filter.r_lim = p(value)?,
            ("filter", "n_p_max") => r.filter.n_p_max = u(value)?,
            ("filter", "seed") => r.filter.seed = parse(section, key, value)?,

            ("registration", "normal_radius") => r.normal_radius = p(value)?,
            ("registration", "fpfh_radius") => r.fpfh_radius = p(value)?,
            ("registration", "persistence_radii") => r.persistence_radii = parse_list(section, key, value)?,
            ("registration", "gamma") => r.gamma = p(value)?,
            ("registration", "ransac_iterations") => r.ransac_iterations = u(value)?,
            ("registration", "ransac_inlier_distance") => r.ransac_inlier_distance = p(value)?,
            ("registration", "icp_max_iterations") => r.icp_max_iterations = u(value)?,
            ("registration", "icp_epsilon") => r.icp_epsilon = p(value)?,
            ("registration", "icp_max_distance") => r.icp_max_distance = p(value)?,
            ("registration", "n_p_min") => r.n_p_min = u(value)?,
            ("registration", "n_inliers") => r.n_inliers = u(value)?,
            ("registration", "t_max") => r.t_max = p(value)?,
            ("registration", "icp_max_residual") => {
                r.icp_max_residual = match value.trim().to_ascii_lowercase().as_str() {
                    "none" | "" => None,
                    v => Some(p(v)?),
                }
            }
            ("registration", "seed") => r.seed = parse(section, key, value)?,

            ("replay", "step_sigma") => self.replay.step_sigma = p(value)?,
            ("replay", "local_hops") => self.replay.local_hops = parse_optional(section, key, value)?,
            ("replay", "optimize_iterations") => self.replay.optimize_iterations = u(value)?,
            ("replay", "optimize_tolerance") => self.replay.optimize_tolerance = p(value)?,
            ("replay", "max_loop_translation_error") => self.replay.max_loop_translation_error = p(value)?,
            ("replay", "max_loop_angle_error") => self.replay.max_loop_angle_error = p(value)?,
            ("replay", "loop_weight") => self.replay.loop_weight = p(value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    section: section.into(),
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.descriptor.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.replay.search.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.replay.registration.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.training;
        if t.rounds == 0 || t.candidates == 0 || t.loop_distance.is_some_and(|d| !(d >= 0.0)) || !(t.fa_target > 0.0 && t.fa_target <= 1.0) {
            return Err(ConfigError::Invalid("training section out of range".into()));
        }
        if !(self.replay.step_sigma >= 0.0) {
            return Err(ConfigError::Invalid("replay.step_sigma must be non-negative".into()));
        }
        if !(self.replay.loop_weight > 0.0) {
            return Err(ConfigError::Invalid("replay.loop_weight must be positive".into()));
        }
        Ok(())
    }
}
