//! Flat key-value run configuration (TOML syntax). Every key is optional; unset
//! keys fall back to the benchmark defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TrunkConfig;
use crate::ops::PoolKind;
use crate::policy::{PolicyConfig, PolicyKind};
use crate::stream::StreamConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // stream
    pub class_count: Option<usize>,
    pub frame_shape: Option<[usize; 4]>,
    pub mean_scene_length: Option<usize>,
    pub noise_sigma: Option<f32>,
    pub drift_rate: Option<f32>,
    pub stream_length: Option<usize>,
    pub seed: Option<u64>,

    // policy
    pub policy: Option<PolicyKind>,
    pub threshold: Option<f64>,
    pub confidence_thresholds: Option<Vec<f32>>,

    // model
    pub widths: Option<Vec<usize>>,
    pub kernel: Option<usize>,
    pub inter_pool: Option<usize>,
    pub inter_pool_kind: Option<PoolKind>,
    pub activation_offset: Option<f32>,
    pub head_grid: Option<Vec<usize>>,
    pub logit_scale: Option<f32>,

    // sweep
    pub thresholds: Option<Vec<f64>>,
    pub confidence_grid: Option<Vec<f32>>,
    pub tuning_length: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn stream_config(&self) -> StreamConfig {
        let d = StreamConfig::default();
        StreamConfig {
            class_count: self.class_count.unwrap_or(d.class_count),
            frame_shape: self.frame_shape.unwrap_or(d.frame_shape),
            mean_scene_length: self.mean_scene_length.unwrap_or(d.mean_scene_length),
            noise_sigma: self.noise_sigma.unwrap_or(d.noise_sigma),
            drift_rate: self.drift_rate.unwrap_or(d.drift_rate),
            stream_length: self.stream_length.unwrap_or(d.stream_length),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    pub fn trunk_config(&self) -> TrunkConfig {
        let d = TrunkConfig::default();
        TrunkConfig {
            widths: self.widths.clone().unwrap_or(d.widths),
            kernel: self.kernel.unwrap_or(d.kernel),
            inter_pool: self.inter_pool.unwrap_or(d.inter_pool),
            inter_pool_kind: self.inter_pool_kind.unwrap_or(d.inter_pool_kind),
            activation_offset: self.activation_offset.unwrap_or(d.activation_offset),
            head_grid: self.head_grid.clone().unwrap_or(d.head_grid),
            logit_scale: self.logit_scale.unwrap_or(d.logit_scale),
        }
    }

    /// Policy from the config; temporal policies need a `threshold`, the
    /// confidence policy needs `confidence_thresholds`.
    pub fn policy_config(&self) -> Result<PolicyConfig> {
        let kind = self.policy.unwrap_or(PolicyKind::TemporalPatience);
        let need = |what: &str| Error::Config(format!("policy `{}` requires `{what}`", kind.name()));
        Ok(match kind {
            PolicyKind::SingleExit => PolicyConfig::single_exit(),
            PolicyKind::Confidence => {
                PolicyConfig::confidence(self.confidence_thresholds.clone().ok_or_else(|| need("confidence_thresholds"))?)
            }
            PolicyKind::DifferenceDetection => {
                PolicyConfig::difference_detection(self.threshold.ok_or_else(|| need("threshold"))?)
            }
            PolicyKind::TemporalPatience => {
                PolicyConfig::temporal_patience(self.threshold.ok_or_else(|| need("threshold"))?)
            }
        })
    }
}
