//! Interleaved training plan: pose-only augmentation by ratio beta, per-sample
//! supervision flags and loss masks, and fully mixed batches.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PoseCamError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    VqaOnly,
    PoseOnly,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    UniformJitter,
    DynamicTemporal,
    CovisWalk,
}

/// One training sample: a data source plus how it is sampled and supervised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub source_id: usize,
    pub supervision: Supervision,
    pub sampler: SamplerKind,
    /// Photometric augmentation (color jitter / blur / grayscale analogue).
    pub augmentation: bool,
}

impl SampleSpec {
    /// Checks the supervision/sampler/augmentation coupling.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.supervision {
            Supervision::PoseOnly => {
                matches!(
                    self.sampler,
                    SamplerKind::DynamicTemporal | SamplerKind::CovisWalk
                ) && self.augmentation
            }
            Supervision::VqaOnly | Supervision::Joint => {
                self.sampler == SamplerKind::UniformJitter && !self.augmentation
            }
        };
        if ok {
            Ok(())
        } else {
            Err(PoseCamError::Config(format!(
                "inconsistent sample spec: {self:?}"
            )))
        }
    }
}

/// A manifest entry: one underlying data source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: usize,
    pub has_pose: bool,
    /// Sampler used when this source is drawn as a pose-only sample.
    pub pose_sampler: SamplerKind,
}

/// Per-sample loss gates; at least one is always active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossMask {
    pub ntp_weight: u8,
    pub pose_weight: u8,
}

pub fn loss_mask_for(spec: &SampleSpec) -> LossMask {
    match spec.supervision {
        Supervision::VqaOnly => LossMask {
            ntp_weight: 1,
            pose_weight: 0,
        },
        Supervision::PoseOnly => LossMask {
            ntp_weight: 0,
            pose_weight: 1,
        },
        Supervision::Joint => LossMask {
            ntp_weight: 1,
            pose_weight: 1,
        },
    }
}

/// Builds one epoch's sample plan: every manifest source once (joint where
/// pose labels exist, VQA-only otherwise) plus `floor(beta * M̂)` pose-only
/// samples drawn with replacement from the pose-annotated sources, shuffled.
pub fn build_interleaved_plan<R: Rng>(
    manifest: &[SourceSpec],
    beta: f64,
    rng: &mut R,
) -> Result<Vec<SampleSpec>> {
    if manifest.is_empty() {
        return Err(PoseCamError::Config("empty manifest".into()));
    }
    if !(beta >= 0.0) {
        return Err(PoseCamError::Config(format!("beta must be >= 0, got {beta}")));
    }
    let pose_sources: Vec<&SourceSpec> = manifest.iter().filter(|s| s.has_pose).collect();
    let m_hat = pose_sources.len();
    let n_aug = (beta * m_hat as f64).floor() as usize;
    if beta > 0.0 && m_hat == 0 {
        return Err(PoseCamError::Config(
            "beta > 0 but no pose-annotated sources in manifest".into(),
        ));
    }

    let mut plan: Vec<SampleSpec> = manifest
        .iter()
        .map(|s| SampleSpec {
            source_id: s.id,
            supervision: if s.has_pose {
                Supervision::Joint
            } else {
                Supervision::VqaOnly
            },
            sampler: SamplerKind::UniformJitter,
            augmentation: false,
        })
        .collect();
    for _ in 0..n_aug {
        let src = pose_sources[rng.random_range(0..m_hat)];
        plan.push(SampleSpec {
            source_id: src.id,
            supervision: Supervision::PoseOnly,
            sampler: src.pose_sampler,
            augmentation: true,
        });
    }
    plan.shuffle(rng);
    Ok(plan)
}

/// Chunks a (re-shuffled) plan into batches; every sample appears exactly
/// once per epoch. The final batch may be short.
pub fn make_batches<R: Rng>(
    plan: &[SampleSpec],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<SampleSpec>>> {
    if batch_size == 0 {
        return Err(PoseCamError::Config("batch_size must be >= 1".into()));
    }
    let mut shuffled = plan.to_vec();
    shuffled.shuffle(rng);
    Ok(shuffled
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect())
}
