//! Desk-scale training harness on synthetic scenes: builds interleaved
//! VQA/pose sample streams, runs optimization, and evaluates held-out
//! trajectory error and direction-QA accuracy. Shared by the `train-synth`
//! CLI subcommand and the training-dynamics experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PoseCamError, Result};
use crate::geom::{RigidPose, Trajectory};
use crate::loss::LossWeights;
use crate::metrics::ate;
use crate::net::{NetConfig, OptimConfig, TinyNet, TrainSample, ANSWER_TOKENS};
use crate::sampling::{jitter_indices, uniform_indices};
use crate::schedule::{LossMask, Supervision};
use crate::synth::{gen_scene, SynthScene, TrajectoryKind};

/// Everything the training loop needs beyond the model/optimizer/loss
/// configs: data-generation shape, schedule, and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_train_scenes: usize,
    pub n_eval_scenes: usize,
    pub frames_per_scene: usize,
    /// Frames selected per training sample.
    pub frames_per_sample: usize,
    /// Independent index draws per scene per epoch.
    pub samples_per_scene: usize,
    pub step_scale: f64,
    pub noise_sigma: f64,
    /// Seed of the fixed pose-to-feature rendering maps, shared by all
    /// scenes so the feature space is consistent.
    pub projection_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Fraction of training scenes carrying pose labels. Joint supervision
    /// applies only to these; the rest train as VQA-only, so interleaved
    /// pose-only samples are the main source of pose signal, as in the
    /// full-scale mixture.
    pub pose_fraction: f64,
    /// Fraction of training scenes carrying direction-QA labels (taken from
    /// the end of the scene list, so it can be disjoint from the pose
    /// subset). Scenes with both labels train jointly.
    pub vqa_fraction: f64,
    /// Interleaving ratio: extra pose-only samples per pose-capable sample.
    pub beta: f64,
    /// Frame-index jitter ratio.
    pub alpha: f64,
    pub seed: u64,
    pub supervision: Supervision,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_train_scenes: 48,
            n_eval_scenes: 64,
            frames_per_scene: 16,
            frames_per_sample: 5,
            samples_per_scene: 4,
            step_scale: 1.0,
            noise_sigma: 0.01,
            projection_seed: 7,
            steps: 2600,
            batch_size: 8,
            pose_fraction: 0.5,
            vqa_fraction: 0.25,
            beta: 1.0,
            alpha: 0.005,
            seed: 0,
            supervision: Supervision::Joint,
            eval_every: 650,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        net.validate()?;
        if self.frames_per_sample < 2 || self.frames_per_sample > self.frames_per_scene {
            return Err(PoseCamError::Config(
                "need 2 <= frames_per_sample <= frames_per_scene".into(),
            ));
        }
        if self.n_train_scenes == 0 || self.n_eval_scenes == 0 || self.samples_per_scene == 0 {
            return Err(PoseCamError::Config("scene/sample counts must be > 0".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(PoseCamError::Config(
                "steps, batch_size and eval_every must be > 0".into(),
            ));
        }
        if !(self.beta >= 0.0) {
            return Err(PoseCamError::Config("beta must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.pose_fraction)
            || (self.supervision != Supervision::VqaOnly && self.pose_fraction == 0.0)
        {
            return Err(PoseCamError::Config(
                "pose_fraction must be in (0, 1] when pose supervision is active".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.vqa_fraction)
            || (self.supervision != Supervision::PoseOnly && self.vqa_fraction == 0.0)
        {
            return Err(PoseCamError::Config(
                "vqa_fraction must be in (0, 1] when QA supervision is active".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(PoseCamError::Config("alpha must be in [0, 1)".into()));
        }
        if !(self.step_scale > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(PoseCamError::Config(
                "step_scale must be > 0 and noise_sigma >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<crate::io::MetricsRow>,
    pub final_ate: f64,
    pub final_qa_acc: f64,
    pub net: TinyNet,
}

fn kind_for(i: usize) -> TrajectoryKind {
    match i % 3 {
        0 => TrajectoryKind::RandomWalk,
        1 => TrajectoryKind::Arc,
        _ => TrajectoryKind::Line,
    }
}

/// Generates a deterministic scene set; `salt` separates train and eval
/// pools drawn from the same base seed.
pub fn make_scenes(net: &NetConfig, cfg: &TrainConfig, salt: u64, count: usize) -> Result<Vec<SynthScene>> {
    (0..count)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64) << 20);
            gen_scene(
                kind_for(i),
                cfg.frames_per_scene,
                cfg.step_scale,
                net.visual_tokens_per_frame,
                net.hidden_dim,
                cfg.projection_seed,
                cfg.noise_sigma,
                true,
                &mut rng,
            )
        })
        .collect()
}

fn draw_sample<R: Rng>(
    scene: &SynthScene,
    cfg: &TrainConfig,
    mask: LossMask,
    rng: &mut R,
) -> Result<TrainSample> {
    let base = uniform_indices(cfg.frames_per_scene, cfg.frames_per_sample)?;
    let indices = jitter_indices(&base, cfg.frames_per_scene, cfg.alpha, rng)?;
    let features = scene.gather_features(&indices)?;
    let gt = scene.gt_encodings(&indices)?;
    let answer = if mask.ntp_weight == 1 {
        Some(scene.qa_label_for(&indices)?.token_id())
    } else {
        None
    };
    Ok(TrainSample {
        features,
        n_frames: indices.len(),
        gt,
        metric: scene.metric,
        answer,
        mask,
    })
}

/// Scenes carrying pose labels: the first `round(pose_fraction * n)`,
/// at least one. Trajectory kinds cycle by index, so the subset stays mixed.
fn n_pose_scenes(cfg: &TrainConfig) -> usize {
    ((cfg.pose_fraction * cfg.n_train_scenes as f64).round() as usize)
        .clamp(1, cfg.n_train_scenes)
}

/// Scenes carrying QA labels: the last `round(vqa_fraction * n)`, at least
/// one. Taking them from the end lets the QA and pose subsets be disjoint
/// at small fractions, mirroring a mixture where pose pseudo-labels are
/// plentiful and QA annotation is scarce.
fn n_vqa_scenes(cfg: &TrainConfig) -> usize {
    ((cfg.vqa_fraction * cfg.n_train_scenes as f64).round() as usize)
        .clamp(1, cfg.n_train_scenes)
}

/// One epoch's worth of samples, shuffled. Base draws are supervised by
/// whichever labels the scene carries (pose subset at the front, QA subset
/// at the back, both where they overlap); the interleaving then adds
/// `floor(beta * M̂)` pose-only draws, where M̂ counts the epoch's
/// pose-capable base samples.
fn build_epoch<R: Rng>(
    scenes: &[SynthScene],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TrainSample>> {
    const VQA: LossMask = LossMask { ntp_weight: 1, pose_weight: 0 };
    const POSE: LossMask = LossMask { ntp_weight: 0, pose_weight: 1 };
    const JOINT: LossMask = LossMask { ntp_weight: 1, pose_weight: 1 };
    let n_pose = n_pose_scenes(cfg);
    let vqa_start = scenes.len() - n_vqa_scenes(cfg);
    let mut samples = Vec::new();
    let mut pose_capable = 0usize;
    for (i, scene) in scenes.iter().enumerate() {
        let has_pose = i < n_pose && cfg.supervision != Supervision::VqaOnly;
        let has_vqa = i >= vqa_start && cfg.supervision != Supervision::PoseOnly;
        let mask = match (has_pose, has_vqa) {
            (true, true) => JOINT,
            (true, false) => POSE,
            (false, true) => VQA,
            (false, false) => continue,
        };
        if mask.pose_weight == 1 {
            pose_capable += cfg.samples_per_scene;
        }
        for _ in 0..cfg.samples_per_scene {
            samples.push(draw_sample(scene, cfg, mask, rng)?);
        }
    }
    if cfg.supervision != Supervision::VqaOnly {
        let extra = (cfg.beta * pose_capable as f64).floor() as usize;
        for _ in 0..extra {
            let scene = &scenes[rng.random_range(0..n_pose)];
            samples.push(draw_sample(scene, cfg, POSE, rng)?);
        }
    }
    samples.shuffle(rng);
    Ok(samples)
}

/// Held-out evaluation: mean ATE over eval scenes (uniform frame selection,
/// Sim(3)-aligned) and direction-QA accuracy.
pub fn eval_model(net: &TinyNet, scenes: &[SynthScene], frames_per_sample: usize) -> Result<(f64, f64)> {
    let mut ate_sum = 0.0;
    let mut correct = 0usize;
    for scene in scenes {
        let indices = uniform_indices(scene.trajectory.len(), frames_per_sample)?;
        let features = scene.gather_features(&indices)?;
        let (pred, logits) = net.predict(&features, indices.len(), true)?;
        let gt = scene.trajectory.subsample(&indices)?;

        let pred_traj = Trajectory::new(
            pred.iter()
                .enumerate()
                .map(|(i, e)| (i as f64, RigidPose::new(e.q, e.t)))
                .collect(),
        )?;
        ate_sum += match ate(&pred_traj, &gt) {
            Ok(a) => a,
            // collinear predictions: fall back to translation-only
            // alignment so an untrained model still gets a finite score
            Err(_) => centered_rmse(&pred_traj, &gt),
        };

        let logits = logits.ok_or_else(|| PoseCamError::Numerical("missing logits".into()))?;
        let mut best = ANSWER_TOKENS[0];
        for &tok in &ANSWER_TOKENS {
            if logits[tok] > logits[best] {
                best = tok;
            }
        }
        if best == scene.qa_label_for(&indices)?.token_id() {
            correct += 1;
        }
    }
    Ok((
        ate_sum / scenes.len() as f64,
        correct as f64 / scenes.len() as f64,
    ))
}

fn centered_rmse(pred: &Trajectory, gt: &Trajectory) -> f64 {
    let p = pred.translations();
    let g = gt.translations();
    let n = p.len() as f64;
    let pm = p.iter().sum::<nalgebra::Vector3<f64>>() / n;
    let gm = g.iter().sum::<nalgebra::Vector3<f64>>() / n;
    let mse = p
        .iter()
        .zip(&g)
        .map(|(pi, gi)| ((pi - pm) - (gi - gm)).norm_squared())
        .sum::<f64>()
        / n;
    mse.sqrt()
}

/// Runs one full training experiment from a validated config.
pub fn run_training(
    net_cfg: &NetConfig,
    optim: &OptimConfig,
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(net_cfg)?;
    let train_scenes = make_scenes(net_cfg, cfg, 1, cfg.n_train_scenes)?;
    let eval_scenes = make_scenes(net_cfg, cfg, 2, cfg.n_eval_scenes)?;

    let mut net = TinyNet::new(*net_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    let mut metrics = Vec::new();
    let mut epoch = build_epoch(&train_scenes, cfg, &mut rng)?;
    let mut cursor = 0usize;
    for step in 1..=cfg.steps {
        if cursor + cfg.batch_size > epoch.len() {
            epoch = build_epoch(&train_scenes, cfg, &mut rng)?;
            cursor = 0;
        }
        let batch = &epoch[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let (stats, _) = net.train_step(batch, weights, optim)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (eval_ate, eval_qa) = eval_model(&net, &eval_scenes, cfg.frames_per_sample)?;
            metrics.push(crate::io::MetricsRow {
                step,
                train_loss: stats.total,
                eval_ate,
                eval_qa_acc: eval_qa,
            });
        }
    }
    let last = metrics.last().expect("steps >= 1 guarantees one eval");
    Ok(TrainOutcome {
        final_ate: last.eval_ate,
        final_qa_acc: last.eval_qa_acc,
        net,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net_cfg() -> NetConfig {
        NetConfig {
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            visual_tokens_per_frame: 1,
            vocab_size: 8,
            head_layers: 1,
            mlp_mult: 2,
            pose_tokens_at_inference: true,
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            n_train_scenes: 4,
            n_eval_scenes: 3,
            frames_per_scene: 10,
            frames_per_sample: 4,
            samples_per_scene: 2,
            steps: 6,
            batch_size: 4,
            eval_every: 3,
            vqa_fraction: 1.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn run_training_is_deterministic() {
        let net = tiny_net_cfg();
        let cfg = tiny_train_cfg();
        let a = run_training(&net, &OptimConfig::default(), &LossWeights::default(), &cfg).unwrap();
        let b = run_training(&net, &OptimConfig::default(), &LossWeights::default(), &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.net.param_values(), b.net.param_values());
    }

    #[test]
    fn seed_changes_outcome() {
        let net = tiny_net_cfg();
        let cfg = tiny_train_cfg();
        let cfg2 = TrainConfig { seed: 1, ..cfg.clone() };
        let a = run_training(&net, &OptimConfig::default(), &LossWeights::default(), &cfg).unwrap();
        let b = run_training(&net, &OptimConfig::default(), &LossWeights::default(), &cfg2).unwrap();
        assert_ne!(a.metrics, b.metrics);
    }

    #[test]
    fn vqa_only_epoch_has_no_pose_supervision() {
        let net = tiny_net_cfg();
        let cfg = TrainConfig {
            supervision: Supervision::VqaOnly,
            ..tiny_train_cfg()
        };
        let scenes = make_scenes(&net, &cfg, 1, cfg.n_train_scenes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let epoch = build_epoch(&scenes, &cfg, &mut rng).unwrap();
        assert_eq!(epoch.len(), 8); // no beta augmentation without pose sources
        assert!(epoch.iter().all(|s| s.mask.pose_weight == 0 && s.mask.ntp_weight == 1));
    }

    #[test]
    fn beta_augments_epoch_with_pose_only_samples() {
        let net = tiny_net_cfg();
        let cfg = TrainConfig {
            beta: 2.0,
            pose_fraction: 1.0,
            ..tiny_train_cfg()
        };
        let scenes = make_scenes(&net, &cfg, 1, cfg.n_train_scenes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let epoch = build_epoch(&scenes, &cfg, &mut rng).unwrap();
        // 8 joint + floor(2.0 * 8) pose-only
        assert_eq!(epoch.len(), 24);
        let pose_only = epoch
            .iter()
            .filter(|s| s.mask.ntp_weight == 0 && s.mask.pose_weight == 1)
            .count();
        assert_eq!(pose_only, 16);
    }

    #[test]
    fn pose_fraction_splits_joint_epoch() {
        let net = tiny_net_cfg();
        let cfg = TrainConfig {
            pose_fraction: 0.5,
            beta: 1.0,
            ..tiny_train_cfg()
        };
        let scenes = make_scenes(&net, &cfg, 1, cfg.n_train_scenes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let epoch = build_epoch(&scenes, &cfg, &mut rng).unwrap();
        // 2 pose scenes x 2 joint + 2 scenes x 2 vqa + floor(1.0 * 4) pose-only
        assert_eq!(epoch.len(), 12);
        let joint = epoch.iter().filter(|s| s.mask == LossMask { ntp_weight: 1, pose_weight: 1 }).count();
        let vqa = epoch.iter().filter(|s| s.mask == LossMask { ntp_weight: 1, pose_weight: 0 }).count();
        let pose = epoch.iter().filter(|s| s.mask == LossMask { ntp_weight: 0, pose_weight: 1 }).count();
        assert_eq!((joint, vqa, pose), (4, 4, 4));
    }

    #[test]
    fn eval_model_returns_finite_scores_untrained() {
        let net_cfg = tiny_net_cfg();
        let cfg = tiny_train_cfg();
        let scenes = make_scenes(&net_cfg, &cfg, 2, 3).unwrap();
        let net = TinyNet::new(net_cfg, 0).unwrap();
        let (a, q) = eval_model(&net, &scenes, cfg.frames_per_sample).unwrap();
        assert!(a.is_finite() && a >= 0.0);
        assert!((0.0..=1.0).contains(&q));
    }
}
