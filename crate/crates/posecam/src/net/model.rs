//! Desk-scale causal transformer with per-frame pose tokens, a linear pose
//! projector, a self-attention camera head, and a toy next-token head.
//!
//! Every frame contributes its K visual tokens followed by one learnable
//! pose query (`c_first` for frame 1, `c_rest` otherwise); all frame blocks
//! precede the text tokens. The pose-token hidden states from the final
//! layer are projected and decoded into 9-D pose encodings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PoseCamError, Result};
use crate::geom::PoseEncoding;
use crate::loss::{d_bar_of_translations, ls_scale, LossWeights};
use crate::net::tape::{Tape, TensorId};
use crate::schedule::LossMask;

/// Token id the model sees at the question position.
pub const QUESTION_TOKEN: usize = 4;
/// Answer token ids, in the direction order `+x, -x, +y, -y`.
pub const ANSWER_TOKENS: [usize; 4] = [0, 1, 2, 3];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub visual_tokens_per_frame: usize,
    pub vocab_size: usize,
    pub head_layers: usize,
    /// MLP expansion factor in the backbone blocks.
    pub mlp_mult: usize,
    /// Append pose tokens at inference time as well as training. Dropping
    /// them reproduces the inference-conditioning ablation for pure VQA use.
    pub pose_tokens_at_inference: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_dim: 64,
            n_layers: 4,
            n_heads: 4,
            visual_tokens_per_frame: 4,
            vocab_size: 16,
            head_layers: 4,
            mlp_mult: 2,
            pose_tokens_at_inference: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(PoseCamError::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.visual_tokens_per_frame == 0 {
            return Err(PoseCamError::Config("K must be >= 1".into()));
        }
        if self.vocab_size <= QUESTION_TOKEN {
            return Err(PoseCamError::Config(format!(
                "vocab_size {} too small for the QA token ids",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
}

/// The two learnable pose queries.
#[derive(Debug, Clone)]
pub struct PoseQueries {
    pub c_first: Vec<f64>,
    pub c_rest: Vec<f64>,
}

/// Per-parameter gradient buffers, shapes matching the parameter registry.
#[derive(Debug, Clone)]
pub struct TapeGradients {
    pub per_param: Vec<Vec<f64>>,
}

/// Token layout bookkeeping produced by token assembly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    /// Position of each frame's pose token in the assembled sequence.
    pub pose_positions: Vec<usize>,
    /// Position of the first text token, if any.
    pub text_start: Option<usize>,
    pub seq_len: usize,
}

/// One training sample after sampling and feature rendering.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// Row-major `(n_frames * K) x H` frame features.
    pub features: Vec<f64>,
    pub n_frames: usize,
    /// Ground-truth pose encodings in first-frame coordinates, quaternions
    /// canonicalized. Required when `mask.pose_weight == 1`.
    pub gt: Vec<PoseEncoding>,
    pub metric: bool,
    /// Answer token id. Required when `mask.ntp_weight == 1`.
    pub answer: Option<usize>,
    pub mask: LossMask,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub total: f64,
    pub ntp: f64,
    pub pose: f64,
    pub n_ntp: usize,
    pub n_pose: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    /// The pose projector and camera head train at their own (typically
    /// 10x higher) rate.
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_backbone: 1e-3,
            lr_head: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TinyNet {
    pub config: NetConfig,
    defs: Vec<ParamDef>,
    values: Vec<Vec<f64>>,
    opt_m: Vec<Vec<f64>>,
    opt_v: Vec<Vec<f64>>,
    opt_step: u64,
}

impl TinyNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let mut defs = Vec::new();
        let mut def = |name: String, rows: usize, cols: usize, group: ParamGroup| {
            defs.push(ParamDef {
                name,
                rows,
                cols,
                group,
            });
        };
        def("embed".into(), config.vocab_size, h, ParamGroup::Backbone);
        def("c_first".into(), 1, h, ParamGroup::Backbone);
        def("c_rest".into(), 1, h, ParamGroup::Backbone);
        for l in 0..config.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                def(format!("l{l}.attn.{w}"), h, h, ParamGroup::Backbone);
            }
            def(format!("l{l}.norm1.g"), 1, h, ParamGroup::Backbone);
            def(format!("l{l}.norm2.g"), 1, h, ParamGroup::Backbone);
            def(format!("l{l}.mlp.w1"), h, h * config.mlp_mult, ParamGroup::Backbone);
            def(format!("l{l}.mlp.w2"), h * config.mlp_mult, h, ParamGroup::Backbone);
        }
        def("w_vocab".into(), h, config.vocab_size, ParamGroup::Backbone);
        def("w_p".into(), h, h, ParamGroup::Head);
        for l in 0..config.head_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                def(format!("head{l}.attn.{w}"), h, h, ParamGroup::Head);
            }
            def(format!("head{l}.norm.g"), 1, h, ParamGroup::Head);
        }
        def("head.out".into(), h, 9, ParamGroup::Head);
        def("head.out_b".into(), 1, 9, ParamGroup::Head);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<Vec<f64>> = defs
            .iter()
            .map(|d| {
                if d.name.ends_with(".g") {
                    vec![1.0; d.rows * d.cols]
                } else if d.name == "head.out_b" {
                    // identity-rotation prior: w component of the quaternion
                    let mut b = vec![0.0; 9];
                    b[3] = 1.0;
                    b
                } else {
                    let std = 1.0 / (d.rows as f64).sqrt();
                    (0..d.rows * d.cols)
                        .map(|_| {
                            // Box-Muller keeps us off rand_distr.
                            let u1: f64 = rng.random_range(1e-12..1.0);
                            let u2: f64 = rng.random_range(0.0..1.0);
                            std * (-2.0 * u1.ln()).sqrt()
                                * (2.0 * std::f64::consts::PI * u2).cos()
                        })
                        .collect()
                }
            })
            .collect();
        let zeros: Vec<Vec<f64>> = defs.iter().map(|d| vec![0.0; d.rows * d.cols]).collect();
        Ok(TinyNet {
            config,
            defs,
            opt_m: zeros.clone(),
            opt_v: zeros,
            opt_step: 0,
            values,
        })
    }

    pub fn param_defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn param_values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn param_values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.defs.iter().position(|d| d.name == name)
    }

    pub fn pose_queries(&self) -> PoseQueries {
        PoseQueries {
            c_first: self.values[self.param_index("c_first").unwrap()].clone(),
            c_rest: self.values[self.param_index("c_rest").unwrap()].clone(),
        }
    }

    /// Inserts every parameter as a grad leaf on `tape`; index-aligned with
    /// the parameter registry.
    fn insert_params(&self, tape: &mut Tape, requires_grad: bool) -> Vec<TensorId> {
        self.defs
            .iter()
            .zip(&self.values)
            .map(|(d, v)| tape.leaf(d.rows, d.cols, v.clone(), requires_grad))
            .collect()
    }

    /// Eq.-1 style token assembly: per frame its K visual tokens then the
    /// frame's pose query; all frame blocks precede the text tokens.
    fn assemble_tokens_on(
        &self,
        tape: &mut Tape,
        params: &[TensorId],
        features: TensorId,
        n_frames: usize,
        text_ids: &[usize],
        with_pose_tokens: bool,
    ) -> Result<(TensorId, IndexMap)> {
        let k = self.config.visual_tokens_per_frame;
        let (feat_rows, feat_cols) = tape.shape(features);
        if feat_rows != n_frames * k || feat_cols != self.config.hidden_dim {
            return Err(PoseCamError::InvalidInput(format!(
                "feature shape {feat_rows}x{feat_cols} does not match {n_frames} frames x {k} tokens x H={}",
                self.config.hidden_dim
            )));
        }
        let c_first = params[self.param_index("c_first").unwrap()];
        let c_rest = params[self.param_index("c_rest").unwrap()];
        let embed = params[self.param_index("embed").unwrap()];

        let mut parts = Vec::new();
        let mut pose_positions = Vec::with_capacity(n_frames);
        let mut pos = 0usize;
        for i in 0..n_frames {
            let rows: Vec<usize> = (i * k..(i + 1) * k).collect();
            parts.push(tape.gather_rows(features, &rows));
            pos += k;
            if with_pose_tokens {
                parts.push(if i == 0 { c_first } else { c_rest });
                pose_positions.push(pos);
                pos += 1;
            }
        }
        let text_start = (!text_ids.is_empty()).then_some(pos);
        if !text_ids.is_empty() {
            parts.push(tape.gather_rows(embed, text_ids));
            pos += text_ids.len();
        }
        let tokens = tape.concat_rows(&parts);
        Ok((
            tokens,
            IndexMap {
                pose_positions,
                text_start,
                seq_len: pos,
            },
        ))
    }

    fn attention_block(
        &self,
        tape: &mut Tape,
        params: &[TensorId],
        x: TensorId,
        prefix: &str,
        norm_name: &str,
        causal: bool,
    ) -> TensorId {
        let h = self.config.hidden_dim;
        let n_heads = self.config.n_heads;
        let dh = h / n_heads;
        let p = |name: &str| params[self.param_index(name).unwrap()];

        let g = p(&format!("{prefix}.{norm_name}.g"));
        let xn = tape.rms_norm(x, g);
        let q = tape.matmul(xn, p(&format!("{prefix}.attn.wq")));
        let k = tape.matmul(xn, p(&format!("{prefix}.attn.wk")));
        let v = tape.matmul(xn, p(&format!("{prefix}.attn.wv")));
        let mut heads = Vec::with_capacity(n_heads);
        for hd in 0..n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = tape.softmax_rows(scaled, causal);
            heads.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&heads);
        let out = tape.matmul(ctx, p(&format!("{prefix}.attn.wo")));
        tape.add(x, out)
    }

    /// Causal backbone: pre-norm attention + MLP blocks. A zero-layer config
    /// returns the assembled tokens unchanged.
    fn backbone_on(&self, tape: &mut Tape, params: &[TensorId], tokens: TensorId) -> TensorId {
        let mut x = tokens;
        let p = |name: &str| params[self.param_index(name).unwrap()];
        for l in 0..self.config.n_layers {
            x = self.attention_block(tape, params, x, &format!("l{l}"), "norm1", true);
            let g2 = p(&format!("l{l}.norm2.g"));
            let xn = tape.rms_norm(x, g2);
            let h1 = tape.matmul(xn, p(&format!("l{l}.mlp.w1")));
            let a = tape.tanh(h1);
            let h2 = tape.matmul(a, p(&format!("l{l}.mlp.w2")));
            x = tape.add(x, h2);
        }
        x
    }

    /// Pose-token hidden-state extraction, frame order preserved.
    fn slice_pose_hidden_on(
        &self,
        tape: &mut Tape,
        hidden: TensorId,
        index_map: &IndexMap,
    ) -> Result<TensorId> {
        let (rows, _) = tape.shape(hidden);
        if index_map.seq_len != rows {
            return Err(PoseCamError::InvalidInput(
                "stale index map: sequence length mismatch".into(),
            ));
        }
        Ok(tape.gather_rows(hidden, &index_map.pose_positions))
    }

    /// Projector + camera head: non-causal self-attention blocks over the N
    /// per-frame vectors, then a linear map to 9 outputs per frame.
    fn camera_head_on(&self, tape: &mut Tape, params: &[TensorId], pose_hidden: TensorId) -> TensorId {
        let p = |name: &str| params[self.param_index(name).unwrap()];
        let mut x = tape.matmul(pose_hidden, p("w_p"));
        for l in 0..self.config.head_layers {
            x = self.attention_block(tape, params, x, &format!("head{l}"), "norm", false);
        }
        let out = tape.matmul(x, p("head.out"));
        tape.add_row_broadcast(out, p("head.out_b"))
    }

    fn ntp_logits_on(
        &self,
        tape: &mut Tape,
        params: &[TensorId],
        hidden: TensorId,
        position: usize,
    ) -> TensorId {
        let p = |name: &str| params[self.param_index(name).unwrap()];
        let row = tape.gather_rows(hidden, &[position]);
        tape.matmul(row, p("w_vocab"))
    }

    /// Builds the full forward graph for one sample and returns the masked
    /// sample loss (scalar node) plus the unmasked component values.
    ///
    /// `pin_s_star` overrides the closed-form scale; the analytic path
    /// already treats `s*` as a constant, so pinning it to the base-point
    /// value gives finite differences the same stop-gradient semantics.
    fn sample_loss_on(
        &self,
        tape: &mut Tape,
        params: &[TensorId],
        sample: &TrainSample,
        weights: &LossWeights,
        pin_s_star: Option<f64>,
    ) -> Result<(TensorId, f64, f64)> {
        let h = self.config.hidden_dim;
        let features = tape.leaf(
            sample.n_frames * self.config.visual_tokens_per_frame,
            h,
            sample.features.clone(),
            false,
        );
        let needs_ntp = sample.mask.ntp_weight == 1;
        let needs_pose = sample.mask.pose_weight == 1;
        let text_ids: Vec<usize> = if needs_ntp { vec![QUESTION_TOKEN] } else { vec![] };
        let (tokens, index_map) =
            self.assemble_tokens_on(tape, params, features, sample.n_frames, &text_ids, true)?;
        let hidden = self.backbone_on(tape, params, tokens);

        let mut ntp_val = 0.0;
        let mut pose_val = 0.0;
        let mut terms: Vec<TensorId> = Vec::new();

        if needs_ntp {
            let answer = sample.answer.ok_or_else(|| {
                PoseCamError::InvalidInput("NTP-supervised sample without answer".into())
            })?;
            let q_pos = index_map.text_start.unwrap();
            let logits = self.ntp_logits_on(tape, params, hidden, q_pos);
            let ce = tape.cross_entropy_mean(logits, &[answer]);
            ntp_val = tape.value(ce)[0];
            terms.push(ce);
        }
        if needs_pose {
            let pose_hidden = self.slice_pose_hidden_on(tape, hidden, &index_map)?;
            let pred = self.camera_head_on(tape, params, pose_hidden);
            let (pose_term, val) =
                pose_loss_on_tape(tape, pred, &sample.gt, weights, sample.metric, pin_s_star)?;
            pose_val = val;
            let weighted = tape.scale(pose_term, weights.lambda_pose);
            terms.push(weighted);
        }
        let root = match terms.len() {
            0 => {
                return Err(PoseCamError::InvalidInput(
                    "sample with no active loss".into(),
                ))
            }
            1 => terms[0],
            _ => tape.add(terms[0], terms[1]),
        };
        Ok((root, ntp_val, pose_val))
    }

    /// Frozen-parameter inference: predicted pose encodings and, when a
    /// question token is appended, the answer logits.
    pub fn predict(
        &self,
        features: &[f64],
        n_frames: usize,
        with_question: bool,
    ) -> Result<(Vec<PoseEncoding>, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let params = self.insert_params(&mut tape, false);
        let h = self.config.hidden_dim;
        let feat = tape.leaf(
            n_frames * self.config.visual_tokens_per_frame,
            h,
            features.to_vec(),
            false,
        );
        let text_ids: Vec<usize> = if with_question { vec![QUESTION_TOKEN] } else { vec![] };
        let (tokens, index_map) = self.assemble_tokens_on(
            &mut tape,
            &params,
            feat,
            n_frames,
            &text_ids,
            self.config.pose_tokens_at_inference,
        )?;
        let hidden = self.backbone_on(&mut tape, &params, tokens);

        let poses = if self.config.pose_tokens_at_inference {
            let pose_hidden = self.slice_pose_hidden_on(&mut tape, hidden, &index_map)?;
            let pred = self.camera_head_on(&mut tape, &params, pose_hidden);
            tape.value(pred)
                .chunks(9)
                .map(|c| {
                    let mut a = [0.0; 9];
                    a.copy_from_slice(c);
                    PoseEncoding::from_array(&a)
                })
                .collect()
        } else {
            Vec::new()
        };
        let logits = if with_question {
            let q_pos = index_map.text_start.unwrap();
            let l = self.ntp_logits_on(&mut tape, &params, hidden, q_pos);
            Some(tape.value(l).to_vec())
        } else {
            None
        };
        Ok((poses, logits))
    }

    /// Accumulates masked-loss gradients over the batch and applies one
    /// adaptive update with per-group learning rates.
    pub fn train_step(
        &mut self,
        batch: &[TrainSample],
        weights: &LossWeights,
        optim: &OptimConfig,
    ) -> Result<(StepStats, TapeGradients)> {
        if batch.is_empty() {
            return Err(PoseCamError::InvalidInput("empty batch".into()));
        }
        let mut acc: Vec<Vec<f64>> = self
            .defs
            .iter()
            .map(|d| vec![0.0; d.rows * d.cols])
            .collect();
        let mut stats = StepStats::default();
        let bs = batch.len() as f64;
        for sample in batch {
            let mut tape = Tape::new();
            let params = self.insert_params(&mut tape, true);
            let (root, ntp, pose) = self.sample_loss_on(&mut tape, &params, sample, weights, None)?;
            let loss = tape.value(root)[0];
            if !loss.is_finite() {
                return Err(PoseCamError::Numerical(format!(
                    "non-finite loss {loss} (ntp={ntp}, pose={pose})"
                )));
            }
            stats.total += loss / bs;
            if sample.mask.ntp_weight == 1 {
                stats.ntp += ntp;
                stats.n_ntp += 1;
            }
            if sample.mask.pose_weight == 1 {
                stats.pose += pose;
                stats.n_pose += 1;
            }
            let grads = tape.backward(root, 1.0 / bs);
            for (a, &pid) in acc.iter_mut().zip(&params) {
                if !grads[pid].is_empty() {
                    for (dst, src) in a.iter_mut().zip(&grads[pid]) {
                        *dst += src;
                    }
                }
            }
        }
        for g in acc.iter().flat_map(|v| v.iter()) {
            if !g.is_finite() {
                return Err(PoseCamError::Numerical("non-finite gradient".into()));
            }
        }

        self.opt_step += 1;
        let t = self.opt_step as f64;
        let bc1 = 1.0 - optim.beta1.powf(t);
        let bc2 = 1.0 - optim.beta2.powf(t);
        for (idx, def) in self.defs.iter().enumerate() {
            let lr = match def.group {
                ParamGroup::Backbone => optim.lr_backbone,
                ParamGroup::Head => optim.lr_head,
            };
            if lr == 0.0 {
                continue;
            }
            let m = &mut self.opt_m[idx];
            let v = &mut self.opt_v[idx];
            let p = &mut self.values[idx];
            for i in 0..p.len() {
                let g = acc[idx][i];
                m[i] = optim.beta1 * m[i] + (1.0 - optim.beta1) * g;
                v[i] = optim.beta2 * v[i] + (1.0 - optim.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + optim.eps);
            }
        }
        if stats.n_ntp > 0 {
            stats.ntp /= stats.n_ntp as f64;
        }
        if stats.n_pose > 0 {
            stats.pose /= stats.n_pose as f64;
        }
        Ok((stats, TapeGradients { per_param: acc }))
    }

    /// Compares analytic gradients against central finite differences with
    /// `s*` pinned to its base-point value; returns the max relative error
    /// over a random subset of parameter entries.
    pub fn grad_check<R: Rng>(
        &self,
        sample: &TrainSample,
        weights: &LossWeights,
        n_probes: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let fd_h = 1e-5;
        // Base run: analytic gradients and the base s*.
        let mut tape = Tape::new();
        let params = self.insert_params(&mut tape, true);
        let s_base = self.base_s_star(sample, weights)?;
        let (root, _, _) = self.sample_loss_on(&mut tape, &params, sample, weights, Some(s_base))?;
        let grads = tape.backward(root, 1.0);

        let mut max_rel = 0.0f64;
        for _ in 0..n_probes {
            let pidx = rng.random_range(0..self.defs.len());
            let len = self.values[pidx].len();
            let eidx = rng.random_range(0..len);
            let analytic = grads[params[pidx]][eidx];

            let eval = |delta: f64| -> Result<f64> {
                let mut perturbed = self.clone_values();
                perturbed[pidx][eidx] += delta;
                let mut t = Tape::new();
                let ids: Vec<TensorId> = self
                    .defs
                    .iter()
                    .zip(&perturbed)
                    .map(|(d, v)| t.leaf(d.rows, d.cols, v.clone(), false))
                    .collect();
                let (r, _, _) = self.sample_loss_on(&mut t, &ids, sample, weights, Some(s_base))?;
                Ok(t.value(r)[0])
            };
            let fd = (eval(fd_h)? - eval(-fd_h)?) / (2.0 * fd_h);
            let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        Ok(max_rel)
    }

    fn clone_values(&self) -> Vec<Vec<f64>> {
        self.values.clone()
    }

    /// The closed-form scale at the current parameters, for pinning.
    fn base_s_star(&self, sample: &TrainSample, _weights: &LossWeights) -> Result<f64> {
        if sample.mask.pose_weight == 0 || sample.metric {
            return Ok(1.0);
        }
        let (poses, _) = self.predict(&sample.features, sample.n_frames, false)?;
        let pred_t: Vec<_> = poses.iter().map(|p| p.t).collect();
        let gt_t: Vec<_> = sample.gt.iter().map(|g| g.t).collect();
        Ok(ls_scale(&pred_t, &gt_t)?.0)
    }

    /// Public token-assembly entry used by layout tests and tooling: returns
    /// the assembled token matrix and its index map.
    pub fn assemble_tokens(
        &self,
        features: &[f64],
        n_frames: usize,
        text_ids: &[usize],
    ) -> Result<(Vec<f64>, IndexMap)> {
        let mut tape = Tape::new();
        let params = self.insert_params(&mut tape, false);
        let feat = tape.leaf(
            n_frames * self.config.visual_tokens_per_frame,
            self.config.hidden_dim,
            features.to_vec(),
            false,
        );
        let (tokens, map) =
            self.assemble_tokens_on(&mut tape, &params, feat, n_frames, text_ids, true)?;
        Ok((tape.value(tokens).to_vec(), map))
    }

    /// Final-layer hidden states for an assembled input, exposed for the
    /// causality and layout tests.
    pub fn forward_hidden(
        &self,
        features: &[f64],
        n_frames: usize,
        text_ids: &[usize],
    ) -> Result<(Vec<f64>, IndexMap)> {
        let mut tape = Tape::new();
        let params = self.insert_params(&mut tape, false);
        let feat = tape.leaf(
            n_frames * self.config.visual_tokens_per_frame,
            self.config.hidden_dim,
            features.to_vec(),
            false,
        );
        let (tokens, map) =
            self.assemble_tokens_on(&mut tape, &params, feat, n_frames, text_ids, true)?;
        let hidden = self.backbone_on(&mut tape, &params, tokens);
        Ok((tape.value(hidden).to_vec(), map))
    }

    /// Applies the linear pose projector to a single H-vector.
    pub fn pose_projector(&self, h: &[f64]) -> Result<Vec<f64>> {
        let hd = self.config.hidden_dim;
        if h.len() != hd {
            return Err(PoseCamError::InvalidInput("projector input dim mismatch".into()));
        }
        let mut tape = Tape::new();
        let w = self.param_index("w_p").unwrap();
        let wid = tape.leaf(hd, hd, self.values[w].clone(), false);
        let hid = tape.leaf(1, hd, h.to_vec(), false);
        let out = tape.matmul(hid, wid);
        Ok(tape.value(out).to_vec())
    }

    /// Runs the camera head on N already-projected frame vectors.
    pub fn camera_head(&self, h_tilde: &[f64], n_frames: usize) -> Result<Vec<PoseEncoding>> {
        let hd = self.config.hidden_dim;
        if h_tilde.len() != n_frames * hd || n_frames == 0 {
            return Err(PoseCamError::InvalidInput("camera head input shape mismatch".into()));
        }
        let mut tape = Tape::new();
        let params = self.insert_params(&mut tape, false);
        let x = tape.leaf(n_frames, hd, h_tilde.to_vec(), false);
        // head blocks without the projector
        let mut cur = x;
        for l in 0..self.config.head_layers {
            cur = self.attention_block(&mut tape, &params, cur, &format!("head{l}"), "norm", false);
        }
        let p = |name: &str| params[self.param_index(name).unwrap()];
        let out = tape.matmul(cur, p("head.out"));
        let out = tape.add_row_broadcast(out, p("head.out_b"));
        Ok(tape
            .value(out)
            .chunks(9)
            .map(|c| {
                let mut a = [0.0; 9];
                a.copy_from_slice(c);
                PoseEncoding::from_array(&a)
            })
            .collect())
    }
}

/// Records the weighted pose loss onto the tape over an `N x 9` prediction
/// matrix. Returns the loss node and its value. `s*` comes from `pin` when
/// given, the metric pin (1.0), or the closed-form estimate; it enters the
/// graph as a constant either way.
pub fn pose_loss_on_tape(
    tape: &mut Tape,
    pred: TensorId,
    gt: &[PoseEncoding],
    weights: &LossWeights,
    metric: bool,
    pin: Option<f64>,
) -> Result<(TensorId, f64)> {
    let (n, cols) = tape.shape(pred);
    if cols != 9 {
        return Err(PoseCamError::InvalidInput("prediction must be N x 9".into()));
    }
    if n != gt.len() || n < 2 {
        return Err(PoseCamError::InvalidInput(format!(
            "pose loss needs N >= 2 matched frames, got pred {n} vs gt {}",
            gt.len()
        )));
    }
    let gt_t: Vec<_> = gt.iter().map(|g| g.t).collect();
    let d_bar = d_bar_of_translations(&gt_t)?;

    let t_hat = tape.slice_cols(pred, 0, 3);
    let s_star = match (pin, metric) {
        (Some(s), _) => s,
        (None, true) => 1.0,
        (None, false) => {
            let tv = tape.value(t_hat);
            let pred_t: Vec<nalgebra::Vector3<f64>> = tv
                .chunks(3)
                .map(|c| nalgebra::Vector3::new(c[0], c[1], c[2]))
                .collect();
            ls_scale(&pred_t, &gt_t)?.0
        }
    };

    let nf = n as f64;
    let gt_flat_t: Vec<f64> = gt.iter().flat_map(|g| [g.t.x, g.t.y, g.t.z]).collect();
    let gt_flat_q: Vec<f64> = gt.iter().flat_map(|g| g.q.as_array()).collect();
    let gt_flat_f: Vec<f64> = gt.iter().flat_map(|g| [g.f_h, g.f_w]).collect();

    let scaled_t = tape.scale(t_hat, s_star);
    let gt_t_leaf = tape.leaf(n, 3, gt_flat_t, false);
    let dt = tape.sub(scaled_t, gt_t_leaf);
    let at = tape.abs(dt);
    let st = tape.sum_all(at);
    let term_t = tape.scale(st, weights.w_t / (d_bar * nf));

    let q_hat = tape.slice_cols(pred, 3, 4);
    let gt_q_leaf = tape.leaf(n, 4, gt_flat_q, false);
    let dq = tape.sub(q_hat, gt_q_leaf);
    let aq = tape.abs(dq);
    let sq = tape.sum_all(aq);
    let term_q = tape.scale(sq, weights.w_r / nf);

    let f_hat = tape.slice_cols(pred, 7, 2);
    let gt_f_leaf = tape.leaf(n, 2, gt_flat_f, false);
    let df = tape.sub(f_hat, gt_f_leaf);
    let af = tape.abs(df);
    let sf = tape.sum_all(af);
    let term_f = tape.scale(sf, weights.w_f / nf);

    let tq = tape.add(term_t, term_q);
    let total = tape.add(tq, term_f);
    let val = tape.value(total)[0];
    Ok((total, val))
}
