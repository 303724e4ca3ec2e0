//! Desk-scale differentiable model: tape autodiff, token assembly with pose
//! queries, causal backbone, camera head, training step and gradient checks.

pub mod model;
pub mod tape;

pub use model::{
    pose_loss_on_tape, IndexMap, NetConfig, OptimConfig, ParamDef, ParamGroup, PoseQueries,
    StepStats, TapeGradients, TinyNet, TrainSample, ANSWER_TOKENS, QUESTION_TOKEN,
};
pub use tape::{Tape, TensorId};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{PoseEncoding, Quat};
    use crate::loss::LossWeights;
    use crate::schedule::LossMask;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> NetConfig {
        NetConfig {
            hidden_dim: 16,
            n_layers: 2,
            n_heads: 2,
            visual_tokens_per_frame: 2,
            vocab_size: 8,
            head_layers: 2,
            mlp_mult: 2,
            pose_tokens_at_inference: true,
        }
    }

    fn rand_features(rng: &mut ChaCha8Rng, n_frames: usize, cfg: &NetConfig) -> Vec<f64> {
        (0..n_frames * cfg.visual_tokens_per_frame * cfg.hidden_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    fn rand_gt(rng: &mut ChaCha8Rng, n: usize) -> Vec<PoseEncoding> {
        (0..n)
            .map(|i| {
                PoseEncoding::new(
                    Vector3::new(i as f64 + rng.random_range(-0.1..0.1), 0.3 * i as f64, 0.0),
                    Quat::from_axis_angle(Vector3::z(), 0.1 * i as f64),
                    1.0,
                    0.8,
                )
            })
            .collect()
    }

    #[test]
    fn token_layout_positions() {
        let cfg = NetConfig {
            visual_tokens_per_frame: 3,
            ..small_config()
        };
        let net = TinyNet::new(cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let features = rand_features(&mut rng, 2, &net.config);
        let (tokens, map) = net.assemble_tokens(&features, 2, &[]).unwrap();
        assert_eq!(map.seq_len, 8);
        assert_eq!(tokens.len(), 8 * net.config.hidden_dim);
        assert_eq!(map.pose_positions, vec![3, 7]);
        assert_eq!(map.text_start, None);

        // frame 0's pose token is c_first, frame 1's is c_rest
        let pq = net.pose_queries();
        let h = net.config.hidden_dim;
        assert_eq!(&tokens[3 * h..4 * h], pq.c_first.as_slice());
        assert_eq!(&tokens[7 * h..8 * h], pq.c_rest.as_slice());
    }

    #[test]
    fn token_layout_single_frame_and_text() {
        let net = TinyNet::new(small_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let features = rand_features(&mut rng, 1, &net.config);
        let (tokens, map) = net.assemble_tokens(&features, 1, &[QUESTION_TOKEN]).unwrap();
        assert_eq!(map.pose_positions, vec![2]);
        assert_eq!(map.text_start, Some(3));
        assert_eq!(map.seq_len, 4);
        let pq = net.pose_queries();
        let h = net.config.hidden_dim;
        assert_eq!(&tokens[2 * h..3 * h], pq.c_first.as_slice());
    }

    #[test]
    fn token_layout_various_n() {
        let net = TinyNet::new(small_config(), 2).unwrap();
        let k = net.config.visual_tokens_per_frame;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1usize, 2, 4] {
            let features = rand_features(&mut rng, n, &net.config);
            let (_, map) = net.assemble_tokens(&features, n, &[]).unwrap();
            let expected: Vec<usize> = (0..n).map(|i| i * (k + 1) + k).collect();
            assert_eq!(map.pose_positions, expected);
        }
    }

    #[test]
    fn causality_exact() {
        let net = TinyNet::new(small_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let features = rand_features(&mut rng, n, &net.config);
        let (base, map) = net.forward_hidden(&features, n, &[QUESTION_TOKEN]).unwrap();

        // Perturb the last frame's features: all positions before that
        // frame's block must be bitwise identical.
        let k = net.config.visual_tokens_per_frame;
        let h = net.config.hidden_dim;
        let mut perturbed = features.clone();
        for v in &mut perturbed[(n - 1) * k * h..] {
            *v += 0.5;
        }
        let (changed, _) = net.forward_hidden(&perturbed, n, &[QUESTION_TOKEN]).unwrap();
        let block_start_pos = (n - 1) * (k + 1);
        for pos in 0..block_start_pos {
            assert_eq!(
                &base[pos * h..(pos + 1) * h],
                &changed[pos * h..(pos + 1) * h],
                "position {pos} changed"
            );
        }
        // and something at or after the perturbed block did change
        assert_ne!(
            &base[block_start_pos * h..],
            &changed[block_start_pos * h..]
        );
        let _ = map;
    }

    #[test]
    fn zero_layer_backbone_is_identity() {
        let cfg = NetConfig {
            n_layers: 0,
            ..small_config()
        };
        let net = TinyNet::new(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let features = rand_features(&mut rng, 2, &net.config);
        let (tokens, _) = net.assemble_tokens(&features, 2, &[]).unwrap();
        let (hidden, _) = net.forward_hidden(&features, 2, &[]).unwrap();
        assert_eq!(tokens, hidden);
    }

    #[test]
    fn forward_deterministic() {
        let net = TinyNet::new(small_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let features = rand_features(&mut rng, 3, &net.config);
        let (a, _) = net.forward_hidden(&features, 3, &[QUESTION_TOKEN]).unwrap();
        let (b, _) = net.forward_hidden(&features, 3, &[QUESTION_TOKEN]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projector_matches_naive_matvec() {
        let net = TinyNet::new(small_config(), 6).unwrap();
        let h = net.config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = net.pose_projector(&x).unwrap();
        let w = &net.param_values()[net.param_index("w_p").unwrap()];
        for j in 0..h {
            let mut acc = 0.0;
            for i in 0..h {
                acc += x[i] * w[i * h + j];
            }
            assert!((out[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn camera_head_shape_and_permutation_equivariance() {
        let net = TinyNet::new(small_config(), 7).unwrap();
        let h = net.config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        let single: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = net.camera_head(&single, 1).unwrap();
        assert_eq!(out.len(), 1);

        // no positional encoding in the head: permuting frames permutes outputs
        let n = 4;
        let x: Vec<f64> = (0..n * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = net.camera_head(&x, n).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut xp = vec![0.0; n * h];
        for (dst, &src) in perm.iter().enumerate() {
            xp[dst * h..(dst + 1) * h].copy_from_slice(&x[src * h..(src + 1) * h]);
        }
        let permuted = net.camera_head(&xp, n).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let a = permuted[dst].as_array();
            let b = base[src].as_array();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn camera_head_outputs_finite_fuzz() {
        let net = TinyNet::new(small_config(), 8).unwrap();
        let h = net.config.hidden_dim;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..3 * h).map(|_| rng.random_range(-5.0..5.0)).collect();
            let out = net.camera_head(&x, 3).unwrap();
            for p in out {
                assert!(p.as_array().iter().all(|v| v.is_finite()));
            }
        }
    }

    fn make_sample(rng: &mut ChaCha8Rng, net: &TinyNet, mask: LossMask, metric: bool) -> TrainSample {
        let n = 4;
        TrainSample {
            features: rand_features(rng, n, &net.config),
            n_frames: n,
            gt: rand_gt(rng, n),
            metric,
            answer: Some(ANSWER_TOKENS[1]),
            mask,
        }
    }

    #[test]
    fn pose_only_batch_gives_zero_ntp_gradient() {
        let mut net = TinyNet::new(small_config(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample = make_sample(
            &mut rng,
            &net,
            LossMask {
                ntp_weight: 0,
                pose_weight: 1,
            },
            true,
        );
        let (_, grads) = net
            .train_step(&[sample], &LossWeights::default(), &OptimConfig::default())
            .unwrap();
        let w_vocab = net.param_index("w_vocab").unwrap();
        let embed = net.param_index("embed").unwrap();
        assert!(grads.per_param[w_vocab].iter().all(|&g| g == 0.0));
        assert!(grads.per_param[embed].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_learning_rate_keeps_params_bitwise() {
        let mut net = TinyNet::new(small_config(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let before = net.param_values().to_vec();
        let sample = make_sample(
            &mut rng,
            &net,
            LossMask {
                ntp_weight: 1,
                pose_weight: 1,
            },
            false,
        );
        let optim = OptimConfig {
            lr_backbone: 0.0,
            lr_head: 0.0,
            ..OptimConfig::default()
        };
        net.train_step(&[sample], &LossWeights::default(), &optim)
            .unwrap();
        assert_eq!(net.param_values(), before.as_slice());
    }

    #[test]
    fn overfit_single_scene_loss_decreases() {
        let mut net = TinyNet::new(small_config(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sample = make_sample(
            &mut rng,
            &net,
            LossMask {
                ntp_weight: 1,
                pose_weight: 1,
            },
            true,
        );
        let weights = LossWeights::default();
        let optim = OptimConfig::default();
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (stats, _) = net
                .train_step(std::slice::from_ref(&sample), &weights, &optim)
                .unwrap();
            losses.push(stats.total);
        }
        let early: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let late: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(
            late < 0.5 * early,
            "no clear descent: early {early}, late {late}"
        );
    }

    #[test]
    fn grad_check_linear_model_quadratic_path() {
        // A zero-layer, zero-head-layer model is a purely linear map into a
        // piecewise-linear loss; away from kinks the gradient is exact.
        let cfg = NetConfig {
            n_layers: 0,
            head_layers: 0,
            ..small_config()
        };
        let net = TinyNet::new(cfg, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sample = make_sample(
            &mut rng,
            &net,
            LossMask {
                ntp_weight: 0,
                pose_weight: 1,
            },
            true,
        );
        let err = net
            .grad_check(&sample, &LossWeights::default(), 60, &mut rng)
            .unwrap();
        assert!(err < 1e-7, "max rel error {err}");
    }

    #[test]
    fn grad_check_full_model_pose_loss() {
        let net = TinyNet::new(small_config(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sample = make_sample(
            &mut rng,
            &net,
            LossMask {
                ntp_weight: 0,
                pose_weight: 1,
            },
            false,
        );
        let err = net
            .grad_check(&sample, &LossWeights::default(), 60, &mut rng)
            .unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn grad_check_full_model_total_loss() {
        let net = TinyNet::new(small_config(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sample = make_sample(
            &mut rng,
            &net,
            LossMask {
                ntp_weight: 1,
                pose_weight: 1,
            },
            false,
        );
        let err = net
            .grad_check(&sample, &LossWeights::default(), 60, &mut rng)
            .unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn training_deterministic_under_seed() {
        let run = || {
            let mut net = TinyNet::new(small_config(), 15).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let sample = make_sample(
                &mut rng,
                &net,
                LossMask {
                    ntp_weight: 1,
                    pose_weight: 1,
                },
                true,
            );
            for _ in 0..5 {
                net.train_step(
                    std::slice::from_ref(&sample),
                    &LossWeights::default(),
                    &OptimConfig::default(),
                )
                .unwrap();
            }
            net.param_values().to_vec()
        };
        assert_eq!(run(), run());
    }
}
