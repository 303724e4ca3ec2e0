//! Frame-sampling strategies: uniform indices with random jitter (VQA path),
//! two-mode dynamic temporal sampling (pose path), and covisibility-guided
//! random-walk sampling for scene-graph data.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PoseCamError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    pub alpha: f64,
}

impl JitterConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(PoseCamError::Config(format!(
                "jitter ratio must be in [0, 1), got {alpha}"
            )));
        }
        Ok(JitterConfig { alpha })
    }
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig { alpha: 0.005 }
    }
}

/// Parameters of the two-mode dynamic temporal sampler.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynSampleParams {
    pub p_video: f64,
    pub p_fix: f64,
    pub i_min: usize,
    pub i_max: usize,
}

impl DynSampleParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_video) || !(0.0..=1.0).contains(&self.p_fix) {
            return Err(PoseCamError::Config("probabilities must be in [0, 1]".into()));
        }
        if self.i_min < 1 || self.i_min > self.i_max {
            return Err(PoseCamError::Config(format!(
                "need 1 <= i_min <= i_max, got {}..{}",
                self.i_min, self.i_max
            )));
        }
        Ok(())
    }

    /// ScanNet parameters.
    pub fn scannet() -> Self {
        DynSampleParams {
            p_video: 0.6,
            p_fix: 0.6,
            i_min: 30,
            i_max: 100,
        }
    }

    /// ScanNet++ / ARKitScenes parameters.
    pub fn scannetpp() -> Self {
        DynSampleParams {
            p_video: 0.8,
            p_fix: 0.5,
            i_min: 30,
            i_max: 100,
        }
    }
}

/// Symmetric pairwise covisibility matrix over the frames of one scene.
#[derive(Debug, Clone)]
pub struct CovisGraph {
    n_frames: usize,
    covis: Vec<f64>,
}

impl CovisGraph {
    pub fn new(n_frames: usize, covis: Vec<f64>) -> Result<Self> {
        if covis.len() != n_frames * n_frames {
            return Err(PoseCamError::InvalidInput(format!(
                "covisibility matrix size {} does not match {n_frames} frames",
                covis.len()
            )));
        }
        for i in 0..n_frames {
            for j in 0..i {
                let a = covis[i * n_frames + j];
                let b = covis[j * n_frames + i];
                if (a - b).abs() > 1e-9 {
                    return Err(PoseCamError::InvalidInput(format!(
                        "covisibility not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
                if !(0.0..=1.0).contains(&a) {
                    return Err(PoseCamError::InvalidInput(format!(
                        "covisibility out of [0,1] at ({i},{j}): {a}"
                    )));
                }
            }
        }
        Ok(CovisGraph { n_frames, covis })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn covis(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            self.covis[i * self.n_frames + j]
        }
    }
}

/// Uniformly spaced indices `u_i = floor((i-1)(L-1)/(N-1))`, 0-based.
pub fn uniform_indices(total_frames: usize, n_frames: usize) -> Result<Vec<usize>> {
    if n_frames == 0 || n_frames > total_frames {
        return Err(PoseCamError::InvalidInput(format!(
            "need 1 <= N <= L, got N={n_frames}, L={total_frames}"
        )));
    }
    if n_frames == 1 {
        return Ok(vec![0]);
    }
    Ok((0..n_frames)
        .map(|i| i * (total_frames - 1) / (n_frames - 1))
        .collect())
}

/// Perturbs each index by an integer offset drawn from `{-Δ..Δ}` with
/// `Δ = floor(L·α)`, clips intermediate indices to `[0, u_{i+1} - 1]` using
/// the pre-jitter neighbor, clips the last to `[0, L-1]`, then enforces
/// monotonicity with `u_i <- max(u_i, u_{i-1})`.
pub fn jitter_indices<R: Rng>(
    indices: &[usize],
    total_frames: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(PoseCamError::InvalidInput(format!(
            "jitter ratio must be in [0, 1), got {alpha}"
        )));
    }
    let delta = (total_frames as f64 * alpha).floor() as i64;
    if delta == 0 || indices.is_empty() {
        return Ok(indices.to_vec());
    }
    let n = indices.len();
    let mut out = Vec::with_capacity(n);
    for (i, &u) in indices.iter().enumerate() {
        let offset = rng.random_range(-delta..=delta);
        let hi = if i + 1 < n {
            indices[i + 1].saturating_sub(1) as i64
        } else {
            total_frames as i64 - 1
        };
        let jittered = (u as i64 + offset).clamp(0, hi.max(0));
        out.push(jittered as usize);
    }
    for i in 1..n {
        if out[i] < out[i - 1] {
            out[i] = out[i - 1];
        }
    }
    Ok(out)
}

/// Two-mode pose-path sampler: video mode walks from a random start with
/// fixed or per-step intervals in `[i_min, i_max]`; collection mode draws N
/// distinct indices from the whole sequence, sorted ascending.
pub fn dynamic_temporal_sample<R: Rng>(
    total_frames: usize,
    n_frames: usize,
    params: &DynSampleParams,
    rng: &mut R,
) -> Result<Vec<usize>> {
    params.validate()?;
    if n_frames == 0 || n_frames > total_frames {
        return Err(PoseCamError::InvalidInput(format!(
            "need 1 <= N <= L, got N={n_frames}, L={total_frames}"
        )));
    }
    if rng.random_bool(params.p_video) {
        // Starts from which a maximal-interval run stays in range.
        let span = params.i_max * (n_frames - 1);
        if span <= total_frames - 1 {
            let max_start = total_frames - 1 - span;
            let start = rng.random_range(0..=max_start);
            let fixed = rng.random_bool(params.p_fix).then(|| {
                rng.random_range(params.i_min..=params.i_max)
            });
            let mut idx = Vec::with_capacity(n_frames);
            let mut cur = start;
            idx.push(cur);
            for _ in 1..n_frames {
                let step = fixed.unwrap_or_else(|| rng.random_range(params.i_min..=params.i_max));
                cur += step;
                idx.push(cur);
            }
            return Ok(idx);
        }
        // No feasible start: fall through to collection mode.
    }
    let mut idx: Vec<usize> = index_sample(rng, total_frames, n_frames).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Maximum number of restarts for the covisibility walk.
pub const COVIS_WALK_RESTARTS: usize = 4;

/// Covisibility-guided random walk: from a random start, repeatedly moves to
/// a random unvisited neighbor with covisibility above `tau`, backtracking
/// when stuck. Failed attempts exclude their visited component; up to
/// [`COVIS_WALK_RESTARTS`] restarts are made before giving up.
///
/// Returns the sampled indices in visit order.
pub fn covis_walk_sample<R: Rng>(
    graph: &CovisGraph,
    n_frames: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n_frames == 0 {
        return Err(PoseCamError::InvalidInput("N must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(PoseCamError::InvalidInput(format!(
            "tau must be in [0, 1), got {tau}"
        )));
    }
    let n = graph.n_frames();
    if n_frames > n {
        return Err(PoseCamError::SamplingFailed(format!(
            "requested {n_frames} frames from a {n}-frame scene"
        )));
    }

    let mut excluded = vec![false; n];
    for attempt in 0..=COVIS_WALK_RESTARTS {
        let candidates: Vec<usize> = (0..n).filter(|&i| !excluded[i]).collect();
        if candidates.is_empty() {
            break;
        }
        let start = candidates[rng.random_range(0..candidates.len())];

        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n_frames);
        let mut stack = vec![start];
        visited[start] = true;
        order.push(start);

        while order.len() < n_frames {
            let Some(&cur) = stack.last() else { break };
            let neighbors: Vec<usize> = (0..n)
                .filter(|&j| !visited[j] && !excluded[j] && graph.covis(cur, j) > tau)
                .collect();
            if neighbors.is_empty() {
                stack.pop();
                continue;
            }
            let next = neighbors[rng.random_range(0..neighbors.len())];
            visited[next] = true;
            stack.push(next);
            order.push(next);
        }

        if order.len() == n_frames {
            return Ok(order);
        }
        // Attempt failed: exclude everything reached in this component.
        for (i, v) in visited.iter().enumerate() {
            if *v {
                excluded[i] = true;
            }
        }
        let _ = attempt;
    }
    Err(PoseCamError::SamplingFailed(format!(
        "no connected component of size >= {n_frames} found after {COVIS_WALK_RESTARTS} restarts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_basic() {
        assert_eq!(uniform_indices(10, 4).unwrap(), vec![0, 3, 6, 9]);
        assert_eq!(uniform_indices(4, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(uniform_indices(10, 1).unwrap(), vec![0]);
        assert!(uniform_indices(3, 4).is_err());
        assert!(uniform_indices(3, 0).is_err());
    }

    #[test]
    fn uniform_endpoints_fixed() {
        for l in 2..50 {
            for n in 2..=l {
                let idx = uniform_indices(l, n).unwrap();
                assert_eq!(idx[0], 0);
                assert_eq!(*idx.last().unwrap(), l - 1);
                assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn jitter_alpha_zero_is_identity() {
        let idx = uniform_indices(100, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(jitter_indices(&idx, 100, 0.0, &mut rng).unwrap(), idx);
    }

    #[test]
    fn jitter_subframe_delta_is_identity() {
        // L=100, alpha=0.005 gives delta = floor(0.5) = 0.
        let idx = uniform_indices(100, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(jitter_indices(&idx, 100, 0.005, &mut rng).unwrap(), idx);
    }

    #[test]
    fn jitter_bounds_and_monotonicity() {
        let l = 1000;
        let idx = uniform_indices(l, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let out = jitter_indices(&idx, l, 0.005, &mut rng).unwrap();
            assert_eq!(out.len(), idx.len());
            assert!(out.iter().all(|&u| u < l));
            assert!(out.windows(2).all(|w| w[0] <= w[1]));
            // delta = 5, plus the monotonicity pass only raises an index to a
            // neighbor that itself moved at most 5.
            for (o, u) in out.iter().zip(&idx) {
                assert!((*o as i64 - *u as i64).unsigned_abs() <= 5);
            }
        }
    }

    #[test]
    fn dynamic_fixed_interval_progression() {
        let params = DynSampleParams {
            p_video: 1.0,
            p_fix: 1.0,
            i_min: 30,
            i_max: 30,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let idx = dynamic_temporal_sample(91, 4, &params, &mut rng).unwrap();
        // Only start 0 fits, interval forced to 30.
        assert_eq!(idx, vec![0, 30, 60, 90]);
    }

    #[test]
    fn dynamic_video_mode_gap_bounds() {
        // p_video = 1 with a long sequence: the video path is always taken
        // and feasible, so every consecutive gap must lie in [i_min, i_max].
        let params = DynSampleParams {
            p_video: 1.0,
            p_fix: 0.6,
            i_min: 30,
            i_max: 100,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let idx = dynamic_temporal_sample(1000, 6, &params, &mut rng).unwrap();
            assert_eq!(idx.len(), 6);
            assert!(idx.iter().all(|&u| u < 1000));
            assert!(idx
                .windows(2)
                .all(|w| (30..=100).contains(&(w[1] - w[0]))));
        }
    }

    #[test]
    fn dynamic_collection_mode_distinct_sorted() {
        let params = DynSampleParams {
            p_video: 0.0,
            p_fix: 0.5,
            i_min: 1,
            i_max: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let idx = dynamic_temporal_sample(50, 10, &params, &mut rng).unwrap();
            assert_eq!(idx.len(), 10);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(idx.iter().all(|&u| u < 50));
        }
    }

    #[test]
    fn dynamic_infeasible_video_falls_back() {
        let params = DynSampleParams {
            p_video: 1.0,
            p_fix: 1.0,
            i_min: 30,
            i_max: 100,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 100 * 7 frames of span cannot fit in 50 frames; must fall back.
        let idx = dynamic_temporal_sample(50, 8, &params, &mut rng).unwrap();
        assert_eq!(idx.len(), 8);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    fn two_component_graph() -> CovisGraph {
        // Nodes 0..3 fully connected; nodes 3..8 fully connected; no edges
        // across.
        let n = 8;
        let mut m = vec![0.0; n * n];
        let mut connect = |group: std::ops::Range<usize>| {
            let members: Vec<usize> = group.collect();
            for &i in &members {
                for &j in &members {
                    if i != j {
                        m[i * n + j] = 0.9;
                    }
                }
            }
        };
        connect(0..3);
        connect(3..8);
        CovisGraph::new(n, m).unwrap()
    }

    #[test]
    fn covis_complete_graph_succeeds() {
        let n = 6;
        let m = vec![1.0; n * n];
        let g = CovisGraph::new(n, m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = covis_walk_sample(&g, 6, 0.5, &mut rng).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
    }

    #[test]
    fn covis_samples_stay_in_large_component() {
        let g = two_component_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let idx = covis_walk_sample(&g, 5, 0.15, &mut rng).unwrap();
            assert_eq!(idx.len(), 5);
            assert!(idx.iter().all(|&i| (3..8).contains(&i)), "sample {idx:?}");
        }
    }

    #[test]
    fn covis_impossible_request_fails() {
        let g = two_component_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            covis_walk_sample(&g, 6, 0.15, &mut rng),
            Err(PoseCamError::SamplingFailed(_))
        ));
    }

    #[test]
    fn covis_connected_subgraph_property() {
        let g = two_component_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..200 {
            let idx = covis_walk_sample(&g, 4, 0.15, &mut rng).unwrap();
            // BFS over sampled nodes using thresholded edges.
            let mut reach = vec![false; idx.len()];
            reach[0] = true;
            let mut frontier = vec![0usize];
            while let Some(a) = frontier.pop() {
                for b in 0..idx.len() {
                    if !reach[b] && g.covis(idx[a], idx[b]) > 0.15 {
                        reach[b] = true;
                        frontier.push(b);
                    }
                }
            }
            assert!(reach.iter().all(|&r| r));
        }
    }
}
