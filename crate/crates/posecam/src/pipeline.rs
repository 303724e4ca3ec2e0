//! Deterministic stages of the pseudo-pose annotation pipeline: scene-cut
//! detection, clip duration gating, the VLM-filter client interface (with a
//! deterministic stub and a recorded-response client), pose-engine adapters,
//! and trajectory quality control.

use serde::{Deserialize, Serialize};

use crate::error::{PoseCamError, Result};
use crate::geom::Trajectory;
use crate::loss::mean_consecutive_distance;

/// One RGB frame, 8 bits per channel, row-major `r g b` interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(PoseCamError::InvalidInput(
                "frame dimensions must be nonzero".into(),
            ));
        }
        if rgb.len() != width * height * 3 {
            return Err(PoseCamError::InvalidInput(format!(
                "rgb buffer has {} bytes, expected {}",
                rgb.len(),
                width * height * 3
            )));
        }
        Ok(Frame { width, height, rgb })
    }

    /// Solid-color frame, mainly for tests and constructed sequences.
    pub fn solid(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut buf = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            buf.extend_from_slice(&rgb);
        }
        Frame { width, height, rgb: buf }
    }
}

/// A clip as an ordered frame sequence with a frame rate.
#[derive(Debug, Clone)]
pub struct FrameSeq {
    frames: Vec<Frame>,
    fps: f64,
}

impl FrameSeq {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(PoseCamError::InvalidInput("fps must be > 0".into()));
        }
        if let Some(first) = frames.first() {
            for (i, f) in frames.iter().enumerate() {
                if f.width != first.width || f.height != first.height {
                    return Err(PoseCamError::InvalidInput(format!(
                        "frame {i} is {}x{}, expected {}x{}",
                        f.width, f.height, first.width, first.height
                    )));
                }
            }
        }
        Ok(FrameSeq { frames, fps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }
}

/// Scene-cut and duration thresholds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutConfig {
    pub content_threshold: f64,
    pub bhattacharyya_threshold: f64,
    pub min_duration_s: f64,
}

impl Default for CutConfig {
    fn default() -> Self {
        CutConfig {
            content_threshold: 45.0,
            bhattacharyya_threshold: 0.65,
            min_duration_s: 3.0,
        }
    }
}

impl CutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.content_threshold > 0.0)
            || !(self.bhattacharyya_threshold > 0.0)
            || !(self.min_duration_s > 0.0)
        {
            return Err(PoseCamError::Config(
                "cut thresholds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pixel HSV with every channel scaled to [0, 255]: hue maps 360° → 255,
/// saturation and value map [0, 1] → 255.
fn rgb_to_hsv_255(r: u8, g: u8, b: u8) -> [f64; 3] {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue_deg = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    [hue_deg / 360.0 * 255.0, sat * 255.0, max * 255.0]
}

/// Mean absolute per-pixel change over the H, S, V channels, each scaled to
/// [0, 255] (ContentDetector semantics). 0 for identical frames.
pub fn hsv_content_score(a: &Frame, b: &Frame) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(PoseCamError::InvalidInput(format!(
            "frame size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = a.width * a.height;
    let mut acc = 0.0;
    for i in 0..n {
        let ha = rgb_to_hsv_255(a.rgb[3 * i], a.rgb[3 * i + 1], a.rgb[3 * i + 2]);
        let hb = rgb_to_hsv_255(b.rgb[3 * i], b.rgb[3 * i + 1], b.rgb[3 * i + 2]);
        acc += (ha[0] - hb[0]).abs() + (ha[1] - hb[1]).abs() + (ha[2] - hb[2]).abs();
    }
    Ok(acc / (3.0 * n as f64))
}

/// Number of bins per HSV channel in the frame histograms.
pub const HIST_BINS: usize = 32;

/// Joint 3-D HSV histogram with 32 bins per channel, L1-normalized.
///
/// A joint histogram (rather than concatenated per-channel marginals) is
/// required for the cut check to separate frames that differ only in hue:
/// two saturated colors share all their saturation/value mass, which would
/// cap the marginal Bhattacharyya distance at sqrt(1/3) ≈ 0.577, below the
/// 0.65 threshold.
pub fn hsv_histogram(frame: &Frame) -> Vec<f64> {
    let mut hist = vec![0.0; HIST_BINS * HIST_BINS * HIST_BINS];
    let n = frame.width * frame.height;
    for i in 0..n {
        let hsv = rgb_to_hsv_255(
            frame.rgb[3 * i],
            frame.rgb[3 * i + 1],
            frame.rgb[3 * i + 2],
        );
        let bin = |v: f64| ((v / 256.0 * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        hist[(bin(hsv[0]) * HIST_BINS + bin(hsv[1])) * HIST_BINS + bin(hsv[2])] += 1.0;
    }
    let total = n as f64;
    for h in &mut hist {
        *h /= total;
    }
    hist
}

/// Bhattacharyya distance `sqrt(1 − Σ√(aᵢbᵢ))` in [0, 1]; unnormalized input
/// is normalized internally.
pub fn bhattacharyya_distance(hist_a: &[f64], hist_b: &[f64]) -> Result<f64> {
    if hist_a.len() != hist_b.len() {
        return Err(PoseCamError::InvalidInput(format!(
            "histogram bin counts differ: {} vs {}",
            hist_a.len(),
            hist_b.len()
        )));
    }
    if hist_a.is_empty() {
        return Err(PoseCamError::InvalidInput("empty histograms".into()));
    }
    let sum_a: f64 = hist_a.iter().sum();
    let sum_b: f64 = hist_b.iter().sum();
    if !(sum_a > 0.0) || !(sum_b > 0.0) {
        return Err(PoseCamError::InvalidInput(
            "histograms must have positive mass".into(),
        ));
    }
    let bc: f64 = hist_a
        .iter()
        .zip(hist_b)
        .map(|(a, b)| ((a / sum_a) * (b / sum_b)).sqrt())
        .sum();
    Ok((1.0 - bc.min(1.0)).max(0.0).sqrt())
}

/// Cut indices: a cut at frame i means frames i−1 and i belong to different
/// shots. Both the content score and the histogram Bhattacharyya distance
/// must exceed their thresholds (conjunctive rule).
pub fn detect_cuts(seq: &FrameSeq, cfg: &CutConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if seq.len() < 2 {
        return Err(PoseCamError::InvalidInput(
            "need at least 2 frames for cut detection".into(),
        ));
    }
    let mut cuts = Vec::new();
    let mut prev_hist = hsv_histogram(&seq.frames[0]);
    for i in 1..seq.len() {
        let hist = hsv_histogram(&seq.frames[i]);
        let content = hsv_content_score(&seq.frames[i - 1], &seq.frames[i])?;
        if content > cfg.content_threshold {
            let bhatt = bhattacharyya_distance(&prev_hist, &hist)?;
            if bhatt > cfg.bhattacharyya_threshold {
                cuts.push(i);
            }
        }
        prev_hist = hist;
    }
    Ok(cuts)
}

/// Accept/reject outcome for a clip or trajectory, with the reason attached
/// to rejections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum GateOutcome {
    Accept,
    Reject { reason: String },
}

impl GateOutcome {
    pub fn is_accept(&self) -> bool {
        matches!(self, GateOutcome::Accept)
    }
}

/// Single-scene clips of at least `min_duration_s` pass; anything with a cut
/// or shorter duration is rejected.
pub fn clip_gate(seq: &FrameSeq, cuts: &[usize], cfg: &CutConfig) -> Result<GateOutcome> {
    cfg.validate()?;
    if !cuts.is_empty() {
        return Ok(GateOutcome::Reject {
            reason: format!("scene cut at frame {}", cuts[0]),
        });
    }
    let dur = seq.duration_s();
    if dur < cfg.min_duration_s {
        return Ok(GateOutcome::Reject {
            reason: format!(
                "clip duration {dur:.3} s < minimum {:.3} s",
                cfg.min_duration_s
            ),
        });
    }
    Ok(GateOutcome::Accept)
}

/// Raw nine-flag response from a filter client. `suitable_for_pose` is part
/// of the wire format but is always recomputed, never trusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterVerdict {
    pub synthetic: bool,
    pub text_overlay: bool,
    pub screen_recording: bool,
    pub blur: bool,
    pub compression: bool,
    pub lighting: bool,
    pub reflection: bool,
    /// Metadata-only flag; never causes rejection.
    pub dynamic_scene: bool,
    /// Metadata-only flag; never causes rejection.
    pub low_parallax: bool,
    pub suitable_for_pose: bool,
}

impl FilterVerdict {
    pub fn all_clear() -> Self {
        FilterVerdict {
            synthetic: false,
            text_overlay: false,
            screen_recording: false,
            blur: false,
            compression: false,
            lighting: false,
            reflection: false,
            dynamic_scene: false,
            low_parallax: false,
            suitable_for_pose: true,
        }
    }

    /// Enforces the invariant: unsuitable iff any of the seven rejection
    /// flags is set (dynamic_scene and low_parallax are metadata only).
    pub fn normalized(mut self) -> Self {
        self.suitable_for_pose = !(self.synthetic
            || self.text_overlay
            || self.screen_recording
            || self.blur
            || self.compression
            || self.lighting
            || self.reflection);
        self
    }
}

/// Outcome of running the VLM filter on one clip. A failed client marks the
/// clip unprocessed rather than rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterOutcome {
    Judged(FilterVerdict),
    Unprocessed { error: String },
}

/// Client interface for the Stage-2 VLM filter. Implementations must be safe
/// for concurrent requests when `concurrent_safe` returns true; otherwise
/// callers keep at most one request in flight per instance.
pub trait FilterClient {
    fn judge(&mut self, clip_id: &str) -> Result<FilterVerdict>;

    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// Deterministic stub returning a fixed verdict for every clip.
#[derive(Debug, Clone)]
pub struct StubFilterClient {
    pub verdict: FilterVerdict,
}

impl StubFilterClient {
    pub fn new(verdict: FilterVerdict) -> Self {
        StubFilterClient { verdict }
    }
}

impl FilterClient for StubFilterClient {
    fn judge(&mut self, _clip_id: &str) -> Result<FilterVerdict> {
        Ok(self.verdict)
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Replays recorded JSON responses keyed by clip id; unknown ids are client
/// failures.
#[derive(Debug, Clone, Default)]
pub struct RecordedFilterClient {
    responses: std::collections::BTreeMap<String, FilterVerdict>,
}

impl RecordedFilterClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, clip_id: &str, verdict: FilterVerdict) {
        self.responses.insert(clip_id.to_string(), verdict);
    }

    /// Loads one response per line of JSON in the filter wire format,
    /// `clip_id<TAB>{...}`.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut client = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (id, json) = line.split_once('\t').ok_or(PoseCamError::Parse {
                line: lineno + 1,
                msg: "expected clip_id<TAB>json".into(),
            })?;
            let verdict: FilterVerdict =
                serde_json::from_str(json).map_err(|e| PoseCamError::Parse {
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
            client.record(id, verdict);
        }
        Ok(client)
    }
}

impl FilterClient for RecordedFilterClient {
    fn judge(&mut self, clip_id: &str) -> Result<FilterVerdict> {
        self.responses
            .get(clip_id)
            .copied()
            .ok_or_else(|| PoseCamError::FilterClient(format!("no recorded response for {clip_id}")))
    }
}

/// Runs the filter client on one clip, re-deriving `suitable_for_pose` from
/// the seven rejection flags.
pub fn vlm_filter<C: FilterClient + ?Sized>(client: &mut C, clip_id: &str) -> FilterOutcome {
    match client.judge(clip_id) {
        Ok(v) => FilterOutcome::Judged(v.normalized()),
        Err(e) => FilterOutcome::Unprocessed { error: e.to_string() },
    }
}

/// Source of estimated trajectories for clips: either pre-computed files or
/// the synthetic generator (tests). The external pose engine itself is out
/// of scope.
pub trait PoseEngine {
    fn estimate(&mut self, clip_id: &str) -> Result<Trajectory>;
}

/// Pose-engine adapter that reads pre-computed TUM trajectories from a
/// directory, `<clip_id>.txt`.
pub struct FilePoseEngine {
    pub dir: std::path::PathBuf,
}

impl PoseEngine for FilePoseEngine {
    fn estimate(&mut self, clip_id: &str) -> Result<Trajectory> {
        let path = self.dir.join(format!("{clip_id}.txt"));
        let text = std::fs::read_to_string(&path)?;
        crate::io::parse_tum(&text)
    }
}

/// Quality control on pose-engine output: non-finite values, non-increasing
/// timestamps, zero-norm quaternions, and static trajectories are rejected.
pub fn trajectory_qc(traj: &Trajectory) -> GateOutcome {
    let mut prev_ts = f64::NEG_INFINITY;
    for (i, (ts, pose)) in traj.poses().iter().enumerate() {
        let vals = [
            *ts,
            pose.translation.x,
            pose.translation.y,
            pose.translation.z,
            pose.rotation.w,
            pose.rotation.x,
            pose.rotation.y,
            pose.rotation.z,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return GateOutcome::Reject {
                reason: format!("non-finite value at frame {i}"),
            };
        }
        if *ts <= prev_ts {
            return GateOutcome::Reject {
                reason: format!("non-increasing timestamp at frame {i}"),
            };
        }
        prev_ts = *ts;
        if pose.rotation.norm() == 0.0 {
            return GateOutcome::Reject {
                reason: format!("zero-norm quaternion at frame {i}"),
            };
        }
    }
    match mean_consecutive_distance(traj) {
        Ok(_) => GateOutcome::Accept,
        Err(_) => GateOutcome::Reject {
            reason: "degenerate trajectory (d_bar below epsilon or too short)".into(),
        },
    }
}
