//! Pose-grounded video understanding at desk scale: camera-pose encoding and
//! loss, Sim(3)-aligned trajectory evaluation, frame-sampling strategies, an
//! interleaved multi-task training scheduler, and a miniature causal
//! transformer with pose tokens and a camera head, trained and verified on
//! synthetic trajectories.

pub mod error;
pub mod geom;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod sampling;
pub mod io;
pub mod pipeline;
pub mod schedule;
pub mod synth;
pub mod train;

pub use error::{PoseCamError, Result};
