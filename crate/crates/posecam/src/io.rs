//! Serialization: TUM trajectory text, strict run-config JSON, covisibility
//! CSV, versioned binary feature blobs, metrics CSV, and model checkpoints.

use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{PoseCamError, Result};
use crate::geom::{Quat, RigidPose, Trajectory};
use crate::loss::LossWeights;
use crate::net::{NetConfig, OptimConfig, TinyNet};
use crate::sampling::CovisGraph;
use crate::train::TrainConfig;

/// Formats a float with 9 decimals, the fixed on-disk precision.
pub fn fmt9(v: f64) -> String {
    format!("{v:.9}")
}

/// Parses TUM trajectory text: one `timestamp tx ty tz qx qy qz qw` record
/// per line, `#` comments and blank lines allowed. Quaternions are stored
/// internally in (w, x, y, z) order.
pub fn parse_tum(text: &str) -> Result<Trajectory> {
    let mut poses = Vec::new();
    let mut prev_ts = f64::NEG_INFINITY;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(PoseCamError::Parse {
                line: lineno + 1,
                msg: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 8];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.parse().map_err(|_| PoseCamError::Parse {
                line: lineno + 1,
                msg: format!("non-numeric field '{f}'"),
            })?;
        }
        let [ts, tx, ty, tz, qx, qy, qz, qw] = vals;
        if ts <= prev_ts {
            return Err(PoseCamError::Format(format!(
                "non-increasing timestamp {ts} at line {}",
                lineno + 1
            )));
        }
        prev_ts = ts;
        poses.push((
            ts,
            RigidPose::new(Quat::new(qw, qx, qy, qz), Vector3::new(tx, ty, tz)),
        ));
    }
    Trajectory::new(poses)
}

/// Writes TUM trajectory text with a header comment and 9-decimal floats;
/// the quaternion is re-emitted in (qx qy qz qw) order.
pub fn write_tum(traj: &Trajectory) -> String {
    write_tum_records(traj.poses())
}

/// Record-level TUM writer; unlike [`Trajectory`], the record list may be
/// empty, producing a header-only file.
pub fn write_tum_records(records: &[(f64, RigidPose)]) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (ts, pose) in records {
        let t = pose.translation;
        let q = pose.rotation;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            fmt9(*ts),
            fmt9(t.x),
            fmt9(t.y),
            fmt9(t.z),
            fmt9(q.x),
            fmt9(q.y),
            fmt9(q.z),
            fmt9(q.w),
        ));
    }
    out
}

/// Full run configuration for `train-synth`. Strict: unknown keys are
/// rejected so a misspelled `beta`/`alpha`/`lambda_pose` cannot silently
/// fall back to a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| PoseCamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.train.validate(&self.net)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

/// Reads a covisibility matrix from CSV: N rows of N comma-separated scores.
pub fn read_covis_csv(text: &str) -> Result<CovisGraph> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim().parse().map_err(|_| PoseCamError::Parse {
                    line: lineno + 1,
                    msg: format!("non-numeric covisibility '{}'", f.trim()),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * n);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(PoseCamError::Format(format!(
                "covisibility row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        flat.extend_from_slice(row);
    }
    CovisGraph::new(n, flat)
}

const FEATURE_MAGIC: &[u8; 4] = b"PCFB";
const FEATURE_VERSION: u32 = 1;

/// Writes a row-major f64 matrix as a versioned little-endian binary blob.
pub fn write_feature_blob<W: Write>(w: &mut W, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(PoseCamError::InvalidInput(format!(
            "feature blob has {} values, expected {rows}x{cols}",
            data.len()
        )));
    }
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a feature blob written by [`write_feature_blob`].
pub fn read_feature_blob<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(PoseCamError::Format("bad feature blob magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FEATURE_VERSION {
        return Err(PoseCamError::Format(format!(
            "unsupported feature blob version {version}"
        )));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let cols = u64::from_le_bytes(u64buf) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| PoseCamError::Format("feature blob dims overflow".into()))?;
    let mut data = Vec::with_capacity(n);
    let mut f64buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut f64buf)?;
        data.push(f64::from_le_bytes(f64buf));
    }
    Ok((rows, cols, data))
}

/// One metrics CSV row emitted per evaluation point during training.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub eval_ate: f64,
    pub eval_qa_acc: f64,
}

/// Serializes metrics rows with a header, `,` separators, and fixed
/// 9-decimal floats for byte-stable output.
pub fn write_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,train_loss,eval_ate,eval_qa_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step,
            fmt9(r.train_loss),
            fmt9(r.eval_ate),
            fmt9(r.eval_qa_acc)
        ));
    }
    out
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Saves all named parameter tensors of a model as a versioned binary blob.
pub fn write_checkpoint<W: Write>(w: &mut W, net: &TinyNet) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let defs = net.param_defs();
    let values = net.param_values();
    w.write_all(&(defs.len() as u64).to_le_bytes())?;
    for (def, vals) in defs.iter().zip(values) {
        let name = def.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(def.rows as u64).to_le_bytes())?;
        w.write_all(&(def.cols as u64).to_le_bytes())?;
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads a checkpoint into an existing model. Tensor names and shapes must
/// match the model exactly.
pub fn read_checkpoint<R: Read>(r: &mut R, net: &mut TinyNet) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(PoseCamError::Format("bad checkpoint magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
        return Err(PoseCamError::Format("unsupported checkpoint version".into()));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let n_tensors = u64::from_le_bytes(u64buf) as usize;
    if n_tensors != net.param_defs().len() {
        return Err(PoseCamError::Format(format!(
            "checkpoint has {n_tensors} tensors, model has {}",
            net.param_defs().len()
        )));
    }
    for i in 0..n_tensors {
        r.read_exact(&mut u64buf)?;
        let name_len = u64::from_le_bytes(u64buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| PoseCamError::Format("non-utf8 tensor name".into()))?;
        r.read_exact(&mut u64buf)?;
        let rows = u64::from_le_bytes(u64buf) as usize;
        r.read_exact(&mut u64buf)?;
        let cols = u64::from_le_bytes(u64buf) as usize;
        let def = &net.param_defs()[i];
        if def.name != name || def.rows != rows || def.cols != cols {
            return Err(PoseCamError::Format(format!(
                "checkpoint tensor {i} is {name} [{rows}x{cols}], model expects {} [{}x{}]",
                def.name, def.rows, def.cols
            )));
        }
        let mut f64buf = [0u8; 8];
        let vals = &mut net.param_values_mut()[i];
        for v in vals.iter_mut() {
            r.read_exact(&mut f64buf)?;
            *v = f64::from_le_bytes(f64buf);
        }
    }
    Ok(())
}

/// Seed resolution: explicit CLI value wins, then `POSECAM_SEED`, then the
/// given default.
pub fn resolve_seed(cli: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = cli {
        return Ok(s);
    }
    match std::env::var("POSECAM_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| PoseCamError::Config(format!("POSECAM_SEED is not an integer: '{v}'"))),
        Err(_) => Ok(default),
    }
}
