//! On-disk formats: checkpoints, metrics CSV, and atomic file writes.
//!
//! A checkpoint is a text header followed by raw little-endian `f64` data:
//!
//! ```text
//! permseq-checkpoint v1
//! kind sinkhorn
//! arch {"family":"sinkhorn",...}
//! sinkhorn {"tau":1.0,"iters":20,"noise_scale":1.0}
//! tensor enc.0.w 18 128
//! ...
//! end
//! <payload: every tensor in header order>
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::diffcore::Tensor;
use crate::nets::{ModelArch, ModelKind, ModelParams};
use crate::sinkhorn::SinkhornConfig;
use crate::train_eval::{Metrics, Model};

pub const CHECKPOINT_MAGIC: &str = "permseq-checkpoint v1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint holds a {found} model, which cannot run as {wanted}")]
    KindMismatch { found: ModelKind, wanted: ModelKind },
    #[error("malformed csv: {0}")]
    Csv(String),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8], force: bool) -> Result<(), IoError> {
    if !force && path.exists() {
        return Err(IoError::Exists(path.display().to_string()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(file_err(tmp))?;
    f.write_all(bytes).map_err(file_err(tmp))?;
    f.sync_all().map_err(file_err(tmp))?;
    fs::rename(tmp, path).map_err(file_err(path))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(file_err(path))
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(file_err(path))
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut header = format!("{CHECKPOINT_MAGIC}\nkind {}\n", model.kind);
    header.push_str(&format!("arch {}\n", serde_json::to_string(&model.arch).expect("arch serializes")));
    header.push_str(&format!(
        "sinkhorn {}\n",
        serde_json::to_string(&model.sinkhorn).expect("config serializes")
    ));
    let mut payload = Vec::new();
    for (name, t) in model.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend(payload);
    out
}

/// Parses a checkpoint; with `wanted`, the stored model must share its
/// family and is returned running as `wanted`.
pub fn parse_checkpoint(bytes: &[u8], wanted: Option<ModelKind>) -> Result<Model, IoError> {
    let bad = |m: &str| IoError::Checkpoint(m.to_string());
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("missing end of header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not utf-8"))?;
    let mut payload = &bytes[end + 5..];
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("wrong magic line"));
    }
    let mut field = |key: &str| -> Result<String, IoError> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(key))
            .and_then(|l| l.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| IoError::Checkpoint(format!("missing `{key}` line")))
    };
    let kind: ModelKind = field("kind")?.parse().map_err(|_| bad("unknown model kind"))?;
    let arch: ModelArch = serde_json::from_str(&field("arch")?).map_err(|e| bad(&e.to_string()))?;
    let sinkhorn: SinkhornConfig = serde_json::from_str(&field("sinkhorn")?).map_err(|e| bad(&e.to_string()))?;
    let mut params = ModelParams::new();
    for line in lines {
        let mut parts = line.split(' ');
        if parts.next() != Some("tensor") {
            return Err(bad("expected a tensor line"));
        }
        let name = parts.next().ok_or_else(|| bad("tensor without a name"))?;
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| bad("bad tensor dimension")))
            .collect::<Result<_, _>>()?;
        let count: usize = shape.iter().product();
        if payload.len() < count * 8 {
            return Err(bad("payload is truncated"));
        }
        let data = payload[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        payload = &payload[count * 8..];
        params.insert(name, Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?);
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    params.check_arch(&arch).map_err(|e| bad(&e.to_string()))?;
    let model = Model {
        kind,
        arch,
        params,
        sinkhorn,
    };
    match wanted {
        Some(w) if w.family() != kind.family() => Err(IoError::KindMismatch { found: kind, wanted: w }),
        Some(w) => Ok(Model { kind: w, ..model }),
        None => Ok(model),
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, force: bool) -> Result<(), IoError> {
    write_atomic(path, &checkpoint_bytes(model), force)
}

pub fn load_checkpoint(path: &Path, wanted: Option<ModelKind>) -> Result<Model, IoError> {
    parse_checkpoint(&read_file(path)?, wanted)
}

/// One evaluated (experiment, model, seed) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub experiment: String,
    pub model: String,
    pub seed: u64,
    pub train_size: usize,
    /// Action set size (tiles for spelling, blocks, pieces).
    pub actions: usize,
    pub metrics: Metrics,
}

pub const METRICS_HEADER: &str = "experiment,model,seed,train_size,actions,precision,exact_rate,repetition_rate,length_acc";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.experiment, r.model, r.seed, r.train_size, r.actions, m.precision, m.exact_rate, m.repetition_rate, m.length_acc
        ));
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, IoError> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(IoError::Csv("unexpected metrics header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(IoError::Csv(format!("expected 9 fields in `{line}`")));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| IoError::Csv(format!("bad number `{}`", f[i])));
            let int = |i: usize| f[i].parse::<u64>().map_err(|_| IoError::Csv(format!("bad integer `{}`", f[i])));
            Ok(MetricsRow {
                experiment: f[0].to_string(),
                model: f[1].to_string(),
                seed: int(2)?,
                train_size: int(3)? as usize,
                actions: int(4)? as usize,
                metrics: Metrics {
                    precision: num(5)?,
                    exact_rate: num(6)?,
                    repetition_rate: num(7)?,
                    length_acc: num(8)?,
                },
            })
        })
        .collect()
}
