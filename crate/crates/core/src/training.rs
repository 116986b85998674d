//! Plumbing shared by the training loops: schedule settings, per-step
//! seeding, loss records and checkpoint file naming.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelKind;
use crate::error::{Error, Result};
use crate::nn::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            max_steps: 2000,
            checkpoint_interval: 500,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        self.optimizer.validate()
    }

    /// Optimizer steps per pass over `n_items` training items.
    pub fn steps_per_epoch(&self, n_items: usize) -> u64 {
        (n_items.div_ceil(self.batch_size)).max(1) as u64
    }
}

/// Generator for one optimizer step. Independent of how many steps ran in
/// this process, so a resumed run draws the same data as an uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Named loss values of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub terms: Vec<(String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct LogLine<'a> {
    step: u64,
    term: std::borrow::Cow<'a, str>,
    value: f64,
}

impl LossRecord {
    pub fn new(step: u64) -> Self {
        Self {
            step,
            terms: Vec::new(),
        }
    }

    pub fn push(&mut self, term: &str, value: f64) {
        self.terms.push((term.to_string(), value));
    }

    pub fn get(&self, term: &str) -> Option<f64> {
        self.terms.iter().find(|(t, _)| t == term).map(|(_, v)| *v)
    }

    /// Fails on the first non-finite term, naming it.
    pub fn check_finite(&self) -> Result<()> {
        match self.terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFinite {
                term: term.clone(),
                step: self.step,
            }),
            None => Ok(()),
        }
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for (term, value) in &self.terms {
            let line = LogLine {
                step: self.step,
                term: term.as_str().into(),
                value: *value,
            };
            let s = serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{s}").map_err(|e| Error::io("<loss log>", e))?;
        }
        Ok(())
    }
}

/// Append-only JSONL loss log.
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    pub fn append(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, rec: &LossRecord) -> Result<()> {
        rec.write_jsonl(&mut self.out)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// `(step, term, value)` triples in file order.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, String, f64)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogLine = serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?;
        out.push((rec.step, rec.term.into_owned(), rec.value));
    }
    Ok(out)
}

pub fn checkpoint_path(dir: &Path, kind: ModelKind, step: u64) -> PathBuf {
    dir.join(format!("{kind}-{step:08}.ckpt"))
}

/// Highest-step checkpoint of `kind` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path, kind: ModelKind) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let prefix = format!("{kind}-");
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(step) = name
            .strip_prefix(&prefix)
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Mean of the last `window` values ending at `end` (exclusive).
pub fn trailing_mean(values: &[f64], end: usize, window: usize) -> f64 {
    let end = end.min(values.len());
    let start = end.saturating_sub(window);
    let slice = &values[start..end];
    slice.iter().sum::<f64>() / slice.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn step_rng_independent_of_history() {
        let a: u64 = step_rng(5, 17).random();
        let b: u64 = step_rng(5, 17).random();
        let c: u64 = step_rng(5, 18).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn non_finite_term_is_named() {
        let mut r = LossRecord::new(3);
        r.push("adv", 1.0);
        r.push("recon", f64::NAN);
        match r.check_finite() {
            Err(Error::NonFinite { term, step }) => {
                assert_eq!(term, "recon");
                assert_eq!(step, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn log_round_trip_and_latest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.jsonl");
        let mut log = LossLog::append(&path).unwrap();
        let mut r = LossRecord::new(1);
        r.push("kl", 0.25);
        log.write(&r).unwrap();
        log.flush().unwrap();
        assert_eq!(
            read_loss_log(&path).unwrap(),
            vec![(1, "kl".to_string(), 0.25)]
        );

        for s in [5, 40, 12] {
            std::fs::write(checkpoint_path(dir.path(), ModelKind::Sfen, s), b"x").unwrap();
        }
        let latest = latest_checkpoint(dir.path(), ModelKind::Sfen)
            .unwrap()
            .unwrap();
        assert!(latest.ends_with("sfen-00000040.ckpt"));
        assert!(latest_checkpoint(dir.path(), ModelKind::Tts)
            .unwrap()
            .is_none());
    }

    #[test]
    fn epoch_arithmetic() {
        let cfg = TrainConfig {
            batch_size: 4,
            ..Default::default()
        };
        assert_eq!(cfg.steps_per_epoch(10), 3);
        assert_eq!(cfg.steps_per_epoch(1), 1);
    }
}
