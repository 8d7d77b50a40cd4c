//! Comma-separated training and evaluation records.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const HEADER: &str = "step,task_nats,bpc,balance,uncertainty,total,router_entropy,expert_load_gini,k,wall_ms";
pub const EVAL_HEADER: &str = "step,split,k,task_nats,bpc,ppl";

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRow {
    pub step: u64,
    pub task_nats: f64,
    pub bpc: f64,
    pub balance: f64,
    pub uncertainty: f64,
    pub total: f64,
    pub router_entropy: f64,
    pub expert_load_gini: f64,
    pub k: usize,
    pub wall_ms: u64,
}

impl MetricsRow {
    /// Floats use the shortest round-trip representation.
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.task_nats,
            self.bpc,
            self.balance,
            self.uncertainty,
            self.total,
            self.router_entropy,
            self.expert_load_gini,
            self.k,
            self.wall_ms
        );
        s
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(format!("expected 10 fields, got {}", f.len()));
        }
        let fl = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"));
        let int = |i: usize| f[i].parse::<u64>().map_err(|e| format!("field {i}: {e}"));
        Ok(Self {
            step: int(0)?,
            task_nats: fl(1)?,
            bpc: fl(2)?,
            balance: fl(3)?,
            uncertainty: fl(4)?,
            total: fl(5)?,
            router_entropy: fl(6)?,
            expert_load_gini: fl(7)?,
            k: int(8)? as usize,
            wall_ms: int(9)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub split: String,
    pub k: usize,
    pub task_nats: f64,
    pub bpc: f64,
    pub ppl: f64,
}

impl EvalRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.split, self.k, self.task_nats, self.bpc, self.ppl
        )
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(format!("expected 6 fields, got {}", f.len()));
        }
        let fl = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"));
        Ok(Self {
            step: f[0].parse().map_err(|e| format!("field 0: {e}"))?,
            split: f[1].to_string(),
            k: f[2].parse().map_err(|e| format!("field 2: {e}"))?,
            task_nats: fl(3)?,
            bpc: fl(4)?,
            ppl: fl(5)?,
        })
    }
}

fn read_lines(path: &Path, header: &str) -> Result<Vec<String>, MetricsError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    match lines.next().transpose()? {
        Some(h) if h == header => {}
        other => {
            return Err(MetricsError::Parse {
                line: 1,
                reason: format!("bad header {other:?}"),
            })
        }
    }
    lines.map(|l| l.map_err(MetricsError::from)).collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    read_lines(path, HEADER)?
        .iter()
        .enumerate()
        .map(|(i, l)| MetricsRow::parse(l).map_err(|reason| MetricsError::Parse { line: i + 2, reason }))
        .collect()
}

pub fn read_eval(path: &Path) -> Result<Vec<EvalRow>, MetricsError> {
    read_lines(path, EVAL_HEADER)?
        .iter()
        .enumerate()
        .map(|(i, l)| EvalRow::parse(l).map_err(|reason| MetricsError::Parse { line: i + 2, reason }))
        .collect()
}

/// Append-only CSV file.
#[derive(Debug)]
pub struct CsvLog {
    file: File,
}

impl CsvLog {
    /// Starts a fresh file with `header`.
    pub fn create(path: &Path, header: &str) -> Result<Self, MetricsError> {
        let mut file = File::create(path)?;
        writeln!(file, "{header}")?;
        Ok(Self { file })
    }

    /// Reopens `path`, keeping only rows whose leading step is at most
    /// `max_step`; a missing file is created.
    pub fn resume(path: &Path, header: &str, max_step: u64) -> Result<Self, MetricsError> {
        if !path.exists() {
            return Self::create(path, header);
        }
        let kept: Vec<String> = read_lines(path, header)?
            .into_iter()
            .filter(|l| {
                l.split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s <= max_step)
            })
            .collect();
        let mut log = Self::create(path, header)?;
        for l in kept {
            writeln!(log.file, "{l}")?;
        }
        log.file.flush()?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, line: &str) -> Result<(), MetricsError> {
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}
