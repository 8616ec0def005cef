//! Line-delimited JSON metrics log: one record per training iteration with
//! every loss component, the learning rate, and the disturbance loss.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use adp_core::trainer::StepMetrics;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub id_h: f64,
    pub tri_h: f64,
    pub id_o: f64,
    pub tri_o: f64,
    pub tri_global: f64,
    pub itr: f64,
    pub lambda: f64,
    pub total: f64,
    pub l_adm: f64,
}

impl From<&StepMetrics> for MetricsRecord {
    fn from(m: &StepMetrics) -> Self {
        Self {
            iteration: m.iteration,
            epoch: m.epoch,
            lr: m.lr,
            id_h: m.losses.id_h,
            tri_h: m.losses.tri_h,
            id_o: m.losses.id_o,
            tri_o: m.losses.tri_o,
            tri_global: m.losses.tri_global,
            itr: m.losses.itr,
            lambda: m.losses.lambda,
            total: m.losses.total,
            l_adm: m.l_adm,
        }
    }
}

/// Append-based writer so a resumed run continues the same log.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)
            .with_context(|| format!("cannot create metrics log {}", path.display()))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = File::options()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("cannot open metrics log {}", path.display()))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let record = MetricsRecord::from(m);
        serde_json::to_writer(&mut self.out, &record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file =
        File::open(path).with_context(|| format!("cannot read metrics log {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}: bad record", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use adp_core::dpc::LossBundle;

    fn sample(it: u64) -> StepMetrics {
        StepMetrics {
            iteration: it,
            epoch: 3,
            lr: 0.004,
            losses: LossBundle {
                id_h: 1.0,
                tri_h: 0.5,
                id_o: 2.0,
                tri_o: 0.25,
                tri_global: 0.125,
                itr: 3.5,
                lambda: 0.1,
                total: 4.225,
            },
            l_adm: 0.75,
        }
    }

    #[test]
    fn log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&sample(1)).unwrap();
        w.write(&sample(2)).unwrap();
        w.flush().unwrap();
        drop(w);
        let records = read(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0], MetricsRecord::from(&sample(1)));
        assert_eq!(records[1].iteration, 2);
    }

    #[test]
    fn append_continues_the_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&sample(1)).unwrap();
        w.flush().unwrap();
        drop(w);
        let mut w = MetricsWriter::append(&path).unwrap();
        w.write(&sample(2)).unwrap();
        w.flush().unwrap();
        drop(w);
        let records = read(&path).unwrap();
        assert_eq!(records.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![1, 2]);
    }
}
