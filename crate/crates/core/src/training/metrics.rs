//! Per-step training metrics, kept in memory and optionally streamed to a
//! CSV file.

use crate::error::Result;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const METRICS_HEADER: &str = "epoch,step,stage,sup_term,self_term,point_term,total,lr,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub stage: &'static str,
    pub sup_term: f64,
    pub self_term: f64,
    pub point_term: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.stage,
            self.sup_term,
            self.self_term,
            self.point_term,
            self.total,
            self.lr,
            self.wall_ms
        )
    }

    /// Everything except the wall-clock column, for bitwise resume checks.
    pub fn deterministic_fields(&self) -> (usize, usize, &'static str, f64, f64, f64, f64, f64) {
        (
            self.epoch,
            self.step,
            self.stage,
            self.sup_term,
            self.self_term,
            self.point_term,
            self.total,
            self.lr,
        )
    }
}

pub struct MetricsSink {
    writer: Option<BufWriter<File>>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsSink {
    pub fn in_memory() -> Self {
        Self {
            writer: None,
            rows: Vec::new(),
        }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let mut writer = BufWriter::new(File::create(path)?);
        writeln!(writer, "{METRICS_HEADER}")?;
        Ok(Self {
            writer: Some(writer),
            rows: Vec::new(),
        })
    }

    pub fn record(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            writeln!(w, "{}", row.to_csv())?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    /// Mean of the total column per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for row in &self.rows {
            match out.last_mut() {
                Some((e, sum, n)) if *e == row.epoch => {
                    *sum += row.total;
                    *n += 1;
                }
                _ => out.push((row.epoch, row.total, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }
}
