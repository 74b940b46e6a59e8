//! Append-only metrics CSV, one row per training step, flushed per row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Error;

/// One log record. `probe_mse` is populated on evaluation steps only and
/// serializes as an empty field otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub total_loss: f64,
    /// Per-level mean losses, levels 0..=L.
    pub level_losses: Vec<f64>,
    /// Mean training-batch similarity per temporal distance bucket 0..=L.
    pub sim_means: Vec<f64>,
    /// Mean similarity of cross-sequence pairs.
    pub sim_cross: f64,
    pub grad_norm: f64,
    pub probe_mse: Option<f64>,
    pub wall_ms: f64,
}

pub fn header(window: usize) -> String {
    let mut cols = vec!["step".to_string(), "total_loss".to_string()];
    for l in 0..=window {
        cols.push(format!("loss_l{l}"));
    }
    for l in 0..=window {
        cols.push(format!("sim_d{l}"));
    }
    cols.push("sim_cross".into());
    cols.push("grad_norm".into());
    cols.push("probe_mse".into());
    cols.push("wall_ms".into());
    cols.join(",")
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut fields = vec![self.step.to_string(), format!("{:.9e}", self.total_loss)];
        for v in &self.level_losses {
            fields.push(format!("{v:.9e}"));
        }
        for v in &self.sim_means {
            fields.push(format!("{v:.9e}"));
        }
        fields.push(format!("{:.9e}", self.sim_cross));
        fields.push(format!("{:.9e}", self.grad_norm));
        fields.push(match self.probe_mse {
            Some(v) => format!("{v:.9e}"),
            None => String::new(),
        });
        fields.push(format!("{:.3}", self.wall_ms));
        fields.join(",")
    }

    /// Everything except the wall-clock column, which is the one
    /// nondeterministic field.
    pub fn deterministic_fields(&self) -> String {
        let csv = self.to_csv();
        match csv.rfind(',') {
            Some(i) => csv[..i].to_string(),
            None => csv,
        }
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, window: usize) -> Result<Self, Error> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", header(window))?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<(), Error> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_window() {
        assert_eq!(
            header(1),
            "step,total_loss,loss_l0,loss_l1,sim_d0,sim_d1,sim_cross,grad_norm,probe_mse,wall_ms"
        );
    }

    #[test]
    fn empty_probe_field_between_evals() {
        let row = MetricsRow {
            step: 3,
            total_loss: 1.0,
            level_losses: vec![0.5],
            sim_means: vec![0.1],
            sim_cross: 0.0,
            grad_norm: 2.0,
            probe_mse: None,
            wall_ms: 1.25,
        };
        let csv = row.to_csv();
        assert!(csv.contains(",,"), "probe field must serialize empty: {csv}");
        assert!(row.deterministic_fields().ends_with(','), "strips wall_ms only");
    }
}
