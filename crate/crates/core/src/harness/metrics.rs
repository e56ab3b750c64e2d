use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// One entry per masked conv layer, in network order.
    pub mask_pct: Vec<f64>,
    pub seconds: f64,
}

/// Per-epoch training record. The CSV form leaves out wall-clock time so
/// that identical runs produce identical files; timings go to the summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    layers: Vec<String>,
    rows: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn new(layers: Vec<String>) -> Self {
        MetricsLog {
            layers,
            rows: Vec::new(),
        }
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    pub fn rows(&self) -> &[EpochMetrics] {
        &self.rows
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }

    pub fn push(&mut self, row: EpochMetrics) -> Result<()> {
        if row.mask_pct.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} mask percentages for {} layers",
                row.mask_pct.len(),
                self.layers.len()
            )));
        }
        if let Some(prev) = self.rows.last() {
            if row.epoch <= prev.epoch {
                return Err(Error::InvalidArgument(format!(
                    "epoch {} after epoch {}",
                    row.epoch, prev.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc,test_acc");
        for l in &self.layers {
            let _ = write!(s, ",{l}_mask_pct");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{:.6},{:.6},{:.6}", r.epoch, r.loss, r.train_acc, r.test_acc);
            for p in &r.mask_pct {
                let _ = write!(s, ",{p:.4}");
            }
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let total: f64 = self.rows.iter().map(|r| r.seconds).sum();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "epoch {:>3}  loss {:.4}  train_acc {:.4}  test_acc {:.4}  {:.1}s",
                r.epoch, r.loss, r.train_acc, r.test_acc, r.seconds
            );
        }
        if let Some(r) = self.rows.last() {
            let _ = writeln!(s, "final train_acc {:.4} test_acc {:.4}", r.train_acc, r.test_acc);
            for (l, p) in self.layers.iter().zip(&r.mask_pct) {
                let _ = writeln!(s, "  {l}: {p:.4} of frequencies masked");
            }
        }
        let _ = writeln!(s, "wall clock {total:.1}s");
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let w = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
        };
        w("metrics.csv", self.to_csv())?;
        w("summary.txt", self.summary())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, seconds: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            loss: 1.5,
            train_acc: 0.25,
            test_acc: 0.2,
            mask_pct: vec![0.125],
            seconds,
        }
    }

    #[test]
    fn csv_layout_ignores_timing() {
        let mut a = MetricsLog::new(vec!["conv1".into()]);
        a.push(row(1, 3.0)).unwrap();
        let mut b = MetricsLog::new(vec!["conv1".into()]);
        b.push(row(1, 9.0)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(
            a.to_csv(),
            "epoch,loss,train_acc,test_acc,conv1_mask_pct\n1,1.500000,0.250000,0.200000,0.1250\n"
        );
    }

    #[test]
    fn rows_must_increase() {
        let mut a = MetricsLog::new(vec!["conv1".into()]);
        a.push(row(2, 0.0)).unwrap();
        assert!(a.push(row(2, 0.0)).is_err());
        assert!(a
            .push(EpochMetrics {
                mask_pct: vec![],
                ..row(3, 0.0)
            })
            .is_err());
    }
}
