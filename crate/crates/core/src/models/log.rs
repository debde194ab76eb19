use serde::{Deserialize, Serialize};

/// Per-epoch loss components of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    /// Names of the logged components, in column order.
    pub columns: Vec<String>,
    /// `(epoch, values)` rows; epochs strictly increase.
    pub rows: Vec<(usize, Vec<f64>)>,
    pub wall_clock_secs: f64,
    /// Held-out reconstruction MSE, for models with an encoder.
    pub holdout_mse: Option<f64>,
}

impl TrainLog {
    pub fn new(seed: u64, columns: &[&str]) -> Self {
        Self {
            seed,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, epoch: usize, values: Vec<f64>) {
        debug_assert!(self.rows.last().map_or(true, |(e, _)| *e < epoch));
        self.rows.push((epoch, values));
    }

    pub fn last(&self, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|n| n == column)?;
        self.rows.last().map(|(_, v)| v[c])
    }

    /// `epoch,<columns…>` with one line per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (e, vals) in &self.rows {
            out.push_str(&e.to_string());
            for v in vals {
                out.push(',');
                out.push_str(&format!("{v:.8e}"));
            }
            out.push('\n');
        }
        out
    }
}
