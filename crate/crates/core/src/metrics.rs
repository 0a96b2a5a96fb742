//! Evaluation quantities computed from round records: average local accuracy,
//! rounds and communication to a target accuracy, and beta/epoch sweeps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{FlisError, Result};
use crate::federation::{self, FederationConfig, FederationRun, Mode, RoundRecord, BYTES_PER_PARAM};
use crate::nn::{self, LabeledData, ModelParams};

/// Unweighted mean over clients of top-1 test accuracy, each client scored
/// against the model paired with it.
pub fn avg_local_accuracy<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a ModelParams, &'a LabeledData)>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for (model, test) in pairs {
        sum += nn::accuracy(model, test)?;
        n += 1;
    }
    if n == 0 {
        return Err(FlisError::EmptyInput("no clients to average over"));
    }
    Ok(sum / n as f64)
}

/// 1-based index of the first round reaching `target`.
pub fn rounds_to_target(series: &[f64], target: f64) -> Option<usize> {
    series.iter().position(|&a| a >= target).map(|i| i + 1)
}

/// Total traffic in Mb (10^6 bytes) for models of `param_count` parameters.
pub fn comm_cost(records: &[RoundRecord], param_count: usize) -> f64 {
    let models: usize = records.iter().map(|r| r.models_down + r.models_up).sum();
    (models * param_count * BYTES_PER_PARAM) as f64 / 1e6
}

/// Traffic spent up to and including the first round reaching `target`.
pub fn cost_to_target(records: &[RoundRecord], param_count: usize, target: f64) -> Option<f64> {
    let series: Vec<f64> = records.iter().map(|r| r.mean_accuracy).collect();
    rounds_to_target(&series, target).map(|r| comm_cost(&records[..r], param_count))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub final_accuracy: f64,
    pub accuracy: Vec<f64>,
    /// FP + FN per round; `None` where no ground truth exists.
    pub clustering_error: Vec<Option<usize>>,
    pub num_clusters: Vec<usize>,
    pub cumulative_mb: Vec<f64>,
    pub comm_cost_mb: f64,
    pub param_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds_to_target: Option<usize>,
}

impl RunSummary {
    pub fn from_run(run: &FederationRun, target: Option<f64>) -> Self {
        let p = run.param_count();
        let accuracy: Vec<f64> = run.records.iter().map(|r| r.mean_accuracy).collect();
        let cumulative_mb = (1..=run.records.len()).map(|r| comm_cost(&run.records[..r], p)).collect();
        RunSummary {
            mode: run.mode,
            final_accuracy: *accuracy.last().expect("non-empty run"),
            clustering_error: run.records.iter().map(|r| r.clustering_error.map(|e| e.total())).collect(),
            num_clusters: run.records.iter().map(|r| r.clusters.len()).collect(),
            cumulative_mb,
            comm_cost_mb: comm_cost(&run.records, p),
            param_count: p,
            target,
            rounds_to_target: target.and_then(|t| rounds_to_target(&accuracy, t)),
            accuracy,
        }
    }

    /// Mb spent when the target was first reached.
    pub fn cost_to_target(&self) -> Option<f64> {
        self.rounds_to_target.map(|r| self.cumulative_mb[r - 1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub epochs: usize,
    pub accuracy: f64,
    pub fp: Option<usize>,
    #[serde(rename = "fn")]
    pub fn_: Option<usize>,
}

/// One dynamic-clustering run per `(beta, epochs)` grid point on shared data
/// and seed. Accuracy and clustering error are taken from the final round.
pub fn sweep(
    base: &FederationConfig,
    clients: &[ClientDataset],
    server: &LabeledData,
    betas: &[f64],
    epochs: &[usize],
) -> Result<Vec<SweepRow>> {
    let grid: Vec<(f64, usize)> = betas.iter().flat_map(|&b| epochs.iter().map(move |&e| (b, e))).collect();
    base.execution.try_map(&grid, |&(beta, local_epochs)| {
        let cfg = FederationConfig { beta, local_epochs, mode: Mode::Dc, ..base.clone() };
        let run = federation::run_flis_dc(&cfg, clients, server)?;
        let last = run.records.last().expect("non-empty run");
        Ok(SweepRow {
            beta,
            epochs: local_epochs,
            accuracy: last.mean_accuracy,
            fp: last.clustering_error.map(|e| e.false_positives),
            fn_: last.clustering_error.map(|e| e.false_negatives),
        })
    })
}

/// Writes `beta,epochs,accuracy,fp,fn`; missing error counts are left empty.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| FlisError::Csv(e.to_string());
    w.write_record(["beta", "epochs", "accuracy", "fp", "fn"]).map_err(err)?;
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([r.beta.to_string(), r.epochs.to_string(), r.accuracy.to_string(), opt(r.fp), opt(r.fn_)])
            .map_err(err)?;
    }
    w.flush().map_err(|e| FlisError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;

    #[test]
    fn rounds_to_target_cases() {
        let s = [0.3, 0.6, 0.8];
        assert_eq!(rounds_to_target(&s, 0.75), Some(3));
        assert_eq!(rounds_to_target(&s, 0.9), None);
        assert_eq!(rounds_to_target(&s, 0.0), Some(1));
    }

    #[test]
    fn perfect_and_single_client_accuracy() {
        // single layer mapping feature i to class i
        let mut w = vec![0.0; 2 * 2 + 2];
        w[0] = 5.0;
        w[3] = 5.0;
        let m = ModelParams::new(w, vec![(2, 2)]).unwrap();
        let test = LabeledData::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0, 1], 2).unwrap();
        assert_eq!(avg_local_accuracy([(&m, &test), (&m, &test)]).unwrap(), 1.0);
        let half = LabeledData::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap(), vec![0, 1], 2).unwrap();
        assert_eq!(avg_local_accuracy([(&m, &half)]).unwrap(), 0.5);
        assert!(avg_local_accuracy(std::iter::empty()).is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = vec![
            SweepRow { beta: 0.0, epochs: 1, accuracy: 0.5, fp: Some(3), fn_: Some(0) },
            SweepRow { beta: 0.5, epochs: 5, accuracy: 0.75, fp: None, fn_: None },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "beta,epochs,accuracy,fp,fn\n0,1,0.5,3,0\n0.5,5,0.75,,\n");
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
