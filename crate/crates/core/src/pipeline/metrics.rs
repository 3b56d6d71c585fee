use serde::{Deserialize, Serialize};

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub labels: Vec<String>,
    pub accuracy: f64,
    /// Recall per class; `null` for a class absent from the eval set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion_matrix: Vec<Vec<usize>>,
    pub loss_curve: Vec<f64>,
}

impl Metrics {
    pub fn from_predictions(
        labels: &[&str],
        truth: &[usize],
        predicted: &[usize],
        loss_curve: Vec<f64>,
    ) -> Result<Self, PipelineError> {
        if truth.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        assert_eq!(truth.len(), predicted.len());
        let k = labels.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        Ok(Self {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            accuracy: trace as f64 / truth.len() as f64,
            per_class_accuracy: per_class,
            confusion_matrix: confusion,
            loss_curve,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}
