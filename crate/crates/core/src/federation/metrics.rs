use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{mse_per_sample, predict_labels, Batch, ModelKind, ModelParameters};

use super::threshold::detect_all;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Confusion {
        let mut c = Confusion::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn merge(&self, other: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, TPR, TNR and F1 from confusion counts. A ratio with an empty
/// denominator is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

impl RoundMetrics {
    pub fn from_confusion(c: Confusion) -> RoundMetrics {
        RoundMetrics {
            accuracy: ratio(c.tp + c.tn, c.total()),
            tpr: ratio(c.tp, c.positives()),
            tnr: ratio(c.tn, c.negatives()),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            confusion: c,
        }
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::Tpr => self.tpr,
            Metric::Tnr => self.tnr,
            Metric::F1 => self.f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Tpr,
    Tnr,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Accuracy, Metric::Tpr, Metric::Tnr, Metric::F1];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Accuracy => "Acc.",
            Metric::Tpr => "TPR",
            Metric::Tnr => "TNR",
            Metric::F1 => "F1",
        }
    }
}

/// Metrics on the known devices (pooled counts), on each known device, and on
/// the held-out device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub known: RoundMetrics,
    pub per_device: Vec<RoundMetrics>,
    pub new_device: Option<RoundMetrics>,
}

/// Attack decisions of a model: sigmoid > 0.5 for classifiers, reconstruction
/// error above `threshold` for autoencoders.
pub fn predict(
    model: &ModelParameters,
    threshold: Option<f64>,
    batch: &Batch,
) -> Result<Vec<bool>> {
    match model.arch.kind {
        ModelKind::Classifier => predict_labels(model, &batch.inputs),
        ModelKind::Autoencoder => {
            let thr = threshold
                .ok_or_else(|| Error::config("autoencoder evaluation needs a threshold"))?;
            Ok(detect_all(&mse_per_sample(model, &batch.inputs)?, thr))
        }
    }
}

pub fn confusion(
    model: &ModelParameters,
    threshold: Option<f64>,
    test: &Batch,
) -> Result<Confusion> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let labels = test
        .labels
        .as_ref()
        .ok_or(Error::MissingLabel { seq_index: 0 })?;
    let actual: Vec<bool> = labels.iter().map(|&y| y == 1.0).collect();
    Ok(Confusion::from_predictions(
        &predict(model, threshold, test)?,
        &actual,
    ))
}

pub fn evaluate(
    model: &ModelParameters,
    threshold: Option<f64>,
    known_tests: &[Batch],
    new_device_test: Option<&Batch>,
) -> Result<Evaluation> {
    if known_tests.is_empty() {
        return Err(Error::Empty("known-device test sets"));
    }
    let per_counts = known_tests
        .iter()
        .map(|t| confusion(model, threshold, t))
        .collect::<Result<Vec<_>>>()?;
    let pooled = per_counts
        .iter()
        .fold(Confusion::default(), |acc, c| acc.merge(c));
    let new_device = new_device_test
        .map(|t| confusion(model, threshold, t).map(RoundMetrics::from_confusion))
        .transpose()?;
    Ok(Evaluation {
        known: RoundMetrics::from_confusion(pooled),
        per_device: per_counts
            .into_iter()
            .map(RoundMetrics::from_confusion)
            .collect(),
        new_device,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_recall() {
        let m = RoundMetrics::from_confusion(Confusion {
            tp: 5,
            fn_: 0,
            tn: 3,
            fp: 2,
        });
        assert_eq!(m.tpr, 1.0);
        assert_eq!(m.tnr, 0.6);
    }

    #[test]
    fn constant_positive_on_mostly_benign() {
        let m = RoundMetrics::from_confusion(Confusion {
            tp: 50,
            fn_: 0,
            fp: 950,
            tn: 0,
        });
        assert!((m.f1 - 0.1 / 1.05).abs() < 1e-12);
        assert!((m.f1 - 0.095).abs() < 1e-3);
    }

    #[test]
    fn all_correct() {
        let m = RoundMetrics::from_confusion(Confusion::from_predictions(
            &[true, false, true],
            &[true, false, true],
        ));
        assert_eq!((m.accuracy, m.tpr, m.tnr, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_true_positive_means_zero_f1() {
        let m = RoundMetrics::from_confusion(Confusion {
            tp: 0,
            fn_: 4,
            tn: 10,
            fp: 0,
        });
        assert_eq!(m.f1, 0.0);
    }

    proptest! {
        #[test]
        fn accuracy_is_class_weighted_rate_mix(tp in 0u64..100, tn in 0u64..100, fp in 0u64..100, fn_ in 0u64..100) {
            prop_assume!(tp + fn_ > 0 && tn + fp > 0);
            let c = Confusion { tp, tn, fp, fn_ };
            let m = RoundMetrics::from_confusion(c);
            let (p, n) = (c.positives() as f64, c.negatives() as f64);
            prop_assert!((m.accuracy - (m.tpr * p + m.tnr * n) / (p + n)).abs() < 1e-12);
            for v in [m.accuracy, m.tpr, m.tnr, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
