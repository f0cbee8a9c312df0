//! Server-side aggregation rules: averaging, coordinate-wise median,
//! coordinate-wise trimmed mean, and the s-resampling pre-step.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::ModelParameters;

/// Upper bound on rejection draws for a single resampling slot.
pub const MAX_RESAMPLE_DRAWS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Avg,
    Med,
    Tm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub rule: Rule,
    /// Values trimmed from each end per coordinate (TM only).
    #[serde(default, rename = "c")]
    pub trim_c: usize,
    /// Resampling factor; 0 disables the pre-step.
    #[serde(default, rename = "s")]
    pub resample_s: usize,
}

impl AggregationSpec {
    pub const AVG: AggregationSpec = AggregationSpec {
        rule: Rule::Avg,
        trim_c: 0,
        resample_s: 0,
    };
    pub const MED: AggregationSpec = AggregationSpec {
        rule: Rule::Med,
        trim_c: 0,
        resample_s: 0,
    };

    pub fn trimmed(c: usize) -> Self {
        AggregationSpec {
            rule: Rule::Tm,
            trim_c: c,
            resample_s: 0,
        }
    }

    pub fn with_resampling(self, s: usize) -> Self {
        AggregationSpec {
            resample_s: s,
            ..self
        }
    }

    /// The rules compared in the adversarial sweep.
    pub fn sweep_rules() -> Vec<AggregationSpec> {
        vec![
            AggregationSpec::AVG,
            AggregationSpec::MED,
            AggregationSpec::trimmed(1),
            AggregationSpec::trimmed(2),
            AggregationSpec::trimmed(2).with_resampling(2),
        ]
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.rule == Rule::Tm && 2 * self.trim_c >= k {
            return Err(Error::config(format!(
                "TM({}) needs more than {} clients, got {k}",
                self.trim_c,
                2 * self.trim_c
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let base = match self.rule {
            Rule::Avg => "AVG".to_owned(),
            Rule::Med => "MED".to_owned(),
            Rule::Tm => format!("TM({})", self.trim_c),
        };
        if self.resample_s > 0 {
            format!("{base}∘{}-Resampling", self.resample_s)
        } else {
            base
        }
    }
}

fn check_models(models: &[ModelParameters]) -> Result<()> {
    let first = models.first().ok_or(Error::Empty("model list"))?;
    for m in models {
        if m.arch != first.arch {
            return Err(Error::ArchitectureMismatch);
        }
        if m.flat.len() != first.flat.len() {
            return Err(Error::DimensionMismatch {
                expected: first.flat.len(),
                found: m.flat.len(),
            });
        }
    }
    Ok(())
}

fn per_coordinate(
    models: &[ModelParameters],
    mut reduce: impl FnMut(&mut [f64]) -> f64,
) -> ModelParameters {
    let d = models[0].flat.len();
    let mut column = vec![0.0; models.len()];
    let flat = (0..d)
        .map(|i| {
            for (c, m) in column.iter_mut().zip(models) {
                *c = m.flat[i];
            }
            reduce(&mut column)
        })
        .collect();
    ModelParameters {
        arch: models[0].arch.clone(),
        flat,
    }
}

/// Unweighted coordinate-wise mean.
pub fn average(models: &[ModelParameters]) -> Result<ModelParameters> {
    check_models(models)?;
    let k = models.len() as f64;
    let mut flat = models[0].flat.clone();
    for m in &models[1..] {
        for (acc, v) in flat.iter_mut().zip(&m.flat) {
            *acc += v;
        }
    }
    if models.len() > 1 {
        flat.iter_mut().for_each(|v| *v /= k);
    }
    Ok(ModelParameters {
        arch: models[0].arch.clone(),
        flat,
    })
}

/// Coordinate-wise median; for even K the mean of the two middle values.
pub fn coordinate_median(models: &[ModelParameters]) -> Result<ModelParameters> {
    check_models(models)?;
    Ok(per_coordinate(models, |column| {
        column.sort_unstable_by(f64::total_cmp);
        let mid = column.len() / 2;
        if column.len() % 2 == 1 {
            column[mid]
        } else {
            (column[mid - 1] + column[mid]) / 2.0
        }
    }))
}

/// Coordinate-wise mean after dropping the `c` smallest and `c` largest
/// values by sorted position.
pub fn trimmed_mean(models: &[ModelParameters], c: usize) -> Result<ModelParameters> {
    check_models(models)?;
    let k = models.len();
    if 2 * c >= k {
        return Err(Error::config(format!(
            "TM({c}) leaves no value among {k} clients"
        )));
    }
    let kept = (k - 2 * c) as f64;
    Ok(per_coordinate(models, |column| {
        column.sort_unstable_by(f64::total_cmp);
        column[c..k - c].iter().sum::<f64>() / kept
    }))
}

fn lexicographic(a: &ModelParameters, b: &ModelParameters) -> Ordering {
    a.flat
        .iter()
        .zip(&b.flat)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Replace each model by the mean of `s` models drawn with the capped
/// rejection loop: every input is drawn at most `s` times overall.
///
/// Inputs are put in a canonical (lexicographic) order first, so the output
/// does not depend on the order clients were listed in.
pub fn s_resample(
    models: &[ModelParameters],
    s: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ModelParameters>> {
    check_models(models)?;
    if s == 0 {
        return Err(Error::config("s-resampling needs s >= 1"));
    }
    let mut canonical: Vec<&ModelParameters> = models.iter().collect();
    canonical.sort_by(|a, b| lexicographic(a, b));

    let k = canonical.len();
    let mut used = vec![0usize; k];
    let mut outputs = Vec::with_capacity(k);
    for _ in 0..k {
        let mut picks = Vec::with_capacity(s);
        for _ in 0..s {
            let mut draws = 0u64;
            let j = loop {
                if draws == MAX_RESAMPLE_DRAWS {
                    return Err(Error::ResampleExhausted(MAX_RESAMPLE_DRAWS));
                }
                draws += 1;
                let j = rng.random_range(0..k);
                if used[j] < s {
                    used[j] += 1;
                    break j;
                }
            };
            picks.push(canonical[j].clone());
        }
        outputs.push(average(&picks)?);
    }
    Ok(outputs)
}

/// Optional s-resampling followed by the configured rule.
pub fn aggregate(
    spec: &AggregationSpec,
    models: &[ModelParameters],
    rng: &mut impl Rng,
) -> Result<ModelParameters> {
    check_models(models)?;
    spec.validate(models.len())?;
    let resampled;
    let inputs = if spec.resample_s > 0 {
        resampled = s_resample(models, spec.resample_s, rng)?;
        &resampled[..]
    } else {
        models
    };
    match spec.rule {
        Rule::Avg => average(inputs),
        Rule::Med => coordinate_median(inputs),
        Rule::Tm => trimmed_mean(inputs, spec.trim_c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{ArchitectureSpec, ModelKind};
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn models(columns: &[Vec<f64>]) -> Vec<ModelParameters> {
        let d = columns[0].len();
        // A hidden-less autoencoder has d*d + d parameters; the first d carry
        // the test values and the rest stay zero.
        let arch = ArchitectureSpec::new(ModelKind::Autoencoder, d, vec![]).unwrap();
        let pad = arch.param_count() - d;
        columns
            .iter()
            .map(|c| {
                let mut flat = c.clone();
                flat.extend(std::iter::repeat_n(0.0, pad));
                ModelParameters::from_flat(arch.clone(), flat).unwrap()
            })
            .collect()
    }

    fn scalar_models(values: &[f64]) -> Vec<ModelParameters> {
        let arch = ArchitectureSpec::new(ModelKind::Classifier, 1, vec![]).unwrap();
        values
            .iter()
            .map(|&v| ModelParameters::from_flat(arch.clone(), vec![v, 0.0]).unwrap())
            .collect()
    }

    #[test]
    fn average_examples() {
        let same = scalar_models(&[1.5, 1.5, 1.5]);
        assert_eq!(average(&same).unwrap(), same[0]);
        assert_eq!(average(&scalar_models(&[1.0, 3.0])).unwrap().flat[0], 2.0);
    }

    #[test]
    fn average_cancels_with_scaled_echo() {
        let w = vec![0.3, -1.25, 2.0];
        let mut inputs = vec![w.clone(); 7];
        inputs.push(w.iter().map(|v| -7.0 * v).collect());
        let out = average(&models(&inputs)).unwrap();
        assert!(out.flat.iter().all(|&v| v == 0.0), "{:?}", &out.flat[..3]);
    }

    #[test]
    fn median_examples() {
        let eight: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(
            coordinate_median(&scalar_models(&eight)).unwrap().flat[0],
            4.5
        );
        assert_eq!(
            coordinate_median(&scalar_models(&[1.0, 2.0, 1e9]))
                .unwrap()
                .flat[0],
            2.0
        );
    }

    #[test]
    fn trimmed_mean_examples() {
        let vals = [0.0, 1.0, 2.0, 3.0, 100.0];
        assert_eq!(trimmed_mean(&scalar_models(&vals), 1).unwrap().flat[0], 2.0);
        let m = scalar_models(&[0.5, 3.0, -2.0, 7.0]);
        assert_eq!(trimmed_mean(&m, 0).unwrap(), average(&m).unwrap());
        assert!(matches!(trimmed_mean(&m, 2), Err(Error::Config(_))));
    }

    #[test]
    fn errors_on_empty_and_mismatch() {
        assert!(matches!(average(&[]), Err(Error::Empty(_))));
        let mut m = scalar_models(&[1.0, 2.0]);
        m.push(models(&[vec![1.0]])[0].clone());
        assert!(matches!(
            coordinate_median(&m),
            Err(Error::ArchitectureMismatch)
        ));
    }

    #[test]
    fn resample_with_s1_is_a_permutation() {
        let inputs = scalar_models(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        let out = s_resample(&inputs, 1, &mut seed::rng(1)).unwrap();
        let mut got: Vec<f64> = out.iter().map(|m| m.flat[0]).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn resample_uses_every_input_exactly_s_times() {
        // Powers of two identify which inputs went into each output sum.
        let inputs = scalar_models(
            &(0..8)
                .map(|i| f64::from(1u32 << (3 * i)))
                .collect::<Vec<_>>(),
        );
        for s in 1..=4 {
            let out = s_resample(&inputs, s, &mut seed::rng(s as u64)).unwrap();
            assert_eq!(out.len(), 8);
            let mut usage = [0u64; 8];
            for m in &out {
                let total = (m.flat[0] * s as f64).round() as u64;
                for (i, u) in usage.iter_mut().enumerate() {
                    *u += (total >> (3 * i)) & 0b111;
                }
            }
            assert!(usage.iter().all(|&u| u == s as u64), "s={s}: {usage:?}");
        }
    }

    #[test]
    fn resample_then_average_equals_average() {
        let mut rng = seed::rng(77);
        let columns: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let m = models(&columns);
        let plain = average(&m).unwrap();
        let via = aggregate(
            &AggregationSpec::AVG.with_resampling(3),
            &m,
            &mut seed::rng(5),
        )
        .unwrap();
        for (a, b) in plain.flat.iter().zip(&via.flat) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(AggregationSpec::trimmed(4).validate(8).is_err());
        assert!(AggregationSpec::trimmed(3).validate(8).is_ok());
        assert_eq!(
            AggregationSpec::trimmed(2).with_resampling(2).label(),
            "TM(2)∘2-Resampling"
        );
    }

    fn value_sets() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (3usize..9, 1usize..6).prop_flat_map(|(k, d)| {
            prop::collection::vec(prop::collection::vec(-100.0f64..100.0, d), k)
        })
    }

    proptest! {
        #[test]
        fn rules_are_permutation_invariant(cols in value_sets(), rot in 0usize..8) {
            let m = models(&cols);
            let mut shuffled = m.clone();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            shuffled.swap(0, len - 1);
            prop_assert_eq!(coordinate_median(&m).unwrap(), coordinate_median(&shuffled).unwrap());
            prop_assert_eq!(trimmed_mean(&m, 1).unwrap(), trimmed_mean(&shuffled, 1).unwrap());
            let a = average(&m).unwrap();
            let b = average(&shuffled).unwrap();
            for (x, y) in a.flat.iter().zip(&b.flat) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
            let sort = |v: Vec<ModelParameters>| {
                let mut v = v;
                v.sort_by(lexicographic);
                v
            };
            let r1 = sort(s_resample(&m, 2, &mut seed::rng(3)).unwrap());
            let r2 = sort(s_resample(&shuffled, 2, &mut seed::rng(3)).unwrap());
            prop_assert_eq!(r1, r2);
        }

        #[test]
        fn robust_rules_bound_outliers(cols in value_sets(), coord in 0usize..6, sign in prop::bool::ANY) {
            let d = cols[0].len();
            let coord = coord % d;
            let honest = models(&cols);
            let mut attacked = cols.clone();
            attacked[0][coord] = if sign { 1e12 } else { -1e12 };
            let attacked = models(&attacked);
            let honest_values: Vec<f64> = cols.iter().map(|c| c[coord]).collect();
            let spread = honest_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - honest_values.iter().cloned().fold(f64::INFINITY, f64::min);
            let shift = |a: &ModelParameters, b: &ModelParameters| (a.flat[coord] - b.flat[coord]).abs();
            prop_assert!(shift(&coordinate_median(&honest).unwrap(), &coordinate_median(&attacked).unwrap()) <= spread);
            prop_assert!(shift(&trimmed_mean(&honest, 1).unwrap(), &trimmed_mean(&attacked, 1).unwrap()) <= spread);
        }

        #[test]
        fn outputs_lie_within_value_range(cols in value_sets()) {
            let m = models(&cols);
            let k = cols.len();
            let c = (k - 1) / 2;
            let med = coordinate_median(&m).unwrap();
            let tm = trimmed_mean(&m, c).unwrap();
            for i in 0..cols[0].len() {
                let mut column: Vec<f64> = cols.iter().map(|v| v[i]).collect();
                column.sort_by(f64::total_cmp);
                prop_assert!(med.flat[i] >= column[0] && med.flat[i] <= column[k - 1]);
                prop_assert!(tm.flat[i] >= column[c] - 1e-12 && tm.flat[i] <= column[k - 1 - c] + 1e-12);
            }
        }

        #[test]
        fn average_is_linear(cols in value_sets(), a in -5.0f64..5.0) {
            let m = models(&cols);
            let scaled: Vec<Vec<f64>> = cols.iter().map(|c| c.iter().map(|v| a * v).collect()).collect();
            let lhs = average(&models(&scaled)).unwrap();
            let rhs = average(&m).unwrap();
            for (x, y) in lhs.flat.iter().zip(&rhs.flat) {
                prop_assert!((x - a * y).abs() <= 1e-9);
            }
        }

        #[test]
        fn resampling_conserves_mass(cols in value_sets(), s in 1usize..4, seed in 0u64..100) {
            let m = models(&cols);
            let s = s.min(cols.len());
            let out = s_resample(&m, s, &mut seed::rng(seed)).unwrap();
            for i in 0..cols[0].len() {
                let input_sum: f64 = cols.iter().map(|c| c[i]).sum();
                let output_sum: f64 = out.iter().map(|o| o.flat[i]).sum();
                prop_assert!((input_sum - output_sum).abs() <= 1e-9 * input_sum.abs().max(1.0));
            }
        }
    }
}
