//! Byzantine client behaviours: label-flipping data poisoning and the two
//! model poisonings (gradient factor, model cancelling).

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Sample};
use crate::error::{Error, Result};
use crate::neuralnet::ModelParameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    FlipBenign,
    FlipAttack,
    FlipAll,
    GradientFactor,
    ModelCancel,
}

impl AttackKind {
    pub const ALL_ATTACKS: [AttackKind; 5] = [
        AttackKind::FlipBenign,
        AttackKind::FlipAttack,
        AttackKind::FlipAll,
        AttackKind::GradientFactor,
        AttackKind::ModelCancel,
    ];

    pub fn is_label_flip(self) -> bool {
        matches!(
            self,
            AttackKind::FlipBenign | AttackKind::FlipAttack | AttackKind::FlipAll
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::FlipBenign => "flip_benign",
            AttackKind::FlipAttack => "flip_attack",
            AttackKind::FlipAll => "flip_all",
            AttackKind::GradientFactor => "gradient_factor",
            AttackKind::ModelCancel => "model_cancel",
        }
    }
}

fn default_p_poison() -> f64 {
    1.0
}

fn default_colluding() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Number of malicious clients.
    #[serde(default)]
    pub f: usize,
    #[serde(default = "default_p_poison")]
    pub p_poison: f64,
    #[serde(default = "default_colluding")]
    pub colluding: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec::none()
    }
}

impl AttackSpec {
    pub fn none() -> Self {
        AttackSpec {
            kind: AttackKind::None,
            f: 0,
            p_poison: 1.0,
            colluding: true,
        }
    }

    pub fn new(kind: AttackKind, f: usize) -> Self {
        AttackSpec {
            kind,
            f,
            ..AttackSpec::none()
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != AttackKind::None && self.f > 0
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_poison) {
            return Err(Error::config("p_poison must lie in [0, 1]"));
        }
        if self.f >= k && self.f > 0 {
            return Err(Error::config(format!(
                "f = {} malicious clients needs more than f clients, got {k}",
                self.f
            )));
        }
        if self.kind == AttackKind::ModelCancel && self.f > 0 && !self.colluding {
            return Err(Error::config("model cancelling requires colluding clients"));
        }
        Ok(())
    }

    /// Per-client poisoning role for a federation of `k` clients.
    pub fn behaviour(&self, k: usize) -> Result<Behaviour> {
        Ok(match self.kind {
            AttackKind::None => Behaviour::Honest,
            AttackKind::FlipBenign | AttackKind::FlipAttack | AttackKind::FlipAll => {
                Behaviour::FlipLabels {
                    kind: self.kind,
                    p_poison: self.p_poison,
                }
            }
            AttackKind::GradientFactor => Behaviour::ScaleGradient {
                alpha: alpha_gradient(k, self.f)?,
            },
            AttackKind::ModelCancel => Behaviour::CancelModel {
                alpha: alpha_cancel(k, self.f)?,
            },
        })
    }
}

/// What one client does in a federation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Behaviour {
    Honest,
    FlipLabels { kind: AttackKind, p_poison: f64 },
    ScaleGradient { alpha: f64 },
    CancelModel { alpha: f64 },
}

impl Behaviour {
    pub fn is_honest(&self) -> bool {
        matches!(self, Behaviour::Honest)
    }
}

/// Flip exactly `floor(p_poison * #targeted)` targeted labels, chosen uniformly.
pub fn flip_labels(
    train: &[Sample],
    kind: AttackKind,
    p_poison: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    let target: fn(Label) -> bool = match kind {
        AttackKind::FlipBenign => |l| l == Label::Benign,
        AttackKind::FlipAttack => |l| l == Label::Attack,
        AttackKind::FlipAll => |_| true,
        other => {
            return Err(Error::config(format!(
                "{} is not a label-flipping attack",
                other.name()
            )))
        }
    };
    let mut targeted = Vec::new();
    for (i, s) in train.iter().enumerate() {
        let label = s.label.ok_or(Error::MissingLabel {
            seq_index: s.seq_index,
        })?;
        if target(label) {
            targeted.push(i);
        }
    }
    let count = (p_poison * targeted.len() as f64).floor() as usize;
    let mut out = train.to_vec();
    for pick in index::sample(rng, targeted.len(), count.min(targeted.len())) {
        let s = &mut out[targeted[pick]];
        s.label = s.label.map(Label::flipped);
    }
    Ok(out)
}

fn check_counts(k: usize, f: usize) -> Result<()> {
    if f == 0 {
        return Err(Error::config(
            "attack factor undefined without malicious clients",
        ));
    }
    if f >= k {
        return Err(Error::config(format!("need f < K, got f = {f}, K = {k}")));
    }
    Ok(())
}

/// Factor making the average update of the whole federation equal to minus
/// one honest update: `(K - f + alpha f) / K = -1`.
pub fn alpha_gradient(k: usize, f: usize) -> Result<f64> {
    check_counts(k, f)?;
    Ok((f as f64 - 2.0 * k as f64) / f as f64)
}

/// Factor cancelling the honest clients' weight: `K - f + alpha f = 0`.
pub fn alpha_cancel(k: usize, f: usize) -> Result<f64> {
    check_counts(k, f)?;
    Ok((f as f64 - k as f64) / f as f64)
}

pub fn apply_gradient_factor(gradient: &[f64], alpha: f64) -> Vec<f64> {
    gradient.iter().map(|g| alpha * g).collect()
}

/// The "trained" model a cancelling client returns: the received global
/// model scaled by `alpha`, without any local training.
pub fn cancel_update(global: &ModelParameters, alpha: f64) -> ModelParameters {
    ModelParameters {
        arch: global.arch.clone(),
        flat: global.flat.iter().map(|w| alpha * w).collect(),
    }
}

/// Pick `f` distinct malicious client ids out of `k`, sorted.
pub fn select_malicious(k: usize, f: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut ids = index::sample(rng, k, f.min(k)).into_vec();
    ids.sort_unstable();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{average, coordinate_median};
    use crate::neuralnet::{ArchitectureSpec, ModelKind};
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn labeled(bits: &[u8]) -> Vec<Sample> {
        bits.iter()
            .enumerate()
            .map(|(i, &b)| Sample {
                features: vec![i as f64],
                label: Label::from_bit(b),
                seq_index: i as u64,
            })
            .collect()
    }

    fn bits(samples: &[Sample]) -> Vec<u8> {
        samples.iter().map(|s| s.label.unwrap().bit()).collect()
    }

    #[test]
    fn flip_all_inverts() {
        let out = flip_labels(
            &labeled(&[0, 1, 1, 0]),
            AttackKind::FlipAll,
            1.0,
            &mut seed::rng(0),
        )
        .unwrap();
        assert_eq!(bits(&out), vec![1, 0, 0, 1]);
    }

    #[test]
    fn flip_benign_removes_benign() {
        let out = flip_labels(
            &labeled(&[0, 1, 0, 0, 1]),
            AttackKind::FlipBenign,
            1.0,
            &mut seed::rng(0),
        )
        .unwrap();
        assert!(bits(&out).iter().all(|&b| b == 1));
    }

    #[test]
    fn flip_attack_half() {
        let train = labeled(&[1; 100]);
        let out = flip_labels(&train, AttackKind::FlipAttack, 0.5, &mut seed::rng(3)).unwrap();
        assert_eq!(bits(&out).iter().filter(|&&b| b == 0).count(), 50);
        assert!(out
            .iter()
            .zip(&train)
            .all(|(a, b)| a.features == b.features));
    }

    #[test]
    fn flip_rejects_unlabeled_and_wrong_kind() {
        let mut train = labeled(&[0, 1]);
        assert!(flip_labels(&train, AttackKind::ModelCancel, 1.0, &mut seed::rng(0)).is_err());
        train[1].label = None;
        assert!(matches!(
            flip_labels(&train, AttackKind::FlipAll, 1.0, &mut seed::rng(0)),
            Err(Error::MissingLabel { seq_index: 1 })
        ));
    }

    #[test]
    fn alpha_reference_values() {
        assert_eq!(alpha_gradient(8, 1).unwrap(), -15.0);
        assert_eq!(alpha_gradient(8, 2).unwrap(), -7.0);
        assert_eq!(alpha_gradient(8, 3).unwrap(), -13.0 / 3.0);
        assert_eq!(alpha_cancel(8, 1).unwrap(), -7.0);
        assert_eq!(alpha_cancel(8, 2).unwrap(), -3.0);
        assert_eq!(alpha_cancel(8, 3).unwrap(), -5.0 / 3.0);
        assert!(alpha_gradient(8, 0).is_err());
        assert!(alpha_cancel(8, 8).is_err());
    }

    #[test]
    fn gradient_factor_scaling() {
        assert_eq!(apply_gradient_factor(&[1.0, 0.0], -15.0), vec![-15.0, 0.0]);
        assert!(apply_gradient_factor(&[0.0; 4], -7.0)
            .iter()
            .all(|&v| v == 0.0));
        // Seven honest unit updates plus one scaled by -15 average to -1.
        let mut updates = vec![1.0; 7];
        updates.push(-15.0);
        assert_eq!(updates.iter().sum::<f64>() / 8.0, -1.0);
    }

    fn model(values: Vec<f64>) -> ModelParameters {
        let arch = ArchitectureSpec::new(ModelKind::Classifier, values.len() - 1, vec![]).unwrap();
        ModelParameters::from_flat(arch, values).unwrap()
    }

    #[test]
    fn cancellation_zeroes_the_average() {
        let w = model(vec![1.0, -0.5, 3.25, 0.125]);
        let alpha = alpha_cancel(8, 1).unwrap();
        let attacker = cancel_update(&w, alpha);
        assert_eq!(attacker.flat, vec![-7.0, 3.5, -22.75, -0.875]);
        let mut submitted = vec![w.clone(); 7];
        submitted.push(attacker);
        assert!(average(&submitted).unwrap().flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn median_resists_a_canceller() {
        let mut rng = seed::rng(12);
        let honest: Vec<ModelParameters> = (0..7)
            .map(|_| {
                model(
                    (0..4)
                        .map(|_| 1.0 + rng.random_range(-0.01..0.01))
                        .collect(),
                )
            })
            .collect();
        let mut submitted = honest.clone();
        submitted.push(cancel_update(&honest[0], -7.0));
        let med = coordinate_median(&submitted).unwrap();
        for i in 0..4 {
            let mut column: Vec<f64> = honest.iter().map(|m| m.flat[i]).collect();
            column.sort_by(f64::total_cmp);
            assert!(med.flat[i] >= column[0] && med.flat[i] <= column[6]);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::new(AttackKind::FlipAll, 8).validate(8).is_err());
        let mut cancel = AttackSpec::new(AttackKind::ModelCancel, 1);
        cancel.colluding = false;
        assert!(cancel.validate(8).is_err());
        assert!(AttackSpec::none().validate(1).is_ok());
    }

    #[test]
    fn malicious_selection_is_seeded() {
        let a = select_malicious(8, 3, &mut seed::rng(4));
        assert_eq!(a, select_malicious(8, 3, &mut seed::rng(4)));
        assert_eq!(a.len(), 3);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #[test]
        fn flip_all_is_an_involution(raw in prop::collection::vec(0u8..2, 1..50), seed in 0u64..100) {
            let train = labeled(&raw);
            let once = flip_labels(&train, AttackKind::FlipAll, 1.0, &mut seed::rng(seed)).unwrap();
            let twice = flip_labels(&once, AttackKind::FlipAll, 1.0, &mut seed::rng(seed + 1)).unwrap();
            prop_assert_eq!(twice, train);
        }
    }

    #[test]
    fn alpha_identities_hold_for_all_small_federations() {
        for k in 2..=64usize {
            for f in 1..k {
                let (kf, ff) = (k as f64, f as f64);
                let g = alpha_gradient(k, f).unwrap();
                assert!(((kf - ff + g * ff) / kf + 1.0).abs() <= 1e-12);
                let c = alpha_cancel(k, f).unwrap();
                assert!((kf - ff + c * ff).abs() <= 1e-12);
            }
        }
    }
}
