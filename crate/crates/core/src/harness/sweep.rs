//! Adversarial sweep: every attack × every robust rule × every f.

use crate::adversary::{AttackKind, AttackSpec};
use crate::aggregation::AggregationSpec;
use crate::dataset::Mode;
use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::runner::{load_streams, run_on_streams, RunOutput};

/// The configurations a sweep runs, in order. `f = 0` appears once per rule
/// as the honest baseline shared by all attacks.
pub fn sweep_configs(
    base: &ExperimentConfig,
    f_values: &[usize],
    k: usize,
) -> Result<Vec<ExperimentConfig>> {
    if f_values.is_empty() {
        return Err(Error::config("attack sweep needs at least one f value"));
    }
    if let Some(&f) = f_values.iter().find(|&&f| f >= k) {
        return Err(Error::config(format!(
            "f = {f} is not below the client count K = {k}"
        )));
    }
    if base.mode != Mode::Supervised {
        return Err(Error::config("the attack sweep runs on supervised data"));
    }
    let approaches: Vec<_> = base
        .approaches
        .iter()
        .copied()
        .filter(|a| a.is_federated())
        .collect();
    if approaches.is_empty() {
        return Err(Error::config("the attack sweep needs a federated approach"));
    }
    let mut f_sorted = f_values.to_vec();
    f_sorted.sort_unstable();
    f_sorted.dedup();

    let mut configs = Vec::new();
    for rule in AggregationSpec::sweep_rules() {
        rule.validate(k)?;
        let with = |attack: AttackSpec| ExperimentConfig {
            approaches: approaches.clone(),
            aggregation: rule,
            attack: AttackSpec {
                p_poison: base.attack.p_poison,
                ..attack
            },
            ..base.clone()
        };
        if f_sorted.contains(&0) {
            configs.push(with(AttackSpec::none()));
        }
        for kind in AttackKind::ALL_ATTACKS {
            for &f in f_sorted.iter().filter(|&&f| f > 0) {
                configs.push(with(AttackSpec::new(kind, f)));
            }
        }
    }
    Ok(configs)
}

/// Run the whole cross product on one loaded fleet.
pub fn attack_sweep(base: &ExperimentConfig, f_values: &[usize]) -> Result<RunOutput> {
    let streams = load_streams(base)?;
    let configs = sweep_configs(base, f_values, streams.len() - 1)?;
    let mut all = RunOutput::default();
    for config in &configs {
        all.extend(run_on_streams(config, &streams)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_product_shape() {
        let base = ExperimentConfig::profile("desk-adversarial").unwrap();
        let configs = sweep_configs(&base, &[0, 1, 2, 3], 8).unwrap();
        // 5 rules × (1 baseline + 5 attacks × 3 f values)
        assert_eq!(configs.len(), 5 * 16);
        for rule in AggregationSpec::sweep_rules() {
            assert!(configs
                .iter()
                .any(|c| c.aggregation == rule && !c.attack.is_active()));
        }
        let labels: Vec<String> = configs.iter().map(|c| c.aggregation.label()).collect();
        assert!(labels.contains(&"TM(2)∘2-Resampling".to_owned()));
    }

    #[test]
    fn preconditions() {
        let base = ExperimentConfig::profile("desk-adversarial").unwrap();
        assert!(sweep_configs(&base, &[], 8).is_err());
        assert!(sweep_configs(&base, &[1, 8], 8).is_err());
        let mut unsup = ExperimentConfig::profile("desk-unsupervised").unwrap();
        unsup.approaches = vec![super::super::Approach::MiniBatch];
        assert!(sweep_configs(&unsup, &[1], 8).is_err());
        let mut naive = base.clone();
        naive.approaches = vec![super::super::Approach::Naive];
        assert!(sweep_configs(&naive, &[1], 8).is_err());
    }
}
