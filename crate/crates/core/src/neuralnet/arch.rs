use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// One sigmoid output giving the attack probability.
    Classifier,
    /// Linear reconstruction of the input.
    Autoencoder,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Classifier => "classifier",
            ModelKind::Autoencoder => "autoencoder",
        }
    }
}

/// Named architecture presets. `A`..`D` for classifiers, `A`..`C` for autoencoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    A,
    B,
    C,
    D,
}

impl Preset {
    pub const CLASSIFIERS: [Preset; 4] = [Preset::A, Preset::B, Preset::C, Preset::D];
    pub const AUTOENCODERS: [Preset; 3] = [Preset::A, Preset::B, Preset::C];

    pub fn presets_for(kind: ModelKind) -> &'static [Preset] {
        match kind {
            ModelKind::Classifier => &Self::CLASSIFIERS,
            ModelKind::Autoencoder => &Self::AUTOENCODERS,
        }
    }

    /// Hidden widths as fractions of the input dimension.
    fn ratios(self, kind: ModelKind) -> Option<&'static [f64]> {
        match (kind, self) {
            (ModelKind::Classifier, Preset::A) => Some(&[]),
            (ModelKind::Classifier, Preset::B) => Some(&[1.0]),
            (ModelKind::Classifier, Preset::C) => Some(&[1.0, 0.5]),
            (ModelKind::Classifier, Preset::D) => Some(&[1.0, 0.5, 0.25]),
            (ModelKind::Autoencoder, Preset::A) => Some(&[0.25]),
            (ModelKind::Autoencoder, Preset::B) => Some(&[0.5, 0.25, 0.5]),
            (ModelKind::Autoencoder, Preset::C) => Some(&[0.75, 0.5, 0.33, 0.25, 0.33, 0.5, 0.75]),
            (ModelKind::Autoencoder, Preset::D) => None,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Preset::A),
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "D" => Ok(Preset::D),
            other => Err(Error::config(format!(
                "unknown architecture preset {other:?}"
            ))),
        }
    }
}

/// Dense feed-forward layout. ELU follows every hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl ArchitectureSpec {
    pub fn new(kind: ModelKind, input_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        let arch = ArchitectureSpec {
            kind,
            input_dim,
            hidden,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Preset layout for `input_dim` features. With 115 features this gives
    /// classifiers `[]`, `[115]`, `[115, 58]`, `[115, 58, 29]` and autoencoders
    /// `[29]`, `[58, 29, 58]`, `[86, 58, 38, 29, 38, 58, 86]`.
    pub fn preset(kind: ModelKind, preset: Preset, input_dim: usize) -> Result<Self> {
        let ratios = preset
            .ratios(kind)
            .ok_or_else(|| Error::config(format!("no {} preset {preset}", kind.name())))?;
        let hidden = ratios
            .iter()
            .map(|r| ((r * input_dim as f64).round() as usize).max(1))
            .collect();
        ArchitectureSpec::new(kind, input_dim, hidden)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            ModelKind::Classifier => 1,
            ModelKind::Autoencoder => self.input_dim,
        }
    }

    /// `[input, hidden..., output]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output_dim()))
            .collect()
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let dims = self.layer_dims();
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let layer = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                };
                offset += layer.len();
                layer
            })
            .collect()
    }

    /// Number of scalar parameters `d`.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// True for flat indices that hold weights (as opposed to biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            mask.extend(std::iter::repeat_n(true, layer.fan_in * layer.fan_out));
            mask.extend(std::iter::repeat_n(false, layer.fan_out));
        }
        mask
    }
}

/// Position of one dense layer inside the flat parameter vector: an
/// `fan_out x fan_in` row-major weight block followed by `fan_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
}

impl LayerLayout {
    pub fn bias_offset(&self) -> usize {
        self.weight_offset + self.fan_in * self.fan_out
    }

    pub fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_widths_for_115_features() {
        let hidden = |kind, p| ArchitectureSpec::preset(kind, p, 115).unwrap().hidden;
        assert_eq!(
            hidden(ModelKind::Classifier, Preset::A),
            Vec::<usize>::new()
        );
        assert_eq!(hidden(ModelKind::Classifier, Preset::B), vec![115]);
        assert_eq!(hidden(ModelKind::Classifier, Preset::C), vec![115, 58]);
        assert_eq!(hidden(ModelKind::Classifier, Preset::D), vec![115, 58, 29]);
        assert_eq!(hidden(ModelKind::Autoencoder, Preset::A), vec![29]);
        assert_eq!(hidden(ModelKind::Autoencoder, Preset::B), vec![58, 29, 58]);
        assert_eq!(
            hidden(ModelKind::Autoencoder, Preset::C),
            vec![86, 58, 38, 29, 38, 58, 86]
        );
        assert!(ArchitectureSpec::preset(ModelKind::Autoencoder, Preset::D, 115).is_err());
    }

    #[test]
    fn coding_dimension_is_29() {
        for &p in Preset::presets_for(ModelKind::Autoencoder) {
            let arch = ArchitectureSpec::preset(ModelKind::Autoencoder, p, 115).unwrap();
            assert_eq!(arch.hidden.iter().min(), Some(&29));
        }
    }

    #[test]
    fn parameter_counts() {
        let c = ArchitectureSpec::preset(ModelKind::Classifier, Preset::A, 115).unwrap();
        assert_eq!(c.param_count(), 116);
        let a = ArchitectureSpec::preset(ModelKind::Autoencoder, Preset::A, 115).unwrap();
        assert_eq!(a.param_count(), (115 * 29 + 29) + (29 * 115 + 115));
        assert_eq!(a.param_count(), 6_814);
        let total: usize = a.layers().iter().map(LayerLayout::len).sum();
        assert_eq!(total, a.param_count());
        assert_eq!(a.weight_mask().iter().filter(|w| !**w).count(), 29 + 115);
    }
}
