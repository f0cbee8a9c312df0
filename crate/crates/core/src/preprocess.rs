//! Min-max feature scaling and the collaborative min/max merge.
//!
//! Each client computes element-wise bounds on its own train set; the server
//! merges them into global bounds equal to the bounds of the pooled data.

use std::io::Write;
use std::path::Path;

use crate::dataset::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingBounds {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
}

impl ScalingBounds {
    pub fn dim(&self) -> usize {
        self.x_min.len()
    }

    /// Scale one feature vector. Constant coordinates map to 0; values outside
    /// the bounds are not clamped.
    pub fn scale_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: features.len(),
            });
        }
        Ok(features
            .iter()
            .zip(self.x_min.iter().zip(&self.x_max))
            .map(|(&x, (&lo, &hi))| {
                let range = hi - lo;
                if range > 0.0 {
                    (x - lo) / range
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Two-row CSV: mins then maxes.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for row in [&self.x_min, &self.x_max] {
            let line = row
                .iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(row, line)| {
                line.split(',')
                    .enumerate()
                    .map(|(column, cell)| {
                        cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                            path: path.to_owned(),
                            row,
                            column,
                            value: cell.to_owned(),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        match <[Vec<f64>; 2]>::try_from(rows) {
            Ok([x_min, x_max]) if x_min.len() == x_max.len() => Ok(ScalingBounds { x_min, x_max }),
            Ok([x_min, x_max]) => Err(Error::DimensionMismatch {
                expected: x_min.len(),
                found: x_max.len(),
            }),
            Err(rows) => Err(Error::Schema {
                path: path.to_owned(),
                row: rows.len(),
                expected: 2,
                found: rows.len(),
            }),
        }
    }
}

/// Element-wise min and max over a client's train set.
pub fn local_min_max(train: &[Sample]) -> Result<ScalingBounds> {
    let first = train.first().ok_or(Error::Empty("train set"))?;
    let dim = first.features.len();
    let mut bounds = ScalingBounds {
        x_min: first.features.clone(),
        x_max: first.features.clone(),
    };
    for sample in &train[1..] {
        if sample.features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: sample.features.len(),
            });
        }
        for ((lo, hi), &x) in bounds
            .x_min
            .iter_mut()
            .zip(bounds.x_max.iter_mut())
            .zip(&sample.features)
        {
            *lo = lo.min(x);
            *hi = hi.max(x);
        }
    }
    Ok(bounds)
}

/// Server-side merge: element-wise min of mins and max of maxes.
pub fn merge_bounds(bounds_list: &[ScalingBounds]) -> Result<ScalingBounds> {
    let first = bounds_list.first().ok_or(Error::Empty("bounds list"))?;
    let mut merged = first.clone();
    for bounds in &bounds_list[1..] {
        if bounds.dim() != merged.dim() {
            return Err(Error::DimensionMismatch {
                expected: merged.dim(),
                found: bounds.dim(),
            });
        }
        for (m, &v) in merged.x_min.iter_mut().zip(&bounds.x_min) {
            *m = m.min(v);
        }
        for (m, &v) in merged.x_max.iter_mut().zip(&bounds.x_max) {
            *m = m.max(v);
        }
    }
    Ok(merged)
}

pub fn scale(sample: &Sample, bounds: &ScalingBounds) -> Result<Sample> {
    Ok(Sample {
        features: bounds.scale_features(&sample.features)?,
        label: sample.label,
        seq_index: sample.seq_index,
    })
}

pub fn scale_all(samples: &[Sample], bounds: &ScalingBounds) -> Result<Vec<Sample>> {
    samples.iter().map(|s| scale(s, bounds)).collect()
}
