use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureSpec, LayerLayout, ModelKind};
use crate::error::{Error, Result};
use crate::seed;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copy the listed rows into a new matrix.
    pub fn gather(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: m.cols,
                });
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// Inputs plus binary targets (classifier) or none (autoencoder: the target is
/// the input itself).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Option<Vec<f64>>,
}

impl Batch {
    pub fn unlabeled(inputs: Matrix) -> Self {
        Batch {
            inputs,
            labels: None,
        }
    }

    pub fn labeled(inputs: Matrix, labels: Vec<f64>) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows(),
                found: labels.len(),
            });
        }
        Ok(Batch {
            inputs,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.gather(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Rows `[0, at)` and `[at, len)`.
    pub fn split_at(&self, at: usize) -> (Batch, Batch) {
        let head: Vec<usize> = (0..at).collect();
        let tail: Vec<usize> = (at..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let inputs = Matrix::vstack(&parts.iter().map(|b| &b.inputs).collect::<Vec<_>>())?;
        let labels = if parts.iter().all(|b| b.labels.is_some()) {
            Some(
                parts
                    .iter()
                    .flat_map(|b| b.labels.iter().flatten().copied())
                    .collect(),
            )
        } else {
            None
        };
        Ok(Batch { inputs, labels })
    }
}

/// Flat parameter vector with its architecture. The unit exchanged between
/// clients and the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub arch: ArchitectureSpec,
    pub flat: Vec<f64>,
}

impl ModelParameters {
    pub fn from_flat(arch: ArchitectureSpec, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                found: flat.len(),
            });
        }
        Ok(ModelParameters { arch, flat })
    }

    pub fn zeros(arch: ArchitectureSpec) -> Self {
        let d = arch.param_count();
        ModelParameters {
            arch,
            flat: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.flat.len()
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    /// Per-layer `(weights, biases)` views.
    pub fn layer_views(&self) -> Vec<(&[f64], &[f64])> {
        self.arch
            .layers()
            .iter()
            .map(|l| {
                (
                    &self.flat[l.weight_offset..l.bias_offset()],
                    &self.flat[l.bias_offset()..l.weight_offset + l.len()],
                )
            })
            .collect()
    }

    /// Rebuild from per-layer `(weights, biases)` blocks.
    pub fn from_layers(arch: ArchitectureSpec, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let flat: Vec<f64> = layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect();
        let layout = arch.layers();
        if layout.len() != layers.len()
            || layout
                .iter()
                .zip(layers)
                .any(|(l, (w, b))| w.len() != l.fan_in * l.fan_out || b.len() != l.fan_out)
        {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                found: flat.len(),
            });
        }
        ModelParameters::from_flat(arch, flat)
    }
}

pub const SIGMOID_THRESHOLD: f64 = 0.5;

pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p = sigmoid(z)`, evaluated from the logit.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Uniform Glorot initialisation, zero biases. Deterministic in `seed`.
pub fn init_model(arch: &ArchitectureSpec, seed: u64) -> ModelParameters {
    let mut rng = seed::rng(seed);
    let mut params = ModelParameters::zeros(arch.clone());
    for layer in arch.layers() {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut params.flat[layer.weight_offset..layer.bias_offset()] {
            *w = rng.random_range(-limit..=limit);
        }
    }
    params
}

fn check_input(params: &ModelParameters, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != params.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.arch.input_dim,
            found: inputs.cols(),
        });
    }
    if params.flat.len() != params.arch.param_count() {
        return Err(Error::DimensionMismatch {
            expected: params.arch.param_count(),
            found: params.flat.len(),
        });
    }
    Ok(())
}

/// `out[b][o] = bias[o] + sum_i w[o][i] * input[b][i]`
fn dense(layer: &LayerLayout, flat: &[f64], input: &[f64], rows: usize) -> Vec<f64> {
    let weights = &flat[layer.weight_offset..layer.bias_offset()];
    let biases = &flat[layer.bias_offset()..layer.weight_offset + layer.len()];
    let mut out = vec![0.0; rows * layer.fan_out];
    for (x, o_row) in input
        .chunks_exact(layer.fan_in)
        .zip(out.chunks_exact_mut(layer.fan_out))
    {
        for ((o, w_row), b) in o_row
            .iter_mut()
            .zip(weights.chunks_exact(layer.fan_in))
            .zip(biases)
        {
            *o = b + w_row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
    out
}

/// Pre-activations of every layer, plus the network input.
struct Trace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn run(params: &ModelParameters, inputs: &Matrix) -> Trace {
    let layers = params.arch.layers();
    let rows = inputs.rows();
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let source = post.last().map_or(inputs.as_slice(), Vec::as_slice);
        let z = dense(layer, &params.flat, source, rows);
        let a = if l + 1 < layers.len() {
            z.iter().map(|&v| elu(v)).collect()
        } else {
            match params.arch.kind {
                ModelKind::Classifier => z.iter().map(|&v| sigmoid(v)).collect(),
                ModelKind::Autoencoder => z.clone(),
            }
        };
        pre.push(z);
        post.push(a);
    }
    Trace {
        input: inputs.as_slice().to_vec(),
        pre,
        post,
    }
}

/// Classifier: attack probabilities (one column). Autoencoder: reconstructions.
pub fn forward(params: &ModelParameters, inputs: &Matrix) -> Result<Matrix> {
    check_input(params, inputs)?;
    let mut trace = run(params, inputs);
    let out = trace.post.pop().unwrap_or_default();
    Matrix::new(inputs.rows(), params.arch.output_dim(), out)
}

/// `lambda * ||weights||^2`; biases are not regularised.
pub fn l2_penalty(params: &ModelParameters, l2_lambda: f64) -> f64 {
    if l2_lambda == 0.0 {
        return 0.0;
    }
    let sum: f64 = params
        .arch
        .layers()
        .iter()
        .map(|l| {
            params.flat[l.weight_offset..l.bias_offset()]
                .iter()
                .map(|w| w * w)
                .sum::<f64>()
        })
        .sum();
    l2_lambda * sum
}

fn check_batch(params: &ModelParameters, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_input(params, &batch.inputs)?;
    if params.arch.kind == ModelKind::Classifier && batch.labels.is_none() {
        return Err(Error::MissingLabel { seq_index: 0 });
    }
    Ok(())
}

fn data_loss(params: &ModelParameters, batch: &Batch, trace: &Trace) -> f64 {
    let n = batch.len() as f64;
    match (params.arch.kind, &batch.labels) {
        (ModelKind::Classifier, Some(labels)) => {
            let logits = trace.pre.last().map(Vec::as_slice).unwrap_or_default();
            logits
                .iter()
                .zip(labels)
                .map(|(&z, &y)| bce_from_logit(z, y))
                .sum::<f64>()
                / n
        }
        _ => {
            let out = trace.post.last().map(Vec::as_slice).unwrap_or_default();
            let f = params.arch.input_dim as f64;
            out.iter()
                .zip(&trace.input)
                .map(|(o, x)| (o - x) * (o - x))
                .sum::<f64>()
                / (n * f)
        }
    }
}

/// Mean batch loss (BCE for classifiers, MSE for autoencoders) plus the L2 term.
pub fn loss(params: &ModelParameters, batch: &Batch, l2_lambda: f64) -> Result<f64> {
    check_batch(params, batch)?;
    let trace = run(params, &batch.inputs);
    Ok(data_loss(params, batch, &trace) + l2_penalty(params, l2_lambda))
}

/// Loss and its gradient with respect to the flat parameter vector.
pub fn loss_and_gradient(
    params: &ModelParameters,
    batch: &Batch,
    l2_lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    check_batch(params, batch)?;
    let trace = run(params, &batch.inputs);
    let loss = data_loss(params, batch, &trace) + l2_penalty(params, l2_lambda);

    let layers = params.arch.layers();
    let rows = batch.len();
    let n = rows as f64;
    let out = trace.post.last().map(Vec::as_slice).unwrap_or_default();
    // Gradient with respect to the last pre-activation.
    let mut delta: Vec<f64> = match (params.arch.kind, &batch.labels) {
        (ModelKind::Classifier, Some(labels)) => {
            out.iter().zip(labels).map(|(p, y)| (p - y) / n).collect()
        }
        _ => {
            let scale = 2.0 / (n * params.arch.input_dim as f64);
            out.iter()
                .zip(&trace.input)
                .map(|(o, x)| scale * (o - x))
                .collect()
        }
    };

    let mut grad = vec![0.0; params.flat.len()];
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let source = if l == 0 {
            trace.input.as_slice()
        } else {
            trace.post[l - 1].as_slice()
        };
        let (g_weights, g_biases) = grad[layer.weight_offset..layer.weight_offset + layer.len()]
            .split_at_mut(layer.fan_in * layer.fan_out);
        for (d_row, a_row) in delta
            .chunks_exact(layer.fan_out)
            .zip(source.chunks_exact(layer.fan_in))
        {
            for ((&d, gw_row), gb) in d_row
                .iter()
                .zip(g_weights.chunks_exact_mut(layer.fan_in))
                .zip(g_biases.iter_mut())
            {
                *gb += d;
                if d != 0.0 {
                    for (g, a) in gw_row.iter_mut().zip(a_row) {
                        *g += d * a;
                    }
                }
            }
        }
        if l > 0 {
            let weights = &params.flat[layer.weight_offset..layer.bias_offset()];
            let below = &trace.pre[l - 1];
            let mut next = vec![0.0; rows * layer.fan_in];
            for ((d_row, n_row), z_row) in delta
                .chunks_exact(layer.fan_out)
                .zip(next.chunks_exact_mut(layer.fan_in))
                .zip(below.chunks_exact(layer.fan_in))
            {
                for (&d, w_row) in d_row.iter().zip(weights.chunks_exact(layer.fan_in)) {
                    if d != 0.0 {
                        for (v, w) in n_row.iter_mut().zip(w_row) {
                            *v += d * w;
                        }
                    }
                }
                for (v, &z) in n_row.iter_mut().zip(z_row) {
                    *v *= elu_grad(z);
                }
            }
            delta = next;
        }
    }

    if l2_lambda != 0.0 {
        for layer in &layers {
            for (g, w) in grad[layer.weight_offset..layer.bias_offset()]
                .iter_mut()
                .zip(&params.flat[layer.weight_offset..layer.bias_offset()])
            {
                *g += 2.0 * l2_lambda * w;
            }
        }
    }
    Ok((loss, grad))
}

pub fn backward(params: &ModelParameters, batch: &Batch, l2_lambda: f64) -> Result<Vec<f64>> {
    loss_and_gradient(params, batch, l2_lambda).map(|(_, g)| g)
}

/// `w <- w - lr * g`. A non-finite gradient or result is reported, never clipped.
pub fn sgd_step(params: &ModelParameters, gradient: &[f64], lr: f64) -> Result<ModelParameters> {
    if gradient.len() != params.flat.len() {
        return Err(Error::DimensionMismatch {
            expected: params.flat.len(),
            found: gradient.len(),
        });
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::PoisonedUpdate { client: None });
    }
    let flat: Vec<f64> = params
        .flat
        .iter()
        .zip(gradient)
        .map(|(w, g)| w - lr * g)
        .collect();
    if flat.iter().any(|w| !w.is_finite()) {
        return Err(Error::PoisonedUpdate { client: None });
    }
    Ok(ModelParameters {
        arch: params.arch.clone(),
        flat,
    })
}

/// Mean squared reconstruction error of every row.
pub fn mse_per_sample(params: &ModelParameters, inputs: &Matrix) -> Result<Vec<f64>> {
    if params.arch.kind != ModelKind::Autoencoder {
        return Err(Error::ModelKind {
            expected: ModelKind::Autoencoder.name(),
            found: params.arch.kind.name(),
        });
    }
    let out = forward(params, inputs)?;
    let f = inputs.cols() as f64;
    Ok((0..inputs.rows())
        .map(|i| {
            out.row(i)
                .iter()
                .zip(inputs.row(i))
                .map(|(o, x)| (o - x) * (o - x))
                .sum::<f64>()
                / f
        })
        .collect())
}

/// Classifier decisions: attack when the probability exceeds 0.5.
pub fn predict_labels(params: &ModelParameters, inputs: &Matrix) -> Result<Vec<bool>> {
    if params.arch.kind != ModelKind::Classifier {
        return Err(Error::ModelKind {
            expected: ModelKind::Classifier.name(),
            found: params.arch.kind.name(),
        });
    }
    let out = forward(params, inputs)?;
    Ok(out
        .as_slice()
        .iter()
        .map(|&p| p > SIGMOID_THRESHOLD)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::arch::Preset;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn arch(kind: ModelKind, input: usize, hidden: Vec<usize>) -> ArchitectureSpec {
        ArchitectureSpec::new(kind, input, hidden).unwrap()
    }

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = seed::rng(seed);
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    /// Straightforward per-row matrix-vector products, independent of `dense`.
    fn oracle_forward(params: &ModelParameters, x: &[f64]) -> Vec<f64> {
        let views = params.layer_views();
        let mut a = x.to_vec();
        for (l, (w, b)) in views.iter().enumerate() {
            let fan_out = b.len();
            let fan_in = a.len();
            let mut z = vec![0.0; fan_out];
            for o in 0..fan_out {
                let mut acc = b[o];
                for i in 0..fan_in {
                    acc += w[o * fan_in + i] * a[i];
                }
                z[o] = acc;
            }
            a = if l + 1 < views.len() {
                z.iter()
                    .map(|&v| if v >= 0.0 { v } else { v.exp() - 1.0 })
                    .collect()
            } else if params.arch.kind == ModelKind::Classifier {
                z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
            } else {
                z
            };
        }
        a
    }

    #[test]
    fn elu_definition() {
        assert_eq!(elu(2.5), 2.5);
        assert_eq!(elu(0.0), 0.0);
        assert!((elu(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = ArchitectureSpec::preset(ModelKind::Classifier, Preset::C, 115).unwrap();
        let m1 = init_model(&a, 5);
        let m2 = init_model(&a, 5);
        assert_eq!(m1, m2);
        assert_ne!(m1, init_model(&a, 6));
        for (_, b) in m1.layer_views() {
            assert!(b.iter().all(|&v| v == 0.0));
        }
        for (layer, (w, _)) in a.layers().iter().zip(m1.layer_views()) {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= limit));
        }
    }

    #[test]
    fn zero_classifier_outputs_one_half() {
        let p = ModelParameters::zeros(arch(ModelKind::Classifier, 4, vec![3]));
        let out = forward(&p, &random_matrix(1, 5, 4)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_matches_dense_oracle() {
        for kind in [ModelKind::Classifier, ModelKind::Autoencoder] {
            let a = arch(kind, 6, vec![5, 3]);
            let p = init_model(&a, 9);
            let x = random_matrix(2, 7, 6);
            let out = forward(&p, &x).unwrap();
            for i in 0..7 {
                let expected = oracle_forward(&p, x.row(i));
                for (o, e) in out.row(i).iter().zip(&expected) {
                    assert!((o - e).abs() < 1e-12, "{o} vs {e}");
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = ModelParameters::zeros(arch(ModelKind::Classifier, 4, vec![]));
        assert!(matches!(
            forward(&p, &Matrix::zeros(2, 3)),
            Err(Error::DimensionMismatch {
                expected: 4,
                found: 3
            })
        ));
    }

    #[test]
    fn loss_closed_forms() {
        // p = 0.5 against any label gives ln 2.
        let p = ModelParameters::zeros(arch(ModelKind::Classifier, 3, vec![2]));
        let batch = Batch::labeled(random_matrix(3, 4, 3), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((loss(&p, &batch, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        // Perfect reconstruction: identity weights on a linear autoencoder.
        let a = arch(ModelKind::Autoencoder, 2, vec![2]);
        let mut identity = ModelParameters::zeros(a.clone());
        // Hidden ELU is the identity on non-negative inputs.
        identity.flat[0] = 1.0;
        identity.flat[3] = 1.0;
        identity.flat[6] = 1.0;
        identity.flat[9] = 1.0;
        let x = Matrix::from_rows(&[[0.2, 0.7], [1.0, 0.0]]).unwrap();
        let b = Batch::unlabeled(x.clone());
        assert_eq!(loss(&identity, &b, 0.0).unwrap(), 0.0);
        assert_eq!(mse_per_sample(&identity, &x).unwrap(), vec![0.0, 0.0]);
        // L2 on weights only: four unit weights -> 4 lambda.
        assert!((loss(&identity, &b, 1e-4).unwrap() - 4e-4).abs() < 1e-18);

        // Unit-norm weight vector -> penalty equals lambda.
        let mut unit = ModelParameters::zeros(arch(ModelKind::Classifier, 2, vec![]));
        unit.flat[0] = 0.6;
        unit.flat[1] = 0.8;
        unit.flat[2] = 5.0; // bias, not regularised
        assert!((l2_penalty(&unit, 1e-4) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn empty_batch_and_missing_labels() {
        let p = ModelParameters::zeros(arch(ModelKind::Classifier, 3, vec![]));
        assert!(matches!(
            loss(
                &p,
                &Batch::labeled(Matrix::zeros(0, 3), vec![]).unwrap(),
                0.0
            ),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            backward(&p, &Batch::unlabeled(Matrix::zeros(2, 3)), 0.0),
            Err(Error::MissingLabel { .. })
        ));
    }

    #[test]
    fn symmetric_output_bias_gradient_vanishes() {
        // Constant features, zero weights, balanced labels.
        let a = arch(ModelKind::Classifier, 3, vec![4]);
        let p = ModelParameters::zeros(a.clone());
        let x = Matrix::new(4, 3, vec![1.0; 12]).unwrap();
        let g = backward(
            &p,
            &Batch::labeled(x, vec![0.0, 1.0, 0.0, 1.0]).unwrap(),
            0.0,
        )
        .unwrap();
        let out = a.layers()[1];
        assert_eq!(g[out.bias_offset()], 0.0);
    }

    #[test]
    fn pure_l2_gradient() {
        // Perfect reconstruction leaves only the penalty gradient 2 lambda w.
        let a = arch(ModelKind::Autoencoder, 2, vec![2]);
        let mut p = ModelParameters::zeros(a.clone());
        for i in [0, 3, 6, 9] {
            p.flat[i] = 1.0;
        }
        let x = Matrix::from_rows(&[[0.3, 0.4]]).unwrap();
        let g = backward(&p, &Batch::unlabeled(x), 1e-3).unwrap();
        for (i, (gi, is_weight)) in g.iter().zip(a.weight_mask()).enumerate() {
            let expected = if is_weight { 2e-3 * p.flat[i] } else { 0.0 };
            assert!(
                (gi - expected).abs() < 1e-18,
                "coord {i}: {gi} vs {expected}"
            );
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let a = arch(ModelKind::Classifier, 1, vec![]);
        let p = ModelParameters::from_flat(a, vec![1.0, 0.0]).unwrap();
        let q = sgd_step(&p, &[0.5, -1.0], 0.1).unwrap();
        assert_eq!(q.flat, vec![0.95, 0.1]);
        assert_eq!(sgd_step(&p, &[3.0, 4.0], 0.0).unwrap(), p);
        assert!(matches!(
            sgd_step(&p, &[f64::NAN, 0.0], 0.1),
            Err(Error::PoisonedUpdate { .. })
        ));
        assert!(matches!(
            sgd_step(&p, &[f64::MAX, 0.0], -10.0),
            Err(Error::PoisonedUpdate { .. })
        ));
    }

    #[test]
    fn sgd_steps_compose_for_fixed_gradient() {
        let a = arch(ModelKind::Classifier, 2, vec![]);
        let p = init_model(&a, 3);
        let g = vec![0.25, -0.5, 1.0];
        let twice = sgd_step(&sgd_step(&p, &g, 0.1).unwrap(), &g, 0.1).unwrap();
        let summed: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let once = sgd_step(&p, &summed, 0.1).unwrap();
        for (x, y) in twice.flat.iter().zip(&once.flat) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn mse_per_sample_cases() {
        let a = arch(ModelKind::Autoencoder, 115, vec![29]);
        let zero = ModelParameters::zeros(a.clone());
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let mut r = vec![0.0; 115];
                r[k * 7] = 1.0;
                r
            })
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        for v in mse_per_sample(&zero, &x).unwrap() {
            assert!((v - 1.0 / 115.0).abs() < 1e-15);
        }

        let p = init_model(&a, 4);
        let x = random_matrix(5, 6, 115);
        let got = mse_per_sample(&p, &x).unwrap();
        for i in 0..6 {
            let rec = oracle_forward(&p, x.row(i));
            let expected: f64 = rec
                .iter()
                .zip(x.row(i))
                .map(|(r, v)| (r - v).powi(2))
                .sum::<f64>()
                / 115.0;
            assert!((got[i] - expected).abs() < 1e-12);
        }

        let c = ModelParameters::zeros(arch(ModelKind::Classifier, 115, vec![]));
        assert!(matches!(
            mse_per_sample(&c, &x),
            Err(Error::ModelKind { .. })
        ));
    }

    #[test]
    fn layer_round_trip_is_exact() {
        for kind in [ModelKind::Classifier, ModelKind::Autoencoder] {
            for &preset in crate::neuralnet::arch::Preset::presets_for(kind) {
                let a = ArchitectureSpec::preset(kind, preset, 115).unwrap();
                let p = init_model(&a, 17);
                let layers: Vec<(Vec<f64>, Vec<f64>)> = p
                    .layer_views()
                    .into_iter()
                    .map(|(w, b)| (w.to_vec(), b.to_vec()))
                    .collect();
                assert_eq!(ModelParameters::from_layers(a, &layers).unwrap(), p);
            }
        }
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let a = arch(ModelKind::Classifier, 4, vec![6]);
        let x = random_matrix(11, 32, 4);
        let labels = (0..32).map(|i| (x.row(i)[0] > 0.0) as u8 as f64).collect();
        let batch = Batch::labeled(x, labels).unwrap();
        let mut p = init_model(&a, 2);
        let mut prev = loss(&p, &batch, 1e-4).unwrap();
        for _ in 0..50 {
            let g = backward(&p, &batch, 1e-4).unwrap();
            p = sgd_step(&p, &g, 0.05).unwrap();
            let cur = loss(&p, &batch, 1e-4).unwrap();
            assert!(cur <= prev + 1e-12, "{cur} > {prev}");
            prev = cur;
        }
    }

    #[test]
    fn separable_toy_set_reaches_full_accuracy() {
        let mut rng = seed::rng(21);
        let rows: Vec<[f64; 2]> = (0..64)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .filter(|r: &[f64; 2]| (r[0] + r[1]).abs() > 0.1)
            .collect();
        let labels: Vec<f64> = rows
            .iter()
            .map(|r| (r[0] + r[1] > 0.0) as u8 as f64)
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let batch = Batch::labeled(x.clone(), labels.clone()).unwrap();
        for preset in Preset::CLASSIFIERS {
            let a = ArchitectureSpec::preset(ModelKind::Classifier, preset, 2).unwrap();
            let mut p = init_model(&a, 1);
            for _ in 0..200 {
                let g = backward(&p, &batch, 0.0).unwrap();
                p = sgd_step(&p, &g, 0.5).unwrap();
            }
            let predicted = predict_labels(&p, &x).unwrap();
            let correct = predicted
                .iter()
                .zip(&labels)
                .filter(|(p, y)| **p == (**y == 1.0))
                .count();
            assert_eq!(correct, rows.len(), "preset {preset}");
        }
    }

    proptest! {
        #[test]
        fn classifier_outputs_are_probabilities(seed in 0u64..500) {
            let a = arch(ModelKind::Classifier, 5, vec![4, 3]);
            let p = init_model(&a, seed);
            let out = forward(&p, &random_matrix(seed, 8, 5)).unwrap();
            prop_assert!(out.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
