//! Dense ReLU classifiers over a flat weight vector.
//!
//! Parameters are laid out layer-major: for each layer the `inputs x outputs`
//! weight matrix (row-major), followed by its bias when present.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels, AutodiffError, Graph, NodeId, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("a model needs at least one layer")]
    Empty,
    #[error("layer {layer} expects {expected} inputs but the previous layer has {found} outputs")]
    Chain { layer: usize, expected: usize, found: usize },
    #[error("layer {0} has a zero dimension")]
    ZeroDim(usize),
    #[error("expected {expected} parameters, got {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("input has {found} features, model expects {expected}")]
    InputDim { expected: usize, found: usize },
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub bias: bool,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + if self.bias { self.outputs } else { 0 }
    }
}

/// Architecture of a feed-forward classifier: affine layers with ReLU in
/// between, logits out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::Empty);
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(ModelError::ZeroDim(i));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(ModelError::Chain { layer: i, expected: l.inputs, found: layers[i - 1].outputs });
            }
        }
        Ok(Self { layers })
    }

    /// `sizes = [in, h1, ..., classes]`.
    pub fn mlp(sizes: &[usize], bias: bool) -> Result<Self, ModelError> {
        if sizes.len() < 2 {
            return Err(ModelError::Empty);
        }
        Self::new(sizes.windows(2).map(|w| LayerSpec { inputs: w[0], outputs: w[1], bias }).collect())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Range of the flat vector owned by layer `l`.
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        let start: usize = self.layers[..l].iter().map(LayerSpec::param_count).sum();
        start..start + self.layers[l].param_count()
    }

    pub fn weight_range(&self, l: usize) -> Range<usize> {
        let r = self.layer_range(l);
        let layer = self.layers[l];
        r.start..r.start + layer.inputs * layer.outputs
    }

    /// Layer index of every flat parameter.
    pub fn layer_of_param(&self) -> Vec<usize> {
        self.layers.iter().enumerate().flat_map(|(l, spec)| std::iter::repeat(l).take(spec.param_count())).collect()
    }

    /// `true` for weight-matrix entries, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| {
                std::iter::repeat(true)
                    .take(l.inputs * l.outputs)
                    .chain(std::iter::repeat(false).take(if l.bias { l.outputs } else { 0 }))
            })
            .collect()
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and biases alike.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for _ in 0..l.param_count() {
                out.push(rng.gen_range(-bound..bound));
            }
        }
        out
    }

    fn check_params(&self, n: usize) -> Result<(), ModelError> {
        if n != self.param_count() {
            return Err(ModelError::ParamCount { expected: self.param_count(), found: n });
        }
        Ok(())
    }
}

/// Appends the classifier to `graph`, reading parameters from the flat
/// `weights` node and features from the `batch x inputs` node `x`.
pub fn build_mlp(graph: &mut Graph, spec: &ModelSpec, weights: NodeId, x: NodeId) -> Result<NodeId, ModelError> {
    spec.check_params(graph.shape(weights).iter().product())?;
    let mut h = x;
    for (l, layer) in spec.layers.iter().enumerate() {
        let wr = spec.weight_range(l);
        let w = graph.slice(weights, wr.start, vec![layer.inputs, layer.outputs])?;
        h = graph.matmul(h, w)?;
        if layer.bias {
            let b = graph.slice(weights, wr.end, vec![layer.outputs])?;
            h = graph.add_bias(h, b)?;
        }
        if l + 1 < spec.layers.len() {
            h = graph.relu(h);
        }
    }
    Ok(h)
}

/// Logits for a `batch x inputs` tensor, without building a graph.
pub fn mlp_apply(spec: &ModelSpec, weights: &[f64], x: &Tensor) -> Result<Tensor, ModelError> {
    spec.check_params(weights.len())?;
    if x.cols() != spec.input_dim() {
        return Err(ModelError::InputDim { expected: spec.input_dim(), found: x.cols() });
    }
    let n = x.rows();
    let mut h = x.data().to_vec();
    for (l, layer) in spec.layers.iter().enumerate() {
        let wr = spec.weight_range(l);
        h = kernels::matmul(&h, &weights[wr.clone()], n, layer.inputs, layer.outputs);
        if layer.bias {
            kernels::add_bias(&mut h, &weights[wr.end..wr.end + layer.outputs]);
        }
        if l + 1 < spec.layers.len() {
            kernels::relu_inplace(&mut h);
        }
    }
    Ok(Tensor::matrix(n, spec.num_classes(), h)?)
}

/// Index of the largest logit per row; the first wins on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64, AutodiffError> {
    if logits.rows() != labels.len() {
        return Err(AutodiffError::ShapeMismatch {
            context: "cross_entropy",
            expected: vec![logits.rows()],
            found: vec![labels.len()],
        });
    }
    let c = logits.cols();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(AutodiffError::LabelOutOfRange { label: y as f64, classes: c });
        }
        let row = logits.row(r);
        total += kernels::log_sum_exp(row) - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Pathwise sample `mu + sigma * noise`.
pub fn reparam_sample(mu: &[f64], sigma: &[f64], noise: &[f64]) -> Result<Vec<f64>, AutodiffError> {
    if mu.len() != sigma.len() || mu.len() != noise.len() {
        return Err(AutodiffError::ShapeMismatch {
            context: "reparam_sample",
            expected: vec![mu.len()],
            found: vec![sigma.len(), noise.len()],
        });
    }
    Ok(mu.iter().zip(sigma).zip(noise).map(|((m, s), e)| m + s * e).collect())
}

/// Graph version of [`reparam_sample`].
pub fn build_reparam(graph: &mut Graph, mu: NodeId, sigma: NodeId, noise: NodeId) -> Result<NodeId, AutodiffError> {
    let scaled = graph.mul(sigma, noise)?;
    graph.add(mu, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Bindings;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line forward pass with explicit loops, independent of the
    /// shared kernels.
    fn naive_forward(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut offset = 0;
        for (l, layer) in spec.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            for o in 0..layer.outputs {
                let mut acc = 0.0;
                for i in 0..layer.inputs {
                    acc += h[i] * w[offset + i * layer.outputs + o];
                }
                if layer.bias {
                    acc += w[offset + layer.inputs * layer.outputs + o];
                }
                next[o] = if l + 1 < spec.layers.len() { acc.max(0.0) } else { acc };
            }
            offset += layer.param_count();
            h = next;
        }
        h
    }

    #[test]
    fn spec_validation() {
        assert_eq!(ModelSpec::new(vec![]), Err(ModelError::Empty));
        let bad = vec![LayerSpec { inputs: 4, outputs: 3, bias: true }, LayerSpec { inputs: 2, outputs: 2, bias: true }];
        assert!(matches!(ModelSpec::new(bad), Err(ModelError::Chain { layer: 1, .. })));
        let spec = ModelSpec::mlp(&[4, 3, 2], true).unwrap();
        assert_eq!(spec.param_count(), 4 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(spec.layer_range(1), 15..23);
        assert_eq!(spec.weight_mask().iter().filter(|&&m| m).count(), 18);
        assert_eq!(spec.layer_of_param()[14], 0);
        assert_eq!(spec.layer_of_param()[15], 1);
    }

    #[test]
    fn identity_single_layer() {
        let spec = ModelSpec::mlp(&[2, 2], true).unwrap();
        let w = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let x = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(mlp_apply(&spec, &w, &x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn zero_weights_give_uniform_predictions() {
        let spec = ModelSpec::mlp(&[3, 5, 4], true).unwrap();
        let w = vec![0.0; spec.param_count()];
        let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 5.0, 1.0, 0.1]).unwrap();
        let logits = mlp_apply(&spec, &w, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!((cross_entropy(&logits, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn graph_and_plain_forward_match_naive_loops() {
        let spec = ModelSpec::mlp(&[2, 16, 2], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = spec.init_params(&mut rng);
        let xs: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::matrix(4, 2, xs.clone()).unwrap();

        let plain = mlp_apply(&spec, &w, &x).unwrap();
        let mut g = Graph::new();
        let wn = g.input("w", vec![spec.param_count()]);
        let xn = g.input("x", vec![4, 2]);
        let out = build_mlp(&mut g, &spec, wn, xn).unwrap();
        let mut b = Bindings::new();
        b.bind(wn, Tensor::vector(w.clone())).bind(xn, x);
        let graphed = g.forward(&b, out).unwrap();
        assert_eq!(plain, graphed);
        for r in 0..4 {
            let naive = naive_forward(&spec, &w, &xs[r * 2..r * 2 + 2]);
            for (a, b) in naive.iter().zip(plain.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::matrix(1, 10, vec![0.7; 10]).unwrap();
        assert!((cross_entropy(&uniform, &[4]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let t = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let direct = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((cross_entropy(&t, &[0]).unwrap() - direct).abs() < 1e-15);
        assert!((direct - 0.313262).abs() < 1e-6);
        let mut last = f64::INFINITY;
        for margin in [0.0, 1.0, 5.0, 20.0, 40.0] {
            let t = Tensor::matrix(1, 3, vec![margin, 0.0, 0.0]).unwrap();
            let ce = cross_entropy(&t, &[0]).unwrap();
            assert!(ce < last && ce >= 0.0);
            last = ce;
        }
        assert!(last < 1e-15);
        assert!(matches!(cross_entropy(&t, &[5]), Err(AutodiffError::LabelOutOfRange { .. })));
    }

    #[test]
    fn reparam_examples() {
        assert_eq!(reparam_sample(&[0.4], &[2.0], &[0.0]).unwrap(), vec![0.4]);
        assert!((reparam_sample(&[0.4], &[1e-20], &[3.0]).unwrap()[0] - 0.4).abs() < 1e-15);
        assert_eq!(reparam_sample(&[0.0], &[1.0], &[1.5]).unwrap(), vec![1.5]);
        assert!(reparam_sample(&[0.0, 1.0], &[1.0], &[1.5]).is_err());
    }
}
