//! Multi-layer perceptron classifier with ReLU hidden activations.
//!
//! Checkpoint format (all integers little-endian):
//!
//! ```text
//! b"RTLM" | version: u32 = 1 | layer_count: u32 | layer_count + 1 sizes: u32
//! then per layer: weight [out x in] row-major f64, bias [out] f64
//! ```

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RTLM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input width, hidden widths, class count.
    pub layer_sizes: Vec<usize>,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, init_seed: u64) -> Result<Self> {
        let spec = ModelSpec {
            layer_sizes,
            init_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid("model needs at least input and output sizes"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[out x in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Parameters of the classifier `f_theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

/// Parameters recorded on a graph, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<(Var, Var)>,
}

impl BoundModel {
    /// `(weight, bias)` vars per layer.
    pub fn vars(&self) -> &[(Var, Var)] {
        &self.layers
    }

    /// Logits for a `[m x d]` input node.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.affine(h, w, b)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

impl ModelParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 2 || l.bias.len() != s[0] {
                return Err(Error::shape(format!("layer {i}: weight {s:?}, bias {:?}", l.bias.shape())));
            }
            if i > 0 && layers[i - 1].weight.shape()[0] != s[1] {
                return Err(Error::shape(format!("layer {i} input {} does not match previous output", s[1])));
            }
            if !l.weight.all_finite() || !l.bias.all_finite() {
                return Err(Error::NonFinite("model parameters"));
            }
        }
        Ok(ModelParams { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.weight.shape()[0]).unwrap_or(0)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.shape()[0]));
        sizes
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Records the parameters on `g`. Trainable parameters receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.variable(l.weight.clone()), g.variable(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundModel { layers }
    }

    /// Logits for `[d]` or `[m x d]` input, as a plain tensor.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let model = self.bind(&mut g, false);
        let xv = g.constant(as_batch(x, self.input_dim())?);
        let out = model.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    /// Predicted class per row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for s in self.layer_sizes() {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::ModelFormat(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        if count == 0 {
            return Err(Error::ModelFormat("zero layers".into()));
        }
        let sizes = (0..=count)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(count);
        for win in sizes.windows(2) {
            let (inp, out) = (win[0], win[1]);
            let weight = read_f64s(&mut r, out * inp)?;
            let bias = read_f64s(&mut r, out)?;
            layers.push(Layer {
                weight: Tensor::matrix(out, inp, weight)?,
                bias: Tensor::vector(bias)?,
            });
        }
        ModelParams::from_layers(layers)
    }
}

/// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn init_model(spec: &ModelSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let layers = spec
        .layer_sizes
        .windows(2)
        .map(|win| {
            let (inp, out) = (win[0], win[1]);
            let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("positive std");
            let weight = (0..out * inp).map(|_| normal.sample(&mut rng)).collect();
            Layer {
                weight: Tensor::from_raw(vec![out, inp], weight),
                bias: Tensor::zeros(&[out]),
            }
        })
        .collect();
    Ok(ModelParams { layers })
}

/// Logits of `f_theta(x)` for a `[d]` or `[m x d]` input.
pub fn logits(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    params.logits(x)
}

/// Views `[d]` input as `[1 x d]`; checks the width.
pub(crate) fn as_batch(x: &Tensor, d: usize) -> Result<Tensor> {
    if x.cols() != d || x.shape().len() > 2 {
        return Err(Error::shape(format!("input {:?} does not match model input width {d}", x.shape())));
    }
    Ok(x.as_matrix())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::ModelFormat("truncated model file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = ModelSpec::new(vec![2, 8, 2], 42).unwrap();
        let a = init_model(&spec).unwrap();
        let b = init_model(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers()[0].weight.shape(), &[8, 2]);
        assert_eq!(a.layers()[1].weight.shape(), &[2, 8]);
        assert_eq!(a.layers()[0].bias.shape(), &[8]);
        assert_eq!(a.layers()[1].bias.shape(), &[2]);
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
        let c = init_model(&ModelSpec::new(vec![2, 8, 2], 43).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn he_init_std_monte_carlo() {
        let p = init_model(&ModelSpec::new(vec![100, 100], 1).unwrap()).unwrap();
        let w = p.layers()[0].weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = (2.0f64 / 100.0).sqrt();
        assert!((std - target).abs() / target < 0.05, "{std}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::new(vec![3], 0).is_err());
        assert!(ModelSpec::new(vec![3, 0, 2], 0).is_err());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut p = init_model(&ModelSpec::new(vec![3, 5, 4], 0).unwrap()).unwrap();
        for l in p.layers_mut() {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = p.logits(&Tensor::vector(vec![0.2, 0.9, 0.4]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn linear_model_matches_manual_matmul() {
        let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.25, 0.75, -0.5]).unwrap();
        let b = Tensor::vector(vec![0.1, -0.2]).unwrap();
        let p = ModelParams::from_layers(vec![Layer { weight: w.clone(), bias: b.clone() }]).unwrap();
        let x = [0.3, 0.6, 0.9];
        let out = p.logits(&Tensor::vector(x.to_vec()).unwrap()).unwrap();
        for i in 0..2 {
            let manual: f64 = (0..3).map(|j| w.data()[i * 3 + j] * x[j]).sum::<f64>() + b.data()[i];
            assert!((out.data()[i] - manual).abs() < 1e-15);
        }
    }

    #[test]
    fn batched_rows_match_single_calls() {
        let p = init_model(&ModelSpec::new(vec![4, 16, 3], 9).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..5 * 4).map(|_| rng.random()).collect();
        let batch = Tensor::matrix(5, 4, data).unwrap();
        let out = p.logits(&batch).unwrap();
        for i in 0..5 {
            let single = p.logits(&Tensor::vector(batch.row(i).to_vec()).unwrap()).unwrap();
            for (a, b) in single.data().iter().zip(out.row(i)) {
                assert!((a - b).abs() < 1e-13);
            }
        }
        assert!(p.logits(&Tensor::vector(vec![0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let p = init_model(&ModelSpec::new(vec![6, 10, 10, 3], 5).unwrap()).unwrap();
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RTLM");
        let q = ModelParams::load(buf.as_slice()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let x = Tensor::vector((0..6).map(|_| rng.random()).collect()).unwrap();
            assert_eq!(p.logits(&x).unwrap(), q.logits(&x).unwrap());
        }
        assert!(ModelParams::load(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(ModelParams::load(bad.as_slice()), Err(Error::ModelFormat(_))));
    }
}
