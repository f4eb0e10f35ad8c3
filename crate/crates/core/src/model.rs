//! A small multilayer perceptron with hand-written backpropagation and SGD.
//!
//! Hidden layers are `relu(x W + b)`; the last layer is affine and returns
//! logits. Weights are stored `fan_in x fan_out`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::rng::{stream, SeededRng};

/// Magic bytes of the parameter file.
pub const PARAMS_MAGIC: &[u8; 4] = b"DKLM";

/// Default weight decay.
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-layer inputs and hidden pre-activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }
}

/// Parameter gradients, plus the gradient w.r.t. the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
    pub input: Array2<f64>,
}

impl MlpGrads {
    /// `self += other`, layer by layer.
    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "an MLP needs at least input and output dims, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("zero-width layer in {dims:?}")));
    }
    if dims[dims.len() - 1] < 2 {
        return Err(Error::InvalidArgument(
            "the output layer needs at least 2 classes".into(),
        ));
    }
    Ok(())
}

impl MlpParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases,
    /// drawn layer by layer (weights row-major, then bias) from the `INIT`
    /// stream of `seed`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(dims)?;
        let mut rng = SeededRng::new(seed, stream::INIT);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_in, fan_out), |_| rng.uniform_in(-bound, bound));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.uniform_in(-bound, bound));
                Layer { weight, bias }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    /// Builds parameters from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("no layers".into()));
        }
        let mut dims = vec![layers[0].weight.nrows()];
        for (i, l) in layers.iter().enumerate() {
            if l.weight.nrows() != *dims.last().expect("nonempty") || l.bias.len() != l.weight.ncols() {
                return Err(Error::InvalidArgument(format!("layer {i} shapes do not chain")));
            }
            dims.push(l.weight.ncols());
        }
        check_dims(&dims)?;
        Ok(Self { dims, layers })
    }

    pub fn zeros_like(&self) -> Vec<Layer> {
        self.dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("dims checked")
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                what: "input batch",
                expected: (batch.nrows(), self.input_dim()),
                found: batch.dim(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len() - 1);
        let mut x = batch.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(x);
            if i == last {
                return Ok((
                    z,
                    ForwardCache {
                        inputs,
                        pre_activations,
                    },
                ));
            }
            x = z.mapv(|v| v.max(0.0));
            pre_activations.push(z);
        }
        unreachable!("at least one layer")
    }

    /// Logits only.
    pub fn logits(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(batch)?.0)
    }

    /// Reverse-mode gradients of `<logits, grad_logits>`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: ArrayView2<'_, f64>) -> Result<MlpGrads> {
        if cache.inputs.len() != self.layers.len()
            || cache.pre_activations.len() + 1 != self.layers.len()
        {
            return Err(Error::StaleCache(format!(
                "cache has {} layers, network has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        for (i, (x, layer)) in cache.inputs.iter().zip(&self.layers).enumerate() {
            if x.ncols() != layer.weight.nrows() || x.nrows() != cache.batch_size() {
                return Err(Error::StaleCache(format!("layer {i} input has shape {:?}", x.dim())));
            }
        }
        let expected = (cache.batch_size(), self.num_classes());
        if grad_logits.dim() != expected {
            return Err(Error::ShapeMismatch {
                what: "grad_logits",
                expected,
                found: grad_logits.dim(),
            });
        }
        let mut delta = grad_logits.to_owned();
        let mut layers = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let weight = cache.inputs[i].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            let mut upstream = delta.dot(&layer.weight.t());
            if i > 0 {
                Zip::from(&mut upstream)
                    .and(&cache.pre_activations[i - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            layers.push(Layer { weight, bias });
            delta = upstream;
        }
        layers.reverse();
        Ok(MlpGrads {
            layers,
            input: delta,
        })
    }

    pub fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.logits(batch)?.view()))
    }

    /// Flat little-endian encoding: `DKLM`, `u32` dim count, each dim as
    /// `u32`, then per layer the weight matrix row-major (`fan_in x
    /// fan_out`) followed by the bias, as `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for layer in &self.layers {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |detail: String| Error::Truncated {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 8 {
            return Err(truncated(format!("{} byte header", bytes.len())));
        }
        if &bytes[..4] != PARAMS_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "DKLM",
            });
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header = 8 + 4 * count;
        if bytes.len() < header {
            return Err(truncated(format!("dims header needs {header} bytes")));
        }
        let dims: Vec<usize> = bytes[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        check_dims(&dims).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let values: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let expected = header + 8 * values;
        if bytes.len() < expected {
            return Err(truncated(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("{} trailing bytes", bytes.len() - expected),
            });
        }
        let mut floats = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let weight = Array2::from_shape_fn((w[0], w[1]), |_| floats.next().expect("sized"));
            let bias = Array1::from_shape_fn(w[1], |_| floats.next().expect("sized"));
            layers.push(Layer { weight, bias });
        }
        let params = Self { dims, layers };
        if params
            .layers
            .iter()
            .any(|l| l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("parameter file"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

pub fn argmax_rows(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// SGD with classical momentum and L2 weight decay folded into the
/// gradient: `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Layer>,
}

impl Sgd {
    pub fn new(params: &MlpParams, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        Ok(Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        })
    }

    pub fn velocity(&self) -> &[Layer] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("parameter gradients"));
        }
        if grads.layers.len() != params.layers.len() {
            return Err(Error::InvalidArgument("gradient layer count mismatch".into()));
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.velocity.iter_mut())
        {
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, v| {
                    *v = mu * *v + (g + wd * *p);
                    *p -= lr * *v;
                });
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, v| {
                    *v = mu * *v + (g + wd * *p);
                    *p -= lr * *v;
                });
        }
        Ok(())
    }
}

/// `base_lr * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside [0, {total_steps}]"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(base_lr * (1.0 + phase.cos()) / 2.0)
}
