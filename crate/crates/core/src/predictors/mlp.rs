use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Format tag written into every model file.
pub const MODEL_FORMAT: &str = "pairsem-mlp";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Feed-forward network: ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// Activations kept from a batched forward pass for backprop.
pub(crate) struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub(crate) fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }
}

impl MlpModel {
    /// `num_layers` layers, hidden width equal to `output_dim`, He-uniform
    /// weights and zero biases.
    pub fn new(input_dim: usize, output_dim: usize, num_layers: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_layers == 0 || input_dim == 0 || output_dim == 0 {
            return Err(Error::invalid("MLP needs at least one layer and positive dimensions"));
        }
        let layers = (0..num_layers)
            .map(|l| {
                let fan_in = if l == 0 { input_dim } else { output_dim };
                let limit = (6.0 / fan_in as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((output_dim, fan_in), || rng.random_range(-limit..limit)),
                    bias: Array1::zeros(output_dim),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::invalid(format!("layer {i}: bias length {} != rows {}", l.bias.len(), l.weight.nrows())));
            }
            if i > 0 && l.weight.ncols() != layers[i - 1].weight.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: layers[i - 1].weight.nrows(),
                    actual: l.weight.ncols(),
                });
            }
            if l.weight.iter().chain(l.bias.iter()).any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// Single linear layer with identity weights and zero bias.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.weight.dot(&h) + &l.bias;
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Batched forward over the rows of `x`, keeping what backprop needs.
    pub(crate) fn forward_batch(&self, x: ArrayView2<f64>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let z = inputs[i].dot(&l.weight.t()) + &l.bias;
            if i < last {
                inputs.push(z.mapv(|v| v.max(0.0)));
            }
            pre.push(z);
        }
        ForwardCache { inputs, pre }
    }

    /// Gradients of a scalar loss given `grad_out = dL/d(output)` per row.
    pub(crate) fn backward(&self, cache: &ForwardCache, grad_out: Array2<f64>) -> Vec<Layer> {
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            grads.push(Layer {
                weight: g.t().dot(&cache.inputs[i]),
                bias: g.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut back = g.dot(&self.layers[i].weight);
                back.zip_mut_with(&cache.pre[i - 1], |b, &z| {
                    if z <= 0.0 {
                        *b = 0.0;
                    }
                });
                g = back;
            }
        }
        grads.reverse();
        grads
    }

    /// Rounds every parameter through `f32`, the storage precision.
    pub fn quantize(&mut self) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v as f32 as f64);
            l.bias.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }
}

pub(crate) fn flatten(grads: &[Layer]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    input_dim: usize,
    output_dim: usize,
    layers: Vec<LayerFile>,
}

impl From<MlpModel> for ModelFile {
    fn from(m: MlpModel) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            input_dim: m.input_dim(),
            output_dim: m.output_dim(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l.weight.iter().map(|&v| v as f32).collect(),
                    bias: l.bias.iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ModelFile> for MlpModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(Error::invalid(format!("unsupported model file {} v{}", f.format, f.version)));
        }
        let layers = f
            .layers
            .into_iter()
            .map(|l| {
                let weight = Array2::from_shape_vec((l.rows, l.cols), l.weight.into_iter().map(f64::from).collect())
                    .map_err(|e| Error::invalid(format!("bad weight shape: {e}")))?;
                Ok(Layer {
                    weight,
                    bias: l.bias.into_iter().map(f64::from).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = MlpModel::from_layers(layers)?;
        if model.input_dim() != f.input_dim || model.output_dim() != f.output_dim {
            return Err(Error::invalid("model header does not match its layers"));
        }
        Ok(model)
    }
}
