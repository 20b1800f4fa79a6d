//! Small fully connected networks with exact reverse-mode gradients.
//!
//! Parameters live in one flat vector so trust-region code can treat them
//! as a point in R^n. Each layer stores its weight matrix row-major
//! (`[out][in]`) followed by its bias.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{read_checkpoint, write_checkpoint, Block, Checkpoint, CheckpointHeader, RngState, CHECKPOINT_VERSION};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    /// Gain used for orthogonal initialization of hidden layers.
    pub fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => std::f64::consts::SQRT_2,
            Activation::Tanh => 5.0 / 3.0,
        }
    }
}

/// Shape of one affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    pub fn num_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, activation: Activation) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidModel(format!("all layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2)
            .map(|w| LayerShape {
                inputs: w[0],
                outputs: w[1],
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(LayerShape::num_params).sum()
    }
}

/// Flat parameter vector together with the layer layout that slices it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
    layout: Vec<LayerShape>,
}

impl FlatParams {
    pub fn zeros(layout: Vec<LayerShape>) -> Self {
        let n = layout.iter().map(LayerShape::num_params).sum();
        FlatParams {
            values: vec![0.0; n],
            layout,
        }
    }

    /// Rebuilds parameters from a flat vector.
    pub fn scatter(layout: Vec<LayerShape>, values: Vec<f64>) -> Result<Self> {
        let n: usize = layout.iter().map(LayerShape::num_params).sum();
        if values.len() != n {
            return Err(Error::Dimension {
                context: "flat parameter vector",
                expected: n,
                actual: values.len(),
            });
        }
        Ok(FlatParams { values, layout })
    }

    pub fn gather(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayerShape] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// (weights, bias) slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let offset: usize = self.layout[..l].iter().map(LayerShape::num_params).sum();
        let shape = self.layout[l];
        let w_end = offset + shape.inputs * shape.outputs;
        (&self.values[offset..w_end], &self.values[w_end..w_end + shape.outputs])
    }
}

/// Intermediate values of one forward pass, kept for differentiation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// A network specification bound to concrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: FlatParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: FlatParams) -> Result<Self> {
        spec.validate()?;
        if params.layout() != spec.layout().as_slice() {
            return Err(Error::Dimension {
                context: "parameter layout",
                expected: spec.num_params(),
                actual: params.len(),
            });
        }
        Ok(Mlp { spec, params })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = FlatParams::zeros(spec.layout());
        Ok(Mlp { spec, params })
    }

    /// Orthogonal weights scaled by the activation gain, output layer scaled by
    /// `output_gain`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, output_gain: f64, rng: &mut R) -> Result<Self> {
        let mut net = Mlp::zeros(spec)?;
        let layout = net.spec.layout();
        let hidden_gain = net.spec.activation.init_gain();
        let mut offset = 0;
        for (l, shape) in layout.iter().enumerate() {
            let gain = if l + 1 == layout.len() { output_gain } else { hidden_gain };
            let w = orthogonal(shape.outputs, shape.inputs, gain, rng);
            net.params.values[offset..offset + w.len()].copy_from_slice(&w);
            offset += shape.num_params();
        }
        Ok(net)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &FlatParams {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn gather(&self) -> Vec<f64> {
        self.params.gather()
    }

    pub fn scatter(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Dimension {
                context: "flat parameter vector",
                expected: self.params.len(),
                actual: values.len(),
            });
        }
        self.params.values.copy_from_slice(values);
        Ok(())
    }

    pub fn with_params(&self, values: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.scatter(values)?;
        Ok(out)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.output)
    }

    /// Forward pass that keeps everything needed by [`Mlp::backward`] and [`Mlp::jvp`].
    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.spec.input_dim {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.spec.input_dim,
                actual: input.len(),
            });
        }
        let layers = self.params.layout.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers.saturating_sub(1));
        let mut h = input.to_vec();
        for l in 0..layers {
            let (w, b) = self.params.layer(l);
            let z = affine(w, b, &h);
            if z.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: l });
            }
            inputs.push(h);
            if l + 1 == layers {
                return Ok(Trace { inputs, pre, output: z });
            }
            h = z.iter().map(|&x| self.spec.activation.apply(x)).collect();
            pre.push(z);
        }
        unreachable!("a network always has at least one layer")
    }

    /// Accumulates `scale * d(grad_output . output)/d(params)` into `out`.
    pub fn backward_into(&self, trace: &Trace, grad_output: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        if grad_output.len() != self.spec.output_dim {
            return Err(Error::Dimension {
                context: "output gradient",
                expected: self.spec.output_dim,
                actual: grad_output.len(),
            });
        }
        if out.len() != self.params.len() {
            return Err(Error::Dimension {
                context: "gradient buffer",
                expected: self.params.len(),
                actual: out.len(),
            });
        }
        let layout = &self.params.layout;
        let mut offsets = Vec::with_capacity(layout.len());
        let mut acc = 0;
        for s in layout {
            offsets.push(acc);
            acc += s.num_params();
        }
        let mut delta: Vec<f64> = grad_output.iter().map(|g| g * scale).collect();
        for l in (0..layout.len()).rev() {
            let shape = layout[l];
            let input = &trace.inputs[l];
            let off = offsets[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut out[off + o * shape.inputs..off + (o + 1) * shape.inputs];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let bias_off = off + shape.inputs * shape.outputs;
            for (g, &d) in out[bias_off..bias_off + shape.outputs].iter_mut().zip(&delta) {
                *g += d;
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.params.layer(l);
            let pre = &trace.pre[l - 1];
            let mut next = vec![0.0; shape.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * shape.inputs..(o + 1) * shape.inputs];
                for (n, &wv) in next.iter_mut().zip(row) {
                    *n += d * wv;
                }
            }
            for (n, &z) in next.iter_mut().zip(pre) {
                *n *= self.spec.activation.derivative(z);
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: l });
            }
            delta = next;
        }
        Ok(())
    }

    /// Parameter gradient of `grad_output . output`.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.params.len()];
        self.backward_into(trace, grad_output, 1.0, &mut out)?;
        Ok(out)
    }

    /// Forward-mode directional derivative of the output along a parameter tangent.
    pub fn jvp(&self, trace: &Trace, tangent: &[f64]) -> Result<Vec<f64>> {
        if tangent.len() != self.params.len() {
            return Err(Error::Dimension {
                context: "parameter tangent",
                expected: self.params.len(),
                actual: tangent.len(),
            });
        }
        let layout = &self.params.layout;
        let tangent = FlatParams {
            values: tangent.to_vec(),
            layout: layout.clone(),
        };
        let mut dh = vec![0.0; self.spec.input_dim];
        for l in 0..layout.len() {
            let (w, _) = self.params.layer(l);
            let (dw, db) = tangent.layer(l);
            let x = &trace.inputs[l];
            // dz = dW x + W dh + db
            let mut dz = affine(dw, db, x);
            let wdh = affine(w, &vec![0.0; layout[l].outputs], &dh);
            dz.iter_mut().zip(&wdh).for_each(|(a, b)| *a += b);
            if l + 1 == layout.len() {
                return Ok(dz);
            }
            dh = dz
                .iter()
                .zip(&trace.pre[l])
                .map(|(d, &z)| d * self.spec.activation.derivative(z))
                .collect();
        }
        unreachable!("a network always has at least one layer")
    }

    /// Value and exact parameter gradient of `loss(output)`.
    ///
    /// `loss` returns the scalar and its gradient with respect to the output.
    pub fn grad_scalar<F>(&self, input: &[f64], loss: F) -> Result<(f64, FlatParams)>
    where
        F: FnOnce(&[f64]) -> (f64, Vec<f64>),
    {
        let trace = self.trace(input)?;
        let (value, grad_out) = loss(&trace.output);
        if !value.is_finite() {
            return Err(Error::NonFiniteLayer {
                layer: self.params.layout.len(),
            });
        }
        let g = self.backward(&trace, &grad_out)?;
        Ok((value, FlatParams::scatter(self.spec.layout(), g)?))
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            w[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .fold(bias, |acc, (wv, xv)| acc + wv * xv)
        })
        .collect()
}

/// Row-major `rows x cols` matrix with orthonormal rows or columns (whichever
/// is fewer), scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * m[(i, j)]);
        }
    }
    out
}
