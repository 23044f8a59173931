//! Two-hidden-layer tanh network with five units per layer.

use serde::{Deserialize, Serialize};

use super::SurrogateError;
use crate::factors::{continuous_inputs, DynamicsPoint, FactorVector, INPUT_BOUNDS};

pub const INPUTS: usize = 6;
pub const HIDDEN: usize = 5;
/// Trainable weights and biases: 6·5+5 + 5·5+5 + 5+1.
pub const TRAINABLE: usize = INPUTS * HIDDEN + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParameters {
    pub w1: [[f64; INPUTS]; HIDDEN],
    pub b1: [f64; HIDDEN],
    pub w2: [[f64; HIDDEN]; HIDDEN],
    pub b2: [f64; HIDDEN],
    pub w3: [f64; HIDDEN],
    pub b3: f64,
    pub input_min: [f64; INPUTS],
    pub input_max: [f64; INPUTS],
    /// Output is `output_scale · (w3·h2 + b3)`, in grams.
    pub output_scale: f64,
}

/// Intermediate activations kept for backpropagation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Activations {
    pub z: [f64; INPUTS],
    pub h1: [f64; HIDDEN],
    pub h2: [f64; HIDDEN],
    pub out: f64,
}

/// Gradient of a scalar loss with respect to every trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ParamGrad(pub [f64; TRAINABLE]);

impl Default for ParamGrad {
    fn default() -> Self {
        Self([0.0; TRAINABLE])
    }
}

impl MlpParameters {
    /// All weights and biases zero, unit output scale, table bounds for normalization.
    pub fn zeros() -> Self {
        let mut input_min = [0.0; INPUTS];
        let mut input_max = [0.0; INPUTS];
        for (i, (lo, hi)) in INPUT_BOUNDS.iter().enumerate() {
            input_min[i] = *lo;
            input_max[i] = *hi;
        }
        Self {
            w1: [[0.0; INPUTS]; HIDDEN],
            b1: [0.0; HIDDEN],
            w2: [[0.0; HIDDEN]; HIDDEN],
            b2: [0.0; HIDDEN],
            w3: [0.0; HIDDEN],
            b3: 0.0,
            input_min,
            input_max,
            output_scale: 1.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|p| p.is_finite())
            && self.output_scale.is_finite()
            && self.input_min.iter().chain(&self.input_max).all(|p| p.is_finite())
    }

    pub fn normalize(&self, raw: &[f64; INPUTS]) -> [f64; INPUTS] {
        let mut z = [0.0; INPUTS];
        for i in 0..INPUTS {
            let half = 0.5 * (self.input_max[i] - self.input_min[i]);
            z[i] = (raw[i] - (self.input_min[i] + half)) / half;
        }
        z
    }

    /// Whether any raw input lies outside the normalization bounds.
    pub fn is_extrapolation(&self, raw: &[f64; INPUTS]) -> bool {
        (0..INPUTS).any(|i| raw[i] < self.input_min[i] || raw[i] > self.input_max[i])
    }

    pub(crate) fn activations(&self, z: &[f64; INPUTS]) -> Activations {
        let mut h1 = [0.0; HIDDEN];
        for (j, h) in h1.iter_mut().enumerate() {
            let mut s = self.b1[j];
            for i in 0..INPUTS {
                s += self.w1[j][i] * z[i];
            }
            *h = s.tanh();
        }
        let mut h2 = [0.0; HIDDEN];
        for (k, h) in h2.iter_mut().enumerate() {
            let mut s = self.b2[k];
            for j in 0..HIDDEN {
                s += self.w2[k][j] * h1[j];
            }
            *h = s.tanh();
        }
        let mut out = self.b3;
        for k in 0..HIDDEN {
            out += self.w3[k] * h2[k];
        }
        Activations {
            z: *z,
            h1,
            h2,
            out: self.output_scale * out,
        }
    }

    /// Network output for normalized inputs.
    pub fn forward_normalized(&self, z: &[f64; INPUTS]) -> f64 {
        self.activations(z).out
    }

    /// Network output for raw `(v, a, grade, temp, humidity, age)`.
    pub fn forward_raw(&self, raw: &[f64; INPUTS]) -> Result<f64, SurrogateError> {
        if raw.iter().any(|r| !r.is_finite()) {
            return Err(SurrogateError::NonFinite);
        }
        Ok(self.forward_normalized(&self.normalize(raw)))
    }

    /// Backpropagates `d_out = dL/d(output)` into parameter gradients (accumulated
    /// into `grad`) and returns `dL/dz` for the normalized inputs.
    pub(crate) fn backward(&self, act: &Activations, d_out: f64, grad: &mut ParamGrad) -> [f64; INPUTS] {
        let g = &mut grad.0;
        let d_raw = d_out * self.output_scale;
        // output layer
        let mut d_h2 = [0.0; HIDDEN];
        for k in 0..HIDDEN {
            g[OFF_W3 + k] += d_raw * act.h2[k];
            d_h2[k] = d_raw * self.w3[k] * (1.0 - act.h2[k] * act.h2[k]);
        }
        g[OFF_B3] += d_raw;
        // second hidden layer
        let mut d_h1 = [0.0; HIDDEN];
        for k in 0..HIDDEN {
            g[OFF_B2 + k] += d_h2[k];
            for j in 0..HIDDEN {
                g[OFF_W2 + k * HIDDEN + j] += d_h2[k] * act.h1[j];
                d_h1[j] += d_h2[k] * self.w2[k][j];
            }
        }
        // first hidden layer
        let mut d_z = [0.0; INPUTS];
        for j in 0..HIDDEN {
            let d_pre = d_h1[j] * (1.0 - act.h1[j] * act.h1[j]);
            g[OFF_B1 + j] += d_pre;
            for i in 0..INPUTS {
                g[OFF_W1 + j * INPUTS + i] += d_pre * act.z[i];
                d_z[i] += d_pre * self.w1[j][i];
            }
        }
        d_z
    }

    /// Gradient of the output with respect to the normalized inputs.
    pub fn grad_normalized(&self, z: &[f64; INPUTS]) -> [f64; INPUTS] {
        let act = self.activations(z);
        let mut scratch = ParamGrad::default();
        self.backward(&act, 1.0, &mut scratch)
    }

    /// Output and its gradient with respect to raw inputs.
    pub fn value_and_grad_raw(&self, raw: &[f64; INPUTS]) -> Result<(f64, [f64; INPUTS]), SurrogateError> {
        if raw.iter().any(|r| !r.is_finite()) {
            return Err(SurrogateError::NonFinite);
        }
        let z = self.normalize(raw);
        let act = self.activations(&z);
        let mut scratch = ParamGrad::default();
        let dz = self.backward(&act, 1.0, &mut scratch);
        let mut out = [0.0; INPUTS];
        for i in 0..INPUTS {
            let half = 0.5 * (self.input_max[i] - self.input_min[i]);
            out[i] = dz[i] / half;
        }
        Ok((act.out, out))
    }

    /// Trainable parameters in storage order: w1 (row-major), b1, w2, b2, w3, b3.
    pub fn flat(&self) -> [f64; TRAINABLE] {
        let mut p = [0.0; TRAINABLE];
        for j in 0..HIDDEN {
            p[OFF_W1 + j * INPUTS..OFF_W1 + (j + 1) * INPUTS].copy_from_slice(&self.w1[j]);
            p[OFF_W2 + j * HIDDEN..OFF_W2 + (j + 1) * HIDDEN].copy_from_slice(&self.w2[j]);
        }
        p[OFF_B1..OFF_B1 + HIDDEN].copy_from_slice(&self.b1);
        p[OFF_B2..OFF_B2 + HIDDEN].copy_from_slice(&self.b2);
        p[OFF_W3..OFF_W3 + HIDDEN].copy_from_slice(&self.w3);
        p[OFF_B3] = self.b3;
        p
    }

    pub fn set_flat(&mut self, p: &[f64; TRAINABLE]) {
        for j in 0..HIDDEN {
            self.w1[j].copy_from_slice(&p[OFF_W1 + j * INPUTS..OFF_W1 + (j + 1) * INPUTS]);
            self.w2[j].copy_from_slice(&p[OFF_W2 + j * HIDDEN..OFF_W2 + (j + 1) * HIDDEN]);
        }
        self.b1.copy_from_slice(&p[OFF_B1..OFF_B1 + HIDDEN]);
        self.b2.copy_from_slice(&p[OFF_B2..OFF_B2 + HIDDEN]);
        self.w3.copy_from_slice(&p[OFF_W3..OFF_W3 + HIDDEN]);
        self.b3 = p[OFF_B3];
    }
}

const OFF_W1: usize = 0;
const OFF_B1: usize = OFF_W1 + INPUTS * HIDDEN;
const OFF_W2: usize = OFF_B1 + HIDDEN;
const OFF_B2: usize = OFF_W2 + HIDDEN * HIDDEN;
const OFF_W3: usize = OFF_B2 + HIDDEN;
const OFF_B3: usize = OFF_W3 + HIDDEN;

/// `e_NN` for a single query.
pub fn forward(m: &MlpParameters, v: f64, a: f64, x: &FactorVector) -> Result<f64, SurrogateError> {
    m.forward_raw(&continuous_inputs(x, &DynamicsPoint { v, a }))
}

/// `∂e_NN/∂(v, a, grade, temp, humidity, age)` in physical units.
pub fn grad_inputs(m: &MlpParameters, v: f64, a: f64, x: &FactorVector) -> Result<[f64; INPUTS], SurrogateError> {
    Ok(m.value_and_grad_raw(&continuous_inputs(x, &DynamicsPoint { v, a }))?.1)
}
