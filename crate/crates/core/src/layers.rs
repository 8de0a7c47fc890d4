//! Network layers built from spintronic devices.
//!
//! A convolution filter coefficient is stored as a relative detuning `zeta`;
//! every resonator tied to that coefficient sits at `f_res = f_rf * (1 - zeta)`
//! for its own carrier `f_rf`, so all of them implement the same weight
//! `W(zeta)`. A chain's DC voltage is the sum of its resonators' voltages,
//! which is the convolution sum with weights `W(zeta)`:
//!
//! ```text
//! U[h, w, m] = gain * ( sum_{i, j, c} P[h + i, w + j, c] * W(zeta[i, j, c, m]) + b[m] )
//! ```
//!
//! Oscillator neurons turn voltages back into RF powers through a
//! voltage-to-current gain and the threshold power curve.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Parameter, PatchGeometry, Scalar, Tape, Tensor, Var};
use crate::device::{self, DeviceConsts, DeviceError, DeviceParams};

pub use crate::autodiff::output_shape;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// How a synapse turns its trainable coefficient into a weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SynapseKind {
    /// Resonator detuning `zeta`, weight `W(zeta)`, oscillator neurons.
    #[default]
    Spintronic,
    /// Plain weights and ReLU neurons; the software baseline.
    Conventional,
}

impl SynapseKind {
    fn weight_map<S: Scalar>(self, tape: &mut Tape<S>, coeff: Var, dc: DeviceConsts<S>) -> Var {
        match self {
            SynapseKind::Spintronic => tape.map(coeff, move |z| dc.weight(z), move |z| dc.weight_grad(z)),
            SynapseKind::Conventional => coeff,
        }
    }

    fn weights<S: Scalar>(self, coeff: &Tensor<S>, dc: DeviceConsts<S>) -> Tensor<S> {
        match self {
            SynapseKind::Spintronic => coeff.map(|z| dc.weight(z)),
            SynapseKind::Conventional => coeff.clone(),
        }
    }
}

/// Trainable coefficients of one convolution filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ZetaFilter<S> {
    /// `[k, k, N_c, N_m]`.
    pub zeta: Parameter<S>,
    /// `[N_m]`, µV, added to each chain voltage.
    pub bias: Parameter<S>,
    /// `[1]`, output amplification of the layer.
    pub gain: Parameter<S>,
}

impl<S: Scalar> ZetaFilter<S> {
    pub fn kernel(&self) -> usize {
        self.zeta.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.zeta.shape()[2]
    }
    pub fn filters(&self) -> usize {
        self.zeta.shape()[3]
    }

    /// Resonance frequencies the coefficients require for a carrier `f_rf`.
    pub fn resonance_frequencies(&self, f_rf: f64) -> Result<Vec<f64>, DeviceError> {
        self.zeta
            .value
            .data()
            .iter()
            .map(|z| device::zeta_to_fres(z.as_f64(), f_rf))
            .collect()
    }
}

/// Tape handles of a layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    pub coeff: Var,
    pub bias: Var,
    pub gain: Var,
}

fn bind<S: Scalar>(tape: &mut Tape<S>, p: &Parameter<S>, trainable: bool) -> Var {
    if trainable {
        tape.leaf(p.value.clone())
    } else {
        tape.constant(p.value.clone())
    }
}

fn check_powers<S: Scalar>(t: &Tensor<S>) -> Result<(), ModelError> {
    if let Some(v) = t.data().iter().find(|v| !(**v >= S::zero())) {
        return Err(ModelError::Domain(format!("input power {v} µW is negative or NaN")));
    }
    Ok(())
}

/// Parallel convolution: one resonator chain per output position and filter.
#[derive(Debug, Clone, PartialEq)]
pub struct RfConv2d<S> {
    pub filter: ZetaFilter<S>,
    pub stride: usize,
    pub padding: usize,
    pub device: DeviceParams,
    pub synapse: SynapseKind,
}

impl<S: Scalar> RfConv2d<S> {
    pub fn geometry(&self, input_shape: &[usize]) -> Result<PatchGeometry, ModelError> {
        if input_shape.len() != 3 {
            return Err(ModelError::Config(format!("conv input must be [H, W, C], got {input_shape:?}")));
        }
        if input_shape[2] != self.filter.in_channels() {
            return Err(ModelError::Config(format!(
                "conv expects {} channels, got {}",
                self.filter.in_channels(),
                input_shape[2]
            )));
        }
        Ok(PatchGeometry::new(
            input_shape[0],
            input_shape[1],
            input_shape[2],
            self.filter.kernel(),
            self.stride,
            self.padding,
        )?)
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        Bound {
            coeff: bind(tape, &self.filter.zeta, trainable),
            bias: bind(tape, &self.filter.bias, trainable),
            gain: bind(tape, &self.filter.gain, trainable),
        }
    }

    /// Record the chain voltages `[H_out, W_out, N_m]` for input powers `x`.
    pub fn record(&self, tape: &mut Tape<S>, x: Var, p: Bound) -> Result<Var, ModelError> {
        check_powers(tape.value(x))?;
        let geom = self.geometry(tape.value(x).shape())?;
        let (rows, cols, m) = (geom.rows(), geom.cols(), self.filter.filters());
        let patches = tape.unfold(x, geom)?;
        let coeff = tape.reshape(p.coeff, vec![cols, m])?;
        let w = self.synapse.weight_map(tape, coeff, self.device.consts());
        let sums = tape.matmul(patches, w)?;
        let ones = tape.constant(Tensor::full(&[rows, 1], S::one()));
        let b_row = tape.reshape(p.bias, vec![1, m])?;
        let b = tape.matmul(ones, b_row)?;
        let pre = tape.add(sums, b)?;
        let out = tape.scalar_mul(pre, p.gain)?;
        Ok(tape.reshape(out, vec![geom.out_height, geom.out_width, m])?)
    }

    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let p = self.bind(&mut tape, false);
        let y = self.record(&mut tape, x, p)?;
        Ok(tape.value(y).clone())
    }

    /// Effective weights `W(zeta)`, shape `[k, k, N_c, N_m]`.
    pub fn weights(&self) -> Tensor<S> {
        self.synapse.weights(&self.filter.zeta.value, self.device.consts())
    }
}

impl RfConv2d<f64> {
    /// Chain voltages computed resonator by resonator from the spin-diode
    /// formula, each input line carrying its own frequency `carrier(h, w, c)`
    /// (GHz) and each resonator placed at `f_rf * (1 - zeta)`.
    pub fn forward_with_carriers(
        &self,
        input: &Tensor<f64>,
        carrier: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Tensor<f64>, ModelError> {
        if self.synapse != SynapseKind::Spintronic {
            return Err(ModelError::Config("carrier path needs spintronic synapses".into()));
        }
        check_powers(input)?;
        let g = self.geometry(input.shape())?;
        let (k, c_n, m_n) = (g.kernel, g.channels, self.filter.filters());
        let zeta = self.filter.zeta.value.data();
        let bias = self.filter.bias.value.data();
        let gain = self.filter.gain.value.data()[0];
        let mut out = vec![0.0; g.rows() * m_n];
        for h in 0..g.out_height {
            for w in 0..g.out_width {
                for m in 0..m_n {
                    let mut chain = 0.0;
                    for c in 0..c_n {
                        for j in 0..k {
                            for i in 0..k {
                                let y = (h * g.stride + i) as isize - g.padding as isize;
                                let x = (w * g.stride + j) as isize - g.padding as isize;
                                if y < 0 || x < 0 || y >= g.height as isize || x >= g.width as isize {
                                    continue;
                                }
                                let (y, x) = (y as usize, x as usize);
                                let power = input.data()[(y * g.width + x) * c_n + c];
                                let f_rf = carrier(y, x, c);
                                let z = zeta[((i * k + j) * c_n + c) * m_n + m];
                                let f_res = device::zeta_to_fres(z, f_rf)?;
                                chain += device::rectified_voltage(power, f_rf, f_res, &self.device)?;
                            }
                        }
                    }
                    out[(h * g.out_width + w) * m_n + m] = gain * (chain + bias[m]);
                }
            }
        }
        Ok(Tensor::new(vec![g.out_height, g.out_width, m_n], out)?)
    }
}

/// Fully-connected resonator layer, one resonator per synapse.
#[derive(Debug, Clone, PartialEq)]
pub struct RfDense<S> {
    /// `[n_in, n_out]`.
    pub zeta: Parameter<S>,
    pub bias: Parameter<S>,
    pub gain: Parameter<S>,
    pub device: DeviceParams,
    pub synapse: SynapseKind,
}

impl<S: Scalar> RfDense<S> {
    pub fn inputs(&self) -> usize {
        self.zeta.shape()[0]
    }
    pub fn outputs(&self) -> usize {
        self.zeta.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        Bound {
            coeff: bind(tape, &self.zeta, trainable),
            bias: bind(tape, &self.bias, trainable),
            gain: bind(tape, &self.gain, trainable),
        }
    }

    /// `x` may have any shape with `n_in` elements; output is `[n_out]`.
    pub fn record(&self, tape: &mut Tape<S>, x: Var, p: Bound) -> Result<Var, ModelError> {
        check_powers(tape.value(x))?;
        let n_in = tape.value(x).len();
        if n_in != self.inputs() {
            return Err(ModelError::Config(format!(
                "dense layer expects {} inputs, got {n_in}",
                self.inputs()
            )));
        }
        let row = tape.reshape(x, vec![1, n_in])?;
        let w = self.synapse.weight_map(tape, p.coeff, self.device.consts());
        let sums = tape.matmul(row, w)?;
        let b = tape.reshape(p.bias, vec![1, self.outputs()])?;
        let pre = tape.add(sums, b)?;
        let out = tape.scalar_mul(pre, p.gain)?;
        Ok(tape.reshape(out, vec![self.outputs()])?)
    }

    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let p = self.bind(&mut tape, false);
        let y = self.record(&mut tape, x, p)?;
        Ok(tape.value(y).clone())
    }

    pub fn weights(&self) -> Tensor<S> {
        self.synapse.weights(&self.zeta.value, self.device.consts())
    }
}

/// Layer of spin-torque nano-oscillators fed by chain voltages.
#[derive(Debug, Clone, PartialEq)]
pub struct OscillatorActivation<S> {
    /// `[1]`, mA of drive current per µV of chain voltage.
    pub i_gain: Parameter<S>,
    pub device: DeviceParams,
    /// Power (µW) emitted at normalized power 1.
    pub emit_scale: f64,
    pub synapse: SynapseKind,
}

impl<S: Scalar> OscillatorActivation<S> {
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Var {
        bind(tape, &self.i_gain, trainable)
    }

    /// Emitted powers `emit_scale * p(i_gain * U)`; ReLU for the
    /// conventional baseline.
    pub fn record(&self, tape: &mut Tape<S>, u: Var, i_gain: Var) -> Result<Var, ModelError> {
        let current = tape.scalar_mul(u, i_gain)?;
        let p = match self.synapse {
            SynapseKind::Spintronic => {
                let dc: DeviceConsts<S> = self.device.consts();
                tape.map(current, move |i| dc.power(i), move |i| dc.power_grad(i))
            }
            SynapseKind::Conventional => tape.map(
                current,
                |i| i.max(S::zero()),
                |i| if i > S::zero() { S::one() } else { S::zero() },
            ),
        };
        Ok(tape.scale(p, S::from_f64_lossy(self.emit_scale)))
    }

    pub fn forward(&self, u: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(u.clone());
        let g = self.bind(&mut tape, false);
        let y = self.record(&mut tape, x, g)?;
        Ok(tape.value(y).clone())
    }
}

/// 2x2 / stride 2 max-pool on `[H, W, C]`.
pub fn maxpool2x2<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.maxpool2x2(x)?;
    Ok(tape.value(y).clone())
}

/// Cross-entropy of `label` under softmax of `logits`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, label: usize) -> Result<S, ModelError> {
    if label >= logits.len() {
        return Err(ModelError::Domain(format!("label {label} out of range")));
    }
    Ok(crate::autodiff::softmax_ce(logits.data(), label).1)
}
