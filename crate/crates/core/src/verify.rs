//! Gradient verification suite: every analytic derivative against central
//! finite differences at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{finite_difference_grad_masked, relative_error};
use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::device::{DeviceConsts, DeviceParams};
use crate::layers::{Bound, ModelError, OscillatorActivation, RfConv2d, RfDense, SynapseKind, ZetaFilter};
use crate::network::{Network, NetworkConfig};

const H: f64 = 1e-6;
const KINK_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    /// Relative error allowed for single maps and layers. The full-network
    /// check allows ten times this.
    pub tolerance: f64,
    pub seed: u64,
    /// Perturb the analytic oscillator derivative, to show the suite notices.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { tolerance: 1e-5, seed: 0, inject_fault: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub relative_error: f64,
    pub tolerance: f64,
    /// Coordinates compared.
    pub compared: usize,
    /// Coordinates skipped because a kink lies within the difference step.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn result(name: &str, analytic: &[f64], numeric: &[f64], skipped: usize, tolerance: f64) -> CheckResult {
    let err = relative_error(analytic, numeric);
    CheckResult {
        name: name.into(),
        relative_error: err,
        tolerance,
        compared: analytic.len(),
        skipped,
        passed: err <= tolerance,
    }
}

/// Scalar map `f` with derivative `df`, sampled at `points`.
fn scalar_check(name: &str, points: &[f64], f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, tol: f64) -> CheckResult {
    let analytic: Vec<f64> = points.iter().map(|&x| df(x)).collect();
    let numeric: Vec<f64> = points.iter().map(|&x| (f(x + H) - f(x - H)) / (2.0 * H)).collect();
    result(name, &analytic, &numeric, 0, tol)
}

/// Gradient of `<r, build(inputs)>` for a fixed random `r`, for every input.
fn tape_check(
    name: &str,
    inputs: &[Tensor<f64>],
    rng: &mut ChaCha8Rng,
    tol: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, ModelError>,
) -> Result<CheckResult, ModelError> {
    let n = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).len()
    };
    let r = Tensor::new(vec![n, 1], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let objective = |xs: &[Tensor<f64>], leaves: bool| -> Result<(Tape<f64>, Var, Vec<Var>), ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| if leaves { tape.leaf(x.clone()) } else { tape.constant(x.clone()) })
            .collect();
        let out = build(&mut tape, &vars)?;
        let n = tape.value(out).len();
        let row = tape.reshape(out, vec![1, n])?;
        let r = tape.constant(r.clone());
        let dot = tape.matmul(row, r)?;
        let loss = tape.sum(dot);
        Ok((tape, loss, vars))
    };
    let (tape, loss, vars) = objective(inputs, true)?;
    let mut grads = tape.backward(loss)?;
    let (mut analytic, mut numeric, mut skipped) = (Vec::new(), Vec::new(), 0);
    for (k, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape()));
        let f = |probe: &Tensor<f64>| {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            objective(&xs, false)
                .map(|(t, l, _)| t.value(l).data()[0])
                .unwrap_or(f64::NAN)
        };
        let (fd, smooth) = finite_difference_grad_masked(f, x, H, KINK_TOL);
        for i in 0..x.len() {
            if smooth[i] {
                analytic.push(g.data()[i]);
                numeric.push(fd.data()[i]);
            } else {
                skipped += 1;
            }
        }
    }
    Ok(result(name, &analytic, &numeric, skipped, tol))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Run every check.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport, ModelError> {
    let tol = opts.tolerance;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let device = DeviceParams::default();
    let dc: DeviceConsts<f64> = device.consts();
    let fault = if opts.inject_fault { 1.0 + 1e-3 } else { 1.0 };
    let mut checks = Vec::new();

    // Eq. 3 away from the threshold and clamp, plus both flat regions.
    let mut currents: Vec<f64> = (0..200).map(|i| 2.01 + 5.98 * i as f64 / 199.0).collect();
    currents.extend([0.0, 0.5, 1.5, 1.99, 8.01, 9.0, 12.0]);
    checks.push(scalar_check(
        "oscillator_power",
        &currents,
        |i| dc.power(i),
        |i| fault * dc.power_grad(i),
        tol,
    ));

    let zetas: Vec<f64> = (0..400).map(|i| -0.95 + 1.9 * i as f64 / 399.0).collect();
    checks.push(scalar_check(
        "synaptic_weight_zeta",
        &zetas,
        |z| dc.weight(z),
        |z| dc.weight_grad(z),
        tol,
    ));

    let conv = RfConv2d {
        filter: ZetaFilter {
            zeta: Parameter::new(uniform(&mut rng, &[3, 3, 2, 3], -0.2, 0.2)),
            bias: Parameter::new(Tensor::zeros(&[3])),
            gain: Parameter::new(Tensor::scalar(1.0)),
        },
        stride: 1,
        padding: 1,
        device,
        synapse: SynapseKind::Spintronic,
    };
    let inputs = [
        uniform(&mut rng, &[6, 5, 2], 0.0, 1.0),
        conv.filter.zeta.value.clone(),
        uniform(&mut rng, &[3], -1.0, 1.0),
        Tensor::scalar(0.7),
    ];
    checks.push(tape_check("conv", &inputs, &mut rng, tol, |t, v| {
        conv.record(t, v[0], Bound { coeff: v[1], bias: v[2], gain: v[3] })
    })?);

    let dense = RfDense {
        zeta: Parameter::new(uniform(&mut rng, &[12, 4], -0.2, 0.2)),
        bias: Parameter::new(Tensor::zeros(&[4])),
        gain: Parameter::new(Tensor::scalar(1.0)),
        device,
        synapse: SynapseKind::Spintronic,
    };
    let inputs = [
        uniform(&mut rng, &[12], 0.0, 1.0),
        dense.zeta.value.clone(),
        uniform(&mut rng, &[4], -1.0, 1.0),
        Tensor::scalar(1.3),
    ];
    checks.push(tape_check("dense", &inputs, &mut rng, tol, |t, v| {
        dense.record(t, v[0], Bound { coeff: v[1], bias: v[2], gain: v[3] })
    })?);

    let osc = OscillatorActivation {
        i_gain: Parameter::new(Tensor::scalar(2.0)),
        device,
        emit_scale: 1.0,
        synapse: SynapseKind::Spintronic,
    };
    // currents i_gain * u spread over (I_th, I_max) and the flat regions
    let inputs = [uniform(&mut rng, &[4, 4, 2], -1.0, 5.0), Tensor::scalar(2.0)];
    checks.push(tape_check("oscillator", &inputs, &mut rng, tol, |t, v| osc.record(t, v[0], v[1]))?);

    let inputs = [uniform(&mut rng, &[5, 7, 3], -1.0, 1.0)];
    checks.push(tape_check("maxpool", &inputs, &mut rng, tol, |t, v| Ok(t.maxpool2x2(v[0])?))?);

    let inputs = [uniform(&mut rng, &[10], -3.0, 3.0)];
    checks.push(tape_check("softmax_cross_entropy", &inputs, &mut rng, tol, |t, v| {
        Ok(t.softmax_cross_entropy(v[0], 3)?)
    })?);

    checks.push(network_check(opts.seed, 10.0 * tol)?);
    Ok(SuiteReport { checks })
}

/// Summed loss of two images through a calibrated 4/8-filter network,
/// differentiated with respect to every parameter.
fn network_check(seed: u64, tol: f64) -> Result<CheckResult, ModelError> {
    let mut cfg = NetworkConfig::two_block(4, 8);
    cfg.seed = seed;
    let mut net = Network::<f64>::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let images: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&mut rng, &[28, 28, 1], 0.0, 1.0)).collect();
    let labels = [rng.gen_range(0..10), rng.gen_range(0..10)];
    net.calibrate(&images)?;

    let mut analytic: Vec<Tensor<f64>> = net.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (img, &label) in images.iter().zip(&labels) {
        let s = net.sample_grad(img, label)?;
        for (a, g) in analytic.iter_mut().zip(&s.grads) {
            a.add_assign(g)?;
        }
    }

    let total_loss = |net: &Network<f64>| -> f64 {
        images
            .iter()
            .zip(&labels)
            .map(|(img, &l)| net.loss(img, l).unwrap_or(f64::NAN))
            .sum()
    };
    let (mut a, mut n, mut skipped) = (Vec::new(), Vec::new(), 0);
    let values: Vec<Tensor<f64>> = net.parameters().iter().map(|p| p.value.clone()).collect();
    for (k, value) in values.iter().enumerate() {
        // step relative to the parameter's own scale
        let scale = value.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
        let f = |probe: &Tensor<f64>| {
            let mut perturbed = net.clone();
            perturbed.parameters_mut()[k].value = probe.clone();
            total_loss(&perturbed)
        };
        let (fd, smooth) = finite_difference_grad_masked(f, value, H * scale, KINK_TOL);
        for i in 0..value.len() {
            if smooth[i] {
                a.push(analytic[k].data()[i]);
                n.push(fd.data()[i]);
            } else {
                skipped += 1;
            }
        }
    }
    Ok(result("network_4x8", &a, &n, skipped, tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_check_detects_wrong_derivative() {
        let pts = [0.1, 0.5, 1.0];
        assert!(scalar_check("sq", &pts, |x| x * x, |x| 2.0 * x, 1e-8).passed);
        assert!(!scalar_check("sq", &pts, |x| x * x, |x| 2.001 * x, 1e-5).passed);
    }

    #[test]
    fn default_suite_passes() {
        let report = run_suite(&SuiteOptions::default()).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
            assert!(c.compared > 0, "{c:?}");
        }
        let net = report.checks.iter().find(|c| c.name == "network_4x8").unwrap();
        assert!(net.compared > net.skipped * 10, "{net:?}");
    }

    #[test]
    fn injected_fault_and_tiny_tolerance_fail() {
        let faulty = run_suite(&SuiteOptions { inject_fault: true, ..SuiteOptions::default() }).unwrap();
        assert!(!faulty.passed());
        assert!(!faulty.checks[0].passed);
        let strict = run_suite(&SuiteOptions { tolerance: 1e-30, ..SuiteOptions::default() }).unwrap();
        assert!(strict.checks.iter().all(|c| !c.passed));
    }
}
