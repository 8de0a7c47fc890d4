//! Closed-form models of the two spintronic devices.
//!
//! Units are fixed throughout the crate: currents in mA, RF powers in µW,
//! frequencies in GHz and rectified voltages in µV.
//!
//! * The spin-torque nano-oscillator (neuron) turns a direct current into a
//!   normalized magnetization power `p = (r - 1) / (r + Q)` with
//!   `r = I_dc / I_th`, zero below threshold and clamped at `I_max`.
//! * The spintronic resonator (synapse) rectifies an RF signal into a DC
//!   voltage following an anti-Lorentzian lineshape around its resonance
//!   frequency.
//!
//! The checked `f64` functions are the public reference surface. Layers use
//! [`DeviceConsts`], a pre-cast copy of the parameters, to evaluate the same
//! formulas at the network's float width without per-element validation.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("zeta = {0} gives a non-physical resonance frequency (requires zeta < 1)")]
    ZetaOutOfRange(f64),
    #[error("invalid device parameters: {0}")]
    InvalidParams(String),
}

/// Physical constants of the oscillators and resonators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceParams {
    /// Magnetic damping of the resonator free layer.
    pub alpha: f64,
    /// Rectification scale, µV per µW.
    pub amp_a: f64,
    /// Nonlinear damping coefficient of the oscillator.
    pub q: f64,
    /// Oscillator threshold current, mA.
    pub i_th: f64,
    /// Current clamp, mA.
    pub i_max: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        DeviceParams {
            alpha: 0.01,
            amp_a: 1.0,
            q: 2.0,
            i_th: 2.0,
            i_max: 8.0,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let all = [self.alpha, self.amp_a, self.q, self.i_th, self.i_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(DeviceError::InvalidParams("non-finite value".into()));
        }
        if self.alpha <= 0.0 {
            return Err(DeviceError::InvalidParams(format!("alpha = {} must be > 0", self.alpha)));
        }
        if self.amp_a <= 0.0 {
            return Err(DeviceError::InvalidParams(format!("amp_a = {} must be > 0", self.amp_a)));
        }
        if self.q <= 0.0 {
            return Err(DeviceError::InvalidParams(format!("q = {} must be > 0", self.q)));
        }
        if !(0.0 < self.i_th && self.i_th < self.i_max) {
            return Err(DeviceError::InvalidParams(format!(
                "need 0 < i_th < i_max, got i_th = {}, i_max = {}",
                self.i_th, self.i_max
            )));
        }
        Ok(())
    }

    /// Cast the constants to the float type used by a network.
    pub fn consts<F: Float>(&self) -> DeviceConsts<F> {
        let c = |v: f64| F::from(v).expect("device constant representable");
        DeviceConsts {
            alpha2: c(self.alpha * self.alpha),
            amp_a: c(self.amp_a),
            q: c(self.q),
            i_th: c(self.i_th),
            i_max: c(self.i_max),
        }
    }
}

/// Device constants at a given float width, for elementwise hot paths.
#[derive(Debug, Clone, Copy)]
pub struct DeviceConsts<F> {
    pub alpha2: F,
    pub amp_a: F,
    pub q: F,
    pub i_th: F,
    pub i_max: F,
}

impl<F: Float> DeviceConsts<F> {
    pub fn power(&self, i_dc: F) -> F {
        if !(i_dc > self.i_th) {
            return F::zero();
        }
        let r = i_dc.min(self.i_max) / self.i_th;
        (r - F::one()) / (r + self.q)
    }

    /// Zero outside the open interval `(I_th, I_max)`.
    pub fn power_grad(&self, i_dc: F) -> F {
        if !(i_dc > self.i_th) || i_dc >= self.i_max {
            return F::zero();
        }
        let r = i_dc / self.i_th;
        let d = r + self.q;
        (self.q + F::one()) / (d * d * self.i_th)
    }

    pub fn weight(&self, zeta: F) -> F {
        let u = F::one() - zeta;
        self.amp_a * zeta / (self.alpha2 * u * u + zeta * zeta)
    }

    pub fn weight_grad(&self, zeta: F) -> F {
        let u = F::one() - zeta;
        let z2 = zeta * zeta;
        let d = self.alpha2 * u * u + z2;
        self.amp_a * (self.alpha2 * (F::one() - z2) - z2) / (d * d)
    }
}

fn finite(v: f64, what: &'static str) -> Result<f64, DeviceError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DeviceError::NonFinite(what))
    }
}

fn positive(v: f64, what: &'static str) -> Result<f64, DeviceError> {
    finite(v, what)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(DeviceError::NonPositive { what, value: v })
    }
}

/// Normalized oscillation power of a spin-torque nano-oscillator driven by
/// `i_dc` mA. Negative currents are below threshold.
pub fn oscillator_power(i_dc: f64, p: &DeviceParams) -> Result<f64, DeviceError> {
    finite(i_dc, "oscillator_power")?;
    Ok(p.consts::<f64>().power(i_dc))
}

/// Derivative of [`oscillator_power`] in 1/mA.
pub fn oscillator_power_grad(i_dc: f64, p: &DeviceParams) -> Result<f64, DeviceError> {
    finite(i_dc, "oscillator_power_grad")?;
    Ok(p.consts::<f64>().power_grad(i_dc))
}

/// Spin-diode voltage (µV) rectified by a resonator at `f_res` from a signal
/// of power `p_rf` µW at `f_rf` GHz. Only the anti-symmetric lineshape is kept.
pub fn rectified_voltage(p_rf: f64, f_rf: f64, f_res: f64, p: &DeviceParams) -> Result<f64, DeviceError> {
    finite(p_rf, "rectified_voltage")?;
    if p_rf < 0.0 {
        return Err(DeviceError::NonPositive { what: "p_rf", value: p_rf });
    }
    Ok(p_rf * synaptic_weight_freq(f_rf, f_res, p)?)
}

/// Synaptic weight (µV/µW) of a resonator at `f_res` for a carrier at `f_rf`.
pub fn synaptic_weight_freq(f_rf: f64, f_res: f64, p: &DeviceParams) -> Result<f64, DeviceError> {
    positive(f_rf, "f_rf")?;
    positive(f_res, "f_res")?;
    let detune = f_rf - f_res;
    let alpha2 = p.alpha * p.alpha;
    Ok(f_rf * detune / (alpha2 * f_res * f_res + detune * detune) * p.amp_a)
}

/// Synaptic weight as a function of the relative detuning `zeta`, where
/// `f_res = f_rf * (1 - zeta)`. It does not depend on the carrier frequency.
pub fn synaptic_weight_zeta(zeta: f64, p: &DeviceParams) -> Result<f64, DeviceError> {
    finite(zeta, "synaptic_weight_zeta")?;
    Ok(p.consts::<f64>().weight(zeta))
}

pub fn synaptic_weight_zeta_grad(zeta: f64, p: &DeviceParams) -> Result<f64, DeviceError> {
    finite(zeta, "synaptic_weight_zeta_grad")?;
    Ok(p.consts::<f64>().weight_grad(zeta))
}

pub fn zeta_to_fres(zeta: f64, f_rf: f64) -> Result<f64, DeviceError> {
    finite(zeta, "zeta_to_fres")?;
    positive(f_rf, "f_rf")?;
    if zeta >= 1.0 {
        return Err(DeviceError::ZetaOutOfRange(zeta));
    }
    Ok(f_rf * (1.0 - zeta))
}

pub fn fres_to_zeta(f_res: f64, f_rf: f64) -> Result<f64, DeviceError> {
    positive(f_res, "f_res")?;
    positive(f_rf, "f_rf")?;
    Ok(1.0 - f_res / f_rf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d() -> DeviceParams {
        DeviceParams::default()
    }

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn defaults_validate() {
        d().validate().unwrap();
        let bad = DeviceParams { i_th: 9.0, ..d() };
        assert!(bad.validate().is_err());
        let bad = DeviceParams { alpha: 0.0, ..d() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn oscillator_power_points() {
        let p = d();
        assert_eq!(oscillator_power(2.0, &p).unwrap(), 0.0);
        assert!((oscillator_power(4.0, &p).unwrap() - 0.25).abs() < 1e-15);
        assert!((oscillator_power(8.0, &p).unwrap() - 0.5).abs() < 1e-15);
        assert!((oscillator_power(12.0, &p).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(oscillator_power(-3.0, &p).unwrap(), 0.0);
        assert!(matches!(oscillator_power(f64::NAN, &p), Err(DeviceError::NonFinite(_))));
        assert!(oscillator_power(f64::INFINITY, &p).is_err());
    }

    #[test]
    fn oscillator_grad_points() {
        let p = d();
        assert_eq!(oscillator_power_grad(1.0, &p).unwrap(), 0.0);
        assert_eq!(oscillator_power_grad(10.0, &p).unwrap(), 0.0);
        let g = oscillator_power_grad(4.0, &p).unwrap();
        assert!((g - 0.09375).abs() < 1e-15);
        let fd = central(|i| oscillator_power(i, &p).unwrap(), 4.0, 1e-6);
        assert!(((fd - g) / g).abs() <= 1e-6, "fd {fd} vs {g}");
    }

    #[test]
    fn rectified_voltage_points() {
        let p = d();
        assert_eq!(rectified_voltage(1.0, 1.0, 1.0, &p).unwrap(), 0.0);
        assert_eq!(rectified_voltage(0.0, 1.3, 1.1, &p).unwrap(), 0.0);
        let v = rectified_voltage(1.0, 1.01, 1.0, &p).unwrap();
        assert!((v - 50.5).abs() < 1e-9, "{v}");
        assert!(rectified_voltage(1.0, 1.0, 0.0, &p).is_err());
        assert!(rectified_voltage(1.0, 1.0, -1.0, &p).is_err());
        assert!(rectified_voltage(-1.0, 1.0, 1.0, &p).is_err());
    }

    #[test]
    fn weight_freq_points() {
        let p = d();
        assert_eq!(synaptic_weight_freq(1.5, 1.5, &p).unwrap(), 0.0);
        assert!((synaptic_weight_freq(1.01, 1.0, &p).unwrap() - 50.5).abs() < 1e-9);
        assert!((synaptic_weight_freq(0.99, 1.0, &p).unwrap() + 49.5).abs() < 1e-9);
    }

    #[test]
    fn weight_zeta_points() {
        let p = d();
        assert_eq!(synaptic_weight_zeta(0.0, &p).unwrap(), 0.0);
        let w = synaptic_weight_zeta(0.01, &p).unwrap();
        assert!((w - 0.01 / (1e-4 * 0.9801 + 1e-4)).abs() < 1e-9);
        assert!((w - 50.50).abs() < 5e-3);
        let w = synaptic_weight_zeta(-0.01, &p).unwrap();
        assert!((w - (-0.01 / (1e-4 * 1.0201 + 1e-4))).abs() < 1e-9);
        assert!((w + 49.50).abs() < 5e-3);
    }

    #[test]
    fn weight_zeta_matches_frequency_form_at_random_carriers() {
        use rand::{Rng, SeedableRng};
        let p = d();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for zeta in [0.01, -0.01] {
            let wz = synaptic_weight_zeta(zeta, &p).unwrap();
            for _ in 0..10 {
                let f: f64 = rng.gen_range(1.0..2.0);
                let wf = synaptic_weight_freq(f, f * (1.0 - zeta), &p).unwrap();
                assert!((wf - wz).abs() <= 1e-10 * wz.abs());
            }
        }
    }

    #[test]
    fn weight_zeta_grad_points() {
        let p = d();
        let f = |z: f64| synaptic_weight_zeta(z, &p).unwrap();
        let g0 = synaptic_weight_zeta_grad(0.0, &p).unwrap();
        assert!((g0 - 10000.0).abs() < 1e-9);
        assert!(((central(f, 0.0, 1e-6) - g0) / g0).abs() < 1e-6);

        let zs = p.alpha / (1.0 + p.alpha * p.alpha).sqrt();
        let gs = synaptic_weight_zeta_grad(zs, &p).unwrap();
        assert!(gs.abs() < 1e-8, "{gs}");
        // weight is maximal there
        assert!(f(zs) > f(zs - 1e-4) && f(zs) > f(zs + 1e-4));

        let g1 = synaptic_weight_zeta_grad(1.0, &p).unwrap();
        assert!((g1 + 1.0).abs() < 1e-12);
        assert!(((central(f, 1.0, 1e-6) - g1) / g1).abs() < 1e-6);
    }

    #[test]
    fn zeta_fres_maps() {
        assert_eq!(zeta_to_fres(0.0, 1.5).unwrap(), 1.5);
        assert!((zeta_to_fres(0.1, 2.0).unwrap() - 1.8).abs() < 1e-15);
        assert!((fres_to_zeta(1.8, 2.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(zeta_to_fres(1.0, 2.0), Err(DeviceError::ZetaOutOfRange(_))));
        assert!(zeta_to_fres(1.5, 2.0).is_err());
        assert!(fres_to_zeta(0.0, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn rectified_voltage_is_linear_in_power(
            pw in 0.0f64..10.0, a in 0.0f64..10.0, f in 0.5f64..3.0, g in 0.5f64..3.0,
        ) {
            let p = d();
            let lhs = rectified_voltage(a * pw, f, g, &p).unwrap();
            let rhs = a * rectified_voltage(pw, f, g, &p).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300));
        }

        #[test]
        fn voltage_sign_follows_detuning(pw in 0.01f64..10.0, f in 0.5f64..3.0, g in 0.5f64..3.0) {
            let v = rectified_voltage(pw, f, g, &d()).unwrap();
            prop_assert_eq!(v.signum() == (f - g).signum() || v == 0.0, true);
        }

        #[test]
        fn weight_is_frequency_independent(zeta in -0.9f64..0.9, f in 1.0f64..2.0) {
            let p = d();
            let wz = synaptic_weight_zeta(zeta, &p).unwrap();
            let wf = synaptic_weight_freq(f, zeta_to_fres(zeta, f).unwrap(), &p).unwrap();
            prop_assert!((wf - wz).abs() <= 1e-10 * wz.abs());
        }

        #[test]
        fn weight_sign_is_zeta_sign(zeta in -50.0f64..50.0) {
            let w = synaptic_weight_zeta(zeta, &d()).unwrap();
            if zeta == 0.0 {
                prop_assert_eq!(w, 0.0);
            } else {
                prop_assert_eq!(w.signum(), zeta.signum());
            }
        }

        #[test]
        fn zeta_round_trip(zeta in -5.0f64..0.99, f in 0.1f64..10.0) {
            let back = fres_to_zeta(zeta_to_fres(zeta, f).unwrap(), f).unwrap();
            prop_assert!((back - zeta).abs() <= 1e-14 * zeta.abs().max(1.0));
        }

        #[test]
        fn oscillator_shape(i in -10.0f64..20.0, di in 0.0f64..5.0) {
            let p = d();
            let a = oscillator_power(i, &p).unwrap();
            let b = oscillator_power(i + di, &p).unwrap();
            prop_assert!(b >= a);
            prop_assert!((0.0..1.0).contains(&a));
            prop_assert_eq!(a == 0.0, i <= p.i_th);
        }

        #[test]
        fn oscillator_concave_above_threshold(i in 2.01f64..7.99) {
            let p = d();
            let h = 1e-3;
            let f = |x: f64| oscillator_power(x, &p).unwrap();
            prop_assert!(f(i + h) - 2.0 * f(i) + f(i - h) <= 1e-15);
        }

        #[test]
        fn analytic_grads_match_central_differences(i in 2.001f64..7.999, zeta in -2.0f64..2.0) {
            let p = d();
            let h = 1e-6;
            let g = oscillator_power_grad(i, &p).unwrap();
            let fd = central(|x| oscillator_power(x, &p).unwrap(), i, h);
            prop_assert!((g - fd).abs() <= 1e-5 * g.abs().max(fd.abs()));
            let g = synaptic_weight_zeta_grad(zeta, &p).unwrap();
            let fd = central(|x| synaptic_weight_zeta(x, &p).unwrap(), zeta, h);
            prop_assert!((g - fd).abs() <= 1e-5 * g.abs().max(fd.abs()).max(1e-3));
        }
    }
}
