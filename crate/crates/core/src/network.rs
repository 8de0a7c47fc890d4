//! Network topology, initialization and the per-sample forward/backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{FloatWidth, Parameter, Scalar, Tape, Tensor, Var};
use crate::device::DeviceParams;
use crate::hardware::allocate_frequencies;
use crate::layers::{
    output_shape, ModelError, OscillatorActivation, RfConv2d, RfDense, SynapseKind, ZetaFilter,
};
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool,
    Oscillator,
    Dense {
        outputs: usize,
    },
}

fn one() -> usize {
    1
}

/// Initial distribution of the trainable detunings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ZetaInit {
    /// `zeta ~ U(-half_width, half_width)`.
    Uniform { half_width: f64 },
    /// Sample `f_res ~ U(f_min, f_max)` GHz and convert against the carrier
    /// of the input line the coefficient sees at the first filter position,
    /// with carriers spread evenly over the same band.
    Resonance { f_min: f64, f_max: f64 },
}

impl Default for ZetaInit {
    fn default() -> Self {
        ZetaInit::Uniform { half_width: 0.002 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// `[H, W, C]` of the input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub synapse: SynapseKind,
    pub zeta_init: ZetaInit,
    pub device: DeviceParams,
    /// µW emitted by a fully oscillating neuron.
    pub emit_scale: f64,
    pub seed: u64,
    pub float_width: FloatWidth,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::paper()
    }
}

impl NetworkConfig {
    /// Two conv blocks with `f1` and `f2` filters of 5x5, then a 10-way
    /// fully-connected layer.
    pub fn two_block(f1: usize, f2: usize) -> Self {
        let conv = |filters| LayerSpec::Conv { filters, kernel: 5, stride: 1, padding: 1 };
        NetworkConfig {
            input: [28, 28, 1],
            layers: vec![
                conv(f1),
                LayerSpec::MaxPool,
                LayerSpec::Oscillator,
                conv(f2),
                LayerSpec::MaxPool,
                LayerSpec::Oscillator,
                LayerSpec::Dense { outputs: 10 },
            ],
            synapse: SynapseKind::Spintronic,
            zeta_init: ZetaInit::default(),
            device: DeviceParams::default(),
            emit_scale: 1.0,
            seed: 0,
            float_width: FloatWidth::F32,
        }
    }

    /// 32 then 64 filters.
    pub fn paper() -> Self {
        Self::two_block(32, 64)
    }

    /// 8 then 16 filters.
    pub fn desk() -> Self {
        Self::two_block(8, 16)
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs }) => *outputs,
            _ => 0,
        }
    }

    /// Shape after every layer, starting with the input.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let mut shapes = vec![self.input.to_vec()];
        for (idx, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().expect("non-empty").clone();
            let bad = |msg: String| ModelError::Config(format!("layer {idx}: {msg}"));
            let next = match *layer {
                LayerSpec::Conv { filters, kernel, stride, padding } => {
                    if cur.len() != 3 {
                        return Err(bad(format!("conv needs [H, W, C] input, got {cur:?}")));
                    }
                    if filters == 0 {
                        return Err(bad("zero filters".into()));
                    }
                    let (h, w) = output_shape(cur[0], cur[1], kernel, stride, padding)
                        .map_err(|e| bad(e.to_string()))?;
                    vec![h, w, filters]
                }
                LayerSpec::MaxPool => {
                    if cur.len() != 3 || cur[0] < 2 || cur[1] < 2 {
                        return Err(bad(format!("max-pool needs [H >= 2, W >= 2, C], got {cur:?}")));
                    }
                    vec![cur[0] / 2, cur[1] / 2, cur[2]]
                }
                LayerSpec::Oscillator => cur,
                LayerSpec::Dense { outputs } => {
                    if outputs == 0 {
                        return Err(bad("zero outputs".into()));
                    }
                    vec![outputs]
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.device.validate()?;
        if self.input.contains(&0) {
            return Err(ModelError::Config(format!("bad input shape {:?}", self.input)));
        }
        if !(self.emit_scale > 0.0 && self.emit_scale.is_finite()) {
            return Err(ModelError::Config(format!("emit_scale = {} must be > 0", self.emit_scale)));
        }
        match self.zeta_init {
            ZetaInit::Uniform { half_width } if !(half_width > 0.0 && half_width < 1.0) => {
                return Err(ModelError::Config(format!("zeta half_width {half_width} must be in (0, 1)")));
            }
            ZetaInit::Resonance { f_min, f_max } if !(0.0 < f_min && f_min < f_max) => {
                return Err(ModelError::Config(format!("bad resonance band [{f_min}, {f_max}]")));
            }
            _ => {}
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(ModelError::Config("last layer must be dense".into()));
        }
        self.shape_chain()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S> {
    Conv(RfConv2d<S>),
    MaxPool,
    Oscillator(OscillatorActivation<S>),
    Dense(RfDense<S>),
}

/// Parameters of a network plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    config: NetworkConfig,
    layers: Vec<Layer<S>>,
    calibrated: bool,
}

/// Output of [`Network::record`].
#[derive(Debug, Clone)]
pub struct Recorded {
    pub logits: Var,
    /// Bound parameters, in [`Network::parameters`] order.
    pub params: Vec<Var>,
    /// Output of every layer.
    pub activations: Vec<Var>,
}

/// Loss, logits and parameter gradients of one sample.
#[derive(Debug, Clone)]
pub struct SampleGrad<S> {
    pub loss: S,
    pub logits: Tensor<S>,
    pub grads: Vec<Tensor<S>>,
}

/// Trainable classifier interface used by evaluation.
pub trait Classifier<S> {
    fn logits(&self, image: &Tensor<S>) -> Result<Tensor<S>, ModelError>;
}

fn rms<S: Scalar>(t: &Tensor<S>) -> f64 {
    let ss: f64 = t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
    (ss / t.len() as f64).sqrt()
}

/// Spintronic layers keep their coefficients and get a gain of
/// `1 / (sqrt(fan_in) * rms(W))`. Conventional layers fold that scale into
/// the weights instead, `U(-1, 1) / sqrt(fan_in)` with unit gain, the usual
/// software initialization.
fn init_scale<S: Scalar>(
    coeff: &mut Parameter<S>,
    gain: &mut Parameter<S>,
    weights: &Tensor<S>,
    fan_in: usize,
    synapse: SynapseKind,
) {
    let fan = (fan_in as f64).sqrt();
    match synapse {
        SynapseKind::Spintronic => {
            let r = rms(weights);
            let g = if r > 0.0 { 1.0 / (fan * r) } else { 1.0 };
            gain.value = Tensor::scalar(S::from_f64_lossy(g));
        }
        SynapseKind::Conventional => {
            let s = S::from_f64_lossy(1.0 / fan);
            coeff.value = coeff.value.map(|v| v * s);
            gain.value = Tensor::scalar(S::one());
        }
    }
}

impl<S: Scalar> Network<S> {
    pub fn new(config: &NetworkConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut config = config.clone();
        config.float_width = S::WIDTH;
        let shapes = config.shape_chain()?;
        let mut rng = rng_for(config.seed, Stream::Init);
        let mut layers = Vec::with_capacity(config.layers.len());
        for (idx, spec) in config.layers.iter().enumerate() {
            let in_shape = &shapes[idx];
            let layer = match *spec {
                LayerSpec::Conv { filters, kernel, stride, padding } => {
                    let c = in_shape[2];
                    let n = kernel * kernel * c * filters;
                    let line = |coef: usize| {
                        // coefficient index -> (i, j, c) -> input line at the first placement
                        let rest = coef / filters;
                        let (ij, ch) = (rest / c, rest % c);
                        let (i, j) = (ij / kernel, ij % kernel);
                        let (y, x) = (i.min(in_shape[0] - 1), j.min(in_shape[1] - 1));
                        (y * in_shape[1] + x) * c + ch
                    };
                    let coeff = sample_coeffs(&config, &mut rng, n, in_shape.iter().product(), line)?;
                    let zeta = Parameter::new(Tensor::new(vec![kernel, kernel, c, filters], coeff)?);
                    let mut layer = RfConv2d {
                        filter: ZetaFilter {
                            zeta,
                            bias: Parameter::new(Tensor::zeros(&[filters])),
                            gain: Parameter::new(Tensor::scalar(S::one())),
                        },
                        stride,
                        padding,
                        device: config.device,
                        synapse: config.synapse,
                    };
                    let w = layer.weights();
                    init_scale(&mut layer.filter.zeta, &mut layer.filter.gain, &w, kernel * kernel * c, config.synapse);
                    Layer::Conv(layer)
                }
                LayerSpec::MaxPool => Layer::MaxPool,
                LayerSpec::Oscillator => Layer::Oscillator(OscillatorActivation {
                    i_gain: Parameter::new(Tensor::scalar(S::one())),
                    device: config.device,
                    emit_scale: config.emit_scale,
                    synapse: config.synapse,
                }),
                LayerSpec::Dense { outputs } => {
                    let n_in: usize = in_shape.iter().product();
                    let coeff = sample_coeffs(&config, &mut rng, n_in * outputs, n_in, |coef| coef / outputs)?;
                    let mut layer = RfDense {
                        zeta: Parameter::new(Tensor::new(vec![n_in, outputs], coeff)?),
                        bias: Parameter::new(Tensor::zeros(&[outputs])),
                        gain: Parameter::new(Tensor::scalar(S::one())),
                        device: config.device,
                        synapse: config.synapse,
                    };
                    let w = layer.weights();
                    init_scale(&mut layer.zeta, &mut layer.gain, &w, n_in, config.synapse);
                    Layer::Dense(layer)
                }
            };
            layers.push(layer);
        }
        Ok(Network { config, layers, calibrated: false })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    pub fn set_calibrated(&mut self, yes: bool) {
        self.calibrated = yes;
    }

    /// Parameter names in a fixed order, e.g. `"0.conv.zeta"`.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(_) => {
                    for p in ["zeta", "bias", "gain"] {
                        names.push(format!("{idx}.conv.{p}"));
                    }
                }
                Layer::Dense(_) => {
                    for p in ["zeta", "bias", "gain"] {
                        names.push(format!("{idx}.dense.{p}"));
                    }
                }
                Layer::Oscillator(_) => names.push(format!("{idx}.osc.i_gain")),
                Layer::MaxPool => {}
            }
        }
        names
    }

    pub fn parameters(&self) -> Vec<&Parameter<S>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(l) => out.extend([&l.filter.zeta, &l.filter.bias, &l.filter.gain]),
                Layer::Dense(l) => out.extend([&l.zeta, &l.bias, &l.gain]),
                Layer::Oscillator(l) => out.push(&l.i_gain),
                Layer::MaxPool => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(l) => {
                    let f = &mut l.filter;
                    out.extend([&mut f.zeta, &mut f.bias, &mut f.gain]);
                }
                Layer::Dense(l) => out.extend([&mut l.zeta, &mut l.bias, &mut l.gain]),
                Layer::Oscillator(l) => out.push(&mut l.i_gain),
                Layer::MaxPool => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Record the forward pass of one image. With `trainable` the parameters
    /// are tape leaves; otherwise constants and no derivatives are kept.
    pub fn record(
        &self,
        tape: &mut Tape<S>,
        image: &Tensor<S>,
        trainable: bool,
        stop_before: Option<usize>,
    ) -> Result<Recorded, ModelError> {
        if image.shape() != self.config.input {
            return Err(ModelError::Config(format!(
                "image shape {:?} does not match network input {:?}",
                image.shape(),
                self.config.input
            )));
        }
        let mut x = tape.constant(image.clone());
        let mut params = Vec::new();
        let mut activations = Vec::with_capacity(self.layers.len());
        let end = stop_before.unwrap_or(self.layers.len()).min(self.layers.len());
        for layer in &self.layers[..end] {
            x = match layer {
                Layer::Conv(l) => {
                    let b = l.bind(tape, trainable);
                    params.extend([b.coeff, b.bias, b.gain]);
                    l.record(tape, x, b)?
                }
                Layer::Dense(l) => {
                    let b = l.bind(tape, trainable);
                    params.extend([b.coeff, b.bias, b.gain]);
                    l.record(tape, x, b)?
                }
                Layer::Oscillator(l) => {
                    let g = l.bind(tape, trainable);
                    params.push(g);
                    l.record(tape, x, g)?
                }
                Layer::MaxPool => tape.maxpool2x2(x)?,
            };
            activations.push(x);
        }
        Ok(Recorded { logits: x, params, activations })
    }

    pub fn loss(&self, image: &Tensor<S>, label: usize) -> Result<S, ModelError> {
        let logits = self.logits(image)?;
        crate::layers::softmax_cross_entropy(&logits, label)
    }

    /// Loss and parameter gradients for one labelled image.
    pub fn sample_grad(&self, image: &Tensor<S>, label: usize) -> Result<SampleGrad<S>, ModelError> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, image, true, None)?;
        let loss = tape.softmax_cross_entropy(rec.logits, label)?;
        let mut g = tape.backward(loss)?;
        let grads = rec
            .params
            .iter()
            .zip(self.parameters())
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok(SampleGrad {
            loss: tape.value(loss).data()[0],
            logits: tape.value(rec.logits).clone(),
            grads,
        })
    }

    /// Set each oscillator layer's voltage-to-current gain so the median
    /// positive drive current over `images` sits midway between threshold
    /// and clamp. Layers are calibrated in order, each seeing the already
    /// calibrated layers before it.
    pub fn calibrate(&mut self, images: &[Tensor<S>]) -> Result<(), ModelError> {
        if self.config.synapse == SynapseKind::Conventional {
            self.calibrated = true;
            return Ok(());
        }
        let target = 0.5 * (self.config.device.i_th + self.config.device.i_max);
        for idx in 0..self.layers.len() {
            if !matches!(self.layers[idx], Layer::Oscillator(_)) {
                continue;
            }
            let mut positive = Vec::new();
            for img in images {
                let mut tape = Tape::new();
                let rec = self.record(&mut tape, img, false, Some(idx))?;
                let u = tape.value(rec.logits);
                positive.extend(u.data().iter().map(|v| v.as_f64()).filter(|&v| v > 0.0));
            }
            if positive.is_empty() {
                continue;
            }
            positive.sort_by(|a, b| a.total_cmp(b));
            let median = positive[positive.len() / 2];
            if let Layer::Oscillator(l) = &mut self.layers[idx] {
                l.i_gain.value = Tensor::scalar(S::from_f64_lossy(target / median));
            }
        }
        self.calibrated = true;
        Ok(())
    }

    /// Convolution layers with their input shapes.
    pub fn conv_layers(&self) -> Vec<(usize, &RfConv2d<S>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Conv(c) => Some((i, c)),
                _ => None,
            })
            .collect()
    }
}

impl<S: Scalar> Classifier<S> for Network<S> {
    fn logits(&self, image: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, image, false, None)?;
        Ok(tape.value(rec.logits).clone())
    }
}

fn sample_coeffs<S: Scalar>(
    config: &NetworkConfig,
    rng: &mut impl Rng,
    n: usize,
    lines: usize,
    line_of: impl Fn(usize) -> usize,
) -> Result<Vec<S>, ModelError> {
    let out = match (config.synapse, config.zeta_init) {
        (SynapseKind::Conventional, _) => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        (SynapseKind::Spintronic, ZetaInit::Uniform { half_width }) => {
            (0..n).map(|_| rng.gen_range(-half_width..half_width)).collect()
        }
        (SynapseKind::Spintronic, ZetaInit::Resonance { f_min, f_max }) => {
            let plan = allocate_frequencies(lines, f_min, f_max, None)
                .map_err(|e| ModelError::Config(e.to_string()))?;
            (0..n)
                .map(|coef| {
                    let f_res: f64 = rng.gen_range(f_min..f_max);
                    1.0 - f_res / plan.carriers[line_of(coef)]
                })
                .collect()
        }
    };
    Ok(out.into_iter().map(S::from_f64_lossy).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_shape_chain() {
        let shapes = NetworkConfig::paper().shape_chain().unwrap();
        let expect: Vec<Vec<usize>> = vec![
            vec![28, 28, 1],
            vec![26, 26, 32],
            vec![13, 13, 32],
            vec![13, 13, 32],
            vec![11, 11, 64],
            vec![5, 5, 64],
            vec![5, 5, 64],
            vec![10],
        ];
        assert_eq!(shapes, expect);
        assert_eq!(5 * 5 * 64, 1600);
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let cfg = NetworkConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: NetworkConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let err = serde_json::from_str::<NetworkConfig>(r#"{"seed": 3, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let partial: NetworkConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.layers, NetworkConfig::paper().layers);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = NetworkConfig::desk();
        cfg.layers.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.input = [3, 3, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.emit_scale = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_image_gives_uniform_logits() {
        let net = Network::<f64>::new(&NetworkConfig::desk()).unwrap();
        let logits = net.logits(&Tensor::zeros(&[28, 28, 1])).unwrap();
        assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
        let loss = net.loss(&Tensor::zeros(&[28, 28, 1]), 3).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::<f32>::new(&NetworkConfig::desk()).unwrap();
        let b = Network::<f32>::new(&NetworkConfig::desk()).unwrap();
        assert_eq!(a, b);
        let mut cfg = NetworkConfig::desk();
        cfg.seed = 1;
        let c = Network::<f32>::new(&cfg).unwrap();
        assert_ne!(a, c);
        for p in a.parameters() {
            assert!(p.value.all_finite());
        }
    }

    #[test]
    fn resonance_init_stays_in_band() {
        let mut cfg = NetworkConfig::desk();
        cfg.zeta_init = ZetaInit::Resonance { f_min: 1.0, f_max: 2.0 };
        let net = Network::<f64>::new(&cfg).unwrap();
        for (_, conv) in net.conv_layers() {
            for &z in conv.filter.zeta.value.data() {
                assert!((-1.0..=0.5).contains(&z), "{z}");
            }
        }
    }

    #[test]
    fn names_match_parameters() {
        let net = Network::<f32>::new(&NetworkConfig::desk()).unwrap();
        let names = net.parameter_names();
        assert_eq!(names.len(), net.parameters().len());
        assert_eq!(names[0], "0.conv.zeta");
        assert_eq!(names.last().unwrap(), "6.dense.gain");
    }
}
